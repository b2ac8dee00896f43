//! Reference architectures with named, enumerable layers.
//!
//! A [`Model`] is a flat list of [`LayerSpec`]s applied in order. Dense and
//! conv layers carry parameters; everything else is parameter-free. The
//! "top" layer is the last parameterized one (it produces the logits).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Padding, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.01;

pub const CHECKPOINT_FORMAT: &str = "saliency-sanity-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ArchitectureId {
    /// `S(x) = x W + b`, no nonlinearity.
    Linear { inputs: usize, classes: usize },
    /// Dense ReLU stack on 28x28 inputs.
    Mlp { scale: Scale },
    /// conv-pool-conv-pool-fc-fc on 28x28 inputs.
    Cnn { scale: Scale },
    /// One 3x3 conv, ReLU, then a sum over the whole map: `l(x) = Σ σ(w * x)`.
    ConvSumPool1 { side: usize },
}

impl ArchitectureId {
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ArchitectureId::Linear { inputs, .. } => vec![*inputs],
            ArchitectureId::Mlp { .. } | ArchitectureId::Cnn { .. } => vec![1, 28, 28],
            ArchitectureId::ConvSumPool1 { side } => vec![1, *side, *side],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchitectureId::Linear { classes, .. } => *classes,
            ArchitectureId::Mlp { .. } | ArchitectureId::Cnn { .. } => 10,
            ArchitectureId::ConvSumPool1 { .. } => 1,
        }
    }

    /// Parses `linear`, `mlp`, `cnn` and `conv1`.
    pub fn parse(name: &str, scale: Scale) -> Result<Self> {
        Ok(match name {
            "linear" => ArchitectureId::Linear {
                inputs: 784,
                classes: 10,
            },
            "mlp" => ArchitectureId::Mlp { scale },
            "cnn" => ArchitectureId::Cnn { scale },
            "conv1" => ArchitectureId::ConvSumPool1 { side: 28 },
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture `{other}` (expected linear, mlp, cnn or conv1)"
                )))
            }
        })
    }

    fn layer_plan(&self) -> Vec<(String, LayerKind)> {
        let dense = |name: &str, i: usize, o: usize| {
            (name.to_string(), LayerKind::Dense { inputs: i, outputs: o })
        };
        let conv = |name: &str, i: usize, o: usize, k: usize| {
            (
                name.to_string(),
                LayerKind::Conv {
                    in_channels: i,
                    out_channels: o,
                    kernel: k,
                    padding: Padding::Same,
                },
            )
        };
        let simple = |name: &str, kind: LayerKind| (name.to_string(), kind);
        match self {
            ArchitectureId::Linear { inputs, classes } => vec![dense("linear", *inputs, *classes)],
            ArchitectureId::Mlp { scale } => {
                let widths: &[usize] = match scale {
                    Scale::Desk => &[784, 256, 128, 64, 10],
                    Scale::Full => &[784, 2500, 1500, 500, 10],
                };
                let mut plan = vec![simple("flatten", LayerKind::Flatten)];
                let last = widths.len() - 2;
                for (i, pair) in widths.windows(2).enumerate() {
                    plan.push(dense(&format!("fc{}", i + 1), pair[0], pair[1]));
                    if i < last {
                        plan.push(simple(&format!("relu{}", i + 1), LayerKind::Relu));
                    }
                }
                plan
            }
            ArchitectureId::Cnn { scale } => {
                let (c1, c2, hidden) = match scale {
                    Scale::Desk => (8, 16, 128),
                    Scale::Full => (32, 64, 1024),
                };
                vec![
                    conv("conv1", 1, c1, 5),
                    simple("relu1", LayerKind::Relu),
                    simple("pool1", LayerKind::MaxPool),
                    conv("conv2", c1, c2, 5),
                    simple("relu2", LayerKind::Relu),
                    simple("pool2", LayerKind::MaxPool),
                    simple("flatten", LayerKind::Flatten),
                    dense("fc1", c2 * 7 * 7, hidden),
                    simple("relu3", LayerKind::Relu),
                    dense("fc2", hidden, 10),
                ]
            }
            ArchitectureId::ConvSumPool1 { .. } => vec![
                conv("conv1", 1, 1, 3),
                simple("relu1", LayerKind::Relu),
                simple("sumpool", LayerKind::SumPool),
            ],
        }
    }

    fn gradcam_tap(&self) -> Option<String> {
        match self {
            ArchitectureId::Cnn { .. } => Some("conv2".into()),
            ArchitectureId::ConvSumPool1 { .. } => Some("conv1".into()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Weights `[inputs, outputs]`, biases `[outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Weights `[out, in, k, k]`, biases `[out]`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    MaxPool,
    Relu,
    Flatten,
    SumPool,
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub weights: Option<Tensor>,
    pub biases: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: ArchitectureId,
    layers: Vec<LayerSpec>,
    num_classes: usize,
    input_shape: Vec<usize>,
    gradcam_tap: Option<String>,
    seed: u64,
}

/// Node ids of one model application recorded on a tape.
#[derive(Debug, Clone)]
pub struct Graph {
    pub input: NodeId,
    /// `[batch, classes]` pre-softmax scores.
    pub logits: NodeId,
    /// Post-ReLU activations of the GradCAM layer, `[batch, k, h, w]`.
    pub tap: Option<NodeId>,
    /// `(layer index, weights, biases)` for each parameterized layer.
    pub params: Vec<(usize, NodeId, NodeId)>,
}

/// Logits (and tapped feature maps) for a single input.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub tap: Option<Tensor>,
}

impl Model {
    /// Builds `arch` with truncated-normal weights and zero biases.
    pub fn build(arch: ArchitectureId, seed: u64) -> Model {
        let layers = arch
            .layer_plan()
            .into_iter()
            .map(|(name, kind)| {
                let (weights, biases) = match kind.param_shapes() {
                    Some((ws, bs)) => (
                        Some(draw_truncated(&ws, seed, &format!("init/{name}"), 0)),
                        Some(Tensor::zeros(&bs)),
                    ),
                    None => (None, None),
                };
                LayerSpec {
                    name,
                    kind,
                    weights,
                    biases,
                }
            })
            .collect();
        Model {
            num_classes: arch.num_classes(),
            input_shape: arch.input_shape(),
            gradcam_tap: arch.gradcam_tap(),
            arch,
            layers,
            seed,
        }
    }

    /// A linear model `S(x) = w · x` with one output and zero bias.
    pub fn linear(weights: &[f64]) -> Result<Model> {
        let mut m = Model::build(
            ArchitectureId::Linear {
                inputs: weights.len(),
                classes: 1,
            },
            0,
        );
        m.set_parameters("linear", Tensor::new(vec![weights.len(), 1], weights.to_vec())?, None)?;
        Ok(m)
    }

    /// The conv-sum-pool model for a 3x3 filter given in convolution
    /// convention: `w[k+1][l+1]` multiplies `x[i-k][j-l]` in `(w * x)[i][j]`.
    pub fn conv_sum_pool(side: usize, w: [[f64; 3]; 3]) -> Result<Model> {
        let mut m = Model::build(ArchitectureId::ConvSumPool1 { side }, 0);
        // The engine correlates, so store the flipped filter.
        let mut flipped = Vec::with_capacity(9);
        for a in 0..3 {
            for b in 0..3 {
                flipped.push(w[2 - a][2 - b]);
            }
        }
        m.set_parameters("conv1", Tensor::new(vec![1, 1, 3, 3], flipped)?, None)?;
        Ok(m)
    }

    pub fn arch(&self) -> &ArchitectureId {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn gradcam_tap(&self) -> Option<&str> {
        self.gradcam_tap.as_deref()
    }

    pub fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Relu)
    }

    /// Names of parameterized layers in construction (bottom-up) order.
    pub fn parameterized_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_parameterized())
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    /// Replaces a parameterized layer's weights (and optionally biases).
    pub fn set_parameters(&mut self, name: &str, weights: Tensor, biases: Option<Tensor>) -> Result<()> {
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        let (ws, bs) = layer
            .kind
            .param_shapes()
            .ok_or_else(|| Error::Config(format!("layer `{name}` has no parameters")))?;
        if weights.shape() != ws.as_slice() {
            return Err(Error::shape("set_parameters", format!("{name}: weights {:?}, expected {ws:?}", weights.shape())));
        }
        if let Some(b) = &biases {
            if b.shape() != bs.as_slice() {
                return Err(Error::shape("set_parameters", format!("{name}: biases {:?}, expected {bs:?}", b.shape())));
            }
        }
        layer.weights = Some(weights);
        if let Some(b) = biases {
            layer.biases = Some(b);
        }
        Ok(())
    }

    /// Copy with the named layers' weights and biases redrawn from the
    /// truncated-normal initializer. Each layer's draw depends only on
    /// `(seed, layer name)`, so randomizations compose.
    pub fn randomize_layers<S: AsRef<str>>(&self, names: &[S], seed: u64) -> Result<Model> {
        let mut out = self.clone();
        for name in names {
            let name = name.as_ref();
            let layer = out
                .layers
                .iter_mut()
                .find(|l| l.name == name)
                .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
            let Some((ws, bs)) = layer.kind.param_shapes() else {
                return Err(Error::Config(format!("layer `{name}` has no parameters to randomize")));
            };
            let label = format!("rand/{name}");
            layer.weights = Some(draw_truncated(&ws, seed, &label, 0));
            layer.biases = Some(draw_truncated(&bs, seed, &label, 1));
        }
        Ok(out)
    }

    /// Records the model on `tape` for a batch input node `[n, input_shape..]`.
    /// Parameters become differentiable leaves only when `trainable`.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, input: NodeId, trainable: bool) -> Result<Graph> {
        let in_shape = tape.value(input).shape();
        if in_shape.len() != self.input_shape.len() + 1 || in_shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "model input",
                format!("got {in_shape:?}, expected [batch, {:?}]", self.input_shape),
            ));
        }
        let batch = in_shape[0];
        let mut cur = input;
        let mut tap = None;
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Dense { inputs, .. } => {
                    if tape.value(cur).shape() != [batch, inputs] {
                        cur = tape.reshape(cur, &[batch, inputs])?;
                    }
                    let (w, b) = self.param_nodes(tape, layer, trainable);
                    params.push((i, w, b));
                    cur = tape.matmul(cur, w)?;
                    cur = tape.bias_add(cur, b)?;
                }
                LayerKind::Conv { padding, .. } => {
                    let (w, b) = self.param_nodes(tape, layer, trainable);
                    params.push((i, w, b));
                    cur = tape.conv2d(cur, w, padding)?;
                    cur = tape.bias_add(cur, b)?;
                }
                LayerKind::Relu => {
                    cur = tape.relu(cur);
                    let prev_is_tap = i > 0 && self.gradcam_tap.as_deref() == Some(self.layers[i - 1].name.as_str());
                    if prev_is_tap {
                        tap = Some(cur);
                    }
                }
                LayerKind::MaxPool => cur = tape.maxpool2(cur)?,
                LayerKind::Flatten => {
                    let inner = tape.value(cur).len() / batch;
                    cur = tape.reshape(cur, &[batch, inner])?;
                }
                LayerKind::SumPool => cur = tape.sum_pool(cur)?,
            }
        }
        Ok(Graph {
            input,
            logits: cur,
            tap,
            params,
        })
    }

    fn param_nodes<'a>(&'a self, tape: &mut Tape<'a>, layer: &'a LayerSpec, trainable: bool) -> (NodeId, NodeId) {
        let w = layer.weights.as_ref().expect("parameterized layers carry weights");
        let b = layer.biases.as_ref().expect("parameterized layers carry biases");
        if trainable {
            (tape.variable(w), tape.variable(b))
        } else {
            (tape.constant(w), tape.constant(b))
        }
    }

    /// Adds the batch axis to a single input.
    pub fn batch_of_one(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "model input",
                format!("got {:?}, expected {:?}", x.shape(), self.input_shape),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        x.reshape(&shape)
    }

    /// Logits and tapped feature maps for one input.
    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        let batch = self.batch_of_one(x)?;
        let mut tape = Tape::new();
        let input = tape.constant(batch);
        let graph = self.record(&mut tape, input, false)?;
        let logits = tape.value(graph.logits).reshape(&[self.num_classes])?;
        let tap = match graph.tap {
            Some(t) => {
                let v = tape.value(t);
                Some(v.reshape(&v.shape()[1..])?)
            }
            None => None,
        };
        Ok(Forward { logits, tap })
    }

    /// `[n, classes]` logits for a batch `[n, input_shape..]`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x);
        let graph = self.record(&mut tape, input, false)?;
        Ok(tape.value(graph.logits).clone())
    }

    /// Predicted class per row of a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_batch(x)?;
        Ok(logits
            .data()
            .chunks(self.num_classes)
            .map(crate::tensor::argmax)
            .collect())
    }

    /// Resolves a target class, defaulting to the argmax logit.
    pub fn resolve_class(&self, x: &Tensor, class: Option<usize>) -> Result<usize> {
        match class {
            Some(c) if c >= self.num_classes => Err(Error::ClassOutOfRange {
                class: c,
                num_classes: self.num_classes,
            }),
            Some(c) => Ok(c),
            None => Ok(self.forward(x)?.logits.argmax()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let expected = Model::build(ckpt.model.arch.clone(), 0);
        let shapes_ok = expected.layers.len() == ckpt.model.layers.len()
            && expected.layers.iter().zip(&ckpt.model.layers).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.weights.as_ref().map(Tensor::shape) == b.weights.as_ref().map(Tensor::shape)
                    && a.biases.as_ref().map(Tensor::shape) == b.biases.as_ref().map(Tensor::shape)
            });
        if !shapes_ok {
            return Err(Error::Checkpoint("layer layout does not match the architecture".into()));
        }
        Ok(ckpt.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a Model,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

fn draw_truncated(shape: &[usize], seed: u64, label: &str, index: u64) -> Tensor {
    let mut rng = rng::stream(seed, label, index);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng::truncated_normal(&mut rng, INIT_STD)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

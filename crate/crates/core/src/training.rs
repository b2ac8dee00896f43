//! Mini-batch ADAM training with L2 weight decay, label permutation for the
//! data randomization test, and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackpropMode, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Coefficient `λ` of the `λ/2 Σ ||W||²` penalty on weights (not biases).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            iterations: 3000,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("ADAM betas must be < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Cross-entropy plus weight penalty on the mini-batch.
    pub loss: f64,
    /// Mini-batch accuracy before the update.
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// First/second moment state for one parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    learning_rate: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            learning_rate: cfg.learning_rate,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// Minimizes softmax cross-entropy plus weight decay with ADAM.
/// Mini-batches come from per-epoch permutations of a seeded stream.
pub fn train(model: &Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model only {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let param_layers: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.is_parameterized())
        .map(|(i, _)| i)
        .collect();
    let mut optim: Vec<(Adam, Adam)> = param_layers
        .iter()
        .map(|&i| {
            let l = &model.layers()[i];
            (
                Adam::new(l.weights.as_ref().unwrap().len(), cfg),
                Adam::new(l.biases.as_ref().unwrap().len(), cfg),
            )
        })
        .collect();

    let batch = cfg.batch_size.min(data.len());
    let mut epoch = 0u64;
    let mut order = rng::permutation(&mut rng::stream(cfg.seed, "train/shuffle", epoch), data.len());
    let mut cursor = 0;
    let input_shape = model.input_shape().to_vec();

    for iteration in 0..cfg.iterations {
        if cursor + batch > order.len() {
            epoch += 1;
            order = rng::permutation(&mut rng::stream(cfg.seed, "train/shuffle", epoch), data.len());
            cursor = 0;
        }
        let indices = &order[cursor..cursor + batch];
        cursor += batch;
        let (x, labels) = data.batch(indices, &input_shape)?;

        let (ce, acc, grads) = {
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let graph = model.record(&mut tape, input, true)?;
            let loss = tape.cross_entropy(graph.logits, &labels)?;
            let ce = tape.value(loss).data()[0];
            let classes = model.num_classes();
            let correct = tape
                .value(graph.logits)
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| crate::tensor::argmax(row) == l)
                .count();
            let mut g = tape.backward(loss, BackpropMode::Standard)?;
            let grads: Vec<(Tensor, Tensor)> = graph
                .params
                .iter()
                .map(|&(_, w, b)| (g.take(w).expect("weight grad"), g.take(b).expect("bias grad")))
                .collect();
            (ce, correct as f64 / batch as f64, grads)
        };

        let mut penalty = 0.0;
        for ((&li, (gw, gb)), (ow, ob)) in param_layers.iter().zip(grads).zip(&mut optim) {
            let layer = &mut model.layers_mut()[li];
            let w = layer.weights.as_mut().unwrap();
            let mut gw = gw.into_data();
            if cfg.weight_decay > 0.0 {
                for (g, &p) in gw.iter_mut().zip(w.data()) {
                    *g += cfg.weight_decay * p;
                    penalty += 0.5 * cfg.weight_decay * p * p;
                }
            }
            ow.step(w.data_mut(), &gw);
            ob.step(layer.biases.as_mut().unwrap().data_mut(), gb.data());
        }
        let loss = ce + penalty;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        trace.push(TraceRow {
            iteration,
            loss,
            train_acc: acc,
        });
    }
    Ok(TrainOutcome { model, trace })
}

/// Replaces labels with a seeded uniform permutation of the label array.
pub fn permute_labels(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let perm = rng::permutation(&mut rng::stream(seed, "permute_labels", 0), data.len());
    let labels = perm.iter().map(|&i| data.labels()[i]).collect();
    data.with_labels(labels)
}

/// Fraction of items whose argmax logit equals the label.
pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let shape = model.input_shape().to_vec();
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(256) {
        let (x, labels) = data.batch(chunk, &shape)?;
        let pred = model.predict_batch(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trainable parameter count.
pub fn parameter_count(model: &Model) -> usize {
    model
        .layers()
        .iter()
        .map(|l| l.weights.as_ref().map_or(0, Tensor::len) + l.biases.as_ref().map_or(0, Tensor::len))
        .sum()
}

/// Writes the trace as `iteration,loss,train_acc` CSV.
pub fn trace_csv(trace: &[TraceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in trace {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, ShapeClass, SyntheticSpec};
    use crate::models::ArchitectureId;

    #[test]
    fn adam_single_step_decreases_square() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut theta = [1.0];
        let mut opt = Adam::new(1, &cfg);
        let grad = [2.0 * theta[0]];
        opt.step(&mut theta, &grad);
        // First bias-corrected step moves by lr * g/(|g| + eps) ≈ lr.
        assert!((theta[0] - 0.9).abs() < 1e-6);
        assert!(theta[0] * theta[0] < 1.0);
    }

    fn toy_separable() -> LabeledDataset {
        // 1-pixel "images": class 0 at 0.1..0.4, class 1 at 0.6..0.9.
        let n = 40;
        let values: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { 0.1 + 0.3 * (i as f64 / n as f64) } else { 0.6 + 0.3 * (i as f64 / n as f64) })
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        LabeledDataset::new(Tensor::new(vec![n, 1, 1], values).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn linear_model_separates_toy_data() {
        let data = toy_separable();
        let model = Model::build(ArchitectureId::Linear { inputs: 1, classes: 2 }, 0);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            iterations: 200,
            batch_size: 20,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(evaluate(&out.model, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_iterations_leaves_model_unchanged() {
        let data = toy_separable();
        let model = Model::build(ArchitectureId::Linear { inputs: 1, classes: 2 }, 0);
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthesize(&SyntheticSpec {
            per_class: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model = Model::build(ArchitectureId::Mlp { scale: crate::models::Scale::Desk }, 1);
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn permutation_preserves_label_multiset() {
        let data = synthesize(&SyntheticSpec {
            classes: vec![ShapeClass::Disk, ShapeClass::Cross, ShapeClass::Ring],
            per_class: 20,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let p = permute_labels(&data, 4).unwrap();
        assert_eq!(p.class_counts(), data.class_counts());
        assert_ne!(p.labels(), data.labels());
        assert_eq!(p.images(), data.images());
        assert_eq!(p, permute_labels(&data, 4).unwrap());
    }

    #[test]
    fn permutation_of_one_item_is_identity() {
        let data = toy_separable().select(&[3]);
        assert_eq!(permute_labels(&data, 9).unwrap(), data);
    }

    #[test]
    fn constant_predictor_scores_class_frequency() {
        // Ten balanced classes of 1-pixel inputs; a linear model with zero
        // weights and a bias favouring class 3 always predicts 3.
        let n = 50;
        let data = LabeledDataset::new(
            Tensor::new(vec![n, 1, 1], vec![0.5; n]).unwrap(),
            (0..n).map(|i| i % 10).collect(),
            10,
        )
        .unwrap();
        let mut model = Model::build(ArchitectureId::Linear { inputs: 1, classes: 10 }, 0);
        let mut bias = vec![0.0; 10];
        bias[3] = 1.0;
        model
            .set_parameters("linear", Tensor::zeros(&[1, 10]), Some(Tensor::vector(&bias).unwrap()))
            .unwrap();
        assert!((evaluate(&model, &data).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_has_header() {
        let csv = trace_csv(&[TraceRow {
            iteration: 0,
            loss: 2.5,
            train_acc: 0.25,
        }])
        .unwrap();
        assert_eq!(csv, "iteration,loss,train_acc\n0,2.5,0.25\n");
    }
}

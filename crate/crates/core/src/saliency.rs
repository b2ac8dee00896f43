//! Explanation maps `E(x)` with the same shape as the input.
//!
//! Every method differentiates a single class logit. Batched variants share
//! one tape across many inputs: the seed is the sum of each row's selected
//! logit, whose gradient w.r.t. each row is that row's own gradient.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackpropMode, Tape};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::tensor::Tensor;

/// Inputs per tape in batched evaluation.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMethod {
    Gradient,
    GradientInput,
    IntegratedGradients,
    GuidedBackprop,
    GradCam,
    GuidedGradCam,
}

impl BaseMethod {
    pub const ALL: [BaseMethod; 6] = [
        BaseMethod::Gradient,
        BaseMethod::GradientInput,
        BaseMethod::IntegratedGradients,
        BaseMethod::GuidedBackprop,
        BaseMethod::GradCam,
        BaseMethod::GuidedGradCam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseMethod::Gradient => "gradient",
            BaseMethod::GradientInput => "gradient_input",
            BaseMethod::IntegratedGradients => "integrated_gradients",
            BaseMethod::GuidedBackprop => "guided_backprop",
            BaseMethod::GradCam => "gradcam",
            BaseMethod::GuidedGradCam => "guided_gradcam",
        }
    }

    pub fn needs_conv(self) -> bool {
        matches!(self, BaseMethod::GradCam | BaseMethod::GuidedGradCam)
    }
}

impl FromStr for BaseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaseMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown saliency method `{s}`")))
    }
}

/// A saliency method, optionally wrapped in SmoothGrad or VarGrad noise
/// averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Base(BaseMethod),
    SmoothGrad(BaseMethod),
    VarGrad(BaseMethod),
}

impl Method {
    /// The eight methods compared in the randomization tests.
    pub const STANDARD: [Method; 8] = [
        Method::Base(BaseMethod::Gradient),
        Method::SmoothGrad(BaseMethod::Gradient),
        Method::VarGrad(BaseMethod::Gradient),
        Method::Base(BaseMethod::GradientInput),
        Method::Base(BaseMethod::IntegratedGradients),
        Method::Base(BaseMethod::GuidedBackprop),
        Method::Base(BaseMethod::GradCam),
        Method::Base(BaseMethod::GuidedGradCam),
    ];

    pub fn base(self) -> BaseMethod {
        match self {
            Method::Base(b) | Method::SmoothGrad(b) | Method::VarGrad(b) => b,
        }
    }

    pub fn needs_conv(self) -> bool {
        self.base().needs_conv()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Base(b) => f.write_str(b.name()),
            Method::SmoothGrad(BaseMethod::Gradient) => f.write_str("smoothgrad"),
            Method::VarGrad(BaseMethod::Gradient) => f.write_str("vargrad"),
            Method::SmoothGrad(b) => write!(f, "smoothgrad:{}", b.name()),
            Method::VarGrad(b) => write!(f, "vargrad:{}", b.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `gradient`, `smoothgrad`, `vargrad:guided_backprop`, ...
    fn from_str(s: &str) -> Result<Self> {
        let (head, base) = match s.split_once(':') {
            Some((h, b)) => (h, b.parse()?),
            None => (s, BaseMethod::Gradient),
        };
        match head {
            "smoothgrad" => Ok(Method::SmoothGrad(base)),
            "vargrad" => Ok(Method::VarGrad(base)),
            _ if s.contains(':') => Err(Error::Config(format!("unknown saliency method `{s}`"))),
            _ => Ok(Method::Base(s.parse()?)),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgVariant {
    /// `(x - x̄) ⊙ ∫ ∇S(x̄ + α(x - x̄)) dα`; attributions sum to `S(x) - S(x̄)`.
    #[default]
    Standard,
    /// Integrand additionally weighted by `α`, giving `(x - x̄) ⊙ w / 2` on a
    /// linear model.
    AlphaWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    /// `None` means the all-zero baseline.
    pub baseline: Option<Tensor>,
    pub steps: usize,
    #[serde(default)]
    pub variant: IgVariant,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            baseline: None,
            steps: 50,
            variant: IgVariant::Standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NoiseScale {
    /// `σ` in input units.
    Absolute(f64),
    /// `σ = fraction * (max(x) - min(x))`.
    RangeFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub samples: usize,
    pub noise: NoiseScale,
    pub seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            samples: 50,
            noise: NoiseScale::RangeFraction(0.15),
            seed: 0,
        }
    }
}

impl SmoothingConfig {
    pub fn sigma_for(&self, x: &Tensor) -> f64 {
        match self.noise {
            NoiseScale::Absolute(s) => s,
            NoiseScale::RangeFraction(f) => f * (x.max() - x.min()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodConfig {
    pub ig: IgConfig,
    pub smoothing: SmoothingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub method: Method,
    pub class: usize,
    pub normalized: bool,
    /// Set by [`normalize`] when the map is identically zero.
    #[serde(default)]
    pub degenerate: bool,
}

impl SaliencyMap {
    fn raw(values: Tensor, method: Method, class: usize) -> Self {
        SaliencyMap {
            values,
            method,
            class,
            normalized: false,
            degenerate: false,
        }
    }
}

/// Divides by the maximum absolute value. A zero map stays zero and is
/// flagged degenerate.
pub fn normalize(map: &SaliencyMap) -> SaliencyMap {
    let m = map.values.max_abs();
    let degenerate = m == 0.0;
    let values = if degenerate {
        map.values.clone()
    } else {
        map.values.map(|v| (v / m).clamp(-1.0, 1.0))
    };
    SaliencyMap {
        values,
        normalized: true,
        degenerate,
        ..map.clone()
    }
}

/// Elementwise absolute value of the normalized map.
pub fn abs_view(map: &SaliencyMap) -> SaliencyMap {
    let n = if map.normalized { map.clone() } else { normalize(map) };
    SaliencyMap {
        values: n.values.map(f64::abs),
        ..n
    }
}

fn check_input(model: &Model, x: &Tensor) -> Result<()> {
    if x.shape() != model.input_shape() {
        return Err(Error::shape(
            "saliency input",
            format!("got {:?}, expected {:?}", x.shape(), model.input_shape()),
        ));
    }
    Ok(())
}

fn check_conv(model: &Model, method: &str) -> Result<()> {
    if model.gradcam_tap().is_none() {
        return Err(Error::MethodUndefined {
            method: method.to_string(),
            reason: "the model has no convolutional layer".into(),
        });
    }
    Ok(())
}

/// `∂S_class/∂x` for each input, under the given ReLU backward rule.
pub fn input_gradients(model: &Model, xs: &[Tensor], classes: &[usize], mode: BackpropMode) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(xs.len());
    for (chunk, cls) in xs.chunks(CHUNK).zip(classes.chunks(CHUNK)) {
        let batch = Tensor::stack(chunk)?;
        let mut tape = Tape::new();
        let input = tape.variable(batch);
        let graph = model.record(&mut tape, input, false)?;
        let seed = tape.pick(graph.logits, cls)?;
        let mut grads = tape.backward(seed, mode)?;
        let g = grads.take(input).expect("input gradient");
        out.extend((0..chunk.len()).map(|i| g.outer(i).reshape(model.input_shape()).expect("input shape")));
    }
    Ok(out)
}

/// GradCAM maps, upsampled to the input's spatial size.
fn gradcam_batch(model: &Model, xs: &[Tensor], classes: &[usize]) -> Result<Vec<Tensor>> {
    check_conv(model, "gradcam")?;
    let mut out = Vec::with_capacity(xs.len());
    for (chunk, cls) in xs.chunks(CHUNK).zip(classes.chunks(CHUNK)) {
        let batch = Tensor::stack(chunk)?;
        let mut tape = Tape::new();
        // A differentiable input makes every node above it, the tap included,
        // receive a gradient.
        let input = tape.variable(batch);
        let graph = model.record(&mut tape, input, false)?;
        let tap = graph.tap.expect("conv models record a tap");
        let seed = tape.pick(graph.logits, cls)?;
        let grads = tape.backward(seed, BackpropMode::Standard)?;
        let acts = tape.value(tap);
        let d_acts = grads.get(tap).expect("tap gradient");
        for b in 0..chunk.len() {
            let cam = gradcam_from_parts(&acts.outer(b), &d_acts.outer(b));
            out.push(upsample_to_input(&cam, model.input_shape())?);
        }
    }
    Ok(out)
}

/// `ReLU(Σ_k α_k A^k)` with `α_k` the spatial mean of `∂S/∂A^k`.
/// `acts` and `grads` are `[k, h, w]`; returns `[h, w]`.
pub fn gradcam_from_parts(acts: &Tensor, grads: &Tensor) -> Tensor {
    let s = acts.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for c in 0..k {
        let g = &grads.data()[c * plane..(c + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        let a = &acts.data()[c * plane..(c + 1) * plane];
        for (o, &v) in cam.iter_mut().zip(a) {
            *o += alpha * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::from_parts(vec![h, w], cam)
}

/// Bilinear resize of a `[h, w]` map with half-pixel centres and edge
/// clamping.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let src = |o: usize, n_out: usize, n_in: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = src(i, out_h, h);
        for j in 0..out_w {
            let (x0, x1, fx) = src(j, out_w, w);
            let d = map.data();
            let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
            let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::from_parts(vec![out_h, out_w], out)
}

fn upsample_to_input(cam: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let n = input_shape.len();
    let (h, w) = (input_shape[n - 2], input_shape[n - 1]);
    bilinear_resize(cam, h, w).reshape(input_shape)
}

/// Raw (unnormalized) maps of a base method for a batch of inputs.
pub fn base_maps(model: &Model, xs: &[Tensor], classes: &[usize], base: BaseMethod, cfg: &MethodConfig) -> Result<Vec<Tensor>> {
    for x in xs {
        check_input(model, x)?;
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::ClassOutOfRange {
            class: c,
            num_classes: model.num_classes(),
        });
    }
    match base {
        BaseMethod::Gradient => input_gradients(model, xs, classes, BackpropMode::Standard),
        BaseMethod::GradientInput => {
            let g = input_gradients(model, xs, classes, BackpropMode::Standard)?;
            xs.iter().zip(&g).map(|(x, g)| x.mul(g)).collect()
        }
        BaseMethod::IntegratedGradients => xs
            .iter()
            .zip(classes)
            .map(|(x, &c)| integrated_gradients_raw(model, x, c, &cfg.ig))
            .collect(),
        BaseMethod::GuidedBackprop => input_gradients(model, xs, classes, BackpropMode::GuidedRelu),
        BaseMethod::GradCam => gradcam_batch(model, xs, classes),
        BaseMethod::GuidedGradCam => {
            let cam = gradcam_batch(model, xs, classes)?;
            let gbp = input_gradients(model, xs, classes, BackpropMode::GuidedRelu)?;
            cam.iter().zip(&gbp).map(|(a, b)| a.mul(b)).collect()
        }
    }
}

fn integrated_gradients_raw(model: &Model, x: &Tensor, class: usize, cfg: &IgConfig) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    let zero;
    let baseline = match &cfg.baseline {
        Some(b) => {
            if b.shape() != x.shape() {
                return Err(Error::shape(
                    "integrated_gradients baseline",
                    format!("{:?} vs input {:?}", b.shape(), x.shape()),
                ));
            }
            b
        }
        None => {
            zero = Tensor::zeros(x.shape());
            &zero
        }
    };
    let delta = x.sub(baseline)?;
    let alphas: Vec<f64> = (0..cfg.steps).map(|k| (k as f64 + 0.5) / cfg.steps as f64).collect();
    let points: Vec<Tensor> = alphas
        .iter()
        .map(|&a| baseline.zip_map(&delta, |b, d| b + a * d).expect("same shape"))
        .collect();
    let grads = input_gradients(model, &points, &vec![class; points.len()], BackpropMode::Standard)?;
    let mut avg = vec![0.0; x.len()];
    for (g, &a) in grads.iter().zip(&alphas) {
        let weight = match cfg.variant {
            IgVariant::Standard => 1.0,
            IgVariant::AlphaWeighted => a,
        };
        for (o, &v) in avg.iter_mut().zip(g.data()) {
            *o += weight * v;
        }
    }
    let steps = cfg.steps as f64;
    let values = avg.iter().zip(delta.data()).map(|(s, d)| d * s / steps).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), values))
}

/// Mean and population variance over `samples` noisy copies, accumulated
/// with Welford's update so identical samples reproduce the base map exactly.
fn noisy_moments(model: &Model, x: &Tensor, class: usize, base: BaseMethod, cfg: &MethodConfig) -> Result<(Tensor, Tensor)> {
    let sc = &cfg.smoothing;
    if sc.samples == 0 {
        return Err(Error::Config("smoothing needs at least one sample".into()));
    }
    let sigma = sc.sigma_for(x);
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise std must be >= 0, got {sigma}")));
    }
    let noisy: Vec<Tensor> = (0..sc.samples)
        .map(|i| {
            let mut rng = rng::stream(sc.seed, "smoothing", i as u64);
            x.map(|v| v + sigma * rng::normal(&mut rng, 0.0, 1.0))
        })
        .collect();
    let maps = base_maps(model, &noisy, &vec![class; noisy.len()], base, cfg)?;
    let mut mean = vec![0.0; x.len()];
    let mut m2 = vec![0.0; x.len()];
    for (k, map) in maps.iter().enumerate() {
        let n = (k + 1) as f64;
        for ((mu, s), &v) in mean.iter_mut().zip(&mut m2).zip(map.data()) {
            let d = v - *mu;
            *mu += d / n;
            *s += d * (v - *mu);
        }
    }
    let var = m2.iter().map(|s| s / sc.samples as f64).collect();
    Ok((
        Tensor::from_parts(x.shape().to_vec(), mean),
        Tensor::from_parts(x.shape().to_vec(), var),
    ))
}

/// Maps for many inputs with per-input target classes.
pub fn explain_batch(model: &Model, xs: &[Tensor], classes: &[usize], method: Method, cfg: &MethodConfig) -> Result<Vec<SaliencyMap>> {
    if xs.len() != classes.len() {
        return Err(Error::Config(format!("{} inputs but {} classes", xs.len(), classes.len())));
    }
    if method.needs_conv() {
        check_conv(model, &method.to_string())?;
    }
    let values: Vec<Tensor> = match method {
        Method::Base(b) => base_maps(model, xs, classes, b, cfg)?,
        Method::SmoothGrad(b) => xs
            .iter()
            .zip(classes)
            .map(|(x, &c)| noisy_moments(model, x, c, b, cfg).map(|m| m.0))
            .collect::<Result<_>>()?,
        Method::VarGrad(b) => {
            if cfg.smoothing.samples < 2 {
                return Err(Error::Config("vargrad needs at least two samples".into()));
            }
            xs.iter()
                .zip(classes)
                .map(|(x, &c)| noisy_moments(model, x, c, b, cfg).map(|m| m.1))
                .collect::<Result<_>>()?
        }
    };
    Ok(values
        .into_iter()
        .zip(classes)
        .map(|(v, &c)| SaliencyMap::raw(v, method, c))
        .collect())
}

/// One map; `class = None` explains the argmax logit.
pub fn explain(model: &Model, x: &Tensor, class: Option<usize>, method: Method, cfg: &MethodConfig) -> Result<SaliencyMap> {
    check_input(model, x)?;
    let class = model.resolve_class(x, class)?;
    Ok(explain_batch(model, std::slice::from_ref(x), &[class], method, cfg)?.remove(0))
}

pub fn gradient(model: &Model, x: &Tensor, class: Option<usize>) -> Result<SaliencyMap> {
    explain(model, x, class, Method::Base(BaseMethod::Gradient), &MethodConfig::default())
}

pub fn gradient_times_input(model: &Model, x: &Tensor, class: Option<usize>) -> Result<SaliencyMap> {
    explain(model, x, class, Method::Base(BaseMethod::GradientInput), &MethodConfig::default())
}

pub fn integrated_gradients(model: &Model, x: &Tensor, class: Option<usize>, cfg: &IgConfig) -> Result<SaliencyMap> {
    let mc = MethodConfig {
        ig: cfg.clone(),
        ..MethodConfig::default()
    };
    explain(model, x, class, Method::Base(BaseMethod::IntegratedGradients), &mc)
}

pub fn guided_backprop(model: &Model, x: &Tensor, class: Option<usize>) -> Result<SaliencyMap> {
    explain(model, x, class, Method::Base(BaseMethod::GuidedBackprop), &MethodConfig::default())
}

pub fn gradcam(model: &Model, x: &Tensor, class: Option<usize>) -> Result<SaliencyMap> {
    explain(model, x, class, Method::Base(BaseMethod::GradCam), &MethodConfig::default())
}

pub fn guided_gradcam(model: &Model, x: &Tensor, class: Option<usize>) -> Result<SaliencyMap> {
    explain(model, x, class, Method::Base(BaseMethod::GuidedGradCam), &MethodConfig::default())
}

pub fn smoothgrad(base: BaseMethod, model: &Model, x: &Tensor, class: Option<usize>, cfg: &SmoothingConfig) -> Result<SaliencyMap> {
    let mc = MethodConfig {
        smoothing: cfg.clone(),
        ..MethodConfig::default()
    };
    explain(model, x, class, Method::SmoothGrad(base), &mc)
}

pub fn vargrad(base: BaseMethod, model: &Model, x: &Tensor, class: Option<usize>, cfg: &SmoothingConfig) -> Result<SaliencyMap> {
    let mc = MethodConfig {
        smoothing: cfg.clone(),
        ..MethodConfig::default()
    };
    explain(model, x, class, Method::VarGrad(base), &mc)
}

/// Rows and columns used to lay out a map as an image: the trailing two axes
/// of image-shaped maps, a square for perfect-square vectors, else one row.
pub fn image_grid(shape: &[usize]) -> (usize, usize) {
    if shape.len() >= 2 {
        let n = shape.len();
        let (h, w) = (shape[n - 2], shape[n - 1]);
        let lead: usize = shape[..n - 2].iter().product();
        return (lead * h, w);
    }
    let d: usize = shape.iter().product();
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        (side, side)
    } else {
        (1, d)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PGM of the absolute-value view.
pub fn pgm_bytes(map: &SaliencyMap) -> Vec<u8> {
    let view = abs_view(map);
    let (h, w) = image_grid(view.values.shape());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(view.values.data().iter().map(|&v| to_byte(v)));
    out
}

/// 8-bit binary PPM of the diverging view: positive values in the red
/// channel, negative values in the blue channel.
pub fn ppm_bytes(map: &SaliencyMap) -> Vec<u8> {
    let view = if map.normalized { map.clone() } else { normalize(map) };
    let (h, w) = image_grid(view.values.shape());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in view.values.data() {
        out.extend_from_slice(&[to_byte(v), 0, to_byte(-v)]);
    }
    out
}

pub fn write_pgm(map: &SaliencyMap, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(map)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(map: &SaliencyMap, path: &Path) -> Result<()> {
    std::fs::write(path, ppm_bytes(map)).map_err(|e| Error::io(path, e))
}

/// Raw values, shape, method and class as pretty JSON.
pub fn write_json(map: &SaliencyMap, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(map)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Model-free baselines and closed-form checks: an edge detector, the
//! input-dominance experiment for elementwise products, metric calibration
//! against random masks, and exact verifications on the linear and
//! conv-sum-pool models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{compare_values, MetricConfig, MetricId};
use crate::models::{ArchitectureId, LayerKind, Model};
use crate::rng;
use crate::saliency::{
    explain, explain_batch, normalize, BaseMethod, IgConfig, IgVariant, Method, MethodConfig, NoiseScale, SaliencyMap,
    SmoothingConfig,
};
use crate::tensor::Tensor;

/// Edge strength in `[0, 1]`, shaped `[h, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMap {
    pub values: Tensor,
}

fn plane(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    match s.len() {
        2 => Ok((s[0], s[1])),
        3 if s[0] == 1 => Ok((s[1], s[2])),
        _ => Err(Error::shape("edge detector", format!("expected a 2-D image, got {s:?}"))),
    }
}

/// Correlates with a square odd kernel, clamping coordinates at the border.
fn filter(data: &[f64], h: usize, w: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for a in -r..=r {
                for b in -r..=r {
                    let y = (i + a).clamp(0, h as isize - 1) as usize;
                    let x = (j + b).clamp(0, w as isize - 1) as usize;
                    acc += kernel[((a + r) as usize) * k + (b + r) as usize] * data[y * w + x];
                }
            }
            out[i as usize * w + j as usize] = acc;
        }
    }
    out
}

/// Gaussian smoothing (σ = 1, 5x5), Sobel gradient magnitude, then division
/// by the maximum. Constant images give the zero map.
pub fn sobel_edges(image: &Tensor) -> Result<EdgeMap> {
    let (h, w) = plane(image)?;
    let g1: Vec<f64> = (-2..=2).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).collect();
    let mut gauss: Vec<f64> = g1.iter().flat_map(|a| g1.iter().map(move |b| a * b)).collect();
    let total: f64 = gauss.iter().sum();
    gauss.iter_mut().for_each(|v| *v /= total);
    let smooth = filter(image.data(), h, w, &gauss, 5);
    // Sobel as a central difference followed by [1, 2, 1] smoothing across
    // it; differencing first keeps flat regions exactly zero.
    let at = |i: isize, j: isize| smooth[i.clamp(0, h as isize - 1) as usize * w + j.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let dx = |r: isize| at(r, j + 1) - at(r, j - 1);
            let dy = |c: isize| at(i + 1, c) - at(i - 1, c);
            let gx = dx(i - 1) + 2.0 * dx(i) + dx(i + 1);
            let gy = dy(j - 1) + 2.0 * dy(j) + dy(j + 1);
            mag[i as usize * w + j as usize] = gx.hypot(gy);
        }
    }
    let m = mag.iter().fold(0.0f64, |a, &b| a.max(b));
    if m > 0.0 {
        mag.iter_mut().for_each(|v| *v /= m);
    }
    Ok(EdgeMap {
        values: Tensor::new(vec![h, w], mag)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// Mean 1, std `s`, truncated at two standard deviations.
    TruncatedNormal,
    /// Uniform on `[1 - s, 1 + s]`.
    Uniform,
}

impl NoiseDistribution {
    fn draw(self, rng: &mut impl Rng, s: f64) -> f64 {
        match self {
            NoiseDistribution::TruncatedNormal => 1.0 + rng::truncated_normal(rng, s),
            NoiseDistribution::Uniform => 1.0 + s * rng.random_range(-1.0..=1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominancePoint {
    pub scale: f64,
    /// Mean similarity of normalized `x ⊙ u` and `x ⊙ v`, per metric.
    pub product: Vec<(MetricId, f64)>,
    /// Mean similarity of normalized `u` and `v`, per metric.
    pub noise_only: Vec<(MetricId, f64)>,
    /// Comparisons left out because they were degenerate.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCurve {
    pub distribution: NoiseDistribution,
    pub pairs_per_image: usize,
    pub images: usize,
    pub points: Vec<DominancePoint>,
}

impl DominanceCurve {
    pub fn product_mean(&self, point: usize, metric: MetricId) -> Option<f64> {
        lookup(&self.points[point].product, metric)
    }

    pub fn noise_mean(&self, point: usize, metric: MetricId) -> Option<f64> {
        lookup(&self.points[point].noise_only, metric)
    }
}

fn lookup(rows: &[(MetricId, f64)], metric: MetricId) -> Option<f64> {
    rows.iter().find(|(m, _)| *m == metric).map(|(_, v)| *v)
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let m = values.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m == 0.0 {
        values.to_vec()
    } else {
        values.iter().map(|v| v / m).collect()
    }
}

/// Average similarity of `x ⊙ u` and `x ⊙ v` over random multiplicative
/// noise pairs, next to the similarity of `u` and `v` themselves.
pub fn input_dominance(
    images: &[Tensor],
    distribution: NoiseDistribution,
    grid: &[f64],
    pairs: usize,
    metrics: &[MetricId],
    seed: u64,
    cfg: &MetricConfig,
) -> Result<DominanceCurve> {
    if grid.is_empty() || images.is_empty() || pairs == 0 {
        return Err(Error::Config("dominance needs images, pairs and a non-empty scale grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 0.0 {
        return Err(Error::Config("noise scale grid must be non-negative and strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for (gi, &s) in grid.iter().enumerate() {
        let mut prod_sum = vec![0.0; metrics.len()];
        let mut noise_sum = vec![0.0; metrics.len()];
        let mut prod_n = vec![0usize; metrics.len()];
        let mut noise_n = vec![0usize; metrics.len()];
        let mut degenerate = 0;
        for (ii, x) in images.iter().enumerate() {
            for p in 0..pairs {
                let key = ((gi * images.len() + ii) * pairs + p) as u64;
                let mut r = rng::stream(seed, "dominance", key);
                let u: Vec<f64> = (0..x.len()).map(|_| distribution.draw(&mut r, s)).collect();
                let v: Vec<f64> = (0..x.len()).map(|_| distribution.draw(&mut r, s)).collect();
                let xu: Vec<f64> = x.data().iter().zip(&u).map(|(a, b)| a * b).collect();
                let xv: Vec<f64> = x.data().iter().zip(&v).map(|(a, b)| a * b).collect();
                let (xu, xv, u, v) = (normalized(&xu), normalized(&xv), normalized(&u), normalized(&v));
                for (mi, &metric) in metrics.iter().enumerate() {
                    let a = compare_values(&xu, &xv, x.shape(), metric, cfg)?;
                    let b = compare_values(&u, &v, x.shape(), metric, cfg)?;
                    for (v, sum, n) in [(a, &mut prod_sum[mi], &mut prod_n[mi]), (b, &mut noise_sum[mi], &mut noise_n[mi])] {
                        if v.degenerate {
                            degenerate += 1;
                        } else {
                            *sum += v.value;
                            *n += 1;
                        }
                    }
                }
            }
        }
        let mean = |sums: &[f64], counts: &[usize]| -> Vec<(MetricId, f64)> {
            metrics
                .iter()
                .zip(sums)
                .zip(counts)
                .map(|((&m, &t), &c)| (m, if c == 0 { 0.0 } else { t / c as f64 }))
                .collect()
        };
        points.push(DominancePoint {
            scale: s,
            product: mean(&prod_sum, &prod_n),
            noise_only: mean(&noise_sum, &noise_n),
            degenerate,
        });
    }
    Ok(DominanceCurve {
        distribution,
        pairs_per_image: pairs,
        images: images.len(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    /// `mask_vs_self`, `mask_vs_gaussian`, `mask_vs_uniform`,
    /// `gaussian_vs_gaussian` or `uniform_vs_uniform`.
    pub comparison: String,
    pub metric: MetricId,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub maps: usize,
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    pub fn mean(&self, comparison: &str, metric: MetricId) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.comparison == comparison && r.metric == metric)
            .map(|r| r.mean)
    }
}

pub const CALIBRATION_COMPARISONS: [&str; 5] =
    ["mask_vs_self", "mask_vs_gaussian", "mask_vs_uniform", "gaussian_vs_gaussian", "uniform_vs_uniform"];

/// Similarity of each map to itself, to a standard-normal mask and to a
/// uniform `[-1, 1]` mask, plus the similarity of two independent random
/// masks of each kind. Every random mask has the map's shape.
pub fn calibrate_metrics(maps: &[SaliencyMap], metrics: &[MetricId], seed: u64, cfg: &MetricConfig) -> Result<CalibrationTable> {
    if maps.len() < 10 {
        return Err(Error::Config(format!("calibration needs at least 10 maps, got {}", maps.len())));
    }
    let mut sums = vec![vec![(0.0, 0usize); metrics.len()]; CALIBRATION_COMPARISONS.len()];
    for (i, map) in maps.iter().enumerate() {
        let shape = map.values.shape();
        let n = map.values.len();
        let mut r = rng::stream(seed, "calibrate", i as u64);
        let mut gaussian = || normalized(&(0..n).map(|_| rng::normal(&mut r, 0.0, 1.0)).collect::<Vec<_>>());
        let (g1, g2) = (gaussian(), gaussian());
        let mut uniform = || normalized(&(0..n).map(|_| r.random_range(-1.0..=1.0)).collect::<Vec<_>>());
        let (u1, u2) = (uniform(), uniform());
        let m = normalize(map);
        let m = m.values.data();
        let pairs: [(&[f64], &[f64]); 5] = [(m, m), (m, &g1), (m, &u1), (&g1, &g2), (&u1, &u2)];
        for (ci, (a, b)) in pairs.iter().enumerate() {
            for (mi, &metric) in metrics.iter().enumerate() {
                let v = compare_values(a, b, shape, metric, cfg)?;
                if !v.degenerate {
                    sums[ci][mi].0 += v.value;
                    sums[ci][mi].1 += 1;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (ci, name) in CALIBRATION_COMPARISONS.iter().enumerate() {
        for (mi, &metric) in metrics.iter().enumerate() {
            let (t, n) = sums[ci][mi];
            rows.push(CalibrationRow {
                comparison: name.to_string(),
                metric,
                mean: if n == 0 { 0.0 } else { t / n as f64 },
                n,
            });
        }
    }
    Ok(CalibrationTable { maps: maps.len(), rows })
}

/// One named assertion with the largest deviation it observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, got: &[f64], want: &[f64], tolerance: f64) -> Check {
        let err = got
            .iter()
            .zip(want)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let pass = got.len() == want.len() && err <= tolerance;
        Check {
            name: name.to_string(),
            pass,
            max_abs_error: err,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReport {
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub baseline: Vec<f64>,
    pub ig_standard: Vec<f64>,
    pub ig_alpha_weighted: Vec<f64>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Closed forms on `S(x) = w · x`: the gradient and SmoothGrad equal `w`
/// exactly, VarGrad is zero, standard IG is `(x - x̄) ⊙ w` and the
/// α-weighted IG is `(x - x̄) ⊙ w / 2`.
pub fn verify_linear_closed_forms(w: &[f64], x: &[f64], baseline: &[f64], seed: u64) -> Result<LinearReport> {
    if w.len() != x.len() || w.len() != baseline.len() {
        return Err(Error::shape("linear closed forms", "w, x and the baseline must have equal length"));
    }
    let model = Model::linear(w)?;
    let xt = Tensor::vector(x)?;
    let bt = Tensor::vector(baseline)?;
    let delta: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut checks = Vec::new();
    let mut cfg = MethodConfig {
        ig: IgConfig {
            baseline: Some(bt),
            ..IgConfig::default()
        },
        smoothing: SmoothingConfig {
            samples: 16,
            noise: NoiseScale::Absolute(1.0),
            seed,
        },
    };
    let run = |m: Method, cfg: &MethodConfig| explain(&model, &xt, Some(0), m, cfg).map(|s| s.values.into_data());

    checks.push(Check::new("gradient == w", &run(Method::Base(BaseMethod::Gradient), &cfg)?, w, 0.0));
    checks.push(Check::new("smoothgrad == w", &run(Method::SmoothGrad(BaseMethod::Gradient), &cfg)?, w, 0.0));
    // Every individual noisy draw, not just their mean.
    let mut r = rng::stream(seed, "linear/draws", 0);
    let draws: Vec<Tensor> = (0..8)
        .map(|_| Tensor::vector(&x.iter().map(|v| v + rng::normal(&mut r, 0.0, 1.0)).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let per_draw = explain_batch(&model, &draws, &[0; 8], Method::Base(BaseMethod::Gradient), &cfg)?;
    let worst = per_draw
        .iter()
        .map(|m| Check::new("", m.values.data(), w, 0.0).max_abs_error)
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "gradient == w at every noisy draw".into(),
        pass: worst == 0.0,
        max_abs_error: worst,
        tolerance: 0.0,
    });
    let zeros = vec![0.0; w.len()];
    checks.push(Check::new("vargrad == 0", &run(Method::VarGrad(BaseMethod::Gradient), &cfg)?, &zeros, 0.0));

    let ig_standard = run(Method::Base(BaseMethod::IntegratedGradients), &cfg)?;
    let want: Vec<f64> = delta.iter().zip(w).map(|(d, w)| d * w).collect();
    checks.push(Check::new("integrated gradients == (x - x̄) ⊙ w", &ig_standard, &want, 1e-12));
    cfg.ig.variant = IgVariant::AlphaWeighted;
    let ig_alpha_weighted = run(Method::Base(BaseMethod::IntegratedGradients), &cfg)?;
    let half: Vec<f64> = want.iter().map(|v| v / 2.0).collect();
    checks.push(Check::new("α-weighted integrated gradients == (x - x̄) ⊙ w / 2", &ig_alpha_weighted, &half, 1e-12));

    let mut r = rng::stream(seed, "linear/elsewhere", 0);
    let other = Tensor::vector(&(0..w.len()).map(|_| rng::normal(&mut r, 0.0, 3.0)).collect::<Vec<_>>())?;
    let g_other = explain(&model, &other, Some(0), Method::Base(BaseMethod::Gradient), &cfg)?;
    let g_here = run(Method::Base(BaseMethod::Gradient), &cfg)?;
    checks.push(Check::new("gradient does not depend on x", g_other.values.data(), &g_here, 0.0));

    let pass = checks.iter().all(|c| c.pass);
    Ok(LinearReport {
        w: w.to_vec(),
        x: x.to_vec(),
        baseline: baseline.to_vec(),
        ig_standard,
        ig_alpha_weighted,
        checks,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1Report {
    pub side: usize,
    /// Filter in convolution orientation.
    pub filter: [[f64; 3]; 3],
    pub interior_pixels: usize,
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Checks `∂l/∂x_ij = Σ_{k,l ∈ {-1,0,1}} a_{i+k,j+l} w_{kl}` with
/// `a = 1[(w * x) ≥ 0]` on every interior pixel, exactly.
pub fn verify_conv1_activation_pattern(model: &Model, x: &Tensor) -> Result<Conv1Report> {
    let ArchitectureId::ConvSumPool1 { side: n } = *model.arch() else {
        return Err(Error::Config("activation-pattern check needs a conv-sum-pool model".into()));
    };
    let layer = model.layer("conv1")?;
    if !matches!(layer.kind, LayerKind::Conv { kernel: 3, .. }) {
        return Err(Error::Config("conv1 must be a 3x3 convolution".into()));
    }
    if layer.biases.as_ref().is_some_and(|b| b.data()[0] != 0.0) {
        return Err(Error::Config("activation-pattern check assumes a zero bias".into()));
    }
    let stored = layer.weights.as_ref().expect("conv weights").data();
    // Undo the storage flip: w[k+1][l+1] multiplies x[i-k][j-l].
    let mut w = [[0.0; 3]; 3];
    for (a, row) in w.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = stored[(2 - a) * 3 + (2 - b)];
        }
    }
    let xi = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
            0.0
        } else {
            x.data()[i as usize * n + j as usize]
        }
    };
    let mut act = vec![0.0; n * n];
    for i in 0..n as isize {
        for j in 0..n as isize {
            let mut pre = 0.0;
            for k in -1..=1isize {
                for l in -1..=1isize {
                    pre += w[(k + 1) as usize][(l + 1) as usize] * xi(i - k, j - l);
                }
            }
            act[i as usize * n + j as usize] = if pre >= 0.0 { 1.0 } else { 0.0 };
        }
    }
    let grad = explain(model, x, Some(0), Method::Base(BaseMethod::Gradient), &MethodConfig::default())?;
    let mut max_abs_diff = 0.0f64;
    let mut count = 0;
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let mut formula = 0.0;
            for k in -1..=1isize {
                for l in -1..=1isize {
                    let p = (i as isize + k) as usize * n + (j as isize + l) as usize;
                    formula += act[p] * w[(k + 1) as usize][(l + 1) as usize];
                }
            }
            max_abs_diff = max_abs_diff.max((formula - grad.values.data()[i * n + j]).abs());
            count += 1;
        }
    }
    Ok(Conv1Report {
        side: n,
        filter: w,
        interior_pixels: count,
        max_abs_diff,
        pass: max_abs_diff == 0.0,
    })
}

/// Random filters and inputs in `[-1, 1]`, one stream per draw.
///
/// Values are multiples of 1/256, so every partial sum on either side of the
/// check is exactly representable and the comparison does not depend on the
/// order in which the engine accumulates.
pub fn conv1_random_draws(side: usize, draws: usize, seed: u64) -> Result<Vec<Conv1Report>> {
    (0..draws)
        .map(|d| {
            let mut r = rng::stream(seed, "conv1", d as u64);
            let mut draw = || f64::from(r.random_range(-256i32..=256)) / 256.0;
            let w = [[0.0f64; 3]; 3].map(|row| row.map(|_| draw()));
            let model = Model::conv_sum_pool(side, w)?;
            let x = Tensor::new(vec![1, side, side], (0..side * side).map(|_| draw()).collect())?;
            verify_conv1_activation_pattern(&model, &x)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePair {
    pub method: Method,
    pub original: SaliencyMap,
    pub edge_masked: SaliencyMap,
    pub similarity: Vec<(MetricId, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeExperiment {
    pub threshold: f64,
    pub class: usize,
    pub edges: EdgeMap,
    pub masked_input: Tensor,
    pub pairs: Vec<EdgePair>,
}

pub const EDGE_THRESHOLD: f64 = 0.1;

/// Explains `x` and `x ⊙ 1[edges > threshold]` for the class predicted on
/// `x`, and compares each method's pair of maps.
pub fn edge_times_input_experiment(
    model: &Model,
    x: &Tensor,
    methods: &[Method],
    threshold: f64,
    method_cfg: &MethodConfig,
    metrics: &[MetricId],
    metric_cfg: &MetricConfig,
) -> Result<EdgeExperiment> {
    let edges = sobel_edges(x)?;
    let mask = edges.values.reshape(x.shape())?;
    let masked_input = x.zip_map(&mask, |v, e| if e > threshold { v } else { 0.0 })?;
    let class = model.resolve_class(x, None)?;
    let mut pairs = Vec::new();
    for &method in methods {
        let original = explain(model, x, Some(class), method, method_cfg)?;
        let edge_masked = explain(model, &masked_input, Some(class), method, method_cfg)?;
        let mut similarity = Vec::new();
        for &metric in metrics {
            let v = if original.values.max_abs() == 0.0 || edge_masked.values.max_abs() == 0.0 {
                None
            } else {
                let v = crate::metrics::compare(&original, &edge_masked, metric, metric_cfg)?;
                (!v.degenerate).then_some(v.value)
            };
            similarity.push((metric, v));
        }
        pairs.push(EdgePair {
            method,
            original,
            edge_masked,
            similarity,
        });
    }
    Ok(EdgeExperiment {
        threshold,
        class,
        edges,
        masked_input,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_no_edges() {
        let e = sobel_edges(&Tensor::full(&[12, 12], 0.7)).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_peaks_at_the_step() {
        let (h, w) = (16, 20);
        let img = Tensor::new(vec![h, w], (0..h * w).map(|k| if k % w >= 10 { 1.0 } else { 0.0 }).collect()).unwrap();
        let e = sobel_edges(&img).unwrap();
        let row = |c: usize| e.values.at(&[8, c]);
        assert!((row(9) - 1.0).abs() < 1e-12 && (row(10) - 1.0).abs() < 1e-12);
        for c in 0..w {
            assert!(row(c) <= row(9) + 1e-15);
            if !(6..=13).contains(&c) {
                assert_eq!(row(c), 0.0, "column {c}");
            }
        }
        assert!(e.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dominance_limits() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![16, 16], (0..256).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let metrics = [MetricId::SpearmanAbs, MetricId::SpearmanNoAbs];
        let c = input_dominance(&[x], NoiseDistribution::Uniform, &[0.0, 0.5], 3, &metrics, 0, &MetricConfig::default()).unwrap();
        assert_eq!(c.product_mean(0, MetricId::SpearmanAbs), Some(1.0));
        let ones = Tensor::full(&[16, 16], 1.0);
        let c = input_dominance(&[ones], NoiseDistribution::TruncatedNormal, &[0.5], 4, &metrics, 0, &MetricConfig::default()).unwrap();
        for m in metrics {
            assert_eq!(c.product_mean(0, m), c.noise_mean(0, m));
        }
        assert!(input_dominance(&[Tensor::full(&[4, 4], 1.0)], NoiseDistribution::Uniform, &[0.5, 0.1], 1, &metrics, 0, &MetricConfig::default()).is_err());
    }

    #[test]
    fn linear_closed_forms_hold() {
        let r = verify_linear_closed_forms(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0], 0).unwrap();
        assert!(r.pass, "{:?}", r.checks);
        assert_eq!(r.ig_standard, vec![3.0, 8.0]);
        assert!((r.ig_alpha_weighted[0] - 1.5).abs() < 1e-12 && (r.ig_alpha_weighted[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn conv1_all_on_and_all_off() {
        let w = [[0.1, 0.2, 0.1], [0.2, 0.4, 0.2], [0.1, 0.2, 0.1]];
        let m = Model::conv_sum_pool(8, w).unwrap();
        let x = Tensor::full(&[1, 8, 8], 5.0);
        let r = verify_conv1_activation_pattern(&m, &x).unwrap();
        assert!(r.pass);
        let g = explain(&m, &x, Some(0), Method::Base(BaseMethod::Gradient), &MethodConfig::default()).unwrap();
        let total: f64 = w.iter().flatten().sum();
        assert!((g.values.at(&[0, 3, 3]) - total).abs() < 1e-15);

        let neg = Model::conv_sum_pool(8, w.map(|r| r.map(|v| -v))).unwrap();
        let r = verify_conv1_activation_pattern(&neg, &x).unwrap();
        assert!(r.pass);
        let g = explain(&neg, &x, Some(0), Method::Base(BaseMethod::Gradient), &MethodConfig::default()).unwrap();
        assert!(g.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1_random_draws_are_exact() {
        let reports = conv1_random_draws(16, 50, 3).unwrap();
        for rep in &reports {
            assert!(rep.pass, "max diff {}", rep.max_abs_diff);
            assert_eq!(rep.interior_pixels, 14 * 14);
        }
    }

    #[test]
    fn edge_experiment_on_constant_input_zeroes_products() {
        let m = Model::conv_sum_pool(8, [[0.1; 3]; 3]).unwrap();
        let x = Tensor::full(&[1, 8, 8], 0.5);
        let methods = [Method::Base(BaseMethod::GradientInput)];
        let e = edge_times_input_experiment(&m, &x, &methods, EDGE_THRESHOLD, &MethodConfig::default(), &[MetricId::SpearmanAbs], &MetricConfig::default()).unwrap();
        assert!(e.masked_input.data().iter().all(|&v| v == 0.0));
        assert!(e.pairs[0].edge_masked.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(e.pairs[0].similarity[0].1, None);
    }

    #[test]
    fn calibration_self_row_is_one() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<SaliencyMap> = (0..10)
            .map(|_| SaliencyMap {
                values: Tensor::new(vec![1, 28, 28], (0..784).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap(),
                method: Method::Base(BaseMethod::Gradient),
                class: 0,
                normalized: false,
                degenerate: false,
            })
            .collect();
        let t = calibrate_metrics(&maps, &MetricId::ALL, 0, &MetricConfig::default()).unwrap();
        for m in MetricId::ALL {
            assert!((t.mean("mask_vs_self", m).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(calibrate_metrics(&maps[..5], &MetricId::ALL, 0, &MetricConfig::default()).is_err());
    }
}

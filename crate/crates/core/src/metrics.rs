//! Map-comparison metrics: Spearman rank correlation (with and without
//! absolute values), SSIM and the Pearson correlation of HOG descriptors.
//!
//! SSIM and HOG follow scikit-image's `structural_similarity` (uniform
//! window, sample covariance, mean over fully interior windows) and `hog`
//! (central differences, unsigned hard-binned orientations, per-cell L2
//! normalization).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{image_grid, normalize, SaliencyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricId {
    #[serde(rename = "spearman_abs")]
    SpearmanAbs,
    #[serde(rename = "spearman_noabs")]
    SpearmanNoAbs,
    #[serde(rename = "ssim")]
    Ssim,
    #[serde(rename = "hog_pearson")]
    HogPearson,
}

impl MetricId {
    pub const ALL: [MetricId; 4] = [MetricId::SpearmanAbs, MetricId::SpearmanNoAbs, MetricId::Ssim, MetricId::HogPearson];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::SpearmanAbs => "spearman_abs",
            MetricId::SpearmanNoAbs => "spearman_noabs",
            MetricId::Ssim => "ssim",
            MetricId::HogPearson => "hog_pearson",
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub ssim_window: usize,
    /// Pixels per square HOG cell; `None` picks 16 for maps at least 64
    /// pixels on each side and 7 otherwise.
    pub hog_cell: Option<usize>,
    pub hog_bins: usize,
    pub ssim_data_range: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            ssim_window: 5,
            hog_cell: None,
            hog_bins: 9,
            ssim_data_range: 2.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("SSIM window must be odd and >= 3, got {}", self.ssim_window)));
        }
        if self.hog_bins == 0 || self.hog_cell == Some(0) {
            return Err(Error::Config("HOG cell size and bin count must be positive".into()));
        }
        if !(self.ssim_data_range > 0.0) {
            return Err(Error::Config("SSIM data range must be positive".into()));
        }
        Ok(())
    }

    pub fn hog_cell_for(&self, rows: usize, cols: usize) -> usize {
        self.hog_cell.unwrap_or(if rows.min(cols) >= 64 { 16 } else { 7 })
    }
}

/// A similarity value. Undefined correlations (a constant input) are
/// reported as 0 with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub degenerate: bool,
}

impl MetricValue {
    fn ok(value: f64) -> Self {
        MetricValue { value, degenerate: false }
    }

    fn degenerate() -> Self {
        MetricValue {
            value: 0.0,
            degenerate: true,
        }
    }
}

/// A row-major 2-D view.
#[derive(Debug, Clone, Copy)]
pub struct Image<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> Image<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("image", format!("{rows}x{cols} does not hold {} values", data.len())));
        }
        Ok(Image { rows, cols, data })
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Average (1-based) ranks with ties sharing their mean rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; degenerate when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<MetricValue> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson", format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(MetricValue::degenerate());
    }
    // One square root keeps identical inputs at exactly 1.
    Ok(MetricValue::ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

pub fn spearman(a: &[f64], b: &[f64], use_abs: bool) -> Result<MetricValue> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", format!("{} vs {} values", a.len(), b.len())));
    }
    let prep = |v: &[f64]| -> Vec<f64> {
        if use_abs {
            mid_ranks(&v.iter().map(|x| x.abs()).collect::<Vec<_>>())
        } else {
            mid_ranks(v)
        }
    };
    pearson(&prep(a), &prep(b))
}

/// Mean local SSIM over every fully interior `window x window` box.
pub fn ssim(a: Image, b: Image, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    same_size("ssim", a, b)?;
    let win = cfg.ssim_window;
    if a.rows < win || a.cols < win {
        return Err(Error::Config(format!(
            "SSIM window {win} exceeds the {}x{} image",
            a.rows, a.cols
        )));
    }
    let np = (win * win) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (0.01 * cfg.ssim_data_range).powi(2);
    let c2 = (0.03 * cfg.ssim_data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=a.rows - win {
        for c in 0..=a.cols - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + win {
                for j in c..c + win {
                    let (x, y) = (a.at(i, j), b.at(i, j));
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (ux, uy) = (sx / np, sy / np);
            let vx = cov_norm * (sxx / np - ux * ux);
            let vy = cov_norm * (syy / np - uy * uy);
            let vxy = cov_norm * (sxy / np - ux * uy);
            let num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// HOG descriptor with one cell per block: `[cell_row][cell_col][bin]`.
pub fn hog_descriptor(img: Image, cell: usize, bins: usize) -> Result<Vec<f64>> {
    let (rows, cols) = (img.rows, img.cols);
    let (cr, cc) = (rows / cell, cols / cell);
    if cr < 2 || cc < 2 {
        return Err(Error::Config(format!(
            "HOG cell {cell}x{cell} leaves fewer than 2 cells per axis on a {rows}x{cols} image"
        )));
    }
    let mut magnitude = vec![0.0; rows * cols];
    let mut orientation = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let gr = if r == 0 || r == rows - 1 { 0.0 } else { img.at(r + 1, c) - img.at(r - 1, c) };
            let gc = if c == 0 || c == cols - 1 { 0.0 } else { img.at(r, c + 1) - img.at(r, c - 1) };
            magnitude[r * cols + c] = gr.hypot(gc);
            orientation[r * cols + c] = gr.atan2(gc).to_degrees().rem_euclid(180.0);
        }
    }
    let width = 180.0 / bins as f64;
    let area = (cell * cell) as f64;
    let mut out = Vec::with_capacity(cr * cc * bins);
    for i in 0..cr {
        for j in 0..cc {
            let mut hist = vec![0.0; bins];
            for r in i * cell..(i + 1) * cell {
                for c in j * cell..(j + 1) * cell {
                    let o = orientation[r * cols + c];
                    // Bin b holds [b*width, (b+1)*width); an angle that wraps
                    // to exactly 180 lands in no bin.
                    if let Some(b) = (0..bins).find(|&b| o < width * (b + 1) as f64 && o >= width * b as f64) {
                        hist[b] += magnitude[r * cols + c];
                    }
                }
            }
            hist.iter_mut().for_each(|h| *h /= area);
            let norm = (hist.iter().map(|h| h * h).sum::<f64>() + 1e-10).sqrt();
            out.extend(hist.iter().map(|h| h / norm));
        }
    }
    Ok(out)
}

pub fn hog_pearson(a: Image, b: Image, cfg: &MetricConfig) -> Result<MetricValue> {
    cfg.validate()?;
    same_size("hog_pearson", a, b)?;
    let cell = cfg.hog_cell_for(a.rows, a.cols);
    let da = hog_descriptor(a, cell, cfg.hog_bins)?;
    let db = hog_descriptor(b, cell, cfg.hog_bins)?;
    pearson(&da, &db)
}

fn same_size(op: &'static str, a: Image, b: Image) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    Ok(())
}

/// Compares raw values laid out as images by [`image_grid`].
pub fn compare_values(a: &[f64], b: &[f64], shape: &[usize], metric: MetricId, cfg: &MetricConfig) -> Result<MetricValue> {
    match metric {
        MetricId::SpearmanAbs => spearman(a, b, true),
        MetricId::SpearmanNoAbs => spearman(a, b, false),
        MetricId::Ssim | MetricId::HogPearson => {
            let (rows, cols) = image_grid(shape);
            let (ia, ib) = (Image::new(rows, cols, a)?, Image::new(rows, cols, b)?);
            if metric == MetricId::Ssim {
                ssim(ia, ib, cfg).map(MetricValue::ok)
            } else {
                hog_pearson(ia, ib, cfg)
            }
        }
    }
}

/// Normalizes both maps, then compares them with signed values (SSIM and HOG
/// see the diverging maps, not absolute values).
pub fn compare(a: &SaliencyMap, b: &SaliencyMap, metric: MetricId, cfg: &MetricConfig) -> Result<MetricValue> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(
            "compare",
            format!("{:?} vs {:?}", a.values.shape(), b.values.shape()),
        ));
    }
    let (na, nb) = (normalize(a), normalize(b));
    compare_values(na.values.data(), nb.values.data(), na.values.shape(), metric, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::{BaseMethod, Method};
    use crate::tensor::Tensor;

    #[test]
    fn metric_ids_serialize_as_cli_names() {
        for m in MetricId::ALL {
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
            assert_eq!(serde_json::from_str::<MetricId>(&json).unwrap(), m);
        }
    }

    fn img(rows: usize, cols: usize, data: &[f64]) -> Image<'_> {
        Image::new(rows, cols, data).unwrap()
    }

    fn pattern(n: usize, phase: f64) -> Vec<f64> {
        (0..n * n)
            .map(|k| ((k / n) as f64 * 0.7 + phase).sin() * ((k % n) as f64 * 0.4).cos())
            .collect()
    }

    #[test]
    fn spearman_examples() {
        let v = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0], false).unwrap();
        assert!((v.value - 0.8).abs() < 1e-12);
        let a = [0.5, -0.2, 0.1];
        let b = [-0.5, 0.2, -0.1];
        assert!((spearman(&a, &b, false).unwrap().value + 1.0).abs() < 1e-12);
        assert!((spearman(&a, &b, true).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&a, &a, false).unwrap().value, 1.0);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let v = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], false).unwrap();
        assert!(v.degenerate);
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = pattern(12, 0.0);
        assert!((ssim(img(12, 12, &a), img(12, 12, &a), &MetricConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        let c = vec![0.3; 144];
        assert!((ssim(img(12, 12, &c), img(12, 12, &c), &MetricConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_undersized_and_even_windows() {
        let a = vec![0.0; 16];
        assert!(ssim(img(4, 4, &a), img(4, 4, &a), &MetricConfig::default()).is_err());
        let cfg = MetricConfig {
            ssim_window: 4,
            ..MetricConfig::default()
        };
        let b = vec![0.0; 100];
        assert!(ssim(img(10, 10, &b), img(10, 10, &b), &cfg).is_err());
    }

    #[test]
    fn hog_is_sign_invariant() {
        let a = pattern(28, 0.3);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let v = hog_pearson(img(28, 28, &a), img(28, 28, &neg), &MetricConfig::default()).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hog_rejects_single_cell() {
        let a = vec![0.0; 784];
        let cfg = MetricConfig {
            hog_cell: Some(16),
            ..MetricConfig::default()
        };
        assert!(matches!(hog_pearson(img(28, 28, &a), img(28, 28, &a), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn compare_normalizes_and_dispatches() {
        let t = Tensor::new(vec![1, 28, 28], pattern(28, 1.0)).unwrap();
        let m = SaliencyMap {
            values: t.clone(),
            method: Method::Base(BaseMethod::Gradient),
            class: 0,
            normalized: false,
            degenerate: false,
        };
        let neg = SaliencyMap {
            values: t.scale(-3.0),
            ..m.clone()
        };
        for metric in MetricId::ALL {
            assert!((compare(&m, &m, metric, &MetricConfig::default()).unwrap().value - 1.0).abs() < 1e-12);
        }
        assert!((compare(&m, &neg, MetricId::SpearmanAbs, &MetricConfig::default()).unwrap().value - 1.0).abs() < 1e-12);
        let big = SaliencyMap {
            values: t.scale(7.0),
            ..m.clone()
        };
        assert!((compare(&m, &big, MetricId::Ssim, &MetricConfig::default()).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in MetricId::ALL {
            assert_eq!(m.name().parse::<MetricId>().unwrap(), m);
        }
    }
}

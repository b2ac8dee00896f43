//! Labeled image datasets: IDX (MNIST / Fashion-MNIST) ingestion, a
//! synthetic shape generator for fast tests, and deterministic subsetting.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_CLASSES: usize = 10;

/// Images `[n, h, w]` with pixels in `[0, 1]` and labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 3 {
            return Err(Error::shape("dataset", format!("images must be [n, h, w], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassOutOfRange {
                class: l,
                num_classes,
            });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// Image `i` as a `[h, w]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.outer(i)
    }

    /// Image `i` reshaped to a model's input shape.
    pub fn input(&self, i: usize, input_shape: &[usize]) -> Result<Tensor> {
        self.image(i).reshape(input_shape)
    }

    /// Stacked inputs `[b, input_shape..]` and their labels.
    pub fn batch(&self, indices: &[usize], input_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (h, w) = self.image_size();
        let per = h * w;
        if input_shape.iter().product::<usize>() != per {
            return Err(Error::shape(
                "dataset batch",
                format!("{h}x{w} images cannot feed input shape {input_shape:?}"),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(input_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let (h, w) = self.image_size();
        let (batch, labels) = self.batch(indices, &[h, w]).expect("same geometry");
        LabeledDataset {
            images: batch,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(self.images.clone(), labels, self.num_classes)
    }

    /// Per-class item counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz") || raw.starts_with(&[0x1f, 0x8b]);
    if !gz {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::io(path, e))?;
    Ok(out)
}

/// Parses an IDX buffer, returning its dims and payload.
fn parse_idx<'a>(bytes: &'a [u8], expected_magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let word = |i: usize| -> Option<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    };
    let magic = word(0).ok_or_else(|| Error::PayloadMismatch {
        path: path.to_path_buf(),
        declared: 4,
        found: bytes.len(),
    })?;
    if magic != expected_magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: expected_magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 * (1 + ndims);
    let dims: Vec<usize> = (1..=ndims)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::PayloadMismatch {
            path: path.to_path_buf(),
            declared: header,
            found: bytes.len(),
        })?;
    let declared: usize = dims.iter().product();
    let found = bytes.len() - header;
    if declared != found {
        return Err(Error::PayloadMismatch {
            path: path.to_path_buf(),
            declared,
            found,
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an IDX image/label file pair, gzip-compressed or not.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = read_maybe_gz(images_path)?;
    let label_bytes = read_maybe_gz(labels_path)?;
    let (dims, pixels) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, images_path)?;
    let (ldims, labels) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, labels_path)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let images = Tensor::new(dims, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    LabeledDataset::new(images, labels.iter().map(|&l| usize::from(l)).collect(), IDX_CLASSES)
}

/// Loads `{prefix}-images-idx3-ubyte[.gz]` / `{prefix}-labels-idx1-ubyte[.gz]`
/// from `dir`, with `prefix` being `train` or `t10k`.
pub fn load_idx_dir(dir: &Path, prefix: &str) -> Result<LabeledDataset> {
    let pick = |kind: &str| {
        let plain = dir.join(format!("{prefix}-{kind}"));
        let gz = dir.join(format!("{prefix}-{kind}.gz"));
        if plain.exists() {
            plain
        } else {
            gz
        }
    };
    load_idx(&pick("images-idx3-ubyte"), &pick("labels-idx1-ubyte"))
}

/// Serializes a dataset as an IDX pair of byte buffers.
pub fn encode_idx(data: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if data.num_classes > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let (h, w) = data.image_size();
    let mut images = Vec::with_capacity(16 + data.images.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [data.len(), h, w] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(data.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Writes a dataset as IDX files; `.gz` paths are compressed.
pub fn write_idx(data: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(data)?;
    for (path, bytes) in [(images_path, images), (labels_path, labels)] {
        let out = if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?
        } else {
            bytes
        };
        fs::write(path, out).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Rectangle,
    Cross,
    Disk,
    Ring,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub side: usize,
    pub classes: Vec<ShapeClass>,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            side: 28,
            classes: vec![ShapeClass::Rectangle, ShapeClass::Cross, ShapeClass::Disk],
            per_class: 64,
            seed: 0,
        }
    }
}

/// Generates jittered shape images, one class per [`ShapeClass`], in a
/// seed-determined shuffled order.
pub fn synthesize(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.classes.len() < 2 || spec.side < 12 || spec.per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs >= 2 classes, side >= 12 and per_class >= 1".into(),
        ));
    }
    let side = spec.side;
    let total = spec.classes.len() * spec.per_class;
    let mut rng = rng::stream(spec.seed, "synthesize", 0);
    let order = rng::permutation(&mut rng, total);
    let mut data = vec![0.0; total * side * side];
    let mut labels = vec![0; total];
    for (slot, &item) in order.iter().enumerate() {
        let class = item / spec.per_class;
        labels[slot] = class;
        let img = &mut data[slot * side * side..(slot + 1) * side * side];
        draw_shape(spec.classes[class], side, &mut rng, img);
    }
    LabeledDataset::new(Tensor::new(vec![total, side, side], data)?, labels, spec.classes.len())
}

fn draw_shape(shape: ShapeClass, side: usize, rng: &mut impl Rng, img: &mut [f64]) {
    let s = side as f64;
    let jitter = s * 0.12;
    let cy = s / 2.0 + rng.random_range(-jitter..jitter);
    let cx = s / 2.0 + rng.random_range(-jitter..jitter);
    let radius = s * rng.random_range(0.22..0.3);
    let intensity = rng.random_range(0.7..1.0);
    let thick = (s * 0.06).max(1.0);
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let r = (x * x + y * y).sqrt();
            let on = match shape {
                ShapeClass::Rectangle => {
                    let (ax, ay) = (x.abs(), y.abs());
                    ax <= radius && ay <= radius * 0.7 && (ax >= radius - thick || ay >= radius * 0.7 - thick)
                }
                ShapeClass::Cross => (x.abs() <= thick && y.abs() <= radius) || (y.abs() <= thick && x.abs() <= radius),
                ShapeClass::Disk => r <= radius * 0.8,
                ShapeClass::Ring => r <= radius && r >= radius - 1.5 * thick,
                ShapeClass::Diagonal => (x - y).abs() <= thick * 1.2 && x.abs() <= radius && y.abs() <= radius,
            };
            if on {
                img[i * side + j] = intensity;
            }
        }
    }
}

/// A deterministic sample of `n` items. Stratified sampling allots each
/// class its proportional share (largest remainders), so class counts stay
/// within one item of proportional.
pub fn subset(data: &LabeledDataset, n: usize, seed: u64, stratified: bool) -> Result<LabeledDataset> {
    if n > data.len() {
        return Err(Error::Config(format!(
            "subset of {n} requested from {} items",
            data.len()
        )));
    }
    let mut rng = rng::stream(seed, "subset", 0);
    let perm = rng::permutation(&mut rng, data.len());
    if !stratified {
        return Ok(data.select(&perm[..n]));
    }
    let counts = data.class_counts();
    let total = data.len() as f64;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * n as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut remaining = n - quota.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..counts.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in by_remainder.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    let mut picked = Vec::with_capacity(n);
    for &i in &perm {
        let l = data.labels[i];
        if quota[l] > 0 {
            quota[l] -= 1;
            picked.push(i);
        }
    }
    let mix = rng::permutation(&mut rng, picked.len());
    let picked: Vec<usize> = mix.iter().map(|&k| picked[k]).collect();
    Ok(data.select(&picked))
}

/// Parses a binary 8-bit PGM (`P5`) into a `[h, w]` tensor in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |why: &str| Error::Config(format!("not a binary 8-bit PGM: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |f: &str| f.parse::<usize>().map_err(|_| bad("header field is not a number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("max value must be in 1..=255"));
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, payload.len())));
    }
    Tensor::new(vec![h, w], payload.iter().map(|&b| b as f64 / max as f64).collect())
}

const PHOTOS: [(&str, &[u8]); 8] = [
    ("astronaut", include_bytes!("../assets/photos/astronaut.pgm")),
    ("brick", include_bytes!("../assets/photos/brick.pgm")),
    ("camera", include_bytes!("../assets/photos/camera.pgm")),
    ("chelsea", include_bytes!("../assets/photos/chelsea.pgm")),
    ("coffee", include_bytes!("../assets/photos/coffee.pgm")),
    ("coins", include_bytes!("../assets/photos/coins.pgm")),
    ("moon", include_bytes!("../assets/photos/moon.pgm")),
    ("rocket", include_bytes!("../assets/photos/rocket.pgm")),
];

/// Eight bundled 64x64 grayscale photographs, pixels in `[0, 1]`.
pub fn bundled_photos() -> Vec<(&'static str, Tensor)> {
    PHOTOS
        .iter()
        .map(|(name, bytes)| (*name, parse_pgm(bytes).expect("bundled photos are valid PGM")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, image_bytes: &[u8], label_bytes: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (ip, lp) = (dir.join("img"), dir.join("lbl"));
        fs::write(&ip, image_bytes).unwrap();
        fs::write(&lp, label_bytes).unwrap();
        (ip, lp)
    }

    fn one_image() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 0, 255]);
        b
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &one_image(), &[0, 0, 8, 1, 0, 0, 0, 1, 7]);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.image(0).data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(d.image(0).shape(), &[2, 2]);
        assert_eq!(d.labels(), &[7]);
    }

    #[test]
    fn label_file_with_image_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &one_image(), &[0, 0, 8, 3, 0, 0, 0, 1, 7]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { found: 0x803, .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = one_image();
        img.pop();
        let (ip, lp) = fixture(dir.path(), &img, &[0, 0, 8, 1, 0, 0, 0, 1, 7]);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::PayloadMismatch { declared: 4, found: 3, .. })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &one_image(), &[0, 0, 8, 1, 0, 0, 0, 2, 7, 1]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { images: 1, labels: 2 })));
    }

    #[test]
    fn gzip_is_sniffed() {
        let dir = tempfile::tempdir().unwrap();
        let d = synthesize(&SyntheticSpec::default()).unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l.gz"));
        write_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn synthesize_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            per_class: 10,
            ..SyntheticSpec::default()
        };
        let a = synthesize(&spec).unwrap();
        assert_eq!(a, synthesize(&spec).unwrap());
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
    }

    #[test]
    fn subset_full_size_is_a_permutation() {
        let d = synthesize(&SyntheticSpec::default()).unwrap();
        let s = subset(&d, d.len(), 3, false).unwrap();
        assert_eq!(s.class_counts(), d.class_counts());
        assert_ne!(s.labels(), d.labels());
    }

    #[test]
    fn stratified_subset_one_per_class() {
        let spec = SyntheticSpec {
            classes: vec![
                ShapeClass::Rectangle,
                ShapeClass::Cross,
                ShapeClass::Disk,
                ShapeClass::Ring,
                ShapeClass::Diagonal,
            ],
            per_class: 6,
            ..SyntheticSpec::default()
        };
        let d = synthesize(&spec).unwrap();
        let s = subset(&d, 5, 1, true).unwrap();
        assert_eq!(s.class_counts(), vec![1; 5]);
        assert_eq!(s, subset(&d, 5, 1, true).unwrap());
        assert!(subset(&d, 31, 1, true).is_err());
    }

    #[test]
    fn bundled_photos_parse() {
        let photos = bundled_photos();
        assert_eq!(photos.len(), 8);
        for (name, p) in &photos {
            assert_eq!(p.shape(), &[64, 64], "{name}");
            assert!(p.max() > p.min(), "{name} is flat");
        }
        let t = parse_pgm(b"P5\n# c\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert!(parse_pgm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}

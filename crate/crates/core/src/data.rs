//! Datasets: synthetic four-class moons, IDX ingestion, the `MLFX` feature
//! matrix container, standardization and CSV export.
//!
//! `MLFX` layout (little-endian):
//!
//! ```text
//! b"MLFX" | version: u32 | rows: u64 | cols: u64 | has_labels: u8
//! features: rows*cols f32, row-major
//! labels:   rows u32 (only when has_labels == 1)
//! ```

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MLFX";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const MIN_STD: f64 = 1e-12;

/// Per-dimension standardization statistics from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation per column; std floored at 1e-12.
    pub fn fit(features: &Tensor<f32>) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 {
            return Err(Error::InsufficientData("cannot normalize with an empty training set".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(features.row_slice(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(features.row_slice(i)).zip(&mean) {
                let c = v as f64 - m;
                *s += c * c;
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &mut Tensor<f32>) -> Result<()> {
        if features.cols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "stats cover {} dimensions, data has {}",
                self.mean.len(),
                features.cols()
            )));
        }
        for i in 0..features.rows() {
            for ((v, m), s) in features.row_slice_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(())
    }

    /// One `mean std` pair per line.
    pub fn to_text(&self) -> String {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| format!("{m:e} {s:e}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(m)), Some(Ok(s)), None) => {
                    mean.push(m);
                    std.push(s);
                }
                _ => return Err(Error::Format(format!("bad normalization line {}: {line:?}", i + 1))),
            }
        }
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor<f32>,
    /// Absent for unlabeled (e.g. OOD) sets.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub norm: Option<NormStats>,
}

impl LabeledDataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels: Some(labels),
            num_classes,
            norm: None,
        })
    }

    pub fn unlabeled(features: Tensor<f32>) -> Self {
        Self {
            features,
            labels: None,
            num_classes: 0,
            norm: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Usage("dataset has no labels".into()))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            norm: self.norm.clone(),
        }
    }

    /// First `n` rows (all rows when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Class counts; empty without labels.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in self.labels.as_deref().unwrap_or(&[]) {
            counts[l] += 1;
        }
        counts
    }

    /// CSV with header `f0,...,f{d-1}[,label]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        out.push_str(&header.join(","));
        if self.labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> = self.features.row_slice(i).iter().map(f32::to_string).collect();
            out.push_str(&row.join(","));
            if let Some(l) = &self.labels {
                out.push_str(&format!(",{}", l[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Standardizes `train` in place with its own statistics and applies the
/// same statistics to every set in `others`.
pub fn normalize(train: &mut LabeledDataset, others: &mut [&mut LabeledDataset]) -> Result<NormStats> {
    let stats = NormStats::fit(&train.features)?;
    stats.apply(&mut train.features)?;
    train.norm = Some(stats.clone());
    for o in others.iter_mut() {
        stats.apply(&mut o.features)?;
        o.norm = Some(stats.clone());
    }
    Ok(stats)
}

/// Four-class moons: the standard two interleaving half circles (classes 0
/// and 1) plus a translated copy (classes 2 and 3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moons4 {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub offset: (f64, f64),
    pub seed: u64,
}

impl Default for Moons4 {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 500,
            noise: 0.2,
            offset: (2.0, 2.0),
            seed: 0,
        }
    }
}

impl Moons4 {
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        for (name, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n % 4 != 0 {
                return Err(Error::Usage(format!("{name} = {n} is not divisible by 4")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Usage(format!("noise must be >= 0, got {}", self.noise)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let train = self.split(self.n_train / 4, &mut rng)?;
        let test = self.split(self.n_test / 4, &mut rng)?;
        Ok((train, test))
    }

    fn split(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Usage(e.to_string()))?;
        let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(per_class * 4);
        for class in 0..4 {
            let shift = if class >= 2 { self.offset } else { (0.0, 0.0) };
            for i in 0..per_class {
                let t = if per_class > 1 {
                    PI * i as f64 / (per_class - 1) as f64
                } else {
                    0.0
                };
                let (x, y) = if class % 2 == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 1.0 - t.sin() - 0.5)
                };
                let (nx, ny) = if self.noise > 0.0 {
                    (noise.sample(rng), noise.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                rows.push(([x + shift.0 + nx, y + shift.1 + ny], class));
            }
        }
        rows.shuffle(rng);
        let features = rows.iter().flat_map(|(p, _)| p.map(|v| v as f32)).collect();
        let labels = rows.iter().map(|(_, c)| *c).collect();
        LabeledDataset::new(Tensor::from_vec(rows.len(), 2, features)?, labels, 4)
    }
}

/// Uniform samples from the planar annulus `r_min ≤ ‖x‖ ≤ r_max`.
pub fn uniform_ring(n: usize, r_min: f64, r_max: f64, seed: u64) -> LabeledDataset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        // area-uniform radius
        let u: f64 = rng.gen();
        let r = (r_min * r_min + u * (r_max * r_max - r_min * r_min)).sqrt();
        let theta: f64 = rng.gen_range(0.0..2.0 * PI);
        data.push((r * theta.cos()) as f32);
        data.push((r * theta.sin()) as f32);
    }
    LabeledDataset::unlabeled(Tensor::from_vec(n, 2, data).expect("shape"))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image buffer into one flattened row per image, pixels
/// scaled to `[0, 1]`.
pub fn parse_idx_images(images: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image file magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() != count * pixels {
        return Err(Error::Format(format!(
            "image payload has {} bytes, header promises {}",
            body.len(),
            count * pixels
        )));
    }
    Tensor::from_vec(count, pixels, body.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Parses IDX image and label buffers; pixels scale to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let features = parse_idx_images(images)?;
    let count = features.rows();
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label file magic {magic:#010x}")));
    }
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    let lbody = &labels[8..];
    if lbody.len() != n_labels {
        return Err(Error::Format(format!(
            "label payload has {} bytes, header promises {n_labels}",
            lbody.len()
        )));
    }
    if n_labels != count {
        return Err(Error::Format(format!("{count} images but {n_labels} labels")));
    }
    let labels: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledDataset::new(features, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Loads a feature-matrix file or, by magic, an IDX image file with
/// optional IDX labels.
pub fn load_dataset(path: &Path, idx_labels: Option<&Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(FEATURE_MAGIC) {
        if idx_labels.is_some() {
            return Err(Error::Usage(format!("{}: feature files carry their own labels", path.display())));
        }
        return decode_feature_matrix(&bytes);
    }
    match idx_labels {
        Some(l) => parse_idx(&bytes, &std::fs::read(l)?),
        None => Ok(LabeledDataset::unlabeled(parse_idx_images(&bytes)?)),
    }
}

pub fn encode_feature_matrix(ds: &LabeledDataset) -> Vec<u8> {
    let (rows, cols) = ds.features.shape();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + rows * cols * 4 + rows * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.push(ds.labels.is_some() as u8);
    for v in ds.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

pub fn decode_feature_matrix(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::Format("feature file shorter than its header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("feature file magic mismatch".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let has_labels = match bytes[24] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad label flag {f}"))),
    };
    let n_feat = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("feature header overflows".into()))?;
    let expected = FEATURE_HEADER_LEN + n_feat * 4 + if has_labels { rows * 4 } else { 0 };
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[FEATURE_HEADER_LEN..];
    let features = body[..n_feat * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Tensor::from_vec(rows, cols, features)?;
    if !has_labels {
        return Ok(LabeledDataset::unlabeled(features));
    }
    let labels: Vec<usize> = body[n_feat * 4..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, labels, classes)
}

pub fn save_feature_matrix(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_feature_matrix(ds))?;
    Ok(())
}

pub fn load_feature_matrix(path: &Path) -> Result<LabeledDataset> {
    decode_feature_matrix(&std::fs::read(path)?)
}

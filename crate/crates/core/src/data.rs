//! Synthetic domain-shift benchmarks and the on-disk formats.
//!
//! Embedding files (`.pouf`) are a 28-byte little-endian header followed by a
//! row-major `f32` payload:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"POUF"`            |
//! | 4      | 4    | version, `u32` = 1         |
//! | 8      | 8    | row count, `u64`           |
//! | 16     | 8    | dimension, `u64`           |
//! | 24     | 4    | dtype code, `u32` = 1 (f32)|
//!
//! Label files hold one integer per line, `-1` meaning unlabeled.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"POUF";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Pairwise cosine bound for sampled class means.
const MAX_MEAN_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Defaults to uniform when absent.
    pub class_proportions: Option<Vec<f64>>,
    /// Per-coordinate standard deviation of features around their class mean.
    pub cluster_spread: f64,
    /// Angle (radians) by which every prototype is rotated away from its mean.
    pub rotation_angle_scale: f64,
    /// Norm of the bias vector shared by all prototypes.
    pub bias_scale: f64,
    /// Per-coordinate standard deviation of independent prototype noise.
    pub proto_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            samples: 2000,
            class_proportions: None,
            cluster_spread: 0.35,
            rotation_angle_scale: 0.75,
            bias_scale: 0.4,
            proto_noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(Error::invalid("classes and dim must be positive"));
        }
        if self.classes > self.samples {
            return Err(Error::invalid(format!(
                "need at least as many samples ({}) as classes ({})",
                self.samples, self.classes
            )));
        }
        if let Some(p) = &self.class_proportions {
            if p.len() != self.classes {
                return Err(Error::invalid(format!("{} class proportions for {} classes", p.len(), self.classes)));
            }
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid("class proportions must be non-negative"));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("class proportions sum to {s}, not 1")));
            }
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("rotation_angle_scale", self.rotation_angle_scale),
            ("bias_scale", self.bias_scale),
            ("proto_noise", self.proto_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.class_proportions.clone().unwrap_or_else(|| vec![1.0 / self.classes as f64; self.classes])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// K×d, shifted away from the class means.
    pub prototypes: Tensor,
    /// M×d, unnormalized.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, sigma: f64) -> Vec<f64> {
    (0..d).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d, 1.0);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Random orthonormal basis by Gram-Schmidt on Gaussian vectors.
fn random_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Rotation by `angle` inside each of the planes spanned by consecutive basis
/// pairs. With an even dimension every vector turns by exactly `angle`.
fn rotate(x: &[f64], basis: &[Vec<f64>], angle: f64) -> Vec<f64> {
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = x.to_vec();
    for pair in basis.chunks_exact(2) {
        let (u, v) = (&pair[0], &pair[1]);
        let (a, b) = (dot(x, u), dot(x, v));
        let (na, nb) = (c * a - s * b, s * a + c * b);
        for i in 0..x.len() {
            out[i] += (na - a) * u[i] + (nb - b) * v[i];
        }
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (k, d, m) = (spec.classes, spec.dim, spec.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let budget = 10 * k * 100;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut tries = 0;
    while means.len() < k {
        if tries >= budget {
            return Err(Error::invalid(format!(
                "could not place {k} class means in {d} dimensions with pairwise cosine < {MAX_MEAN_COSINE}"
            )));
        }
        tries += 1;
        let cand = unit_vec(&mut rng, d);
        if means.iter().all(|mu| dot(mu, &cand) < MAX_MEAN_COSINE) {
            means.push(cand);
        }
    }

    let basis = random_basis(&mut rng, d);
    let bias: Vec<f64> = unit_vec(&mut rng, d).into_iter().map(|x| x * spec.bias_scale).collect();
    let mut prototypes = Vec::with_capacity(k * d);
    for mu in &means {
        let rotated = rotate(mu, &basis, spec.rotation_angle_scale);
        let noise = gaussian_vec(&mut rng, d, spec.proto_noise);
        prototypes.extend(rotated.iter().zip(&bias).zip(&noise).map(|((r, b), n)| r + b + n));
    }

    let weights =
        WeightedIndex::new(spec.proportions()).map_err(|e| Error::invalid(format!("class proportions: {e}")))?;
    let mut labels = Vec::with_capacity(m);
    let mut features = Vec::with_capacity(m * d);
    for _ in 0..m {
        let y = weights.sample(&mut rng);
        labels.push(y);
        let noise = gaussian_vec(&mut rng, d, spec.cluster_spread);
        features.extend(means[y].iter().zip(&noise).map(|(a, b)| a + b));
    }

    Ok(SyntheticData {
        prototypes: Tensor::new(vec![k, d], prototypes)?,
        features: Tensor::new(vec![m, d], features)?,
        labels,
    })
}

pub fn encode_embeddings(matrix: &Tensor) -> Result<Vec<u8>> {
    if matrix.rank() != 2 {
        return Err(Error::invalid(format!("embedding files hold matrices, got shape {:?}", matrix.shape())));
    }
    if !matrix.is_finite() {
        return Err(Error::invalid("refusing to write non-finite embeddings"));
    }
    let (rows, cols) = matrix.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in matrix.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fmt_err = |offset: usize, kind: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, kind };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(fmt_err(0, "bad magic, expected \"POUF\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), format!("header truncated, need {HEADER_LEN} bytes")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let (count, dim) = (u64_at(8), u64_at(16));
    let dtype = u32_at(24);
    if dtype != DTYPE_F32 {
        return Err(fmt_err(24, format!("unsupported dtype code {dtype}")));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt_err(8, format!("count {count} × dim {dim} overflows")))?;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if actual < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, actual });
    }
    if actual > expected {
        return Err(fmt_err(HEADER_LEN + expected as usize, format!("{} trailing bytes", actual - expected)));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::new(vec![count as usize, dim as usize], data)
}

pub fn write_embeddings(path: impl AsRef<Path>, matrix: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(matrix)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<i64>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.trim().parse::<i64>().map_err(|_| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected an integer label, found {line:?}"),
            })
        })
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[i64]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_class_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_class_names(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = names.join("\n");
    if !names.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// File names inside a dataset directory.
pub const PROTOTYPES_FILE: &str = "prototypes.pouf";
pub const FEATURES_FILE: &str = "features.pouf";
pub const LABELS_FILE: &str = "labels.txt";
pub const CLASSES_FILE: &str = "classes.txt";

/// A dataset directory: raw prototypes and features, optional labels and
/// class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub prototypes: Tensor,
    pub features: Tensor,
    pub labels: Option<Vec<i64>>,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// Class indices when every sample is labeled.
    pub fn class_labels(&self) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        labels.iter().map(|&y| usize::try_from(y).ok().filter(|&c| c < self.classes())).collect()
    }
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prototypes = read_embeddings(dir.join(PROTOTYPES_FILE))?;
    let features = read_embeddings(dir.join(FEATURES_FILE))?;
    if prototypes.cols() != features.cols() {
        return Err(Error::invalid(format!(
            "prototype dim {} differs from feature dim {}",
            prototypes.cols(),
            features.cols()
        )));
    }
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        let labels = read_labels(&labels_path)?;
        if labels.len() != features.rows() {
            return Err(Error::invalid(format!(
                "{} has {} labels for {} features",
                labels_path.display(),
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y < -1 || y >= prototypes.rows() as i64) {
            return Err(Error::invalid(format!("{}: label {bad} out of range", labels_path.display())));
        }
        Some(labels)
    } else {
        None
    };
    let classes_path = dir.join(CLASSES_FILE);
    let class_names = if classes_path.exists() {
        let names = read_class_names(&classes_path)?;
        if names.len() != prototypes.rows() {
            return Err(Error::invalid(format!(
                "{} lists {} names for {} prototypes",
                classes_path.display(),
                names.len(),
                prototypes.rows()
            )));
        }
        Some(names)
    } else {
        None
    };
    Ok(Dataset { prototypes, features, labels, class_names })
}

/// Writes every present part of the dataset; returns the paths written.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = vec![dir.join(PROTOTYPES_FILE), dir.join(FEATURES_FILE)];
    write_embeddings(&written[0], &data.prototypes)?;
    write_embeddings(&written[1], &data.features)?;
    if let Some(labels) = &data.labels {
        let p = dir.join(LABELS_FILE);
        write_labels(&p, labels)?;
        written.push(p);
    }
    if let Some(names) = &data.class_names {
        let p = dir.join(CLASSES_FILE);
        write_class_names(&p, names)?;
        written.push(p);
    }
    Ok(written)
}

impl From<SyntheticData> for Dataset {
    fn from(d: SyntheticData) -> Self {
        let k = d.prototypes.rows();
        Dataset {
            prototypes: d.prototypes,
            features: d.features,
            labels: Some(d.labels.iter().map(|&y| y as i64).collect()),
            class_names: Some((0..k).map(|c| format!("class_{c}")).collect()),
        }
    }
}

pub const ADAPTER_FILE: &str = "adapter.pouf";
pub const OFFSETS_FILE: &str = "prototype_offsets.pouf";
pub const TEMPERATURE_FILE: &str = "log_temperature.pouf";

/// Stores the three parameter tensors as embedding files; the log
/// temperature becomes a 1×1 matrix.
pub fn write_params(dir: impl AsRef<Path>, params: &ModelParams) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = vec![dir.join(ADAPTER_FILE), dir.join(OFFSETS_FILE), dir.join(TEMPERATURE_FILE)];
    write_embeddings(&paths[0], &params.adapter)?;
    write_embeddings(&paths[1], &params.proto_offsets)?;
    write_embeddings(&paths[2], &Tensor::new(vec![1, 1], vec![params.log_temperature])?)?;
    Ok(paths)
}

pub fn read_params(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let adapter = read_embeddings(dir.join(ADAPTER_FILE))?;
    let proto_offsets = read_embeddings(dir.join(OFFSETS_FILE))?;
    let t = read_embeddings(dir.join(TEMPERATURE_FILE))?;
    if adapter.rows() != adapter.cols() {
        return Err(Error::invalid(format!("adapter must be square, got {:?}", adapter.shape())));
    }
    if proto_offsets.cols() != adapter.cols() {
        return Err(Error::invalid("prototype offsets and adapter disagree on dimension"));
    }
    if t.len() != 1 {
        return Err(Error::invalid(format!("log temperature must be 1×1, got {:?}", t.shape())));
    }
    Ok(ModelParams { adapter, proto_offsets, log_temperature: t.data()[0] })
}

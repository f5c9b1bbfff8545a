//! Accuracy metrics and the data behind the diagnostic figures.
//!
//! Ties always resolve to the lowest index, both for argmax predictions and
//! for neighbor ranking.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{effective_prototypes, encode, predict_raw, FeatureBatch, ModelParams, Prototypes};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    /// Mean cosine between each feature and its true class prototype.
    pub mean_correct_cosine: Option<f64>,
}

/// Row-wise argmax; the first maximal entry wins.
pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!("{} labels for {rows} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Converts a label file (where −1 marks unlabeled) into class indices,
/// failing if any sample is unlabeled or out of range.
pub fn labels_to_classes(labels: &[i64], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            usize::try_from(y)
                .ok()
                .filter(|&c| c < classes)
                .ok_or_else(|| Error::invalid(format!("sample {i}: label {y} is not a class in [0, {classes})")))
        })
        .collect()
}

pub fn evaluate(probs: &Tensor, labels: &[usize]) -> Result<EvalResult> {
    if probs.rank() != 2 {
        return Err(Error::invalid("probabilities must be a matrix"));
    }
    let k = probs.cols();
    check_labels(labels, probs.rows(), k)?;
    let pred = argmax_rows(probs);
    let mut confusion = vec![vec![0u64; k]; k];
    for (&y, &p) in labels.iter().zip(&pred) {
        confusion[y][p] += 1;
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let total = labels.len() as u64;
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(EvalResult {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_class_accuracy,
        confusion,
        mean_correct_cosine: None,
    })
}

/// `cos(f_i, w_{y_i})` for every sample.
pub fn correct_cosines(features: &FeatureBatch, prototypes: &Prototypes, labels: &[usize]) -> Result<Vec<f64>> {
    let (f, w) = (features.matrix(), prototypes.matrix());
    if f.cols() != w.cols() {
        return Err(Error::invalid("feature and prototype dimensions differ"));
    }
    check_labels(labels, f.rows(), w.rows())?;
    Ok(labels.iter().enumerate().map(|(i, &y)| f.row(i).iter().zip(w.row(y)).map(|(a, b)| a * b).sum()).collect())
}

pub fn mean_correct_cosine(features: &FeatureBatch, prototypes: &Prototypes, labels: &[usize]) -> Result<f64> {
    let c = correct_cosines(features, prototypes, labels)?;
    Ok(c.iter().sum::<f64>() / c.len().max(1) as f64)
}

/// Full evaluation of a parameter set on raw inputs.
pub fn evaluate_model(
    raw_features: &Tensor,
    raw_prototypes: &Tensor,
    params: &ModelParams,
    labels: &[usize],
) -> Result<EvalResult> {
    let probs = predict_raw(raw_features, raw_prototypes, params)?;
    let mut result = evaluate(&probs, labels)?;
    let f = encode(raw_features, params)?;
    let w = effective_prototypes(raw_prototypes, params)?;
    result.mean_correct_cosine = Some(mean_correct_cosine(&f, &w, labels)?);
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from −1 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Two columns: left edge of each bin and its count.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["edge", "count"])?;
        for (edge, count) in self.edges.iter().zip(&self.counts) {
            w.write_record([edge.to_string(), count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

fn linear_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect()
}

/// Bins are right-closed `(e_i, e_{i+1}]` except the first, which includes
/// −1. Values outside [−1, 1] (rounding) are clamped into the end bins.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let edges = linear_edges(bins);
    let mut counts = vec![0u64; bins];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value in histogram input"));
        }
        let pos = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).ceil() as usize;
        counts[pos.clamp(1, bins) - 1] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn cosine_histogram(
    features: &FeatureBatch,
    prototypes: &Prototypes,
    labels: &[usize],
    bins: usize,
) -> Result<Histogram> {
    histogram(&correct_cosines(features, prototypes, labels)?, bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    /// `indices[k][r]` is the feature at rank `r` for prototype `k`.
    pub indices: Vec<Vec<usize>>,
    pub cosines: Vec<Vec<f64>>,
}

impl Neighbors {
    pub fn write_csv(&self, path: impl AsRef<Path>, feature_ids: Option<&[usize]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["prototype_id", "rank", "feature_id", "cosine"])?;
        for (k, (idx, cos)) in self.indices.iter().zip(&self.cosines).enumerate() {
            for (rank, (&i, &c)) in idx.iter().zip(cos).enumerate() {
                let id = feature_ids.map_or(i, |ids| ids[i]);
                w.write_record([k.to_string(), rank.to_string(), id.to_string(), c.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

pub fn knn_of_prototypes(features: &FeatureBatch, prototypes: &Prototypes, k: usize) -> Result<Neighbors> {
    let (f, w) = (features.matrix(), prototypes.matrix());
    if k > f.rows() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} available features", f.rows())));
    }
    if f.cols() != w.cols() {
        return Err(Error::invalid("feature and prototype dimensions differ"));
    }
    let sim = matmul(w, &f.transpose());
    let mut indices = Vec::with_capacity(w.rows());
    let mut cosines = Vec::with_capacity(w.rows());
    for p in 0..w.rows() {
        let row = sim.row(p);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        cosines.push(order.iter().map(|&i| row[i]).collect());
        indices.push(order);
    }
    Ok(Neighbors { indices, cosines })
}

/// Projection of the rows of `m` onto its top two principal directions.
///
/// Directions come from deflated power iteration on the covariance with a
/// fixed start vector; each is sign-normalized so its largest-magnitude
/// coordinate is positive.
pub fn pca_2d(m: &Tensor) -> Result<Tensor> {
    let (n, d) = m.dims();
    if m.rank() != 2 || n == 0 || d == 0 {
        return Err(Error::invalid("projection needs a non-empty matrix"));
    }
    let mut centered = m.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| m.at(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            centered.set(i, j, m.at(i, j) - mean);
        }
    }
    let mut cov = matmul(&centered.transpose(), &centered);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for comp in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((j + comp) % 7) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut next: Vec<f64> = (0..d).map(|i| cov.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            next.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-12 {
                break;
            }
        }
        let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                let val = cov.at(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, val);
            }
        }
        dirs.push(v);
    }
    while dirs.len() < 2 {
        dirs.push(vec![0.0; d]);
    }
    let mut out = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        for (c, dir) in dirs.iter().enumerate() {
            out.set(i, c, centered.row(i).iter().zip(dir).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// Columns `id,x,y,label`; label is −1 when unknown.
pub fn write_pca_csv(path: impl AsRef<Path>, coords: &Tensor, labels: Option<&[i64]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["id", "x", "y", "label"])?;
    for i in 0..coords.rows() {
        let label = labels.map_or(-1, |l| l[i]);
        w.write_record([i.to_string(), coords.at(i, 0).to_string(), coords.at(i, 1).to_string(), label.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn write_metrics_json(path: impl AsRef<Path>, result: &EvalResult) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, result)?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let probs = m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let r = evaluate(&probs, &[0, 1, 0]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![0, 1]]);
    }

    #[test]
    fn ties_predict_lowest_class() {
        let probs = m(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(evaluate(&probs, &[0, 0]).unwrap().accuracy, 1.0);
    }

    #[test]
    fn three_of_four() {
        let probs = m(&[vec![0.9, 0.1, 0.0], vec![0.2, 0.7, 0.1], vec![0.1, 0.1, 0.8], vec![0.6, 0.3, 0.1]]);
        let r = evaluate(&probs, &[0, 1, 2, 1]).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![1, 1, 0], vec![0, 0, 1]]);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.5), Some(1.0)]);
        assert!(evaluate(&probs, &[0, 1]).is_err());
        assert!(evaluate(&probs, &[0, 1, 3, 0]).is_err());
    }

    #[test]
    fn histogram_edges_and_counts() {
        let h = histogram(&[0.0, 1.0], 2).unwrap();
        assert_eq!(h.edges, vec![-1.0, 0.0, 1.0]);
        // An edge value belongs to the bin it closes.
        assert_eq!(h.counts, vec![1, 1]);
        let h = histogram(&[-1.0, -0.5, 1.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        let h = histogram(&[-1.0, -0.3, 0.2, 0.99, 1.0], 4).unwrap();
        assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert!(histogram(&[0.0], 0).is_err());
    }

    #[test]
    fn label_conversion() {
        assert_eq!(labels_to_classes(&[0, 2, 1], 3).unwrap(), vec![0, 2, 1]);
        assert!(labels_to_classes(&[0, -1], 3).is_err());
        assert!(labels_to_classes(&[3], 3).is_err());
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.01 * (i % 3) as f64, 0.0]).collect();
        let p = pca_2d(&m(&rows)).unwrap();
        assert_eq!(p.shape(), &[20, 2]);
        assert!((p.at(19, 0) - p.at(0, 0) - 19.0).abs() < 1e-6);
    }
}

//! Prototype construction, feature encoding and the cosine-softmax head.
//!
//! The encoder is a toy stand-in: a linear adapter on precomputed features
//! followed by L2 normalization. Prototype offsets play the role of soft
//! prompts, and the temperature is learned through its logarithm so it stays
//! positive.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bindings, GradError, Graph, NodeId, NORM_EPS};
use crate::tensor::{matmul, Tensor};

pub const ADAPTER: &str = "adapter";
pub const PROTOTYPE_OFFSETS: &str = "prototype_offsets";
pub const LOG_TEMPERATURE: &str = "log_temperature";

const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeSource {
    PromptEmbeddingsFile,
    DecoderRows,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    matrix: Tensor,
    pub source: PrototypeSource,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    matrix: Tensor,
    pub ids: Vec<usize>,
}

fn check_unit_rows(m: &Tensor) -> Result<()> {
    if m.rank() != 2 || m.rows() == 0 {
        return Err(Error::invalid(format!("expected a non-empty matrix, got shape {:?}", m.shape())));
    }
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// L2-normalizes each row, rejecting rows with (near) zero norm.
pub fn normalize_rows(m: &Tensor) -> Result<Tensor> {
    let mut out = m.clone();
    let c = m.cols();
    for (r, row) in out.data_mut().chunks_mut(c.max(1)).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= NORM_EPS) {
            return Err(Error::invalid(format!("row {r} has zero norm and cannot be normalized")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

impl Prototypes {
    pub fn from_normalized(matrix: Tensor) -> Result<Self> {
        check_unit_rows(&matrix)?;
        let class_names = (0..matrix.rows()).map(|k| format!("class_{k}")).collect();
        Ok(Self { matrix, source: PrototypeSource::Synthetic, class_names })
    }

    pub fn normalize(raw: &Tensor, source: PrototypeSource) -> Result<Self> {
        let mut p = Self::from_normalized(normalize_rows(raw)?)?;
        p.source = source;
        Ok(p)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.matrix.rows() {
            return Err(Error::invalid(format!("{} class names for {} prototypes", names.len(), self.matrix.rows())));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }
}

impl FeatureBatch {
    pub fn from_normalized(matrix: Tensor) -> Result<Self> {
        check_unit_rows(&matrix)?;
        let ids = (0..matrix.rows()).collect();
        Ok(Self { matrix, ids })
    }

    pub fn with_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.matrix.rows() {
            return Err(Error::invalid(format!("{} ids for {} rows", ids.len(), self.matrix.rows())));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Adapter, prototype offsets and temperature.
    #[default]
    ModelTuning,
    /// Prototype offsets and temperature only.
    PromptTuning,
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model-tuning" => Ok(TuningMode::ModelTuning),
            "prompt-tuning" => Ok(TuningMode::PromptTuning),
            other => Err(Error::invalid(format!("unknown tuning mode `{other}`"))),
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuningMode::ModelTuning => "model-tuning",
            TuningMode::PromptTuning => "prompt-tuning",
        })
    }
}

pub fn trainable_set(mode: TuningMode) -> BTreeSet<&'static str> {
    match mode {
        TuningMode::ModelTuning => [ADAPTER, PROTOTYPE_OFFSETS, LOG_TEMPERATURE].into(),
        TuningMode::PromptTuning => [PROTOTYPE_OFFSETS, LOG_TEMPERATURE].into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// d×d, applied as `features · adapterᵀ`.
    pub adapter: Tensor,
    /// K×d additive offsets on the raw prototypes.
    pub proto_offsets: Tensor,
    pub log_temperature: f64,
}

impl ModelParams {
    /// Zero-shot initialization: identity adapter, zero offsets.
    pub fn init(dim: usize, classes: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            adapter: Tensor::identity(dim),
            proto_offsets: Tensor::zeros(&[classes, dim]),
            log_temperature: temperature.ln(),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn dim(&self) -> usize {
        self.adapter.rows()
    }

    pub fn classes(&self) -> usize {
        self.proto_offsets.rows()
    }

    pub fn trainable_count(&self, mode: TuningMode) -> usize {
        trainable_set(mode)
            .into_iter()
            .map(|name| match name {
                ADAPTER => self.adapter.len(),
                PROTOTYPE_OFFSETS => self.proto_offsets.len(),
                _ => 1,
            })
            .sum()
    }

    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        b.insert(ADAPTER.into(), self.adapter.clone());
        b.insert(PROTOTYPE_OFFSETS.into(), self.proto_offsets.clone());
        b.insert(LOG_TEMPERATURE.into(), Tensor::scalar(self.log_temperature));
        b
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        match name {
            ADAPTER => Some(self.adapter.clone()),
            PROTOTYPE_OFFSETS => Some(self.proto_offsets.clone()),
            LOG_TEMPERATURE => Some(Tensor::scalar(self.log_temperature)),
            _ => None,
        }
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        match name {
            ADAPTER => Some(self.adapter.data_mut()),
            PROTOTYPE_OFFSETS => Some(self.proto_offsets.data_mut()),
            LOG_TEMPERATURE => Some(std::slice::from_mut(&mut self.log_temperature)),
            _ => None,
        }
    }

    pub fn check_compatible(&self, raw_features: &Tensor, raw_prototypes: &Tensor) -> Result<()> {
        let d = self.dim();
        if self.adapter.shape() != [d, d] {
            return Err(Error::invalid(format!("adapter must be square, got {:?}", self.adapter.shape())));
        }
        if raw_features.rank() != 2 || raw_features.cols() != d {
            return Err(Error::invalid(format!(
                "features have shape {:?}, adapter expects dim {d}",
                raw_features.shape()
            )));
        }
        if raw_prototypes.rank() != 2 || raw_prototypes.shape() != self.proto_offsets.shape() {
            return Err(Error::invalid(format!(
                "prototypes have shape {:?}, offsets have {:?}",
                raw_prototypes.shape(),
                self.proto_offsets.shape()
            )));
        }
        Ok(())
    }
}

/// `normalize(raw · Aᵀ)`
pub fn encode(raw_features: &Tensor, params: &ModelParams) -> Result<FeatureBatch> {
    if raw_features.rank() != 2 || raw_features.cols() != params.dim() {
        return Err(Error::invalid(format!(
            "features have shape {:?}, adapter expects dim {}",
            raw_features.shape(),
            params.dim()
        )));
    }
    let projected = matmul(raw_features, &params.adapter.transpose());
    FeatureBatch::from_normalized(normalize_rows(&projected)?)
}

/// `normalize(raw + Δ)`
pub fn effective_prototypes(raw_prototypes: &Tensor, params: &ModelParams) -> Result<Prototypes> {
    if raw_prototypes.shape() != params.proto_offsets.shape() {
        return Err(Error::invalid(format!(
            "prototypes have shape {:?}, offsets have {:?}",
            raw_prototypes.shape(),
            params.proto_offsets.shape()
        )));
    }
    let shifted = Tensor::new(
        raw_prototypes.shape().to_vec(),
        raw_prototypes.data().iter().zip(params.proto_offsets.data()).map(|(a, b)| a + b).collect(),
    )?;
    Prototypes::normalize(&shifted, PrototypeSource::Synthetic)
}

/// Row-wise softmax of `cos(f_i, w_k) / T`.
pub fn predict(features: &FeatureBatch, prototypes: &Prototypes, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let sim = crate::losses::similarity(features, prototypes)?;
    let (m, k) = sim.values.dims();
    let mut out = Tensor::zeros(&[m, k]);
    for i in 0..m {
        let row = sim.values.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|s| ((s - max) / temperature).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out.set(i, c, e / total);
        }
    }
    Ok(out)
}

/// Encodes, shifts prototypes and predicts in one call.
pub fn predict_raw(raw_features: &Tensor, raw_prototypes: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let f = encode(raw_features, params)?;
    let w = effective_prototypes(raw_prototypes, params)?;
    predict(&f, &w, params.temperature())
}

/// Class index → vocabulary row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelWordMap {
    rows: Vec<usize>,
}

impl LabelWordMap {
    pub fn new(rows: Vec<usize>) -> Result<Self> {
        let unique: BTreeSet<_> = rows.iter().collect();
        if unique.len() != rows.len() {
            return Err(Error::invalid("label-word map must be injective"));
        }
        if rows.is_empty() {
            return Err(Error::invalid("label-word map is empty"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
}

/// Gathers the mapped decoder rows as class prototypes.
pub fn select_decoder_rows(vocab: &Tensor, map: &LabelWordMap) -> Result<Prototypes> {
    if vocab.rank() != 2 {
        return Err(Error::invalid("vocabulary must be a matrix"));
    }
    if let Some(r) = map.rows().iter().find(|&&r| r >= vocab.rows()) {
        return Err(Error::invalid(format!("vocabulary row {r} out of bounds ({} rows)", vocab.rows())));
    }
    Prototypes::normalize(&vocab.select_rows(map.rows()), PrototypeSource::DecoderRows)
}

/// Node handles for the differentiable forward pipeline.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub adapter: NodeId,
    pub proto_offsets: NodeId,
    pub log_temperature: NodeId,
    pub features: NodeId,
    pub prototypes: NodeId,
    /// M×K cosine similarities.
    pub similarity: NodeId,
    /// Holds `1/T`.
    pub inv_temperature: NodeId,
    /// M×K row-stochastic predictions.
    pub probs: NodeId,
}

/// Declares the three model parameters and builds
/// encode → effective prototypes → similarity → predict.
pub fn build_forward(g: &mut Graph, raw_features: &Tensor, raw_prototypes: &Tensor) -> Result<ForwardNodes, GradError> {
    let d = raw_features.cols();
    let k = raw_prototypes.rows();
    let adapter = g.parameter(ADAPTER, &[d, d])?;
    let proto_offsets = g.parameter(PROTOTYPE_OFFSETS, &[k, raw_prototypes.cols()])?;
    let log_temperature = g.parameter(LOG_TEMPERATURE, &[])?;

    let x = g.constant(raw_features.clone());
    let at = g.transpose(adapter)?;
    let projected = g.matmul(x, at)?;
    let features = g.row_l2_normalize(projected)?;

    let w = g.constant(raw_prototypes.clone());
    let shifted = g.add(w, proto_offsets)?;
    let prototypes = g.row_l2_normalize(shifted)?;

    let pt = g.transpose(prototypes)?;
    let similarity = g.matmul(features, pt)?;

    let neg = g.scale(log_temperature, -1.0)?;
    let inv_temperature = g.exp(neg)?;
    let logits = g.scalar_mul(similarity, inv_temperature)?;
    let probs = g.softmax(logits, 1)?;

    Ok(ForwardNodes {
        adapter,
        proto_offsets,
        log_temperature,
        features,
        prototypes,
        similarity,
        inv_temperature,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn encode_examples() {
        let mut p = ModelParams::init(2, 1, 1.0).unwrap();
        let x = m(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        assert!(close(encode(&x, &p).unwrap().matrix().data(), x.data(), 1e-15));
        p.adapter = m(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert!(close(encode(&x, &p).unwrap().matrix().data(), x.data(), 1e-15));
        // 90° rotation: [1,0] → [0,1]
        p.adapter = m(&[vec![0.0, -1.0], vec![1.0, 0.0]]);
        let out = encode(&m(&[vec![1.0, 0.0]]), &p).unwrap();
        assert!(close(out.matrix().data(), &[0.0, 1.0], 1e-15));
        assert!(encode(&m(&[vec![0.0, 0.0]]), &p).is_err());
    }

    #[test]
    fn effective_prototype_examples() {
        let mut p = ModelParams::init(2, 1, 1.0).unwrap();
        let raw = m(&[vec![3.0, 4.0]]);
        assert!(close(effective_prototypes(&raw, &p).unwrap().matrix().data(), &[0.6, 0.8], 1e-15));
        p.proto_offsets = m(&[vec![-2.0, -4.0]]);
        assert!(close(effective_prototypes(&raw, &p).unwrap().matrix().data(), &[1.0, 0.0], 1e-15));
        let raw2 = m(&[vec![1.0, 0.0]]);
        p.proto_offsets = m(&[vec![0.0, 1.0]]);
        let h = 1.0 / 2f64.sqrt();
        assert!(close(effective_prototypes(&raw2, &p).unwrap().matrix().data(), &[h, h], 1e-15));
        p.proto_offsets = m(&[vec![-1.0, 0.0]]);
        assert!(effective_prototypes(&raw2, &p).is_err());
    }

    #[test]
    fn predict_examples() {
        let f = FeatureBatch::from_normalized(m(&[vec![1.0, 0.0, 0.0]])).unwrap();
        let w =
            Prototypes::from_normalized(m(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])).unwrap();
        let p = predict(&f, &w, 0.01).unwrap();
        assert!(p.at(0, 0) > 0.999);

        let f = FeatureBatch::from_normalized(m(&[vec![1.0, 0.0]])).unwrap();
        let w = Prototypes::from_normalized(m(&[vec![0.6, 0.8], vec![0.6, -0.8]])).unwrap();
        assert!(close(predict(&f, &w, 0.3).unwrap().data(), &[0.5, 0.5], 1e-15));

        // similarities [0.8, 0.2] at T = 1
        let w = Prototypes::from_normalized(m(&[vec![0.8, 0.6], vec![0.2, 0.96f64.sqrt()]])).unwrap();
        let p = predict(&f, &w, 1.0).unwrap();
        let e = 0.6f64.exp();
        assert!((p.at(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.at(0, 0) - 0.6457).abs() < 1e-4);
    }

    #[test]
    fn decoder_rows_gather() {
        let vocab = m(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let id = LabelWordMap::new(vec![0, 1]).unwrap();
        let p = select_decoder_rows(&vocab, &id).unwrap();
        assert!(close(p.matrix().data(), &[1.0, 0.0, 0.0, 1.0], 1e-15));
        assert_eq!(p.source, PrototypeSource::DecoderRows);

        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0 + i as f64, 1.0]).collect();
        let vocab = m(&rows);
        let p = select_decoder_rows(&vocab, &LabelWordMap::new(vec![5, 2]).unwrap()).unwrap();
        let expect = normalize_rows(&vocab.select_rows(&[5, 2])).unwrap();
        assert_eq!(p.matrix(), &expect);

        assert!(LabelWordMap::new(vec![1, 1]).is_err());
        assert!(select_decoder_rows(&vocab, &LabelWordMap::new(vec![10]).unwrap()).is_err());
    }

    #[test]
    fn trainable_counts() {
        let p = ModelParams::init(5, 3, 0.01).unwrap();
        assert_eq!(p.trainable_count(TuningMode::ModelTuning), 25 + 15 + 1);
        assert_eq!(p.trainable_count(TuningMode::PromptTuning), 15 + 1);
        // CLIP: 512-dim embeddings, 4 context tokens, plus the temperature.
        let clip_like = ModelParams { proto_offsets: Tensor::zeros(&[4, 512]), ..p };
        assert_eq!(clip_like.trainable_count(TuningMode::PromptTuning), 2049);
        assert!("prompt".parse::<TuningMode>().is_err());
        assert_eq!("prompt-tuning".parse::<TuningMode>().unwrap(), TuningMode::PromptTuning);
        assert!(!trainable_set(TuningMode::PromptTuning).contains(ADAPTER));
    }

    #[test]
    fn graph_forward_matches_plain_path() {
        let raw_f = m(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]]);
        let raw_w = m(&[vec![1.0, 0.2, 0.0], vec![-0.3, 0.9, 0.4]]);
        let mut params = ModelParams::init(3, 2, 0.2).unwrap();
        params.adapter.data_mut()[1] = 0.3;
        params.proto_offsets.data_mut()[4] = -0.2;
        let mut g = Graph::new();
        let nodes = build_forward(&mut g, &raw_f, &raw_w).unwrap();
        g.set_output(nodes.probs).unwrap();
        let via_graph = g.evaluate(&params.bindings()).unwrap();
        let plain = predict_raw(&raw_f, &raw_w, &params).unwrap();
        assert!(close(via_graph.data(), plain.data(), 1e-14));
    }
}

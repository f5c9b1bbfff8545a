//! Distribution-alignment objectives.
//!
//! Every loss here exists in two forms: a graph builder used by the trainer
//! (so it can be differentiated) and a plain function that builds a
//! throw-away graph over constants and returns the value plus diagnostics.

mod ct;
mod info;
mod ot;
mod sinkhorn;

pub use ct::{ct_loss, ct_loss_node, ct_loss_with_cost, plan_over_batch, plan_over_classes, CtLoss, CtNodes};
pub use info::{
    conditional_entropy, conditional_entropy_node, cross_entropy, cross_entropy_node, mi_loss, mi_loss_node, MiLoss,
    MiNodes, LOG_EPS,
};
pub use ot::{ot_exact, ot_exact_with_cap, OtSolution, OT_EXACT_MAX_DIM};
pub use sinkhorn::{sinkhorn, SinkhornParams, SinkhornSolution};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GradError, Graph, NodeId};
use crate::model::{FeatureBatch, Prototypes};
use crate::tensor::{matmul, Tensor};

/// Weighted point masses; weights are non-negative and sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("distribution needs at least one point"));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid(format!("distribution weight {w} is negative or non-finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::invalid(format!("distribution weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over zero points");
        Self { weights: vec![1.0 / n as f64; n] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support_size(&self) -> usize {
        self.weights.len()
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.iter().all(|&w| w == self.weights[0])
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Cosine similarities, rows = target features, columns = prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub normalized_inputs: bool,
}

impl SimilarityMatrix {
    pub fn from_values(values: Tensor) -> Self {
        Self { values, normalized_inputs: true }
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    /// `1 - cos`
    #[default]
    #[serde(alias = "cosine")]
    CosineDistance,
    /// `exp(-cos)`
    ExpNegDot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Tensor,
    pub kind: CostKind,
}

pub fn similarity(features: &FeatureBatch, prototypes: &Prototypes) -> Result<SimilarityMatrix> {
    let (f, w) = (features.matrix(), prototypes.matrix());
    if f.cols() != w.cols() {
        return Err(Error::invalid(format!("feature dim {} does not match prototype dim {}", f.cols(), w.cols())));
    }
    Ok(SimilarityMatrix { values: matmul(f, &w.transpose()), normalized_inputs: true })
}

pub fn cost_from_similarity(sim: &SimilarityMatrix, kind: CostKind) -> CostMatrix {
    let values = match kind {
        CostKind::CosineDistance => sim.values.map(|s| 1.0 - s),
        CostKind::ExpNegDot => sim.values.map(|s| (-s).exp()),
    };
    CostMatrix { values, kind }
}

/// Graph form of [`cost_from_similarity`].
pub fn cost_node(g: &mut Graph, sim: NodeId, kind: CostKind) -> Result<NodeId, GradError> {
    match kind {
        CostKind::CosineDistance => {
            let ones = g.constant(Tensor::filled(g.shape(sim), 1.0));
            g.sub(ones, sim)
        }
        CostKind::ExpNegDot => {
            let neg = g.scale(sim, -1.0)?;
            g.exp(neg)
        }
    }
}

/// Validates a row-stochastic probability matrix.
pub(crate) fn check_probs(probs: &Tensor) -> Result<()> {
    if probs.rank() != 2 || probs.rows() == 0 || probs.cols() == 0 {
        return Err(Error::invalid(format!("probabilities must be a non-empty matrix, got {:?}", probs.shape())));
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid(format!("row {r} has a negative or NaN probability")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

//! Entropy-based objectives on a row-stochastic prediction matrix.

use crate::error::{Error, Result};
use crate::graph::{Bindings, GradError, Graph, NodeId};
use crate::tensor::Tensor;

use super::check_probs;

/// Guard added inside every `log(p + eps)`.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiLoss {
    /// `H(Y|X) - H(Y)`
    pub total: f64,
    pub marginal_entropy: f64,
    pub conditional_entropy: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MiNodes {
    pub total: NodeId,
    pub marginal_entropy: NodeId,
    pub conditional_entropy: NodeId,
}

/// `-Σ p log(p + eps)` along `axis` (or over everything for rank 1).
fn entropy_terms(g: &mut Graph, p: NodeId) -> Result<NodeId, GradError> {
    let eps = g.constant(Tensor::filled(g.shape(p), LOG_EPS));
    let shifted = g.add(p, eps)?;
    let logp = g.log(shifted)?;
    let plogp = g.mul(p, logp)?;
    g.scale(plogp, -1.0)
}

pub fn conditional_entropy_node(g: &mut Graph, probs: NodeId) -> Result<NodeId, GradError> {
    let terms = entropy_terms(g, probs)?;
    let per_row = g.sum(terms, 1)?;
    g.mean(per_row, 0)
}

pub fn mi_loss_node(g: &mut Graph, probs: NodeId) -> Result<MiNodes, GradError> {
    let conditional_entropy = conditional_entropy_node(g, probs)?;
    let marginal = g.mean(probs, 0)?;
    let terms = entropy_terms(g, marginal)?;
    let marginal_entropy = g.sum(terms, 0)?;
    let total = g.sub(conditional_entropy, marginal_entropy)?;
    Ok(MiNodes { total, marginal_entropy, conditional_entropy })
}

/// Mean of `-log(p[i, label_i] + eps)`.
pub fn cross_entropy_node(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId, GradError> {
    let (m, k) = match *g.shape(probs) {
        [m, k] => (m, k),
        ref s => {
            return Err(GradError::Shape {
                node: g.len(),
                op: "cross-entropy",
                detail: format!("probabilities must be M×K, got {s:?}"),
            })
        }
    };
    if labels.len() != m || labels.iter().any(|&l| l >= k) {
        return Err(GradError::Shape {
            node: g.len(),
            op: "cross-entropy",
            detail: format!("{} labels for {m} rows over {k} classes", labels.len()),
        });
    }
    let mut onehot = Tensor::zeros(&[m, k]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let eps = g.constant(Tensor::filled(&[m, k], LOG_EPS));
    let shifted = g.add(probs, eps)?;
    let logp = g.log(shifted)?;
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask)?;
    let per_row = g.sum(picked, 1)?;
    let mean = g.mean(per_row, 0)?;
    g.scale(mean, -1.0)
}

fn run_scalar(g: &mut Graph, out: NodeId) -> Result<f64> {
    g.set_output(out)?;
    Ok(g.evaluate(&Bindings::new())?.data()[0])
}

pub fn mi_loss(probs: &Tensor) -> Result<MiLoss> {
    check_probs(probs)?;
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let nodes = mi_loss_node(&mut g, p)?;
    g.set_output(nodes.total)?;
    let eval = g.forward(&Bindings::new())?;
    Ok(MiLoss {
        total: eval.value(nodes.total).data()[0],
        marginal_entropy: eval.value(nodes.marginal_entropy).data()[0],
        conditional_entropy: eval.value(nodes.conditional_entropy).data()[0],
    })
}

pub fn conditional_entropy(probs: &Tensor) -> Result<f64> {
    check_probs(probs)?;
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let h = conditional_entropy_node(&mut g, p)?;
    run_scalar(&mut g, h)
}

pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(probs)?;
    if labels.len() != probs.rows() {
        return Err(Error::invalid(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::invalid(format!("label {l} out of range for {} classes", probs.cols())));
    }
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let ce = cross_entropy_node(&mut g, p, labels)?;
    run_scalar(&mut g, ce)
}

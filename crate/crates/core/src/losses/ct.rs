//! Conditional transport between target features and class prototypes.
//!
//! Two softmax plans are built from the same temperature-scaled similarities:
//! one normalized over classes (each feature picks prototypes, weighted by the
//! class prior) and one normalized over the batch (each prototype picks
//! features). The loss is the sum of the expected costs under both plans.

use crate::error::{Error, Result};
use crate::graph::{Bindings, GradError, Graph, NodeId};
use crate::tensor::Tensor;

use super::{cost_node, CostKind, DiscreteDistribution, SimilarityMatrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtLoss {
    pub total: f64,
    /// Expected cost with each feature transported to the prototypes.
    pub features_to_prototypes: f64,
    /// Prior-weighted expected cost with each prototype transported to the batch.
    pub prototypes_to_features: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CtNodes {
    pub total: NodeId,
    pub features_to_prototypes: NodeId,
    pub prototypes_to_features: NodeId,
    pub plan_over_classes: NodeId,
    pub plan_over_batch: NodeId,
}

/// Log-prior offsets broadcast to the M×K similarity layout. Zero weights map
/// to a huge negative offset so the class never receives mass.
fn log_prior_matrix(prior: &DiscreteDistribution, rows: usize) -> Tensor {
    let k = prior.support_size();
    let logs: Vec<f64> = prior.weights().iter().map(|&p| if p > 0.0 { p.ln() } else { -1e300 }).collect();
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        data.extend_from_slice(&logs);
    }
    Tensor::new(vec![rows, k], data).expect("prior layout")
}

fn prior_matrix(prior: &DiscreteDistribution, rows: usize) -> Tensor {
    let k = prior.support_size();
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        data.extend_from_slice(prior.weights());
    }
    Tensor::new(vec![rows, k], data).expect("prior layout")
}

/// Builds the CT loss on an M×K similarity node. `inv_temperature` is a
/// one-element node holding `1/T`. The prior enters as a constant.
pub fn ct_loss_node(
    g: &mut Graph,
    sim: NodeId,
    inv_temperature: NodeId,
    prior: &DiscreteDistribution,
    kind: CostKind,
) -> Result<CtNodes, GradError> {
    let (m, k) = match *g.shape(sim) {
        [m, k] => (m, k),
        ref s => {
            return Err(GradError::Shape {
                node: g.len(),
                op: "ct-loss",
                detail: format!("similarity must be M×K, got {s:?}"),
            })
        }
    };
    if prior.support_size() != k {
        return Err(GradError::Shape {
            node: g.len(),
            op: "ct-loss",
            detail: format!("prior over {} classes, similarity has {k}", prior.support_size()),
        });
    }

    let logits = g.scalar_mul(sim, inv_temperature)?;
    let cost = cost_node(g, sim, kind)?;

    let class_logits = if prior.is_uniform() {
        logits
    } else {
        let lp = g.constant(log_prior_matrix(prior, m));
        g.add(logits, lp)?
    };
    let plan_over_classes = g.softmax(class_logits, 1)?;
    let plan_over_batch = g.softmax(logits, 0)?;

    let weighted = g.mul(cost, plan_over_classes)?;
    let per_feature = g.sum(weighted, 1)?;
    let features_to_prototypes = g.mean(per_feature, 0)?;

    let weighted = g.mul(cost, plan_over_batch)?;
    let pm = g.constant(prior_matrix(prior, m));
    let weighted = g.mul(weighted, pm)?;
    let prototypes_to_features = g.sum_all(weighted);

    let total = g.add(features_to_prototypes, prototypes_to_features)?;
    Ok(CtNodes { total, features_to_prototypes, prototypes_to_features, plan_over_classes, plan_over_batch })
}

fn check_args(sim: &SimilarityMatrix, temperature: f64, prior: &DiscreteDistribution) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if sim.values.rank() != 2 || sim.batch_size() == 0 || sim.classes() == 0 {
        return Err(Error::invalid("similarity must be a non-empty M×K matrix"));
    }
    if prior.support_size() != sim.classes() {
        return Err(Error::invalid(format!(
            "prior has {} entries but there are {} prototypes",
            prior.support_size(),
            sim.classes()
        )));
    }
    Ok(())
}

/// CT loss with the cosine-distance cost.
pub fn ct_loss(sim: &SimilarityMatrix, temperature: f64, prior: &DiscreteDistribution) -> Result<CtLoss> {
    ct_loss_with_cost(sim, temperature, prior, CostKind::CosineDistance)
}

pub fn ct_loss_with_cost(
    sim: &SimilarityMatrix,
    temperature: f64,
    prior: &DiscreteDistribution,
    kind: CostKind,
) -> Result<CtLoss> {
    check_args(sim, temperature, prior)?;
    let mut g = Graph::new();
    let s = g.constant(sim.values.clone());
    let inv_t = g.scalar_constant(1.0 / temperature);
    let nodes = ct_loss_node(&mut g, s, inv_t, prior, kind)?;
    g.set_output(nodes.total)?;
    let eval = g.forward(&Bindings::new())?;
    Ok(CtLoss {
        total: eval.value(nodes.total).data()[0],
        features_to_prototypes: eval.value(nodes.features_to_prototypes).data()[0],
        prototypes_to_features: eval.value(nodes.prototypes_to_features).data()[0],
    })
}

/// `π(w_k | f_i)`: prior-weighted softmax over classes, one row per feature.
pub fn plan_over_classes(sim: &SimilarityMatrix, temperature: f64, prior: &DiscreteDistribution) -> Result<Tensor> {
    check_args(sim, temperature, prior)?;
    let (m, k) = sim.values.dims();
    let mut out = Tensor::zeros(&[m, k]);
    for i in 0..m {
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                let p = prior.weights()[c];
                if p > 0.0 {
                    sim.values.at(i, c) / temperature + p.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for c in 0..k {
            out.set(i, c, exps[c] / total);
        }
    }
    Ok(out)
}

/// `π(f_i | w_k)`: softmax over the batch, one column per prototype.
pub fn plan_over_batch(sim: &SimilarityMatrix, temperature: f64) -> Result<Tensor> {
    check_args(sim, temperature, &DiscreteDistribution::uniform(sim.classes().max(1)))?;
    let (m, k) = sim.values.dims();
    let mut out = Tensor::zeros(&[m, k]);
    for c in 0..k {
        let max = (0..m).map(|i| sim.values.at(i, c) / temperature).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..m).map(|i| (sim.values.at(i, c) / temperature - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for i in 0..m {
            out.set(i, c, exps[i] / total);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_values(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn identical_point_masses_cost_nothing() {
        let l = ct_loss(&sim(&[vec![1.0]]), 1.0, &DiscreteDistribution::uniform(1)).unwrap();
        assert_eq!(l.total, 0.0);
        let l = ct_loss(&sim(&[vec![1.0], vec![1.0]]), 1.0, &DiscreteDistribution::uniform(1)).unwrap();
        assert_eq!(l.features_to_prototypes, 0.0);
        assert_eq!(l.prototypes_to_features, 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        // Rows: softmax([0.9, 0.1]) and softmax([0.2, 0.8]); columns likewise.
        let s = sim(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let l = ct_loss(&s, 1.0, &DiscreteDistribution::uniform(2)).unwrap();
        let sm = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let (r00, r01) = sm(0.9, 0.1);
        let (r10, r11) = sm(0.2, 0.8);
        let fwd = 0.5 * ((0.1 * r00 + 0.9 * r01) + (0.8 * r10 + 0.2 * r11));
        let (c00, c10) = sm(0.9, 0.2);
        let (c01, c11) = sm(0.1, 0.8);
        let bwd = 0.5 * (0.1 * c00 + 0.8 * c10) + 0.5 * (0.9 * c01 + 0.2 * c11);
        assert!((l.features_to_prototypes - fwd).abs() < 1e-14);
        assert!((l.prototypes_to_features - bwd).abs() < 1e-14);
        assert!((l.total - fwd - bwd).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_arguments() {
        let s = sim(&[vec![0.9, 0.1]]);
        assert!(ct_loss(&s, 0.0, &DiscreteDistribution::uniform(2)).is_err());
        assert!(ct_loss(&s, -1.0, &DiscreteDistribution::uniform(2)).is_err());
        assert!(ct_loss(&s, 1.0, &DiscreteDistribution::uniform(3)).is_err());
    }

    #[test]
    fn plans_are_stochastic() {
        let s = sim(&[vec![0.9, 0.1, -0.3], vec![0.2, 0.8, 0.0]]);
        let prior = DiscreteDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let pc = plan_over_classes(&s, 0.5, &prior).unwrap();
        for r in 0..2 {
            assert!((pc.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let pb = plan_over_batch(&s, 0.5).unwrap();
        for c in 0..3 {
            assert!(((pb.at(0, c) + pb.at(1, c)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_prior_class_gets_no_mass() {
        let s = sim(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let prior = DiscreteDistribution::new(vec![1.0, 0.0]).unwrap();
        let pc = plan_over_classes(&s, 1.0, &prior).unwrap();
        assert_eq!(pc.at(1, 1), 0.0);
        let l = ct_loss(&s, 1.0, &prior).unwrap();
        assert!(l.total.is_finite());
    }
}

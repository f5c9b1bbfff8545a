//! Entropy-regularized OT solved with log-domain Sinkhorn scalings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::DiscreteDistribution;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornParams {
    /// Regularization strength; `None` means `0.1 * mean(cost)`.
    pub epsilon: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { epsilon: None, max_iter: 1000, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSolution {
    /// Rows carry `u`, columns carry `v`.
    pub plan: Tensor,
    /// `<plan, cost>`, without the entropy term.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max absolute marginal violation of the returned plan.
    pub violation: f64,
    pub epsilon: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub fn sinkhorn(
    cost: &Tensor,
    u: &DiscreteDistribution,
    v: &DiscreteDistribution,
    params: &SinkhornParams,
) -> Result<SinkhornSolution> {
    let (r, c) = (u.support_size(), v.support_size());
    if cost.rank() != 2 || cost.dims() != (r, c) {
        return Err(Error::invalid(format!("cost shape {:?} does not match marginals {r}×{c}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let eps = match params.epsilon {
        Some(e) => e,
        None => {
            let mean = cost.data().iter().sum::<f64>() / cost.len() as f64;
            if mean > 0.0 {
                0.1 * mean
            } else {
                1.0
            }
        }
    };
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("sinkhorn epsilon must be positive, got {eps}")));
    }
    if !(params.tol > 0.0) {
        return Err(Error::invalid(format!("sinkhorn tolerance must be positive, got {}", params.tol)));
    }

    let log_u: Vec<f64> = u.weights().iter().map(|&w| safe_ln(w)).collect();
    let log_v: Vec<f64> = v.weights().iter().map(|&w| safe_ln(w)).collect();
    let mut f = vec![0.0; r];
    let mut g = vec![0.0; c];

    let col_violation = |f: &[f64], g: &[f64]| -> f64 {
        (0..c)
            .map(|j| {
                let s: f64 = (0..r).map(|i| ((f[i] + g[j] - cost.at(i, j)) / eps).exp()).sum();
                (s - v.weights()[j]).abs()
            })
            .fold(0.0, f64::max)
    };

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < params.max_iter {
        for j in 0..c {
            g[j] = if log_v[j].is_finite() {
                eps * (log_v[j] - log_sum_exp((0..r).map(|i| (f[i] - cost.at(i, j)) / eps)))
            } else {
                f64::NEG_INFINITY
            };
        }
        for i in 0..r {
            f[i] = if log_u[i].is_finite() {
                eps * (log_u[i] - log_sum_exp((0..c).map(|j| (g[j] - cost.at(i, j)) / eps)))
            } else {
                f64::NEG_INFINITY
            };
        }
        iterations += 1;
        // Rows are exact after the f-update; only columns can be off.
        violation = col_violation(&f, &g);
        if violation < params.tol {
            break;
        }
    }

    let mut plan = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            plan.set(i, j, ((f[i] + g[j] - cost.at(i, j)) / eps).exp());
        }
    }
    let row_violation = (0..r).map(|i| (plan.row(i).iter().sum::<f64>() - u.weights()[i]).abs()).fold(0.0, f64::max);
    let violation = violation.max(row_violation);
    let total = plan.data().iter().zip(cost.data()).map(|(p, k)| p * k).sum();
    Ok(SinkhornSolution { plan, cost: total, iterations, converged: violation < params.tol, violation, epsilon: eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn huge_epsilon_gives_independent_coupling() {
        let c = m(&[vec![1.0, 2.0, 0.5], vec![3.0, 4.0, 0.1]]);
        let u = DiscreteDistribution::new(vec![0.3, 0.7]).unwrap();
        let v = DiscreteDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let p = SinkhornParams { epsilon: Some(4e3), ..Default::default() };
        let s = sinkhorn(&c, &u, &v, &p).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((s.plan.at(i, j) - u.weights()[i] * v.weights()[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn small_epsilon_approaches_exact() {
        let c = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let u = DiscreteDistribution::uniform(2);
        let p = SinkhornParams { epsilon: Some(1e-3), ..Default::default() };
        let s = sinkhorn(&c, &u, &u, &p).unwrap();
        assert!(s.converged);
        assert!(s.violation < 1e-6);
        assert!((s.cost - 2.5).abs() < 1e-2);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let c = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let u = DiscreteDistribution::new(vec![0.9, 0.1]).unwrap();
        let v = DiscreteDistribution::new(vec![0.2, 0.8]).unwrap();
        let p = SinkhornParams { epsilon: Some(1e-3), max_iter: 1, tol: 1e-14 };
        let s = sinkhorn(&c, &u, &v, &p).unwrap();
        assert_eq!(s.iterations, 1);
        assert!(!s.converged);
    }

    #[test]
    fn bad_parameters_rejected() {
        let c = m(&[vec![0.0]]);
        let u = DiscreteDistribution::uniform(1);
        assert!(sinkhorn(&c, &u, &u, &SinkhornParams { epsilon: Some(0.0), ..Default::default() }).is_err());
        assert!(sinkhorn(&c, &u, &u, &SinkhornParams { tol: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn default_epsilon_is_tenth_of_mean_cost() {
        let c = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let u = DiscreteDistribution::uniform(2);
        let s = sinkhorn(&c, &u, &u, &SinkhornParams::default()).unwrap();
        assert!((s.epsilon - 0.25).abs() < 1e-15);
    }
}

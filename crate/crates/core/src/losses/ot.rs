//! Exact discrete optimal transport by successive shortest augmenting paths.
//!
//! The plan is laid out like the cost: rows carry the `u` marginal, columns
//! the `v` marginal. Each augmentation pushes mass along a cheapest residual
//! path, so every intermediate flow is optimal for the mass moved so far and
//! the final flow is an optimal vertex of the transportation polytope.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::DiscreteDistribution;

/// Largest side accepted by [`ot_exact`].
pub const OT_EXACT_MAX_DIM: usize = 64;

const FLOW_TOL: f64 = 1e-15;
const RELAX_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct OtSolution {
    pub plan: Tensor,
    pub cost: f64,
}

pub fn ot_exact(cost: &Tensor, u: &DiscreteDistribution, v: &DiscreteDistribution) -> Result<OtSolution> {
    ot_exact_with_cap(cost, u, v, OT_EXACT_MAX_DIM)
}

pub fn ot_exact_with_cap(
    cost: &Tensor,
    u: &DiscreteDistribution,
    v: &DiscreteDistribution,
    cap: usize,
) -> Result<OtSolution> {
    let (r, c) = (u.support_size(), v.support_size());
    if cost.rank() != 2 || cost.dims() != (r, c) {
        return Err(Error::invalid(format!("cost shape {:?} does not match marginals {r}×{c}", cost.shape())));
    }
    if r > cap || c > cap {
        return Err(Error::invalid(format!("instance {r}×{c} exceeds exact-OT cap {cap}")));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let su: f64 = u.weights().iter().sum();
    let sv: f64 = v.weights().iter().sum();
    if (su - sv).abs() > DiscreteDistribution::SUM_TOL {
        return Err(Error::invalid(format!("infeasible marginals: masses {su} and {sv}")));
    }

    let mut supply = u.weights().to_vec();
    let mut demand = v.weights().to_vec();
    let mut flow = vec![0.0; r * c];
    let n = r + c;

    loop {
        if supply.iter().all(|&s| s <= FLOW_TOL) || demand.iter().all(|&d| d <= FLOW_TOL) {
            break;
        }
        // Bellman-Ford from a virtual source attached to every row with supply.
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![usize::MAX; n];
        for i in 0..r {
            if supply[i] > FLOW_TOL {
                dist[i] = 0.0;
            }
        }
        for _ in 0..n {
            let mut changed = false;
            for i in 0..r {
                if dist[i].is_finite() {
                    for j in 0..c {
                        let nd = dist[i] + cost.at(i, j);
                        if nd < dist[r + j] - RELAX_TOL {
                            dist[r + j] = nd;
                            pred[r + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..c {
                if dist[r + j].is_finite() {
                    for i in 0..r {
                        if flow[i * c + j] > FLOW_TOL {
                            let nd = dist[r + j] - cost.at(i, j);
                            if nd < dist[i] - RELAX_TOL {
                                dist[i] = nd;
                                pred[i] = r + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let target = (0..c)
            .filter(|&j| demand[j] > FLOW_TOL && dist[r + j].is_finite())
            .min_by(|&a, &b| dist[r + a].total_cmp(&dist[r + b]));
        let Some(target) = target else { break };

        // Walk back to the originating row collecting the bottleneck.
        let mut bottleneck = demand[target];
        let mut node = r + target;
        let mut path = Vec::new();
        loop {
            let p = pred[node];
            if node >= r {
                path.push((p, node - r, true));
            } else {
                let j = p - r;
                path.push((node, j, false));
                bottleneck = bottleneck.min(flow[node * c + j]);
            }
            node = p;
            if node < r && pred[node] == usize::MAX {
                break;
            }
            if path.len() > 2 * n {
                return Err(Error::invalid("exact OT failed to find an acyclic augmenting path"));
            }
        }
        bottleneck = bottleneck.min(supply[node]);

        for &(i, j, forward) in &path {
            if forward {
                flow[i * c + j] += bottleneck;
            } else {
                flow[i * c + j] -= bottleneck;
                if flow[i * c + j] < FLOW_TOL {
                    flow[i * c + j] = 0.0;
                }
            }
        }
        supply[node] -= bottleneck;
        demand[target] -= bottleneck;
    }

    let plan = Tensor::new(vec![r, c], flow).expect("plan layout");
    let total = plan.data().iter().zip(cost.data()).map(|(p, k)| p * k).sum();
    Ok(OtSolution { plan, cost: total })
}

//! Learned class proportions for the conditional-transport prior.
//!
//! Each step averages the class plan over the mini-batch and blends it into
//! the running prior with a weight that decays along a half-cosine from 1 to
//! 0 over the horizon.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{plan_over_classes, DiscreteDistribution, SimilarityMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorState {
    pub prior: DiscreteDistribution,
    pub step: usize,
    pub horizon: usize,
}

impl PriorState {
    pub fn uniform(classes: usize, horizon: usize) -> Self {
        Self { prior: DiscreteDistribution::uniform(classes), step: 0, horizon }
    }

    /// Blend weight for the current step: `0.5 (1 + cos(π l / L))`.
    pub fn blend_weight(&self) -> f64 {
        if self.horizon == 0 {
            return 0.0;
        }
        0.5 * (1.0 + (PI * self.step as f64 / self.horizon as f64).cos())
    }
}

/// Batch mean of `π(w_k | f_i)` under the current prior.
pub fn batch_prior_estimate(
    sim: &SimilarityMatrix,
    temperature: f64,
    current: &DiscreteDistribution,
) -> Result<DiscreteDistribution> {
    if sim.batch_size() == 0 {
        return Err(Error::invalid("cannot estimate class proportions from an empty batch"));
    }
    let plan = plan_over_classes(sim, temperature, current)?;
    let (m, k) = plan.dims();
    let mut w = vec![0.0; k];
    for i in 0..m {
        for (acc, p) in w.iter_mut().zip(plan.row(i)) {
            *acc += p;
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    DiscreteDistribution::new(w)
}

/// One exponential-moving-average step; once the horizon is reached the
/// prior is frozen and the step counter stops.
pub fn ema_update(state: &PriorState, batch_estimate: &DiscreteDistribution) -> Result<PriorState> {
    if batch_estimate.support_size() != state.prior.support_size() {
        return Err(Error::invalid(format!(
            "estimate over {} classes, prior over {}",
            batch_estimate.support_size(),
            state.prior.support_size()
        )));
    }
    if state.step >= state.horizon {
        return Ok(state.clone());
    }
    let alpha = state.blend_weight();
    let mut w: Vec<f64> = state
        .prior
        .weights()
        .iter()
        .zip(batch_estimate.weights())
        .map(|(&old, &new)| alpha * new + (1.0 - alpha) * old)
        .collect();
    // Renormalize away rounding drift so the sum stays within tolerance.
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(PriorState { prior: DiscreteDistribution::new(w)?, step: state.step + 1, horizon: state.horizon })
}

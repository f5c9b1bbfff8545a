//! The adaptation loop.
//!
//! Each step samples a mini-batch, builds the differentiable pipeline
//! (encode → prototypes → similarity → losses), backpropagates, and applies a
//! heavy-ball SGD step with the polynomially decaying learning rate. Only the
//! parameters in the tuning mode's trainable set are ever touched.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::argmax_rows;
use crate::graph::{Evaluation, GradError, Gradients, Graph, NodeId};
use crate::losses::{
    conditional_entropy_node, cost_from_similarity, cost_node, cross_entropy_node, ct_loss_node, mi_loss_node,
    ot_exact, sinkhorn, CostKind, DiscreteDistribution, SimilarityMatrix, SinkhornParams,
};
use crate::model::{build_forward, predict_raw, trainable_set, ModelParams, TuningMode};
use crate::prior::{batch_prior_estimate, ema_update, PriorState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Transport + mutual information.
    #[default]
    Pouf,
    /// Conditional-entropy minimization only.
    Tent,
    /// Top-k pseudo labels + cross entropy on prompt parameters.
    Upl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    #[default]
    Ct,
    /// Exact plan; batch and class count must both fit the exact-solver cap.
    OtExact,
    OtSinkhorn,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    #[default]
    Uniform,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSelection {
    /// Report the last iterate.
    #[default]
    Final,
    /// Keep the iterate with the best labeled accuracy at evaluation points.
    /// Falls back to `Final` without labels.
    BestEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub transport_kind: TransportKind,
    pub transport_weight: f64,
    pub lambda_mi: f64,
    /// Weight of `H(Y|X)` in Tent mode.
    pub entropy_only_weight: f64,
    pub cost_kind: CostKind,
    pub prior_mode: PriorMode,
    /// EMA horizon for the learned prior; defaults to `iterations`.
    pub prior_horizon: Option<usize>,
    pub tuning_mode: TuningMode,
    pub batch_size: usize,
    pub iterations: usize,
    pub eta0: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub momentum: f64,
    pub temperature_init: f64,
    pub seed: u64,
    pub sinkhorn: SinkhornParams,
    pub upl_topk: usize,
    /// Labeled accuracy is recorded every this many iterations (and at the end).
    pub eval_every: usize,
    pub model_selection: ModelSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Pouf,
            transport_kind: TransportKind::Ct,
            transport_weight: 1.0,
            lambda_mi: 0.3,
            entropy_only_weight: 0.3,
            cost_kind: CostKind::CosineDistance,
            prior_mode: PriorMode::Uniform,
            prior_horizon: None,
            tuning_mode: TuningMode::ModelTuning,
            batch_size: 96,
            iterations: 800,
            eta0: 0.01,
            gamma: 2e-4,
            alpha: 0.75,
            momentum: 0.9,
            temperature_init: 0.01,
            seed: 0,
            sinkhorn: SinkhornParams::default(),
            upl_topk: 16,
            eval_every: 100,
            model_selection: ModelSelection::Final,
        }
    }
}

impl TrainConfig {
    /// Vision-style preset: λ = 0.3, batch 96. Same as `default()`.
    pub fn vision_default() -> Self {
        Self::default()
    }

    /// Masked-language-style preset: λ = 0.6, batch 8, η₀ = 1e-5, 1000 steps.
    pub fn language_default() -> Self {
        Self { lambda_mi: 0.6, batch_size: 8, eta0: 1e-5, iterations: 1000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("transport_weight", self.transport_weight),
            ("lambda_mi", self.lambda_mi),
            ("entropy_only_weight", self.entropy_only_weight),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return Err(Error::invalid(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.temperature_init > 0.0) || !self.temperature_init.is_finite() {
            return Err(Error::invalid(format!("temperature_init must be positive, got {}", self.temperature_init)));
        }
        if self.method == Method::Upl && self.upl_topk == 0 {
            return Err(Error::invalid("upl_topk must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if let Some(e) = self.sinkhorn.epsilon {
            if !(e > 0.0) {
                return Err(Error::invalid(format!("sinkhorn epsilon must be positive, got {e}")));
            }
        }
        if !(self.sinkhorn.tol > 0.0) {
            return Err(Error::invalid("sinkhorn tol must be positive"));
        }
        Ok(())
    }

    /// Weights actually applied to (transport, mi, entropy) for this method.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        match self.method {
            Method::Pouf => {
                let tw = if self.transport_kind == TransportKind::None { 0.0 } else { self.transport_weight };
                (tw, self.lambda_mi, 0.0)
            }
            Method::Tent => (0.0, 0.0, self.entropy_only_weight),
            Method::Upl => (0.0, 0.0, 0.0),
        }
    }
}

/// `η₀ (1 + γ·iter)^(-α)`
pub fn lr_schedule(iter: usize, eta0: f64, gamma: f64, alpha: f64) -> f64 {
    eta0 * (1.0 + gamma * iter as f64).powf(-alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
    pub iteration: usize,
}

impl OptimizerState {
    /// Zero velocities for every trainable parameter.
    pub fn new(params: &ModelParams, mode: TuningMode) -> Self {
        let velocity = trainable_set(mode)
            .into_iter()
            .map(|name| {
                let t = params.get(name).expect("known parameter");
                (name.to_string(), Tensor::zeros(t.shape()))
            })
            .collect();
        Self { velocity, iteration: 0 }
    }
}

/// Heavy-ball update `v ← μv + g; p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, g) in grads {
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient supplied for non-trainable parameter `{name}`")))?;
        if v.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient for `{name}` has shape {:?}, expected {:?}",
                g.shape(),
                v.shape()
            )));
        }
        let p = params.get_mut(name).expect("trainable names are model parameters");
        for ((pv, vv), gv) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_transport: f64,
    pub loss_mi: f64,
    pub loss_entropy: f64,
    pub loss_cross_entropy: f64,
    pub temperature: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub records: Vec<StepRecord>,
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Iteration count of the returned parameters.
    pub selected_iteration: usize,
    pub final_prior: Vec<f64>,
    /// UPL only: classes with fewer than `upl_topk` candidates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub short_classes: Vec<usize>,
}

/// Everything a step needs besides the batch.
pub struct StepContext<'a> {
    pub raw_prototypes: &'a Tensor,
    pub config: &'a TrainConfig,
}

pub struct StepState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub prior: PriorState,
}

impl StepState {
    pub fn new(params: ModelParams, config: &TrainConfig) -> Self {
        let optimizer = OptimizerState::new(&params, config.tuning_mode);
        let horizon = config.prior_horizon.unwrap_or(config.iterations);
        let prior = PriorState::uniform(params.classes(), horizon);
        Self { params, optimizer, prior }
    }
}

struct LossGraph {
    graph: Graph,
    total: NodeId,
    transport: Option<NodeId>,
    mi: NodeId,
    entropy: NodeId,
    cross_entropy: Option<NodeId>,
    similarity: NodeId,
}

fn diverged(e: GradError, iteration: usize, ids: &[usize]) -> Error {
    match e {
        GradError::NumericDomain { .. } => Error::Diverged { iteration, batch_ids: ids.to_vec() },
        other => Error::Grad(other),
    }
}

fn build_losses(
    batch: &Tensor,
    ctx: &StepContext<'_>,
    state: &StepState,
    labels: Option<&[usize]>,
) -> Result<LossGraph> {
    let cfg = ctx.config;
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, batch, ctx.raw_prototypes)?;
    let (tw, lambda, ew) = cfg.effective_weights();

    let transport = match (cfg.method, cfg.transport_kind) {
        (Method::Pouf, TransportKind::Ct) => {
            Some(ct_loss_node(&mut g, fwd.similarity, fwd.inv_temperature, &state.prior.prior, cfg.cost_kind)?.total)
        }
        (Method::Pouf, kind @ (TransportKind::OtSinkhorn | TransportKind::OtExact)) => {
            // Two-stage: solve the plan on the current cost with gradients
            // blocked, then differentiate <plan, C(θ)> through the cost only.
            let sim = current_similarity(batch, ctx.raw_prototypes, &state.params)?;
            let cost = cost_from_similarity(&sim, cfg.cost_kind);
            let u = DiscreteDistribution::uniform(batch.rows());
            let plan = if kind == TransportKind::OtExact {
                ot_exact(&cost.values, &u, &state.prior.prior)?.plan
            } else {
                sinkhorn(&cost.values, &u, &state.prior.prior, &cfg.sinkhorn)?.plan
            };
            let c = cost_node(&mut g, fwd.similarity, cfg.cost_kind)?;
            let plan = g.constant(plan);
            let weighted = g.mul(c, plan)?;
            Some(g.sum_all(weighted))
        }
        _ => None,
    };
    let mi = mi_loss_node(&mut g, fwd.probs)?.total;
    let entropy = conditional_entropy_node(&mut g, fwd.probs)?;
    let cross_entropy = match labels {
        Some(l) => Some(cross_entropy_node(&mut g, fwd.probs, l)?),
        None => None,
    };

    let total = if let Some(ce) = cross_entropy {
        ce
    } else {
        let mut terms = Vec::new();
        if let Some(t) = transport {
            terms.push(g.scale(t, tw)?);
        }
        terms.push(g.scale(mi, lambda)?);
        if ew > 0.0 {
            terms.push(g.scale(entropy, ew)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        acc
    };
    g.set_output(total)?;
    Ok(LossGraph { graph: g, total, transport, mi, entropy, cross_entropy, similarity: fwd.similarity })
}

fn current_similarity(batch: &Tensor, raw_prototypes: &Tensor, params: &ModelParams) -> Result<SimilarityMatrix> {
    let f = crate::model::encode(batch, params)?;
    let w = crate::model::effective_prototypes(raw_prototypes, params)?;
    crate::losses::similarity(&f, &w)
}

fn scalar(eval: &Evaluation, id: NodeId) -> f64 {
    eval.value(id).data()[0]
}

/// Metrics from one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub lr: f64,
    pub loss_total: f64,
    pub loss_transport: f64,
    pub loss_mi: f64,
    pub loss_entropy: f64,
    pub loss_cross_entropy: f64,
}

/// One optimization step on `batch` (raw features, ids for diagnostics).
///
/// When `labels` is given the objective is cross entropy against them (the
/// UPL path); otherwise it is the method's unsupervised objective. The loss
/// uses the prior as it was before this step; a learned prior is updated
/// afterwards from the same batch.
pub fn pouf_step(
    batch: &Tensor,
    batch_ids: &[usize],
    ctx: &StepContext<'_>,
    state: &mut StepState,
    labels: Option<&[usize]>,
) -> Result<StepMetrics> {
    if batch.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = ctx.config;
    let iteration = state.optimizer.iteration;
    state.params.check_compatible(batch, ctx.raw_prototypes)?;

    let lg = build_losses(batch, ctx, state, labels).map_err(|e| match e {
        Error::Grad(g) => diverged(g, iteration, batch_ids),
        other => other,
    })?;
    let bindings = state.params.bindings();
    let eval = lg.graph.forward(&bindings).map_err(|e| diverged(e, iteration, batch_ids))?;
    let loss_total = scalar(&eval, lg.total);
    if !loss_total.is_finite() {
        return Err(Error::Diverged { iteration, batch_ids: batch_ids.to_vec() });
    }

    let trainable: Vec<&str> = trainable_set(cfg.tuning_mode).into_iter().collect();
    let grads = lg.graph.backward(&eval, &trainable)?;
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { iteration, batch_ids: batch_ids.to_vec() });
    }
    let lr = lr_schedule(iteration, cfg.eta0, cfg.gamma, cfg.alpha);
    let temperature = state.params.temperature();
    sgd_momentum_step(&mut state.params, &grads, &mut state.optimizer, lr, cfg.momentum)?;

    if cfg.method == Method::Pouf && cfg.prior_mode == PriorMode::Learned && labels.is_none() {
        let sim = SimilarityMatrix::from_values(eval.value(lg.similarity).clone());
        let est = batch_prior_estimate(&sim, temperature, &state.prior.prior)?;
        state.prior = ema_update(&state.prior, &est)?;
    }

    Ok(StepMetrics {
        lr,
        loss_total,
        loss_transport: lg.transport.map_or(0.0, |t| scalar(&eval, t)),
        loss_mi: scalar(&eval, lg.mi),
        loss_entropy: scalar(&eval, lg.entropy),
        loss_cross_entropy: lg.cross_entropy.map_or(0.0, |t| scalar(&eval, t)),
    })
}

/// Epoch-wise shuffled index stream; a batch that runs past the end of an
/// epoch continues into a freshly shuffled one.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(probs);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn check_inputs(features: &Tensor, raw_prototypes: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::invalid("training needs a non-empty feature matrix"));
    }
    if raw_prototypes.rank() != 2 || raw_prototypes.cols() != features.cols() {
        return Err(Error::invalid(format!(
            "prototype shape {:?} incompatible with features {:?}",
            raw_prototypes.shape(),
            features.shape()
        )));
    }
    if let Some(l) = labels {
        if l.len() != features.rows() {
            return Err(Error::invalid(format!("{} eval labels for {} samples", l.len(), features.rows())));
        }
        if l.iter().any(|&y| y >= raw_prototypes.rows()) {
            return Err(Error::invalid("eval label out of range"));
        }
    }
    Ok(())
}

/// Runs the configured method from the zero-shot initialization.
///
/// `eval_labels` only feeds accuracy reporting and best-iterate selection;
/// the optimization itself never sees them.
pub fn train(
    features: &Tensor,
    raw_prototypes: &Tensor,
    config: &TrainConfig,
    eval_labels: Option<&[usize]>,
) -> Result<(ModelParams, RunReport)> {
    config.validate()?;
    check_inputs(features, raw_prototypes, eval_labels)?;
    let init = ModelParams::init(features.cols(), raw_prototypes.rows(), config.temperature_init)?;
    train_from(init, features, raw_prototypes, config, eval_labels)
}

pub fn train_from(
    initial: ModelParams,
    features: &Tensor,
    raw_prototypes: &Tensor,
    config: &TrainConfig,
    eval_labels: Option<&[usize]>,
) -> Result<(ModelParams, RunReport)> {
    config.validate()?;
    check_inputs(features, raw_prototypes, eval_labels)?;
    if config.method == Method::Upl {
        return upl_train_from(initial, features, raw_prototypes, config, eval_labels);
    }
    let ctx = StepContext { raw_prototypes, config };
    let initial_accuracy = eval_accuracy(features, raw_prototypes, &initial, eval_labels)?;
    let mut state = StepState::new(initial, config);
    let mut sampler = Sampler::new(features.rows(), config.seed);
    let mut records = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for iter in 0..config.iterations {
        let ids = sampler.next_batch(config.batch_size);
        let batch = features.select_rows(&ids);
        let m = pouf_step(&batch, &ids, &ctx, &mut state, None)?;
        let eval_now = (iter + 1) % config.eval_every == 0 || iter + 1 == config.iterations;
        let acc = if eval_now { eval_accuracy(features, raw_prototypes, &state.params, eval_labels)? } else { None };
        if let (Some(a), ModelSelection::BestEval) = (acc, config.model_selection) {
            if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                best = Some((a, iter + 1, state.params.clone()));
            }
        }
        records.push(StepRecord {
            iter,
            lr: m.lr,
            loss_total: m.loss_total,
            loss_transport: m.loss_transport,
            loss_mi: m.loss_mi,
            loss_entropy: m.loss_entropy,
            loss_cross_entropy: m.loss_cross_entropy,
            temperature: state.params.temperature(),
            accuracy: acc,
        });
    }

    let (params, selected_iteration) = match best {
        Some((_, it, p)) => (p, it),
        None => (state.params, config.iterations),
    };
    let final_accuracy = eval_accuracy(features, raw_prototypes, &params, eval_labels)?;
    let report = RunReport {
        method: config.method,
        records,
        initial_accuracy,
        final_accuracy,
        selected_iteration,
        final_prior: state.prior.prior.weights().to_vec(),
        short_classes: vec![],
    };
    Ok((params, report))
}

fn eval_accuracy(
    features: &Tensor,
    raw_prototypes: &Tensor,
    params: &ModelParams,
    labels: Option<&[usize]>,
) -> Result<Option<f64>> {
    let Some(labels) = labels else { return Ok(None) };
    let probs = predict_raw(features, raw_prototypes, params)?;
    Ok(Some(accuracy(&probs, labels)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Classes that had fewer than `topk` candidates.
    pub short_classes: Vec<usize>,
}

/// For each class, the `topk` samples predicted as that class with the
/// highest confidence. Each sample can only be chosen for its own argmax
/// class (lowest index on ties). Output is ordered by class, then by
/// descending confidence, then by index.
pub fn upl_pseudo_label(probs: &Tensor, topk: usize) -> Result<PseudoLabels> {
    if topk == 0 {
        return Err(Error::invalid("topk must be at least 1"));
    }
    if probs.rank() != 2 {
        return Err(Error::invalid("probabilities must be a matrix"));
    }
    let k = probs.cols();
    let pred = argmax_rows(probs);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in pred.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut out = PseudoLabels { indices: vec![], labels: vec![], short_classes: vec![] };
    for (c, mut cand) in by_class.into_iter().enumerate() {
        cand.sort_by(|&a, &b| probs.at(b, c).total_cmp(&probs.at(a, c)).then(a.cmp(&b)));
        if cand.len() < topk {
            out.short_classes.push(c);
        }
        for &i in cand.iter().take(topk) {
            out.indices.push(i);
            out.labels.push(c);
        }
    }
    Ok(out)
}

/// Pseudo-labels the whole dataset once with the zero-shot model, then fits
/// the prompt parameters with cross entropy on the selected samples.
pub fn upl_train(
    features: &Tensor,
    raw_prototypes: &Tensor,
    config: &TrainConfig,
    eval_labels: Option<&[usize]>,
) -> Result<(ModelParams, RunReport)> {
    let cfg = TrainConfig { method: Method::Upl, ..config.clone() };
    train(features, raw_prototypes, &cfg, eval_labels)
}

fn upl_train_from(
    initial: ModelParams,
    features: &Tensor,
    raw_prototypes: &Tensor,
    config: &TrainConfig,
    eval_labels: Option<&[usize]>,
) -> Result<(ModelParams, RunReport)> {
    let config = TrainConfig { tuning_mode: TuningMode::PromptTuning, ..config.clone() };
    let zero_shot = predict_raw(features, raw_prototypes, &initial)?;
    let pseudo = upl_pseudo_label(&zero_shot, config.upl_topk)?;
    if pseudo.indices.is_empty() {
        return Err(Error::invalid("no pseudo labels selected"));
    }
    let subset = features.select_rows(&pseudo.indices);

    let ctx = StepContext { raw_prototypes, config: &config };
    let initial_accuracy = eval_accuracy(features, raw_prototypes, &initial, eval_labels)?;
    let mut state = StepState::new(initial, &config);
    let mut sampler = Sampler::new(subset.rows(), config.seed);
    let mut records = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let local = sampler.next_batch(config.batch_size.min(subset.rows()));
        let batch = subset.select_rows(&local);
        let ids: Vec<usize> = local.iter().map(|&i| pseudo.indices[i]).collect();
        let labels: Vec<usize> = local.iter().map(|&i| pseudo.labels[i]).collect();
        let m = pouf_step(&batch, &ids, &ctx, &mut state, Some(&labels))?;
        let eval_now = (iter + 1) % config.eval_every == 0 || iter + 1 == config.iterations;
        let acc = if eval_now { eval_accuracy(features, raw_prototypes, &state.params, eval_labels)? } else { None };
        records.push(StepRecord {
            iter,
            lr: m.lr,
            loss_total: m.loss_total,
            loss_transport: 0.0,
            loss_mi: m.loss_mi,
            loss_entropy: m.loss_entropy,
            loss_cross_entropy: m.loss_cross_entropy,
            temperature: state.params.temperature(),
            accuracy: acc,
        });
    }
    let final_accuracy = eval_accuracy(features, raw_prototypes, &state.params, eval_labels)?;
    let report = RunReport {
        method: Method::Upl,
        records,
        initial_accuracy,
        final_accuracy,
        selected_iteration: config.iterations,
        final_prior: state.prior.prior.weights().to_vec(),
        short_classes: pseudo.short_classes,
    };
    Ok((state.params, report))
}

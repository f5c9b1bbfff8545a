//! Finite-difference verification of every differentiable pipeline.
//!
//! Each pipeline draws random instances (sizes, values, temperatures, priors),
//! computes reverse-mode gradients, and compares them entrywise against
//! central differences. The error of an entry is
//! `|a − n| / max(|a|, |n|, FLOOR)`, so entries near zero are held to an
//! absolute bound of `tolerance · FLOOR`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::graph::{finite_difference, Bindings, Gradients, Graph};
use crate::losses::{
    conditional_entropy_node, cross_entropy_node, ct_loss_node, mi_loss_node, CostKind, DiscreteDistribution,
};
use crate::model::{build_forward, ModelParams, ADAPTER, LOG_TEMPERATURE, PROTOTYPE_OFFSETS};
use crate::tensor::Tensor;

const FLOOR: f64 = 1e-3;

/// Deliberate corruption of the analytic gradient, for testing the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipSign,
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, instances: 100, step: 1e-5, tolerance: 1e-4, fault: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineOutcome {
    pub pipeline: &'static str,
    pub instances: usize,
    pub worst_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst_at: Option<(String, usize)>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub outcomes: Vec<PipelineOutcome>,
    pub worst_error: f64,
    pub passed: bool,
}

struct Instance {
    graph: Graph,
    bindings: Bindings,
    wrt: Vec<&'static str>,
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Instance>;

pub const PIPELINES: [&str; 6] =
    ["ct_loss", "mi_loss", "conditional_entropy", "cross_entropy", "predict", "pouf_objective"];

fn builder(name: &str) -> Builder {
    match name {
        "ct_loss" => ct_instance,
        "mi_loss" => mi_instance,
        "conditional_entropy" => entropy_instance,
        "cross_entropy" => cross_entropy_instance,
        "predict" => predict_instance,
        "pouf_objective" => objective_instance,
        _ => unreachable!("unknown pipeline {name}"),
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn random_prior(rng: &mut ChaCha8Rng, k: usize) -> DiscreteDistribution {
    if rng.random_bool(0.5) {
        return DiscreteDistribution::uniform(k);
    }
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    DiscreteDistribution::new(raw.into_iter().map(|x| x / s).collect()).expect("normalized")
}

fn random_temperature(rng: &mut ChaCha8Rng) -> f64 {
    [0.05, 0.1, 0.5, 1.0][rng.random_range(0..4)]
}

fn random_cost(rng: &mut ChaCha8Rng) -> CostKind {
    if rng.random_bool(0.5) {
        CostKind::CosineDistance
    } else {
        CostKind::ExpNegDot
    }
}

fn ct_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, k, d) = (rng.random_range(1..=8), rng.random_range(2..=6), rng.random_range(2..=6));
    let mut g = Graph::new();
    let f = g.parameter("features", &[m, d])?;
    let w = g.parameter("prototypes", &[k, d])?;
    let f = g.row_l2_normalize(f)?;
    let w = g.row_l2_normalize(w)?;
    let wt = g.transpose(w)?;
    let sim = g.matmul(f, wt)?;
    let inv_t = g.scalar_constant(1.0 / random_temperature(rng));
    let prior = random_prior(rng, k);
    let ct = ct_loss_node(&mut g, sim, inv_t, &prior, random_cost(rng))?;
    g.set_output(ct.total)?;
    let mut bindings = Bindings::new();
    bindings.insert("features".into(), normal(rng, &[m, d], 1.0));
    bindings.insert("prototypes".into(), normal(rng, &[k, d], 1.0));
    Ok(Instance { graph: g, bindings, wrt: vec!["features", "prototypes"] })
}

fn logits_instance(rng: &mut ChaCha8Rng) -> Result<(Graph, Bindings, crate::graph::NodeId, usize, usize)> {
    let (m, k) = (rng.random_range(1..=8), rng.random_range(2..=6));
    let mut g = Graph::new();
    let z = g.parameter("logits", &[m, k])?;
    let p = g.softmax(z, 1)?;
    let mut bindings = Bindings::new();
    bindings.insert("logits".into(), normal(rng, &[m, k], 2.0));
    Ok((g, bindings, p, m, k))
}

fn mi_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (mut g, bindings, p, _, _) = logits_instance(rng)?;
    let mi = mi_loss_node(&mut g, p)?;
    g.set_output(mi.total)?;
    Ok(Instance { graph: g, bindings, wrt: vec!["logits"] })
}

fn entropy_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (mut g, bindings, p, _, _) = logits_instance(rng)?;
    let h = conditional_entropy_node(&mut g, p)?;
    g.set_output(h)?;
    Ok(Instance { graph: g, bindings, wrt: vec!["logits"] })
}

fn cross_entropy_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (mut g, bindings, p, m, k) = logits_instance(rng)?;
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let ce = cross_entropy_node(&mut g, p, &labels)?;
    g.set_output(ce)?;
    Ok(Instance { graph: g, bindings, wrt: vec!["logits"] })
}

fn model_bindings(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Bindings {
    let mut params = ModelParams::init(d, k, random_temperature(rng)).expect("valid sizes");
    let a = normal(rng, &[d, d], 0.2);
    for (p, n) in params.adapter.data_mut().iter_mut().zip(a.data()) {
        *p += n;
    }
    params.proto_offsets = normal(rng, &[k, d], 0.2);
    params.log_temperature += rng.random_range(-0.3..0.3);
    params.bindings()
}

fn predict_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, k, d) = (rng.random_range(1..=8), rng.random_range(2..=6), rng.random_range(2..=5));
    let raw_f = normal(rng, &[m, d], 1.0);
    let raw_w = normal(rng, &[k, d], 1.0);
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, &raw_f, &raw_w)?;
    // Random linear read-out so every probability entry matters.
    let r = g.constant(normal(rng, &[m, k], 1.0));
    let weighted = g.mul(fwd.probs, r)?;
    let out = g.sum_all(weighted);
    g.set_output(out)?;
    Ok(Instance {
        graph: g,
        bindings: model_bindings(rng, d, k),
        wrt: vec![ADAPTER, PROTOTYPE_OFFSETS, LOG_TEMPERATURE],
    })
}

fn objective_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (m, k, d) = (rng.random_range(2..=8), rng.random_range(2..=6), rng.random_range(2..=5));
    let raw_f = normal(rng, &[m, d], 1.0);
    let raw_w = normal(rng, &[k, d], 1.0);
    let mut g = Graph::new();
    let fwd = build_forward(&mut g, &raw_f, &raw_w)?;
    let prior = random_prior(rng, k);
    let ct = ct_loss_node(&mut g, fwd.similarity, fwd.inv_temperature, &prior, random_cost(rng))?;
    let mi = mi_loss_node(&mut g, fwd.probs)?;
    let lambda = rng.random_range(0.1..1.0);
    let scaled = g.scale(mi.total, lambda)?;
    let total = g.add(ct.total, scaled)?;
    g.set_output(total)?;
    Ok(Instance {
        graph: g,
        bindings: model_bindings(rng, d, k),
        wrt: vec![ADAPTER, PROTOTYPE_OFFSETS, LOG_TEMPERATURE],
    })
}

fn worst_entry(analytic: &Gradients, numeric: &Gradients) -> (f64, Option<(String, usize)>) {
    let mut worst = (0.0, None);
    for (name, a) in analytic {
        let n = &numeric[name];
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(FLOOR);
            if err > worst.0 || err.is_nan() {
                worst = (if err.is_nan() { f64::INFINITY } else { err }, Some((name.clone(), i)));
            }
        }
    }
    worst
}

pub fn check_pipeline(name: &'static str, cfg: &GradcheckConfig) -> Result<PipelineOutcome> {
    let build = builder(name);
    let offset = PIPELINES.iter().position(|&p| p == name).expect("known pipeline") as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(offset));
    let mut worst = (0.0, None);
    for _ in 0..cfg.instances {
        let inst = build(&mut rng)?;
        let mut analytic = inst.graph.gradient(&inst.bindings, &inst.wrt)?;
        if cfg.fault == Some(Fault::FlipSign) {
            for g in analytic.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = -*x);
            }
        }
        let numeric =
            finite_difference(|b| Ok(inst.graph.evaluate(b)?.data()[0]), &inst.bindings, &inst.wrt, cfg.step)?;
        let w = worst_entry(&analytic, &numeric);
        if w.0 > worst.0 || worst.1.is_none() {
            worst = w;
        }
    }
    Ok(PipelineOutcome {
        pipeline: name,
        instances: cfg.instances,
        worst_error: worst.0,
        worst_at: worst.1,
        passed: worst.0 <= cfg.tolerance,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let outcomes = PIPELINES.iter().map(|&p| check_pipeline(p, cfg)).collect::<Result<Vec<_>>>()?;
    let worst_error = outcomes.iter().map(|o| o.worst_error).fold(0.0, f64::max);
    let passed = outcomes.iter().all(|o| o.passed);
    Ok(GradcheckReport { outcomes, worst_error, passed })
}

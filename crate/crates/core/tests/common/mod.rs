//! Reference implementations written independently of the library code.
//! Everything here is plain loops over `Vec<f64>`.

#![allow(dead_code, clippy::needless_range_loop)]

use pouf_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Strictly positive random weights summing to one.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Row-stochastic matrix from random logits.
pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let z: Vec<f64> = (0..cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                scale * v
            })
            .collect();
        data.extend(softmax(&z));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub enum OracleCost {
    OneMinus,
    ExpNeg,
}

/// Conditional transport loss as two explicit double loops over a plain
/// similarity matrix `sim[i][k]`. Returns `(total, forward, backward)`.
pub fn ct_oracle(sim: &[Vec<f64>], temperature: f64, prior: &[f64], cost: OracleCost) -> (f64, f64, f64) {
    let m = sim.len();
    let k = prior.len();
    let c = |s: f64| match cost {
        OracleCost::OneMinus => 1.0 - s,
        OracleCost::ExpNeg => (-s).exp(),
    };

    let mut forward = 0.0;
    for row in sim {
        let logits: Vec<f64> = (0..k).map(|j| row[j] / temperature + prior[j].ln()).collect();
        let pi = softmax(&logits);
        for j in 0..k {
            forward += c(row[j]) * pi[j];
        }
    }
    forward /= m as f64;

    let mut backward = 0.0;
    for j in 0..k {
        let logits: Vec<f64> = (0..m).map(|i| sim[i][j] / temperature).collect();
        let pi = softmax(&logits);
        let mut inner = 0.0;
        for i in 0..m {
            inner += c(sim[i][j]) * pi[i];
        }
        backward += prior[j] * inner;
    }
    (forward + backward, forward, backward)
}

/// Exact transport cost by enumerating every basic feasible solution of
/// the transportation polytope. A basis is a set of `r + c - 1` cells
/// forming a spanning tree of the bipartite row/column graph; its flows are
/// fixed by peeling leaves.
pub fn ot_vertex_oracle(cost: &[Vec<f64>], u: &[f64], v: &[f64]) -> f64 {
    let (r, c) = (u.len(), v.len());
    let cells: Vec<(usize, usize)> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
    let need = r + c - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(need);
    enumerate(&cells, 0, need, &mut chosen, &mut |basis| {
        if let Some(flow) = basis_flow(basis, u, v) {
            let total: f64 = basis.iter().zip(&flow).map(|(&(i, j), f)| cost[i][j] * f).sum();
            best = best.min(total);
        }
    });
    best
}

fn enumerate(
    cells: &[(usize, usize)],
    start: usize,
    need: usize,
    chosen: &mut Vec<(usize, usize)>,
    visit: &mut impl FnMut(&[(usize, usize)]),
) {
    if chosen.len() == need {
        visit(chosen);
        return;
    }
    let remaining = need - chosen.len();
    for idx in start..=cells.len().saturating_sub(remaining) {
        chosen.push(cells[idx]);
        enumerate(cells, idx + 1, need, chosen, visit);
        chosen.pop();
    }
}

/// Flows on a spanning-tree basis, or `None` if the cells contain a cycle
/// or the induced flows go negative.
fn basis_flow(basis: &[(usize, usize)], u: &[f64], v: &[f64]) -> Option<Vec<f64>> {
    let (r, c) = (u.len(), v.len());
    let mut row_left = u.to_vec();
    let mut col_left = v.to_vec();
    let mut flow = vec![f64::NAN; basis.len()];
    let mut open: Vec<bool> = vec![true; basis.len()];
    for _ in 0..basis.len() {
        let mut progressed = false;
        for node in 0..r + c {
            let incident: Vec<usize> = (0..basis.len())
                .filter(|&e| open[e] && if node < r { basis[e].0 == node } else { basis[e].1 == node - r })
                .collect();
            if incident.len() != 1 {
                continue;
            }
            let e = incident[0];
            let (i, j) = basis[e];
            let x = if node < r { row_left[i] } else { col_left[j] };
            flow[e] = x;
            row_left[i] -= x;
            col_left[j] -= x;
            open[e] = false;
            progressed = true;
            break;
        }
        if !progressed {
            // Every remaining node has degree 0 or ≥2 among open edges: a cycle.
            return None;
        }
    }
    let tol = 1e-12;
    if flow.iter().any(|&f| f < -tol) {
        return None;
    }
    if row_left.iter().chain(&col_left).any(|x| x.abs() > 1e-9) {
        return None;
    }
    Some(flow)
}

/// Exact value for uniform marginals: the minimum over permutation
/// matrices, the vertices of the Birkhoff polytope.
pub fn birkhoff_oracle(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        best = best.min(total / n as f64);
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `-Σ p ln(p + 1e-8)`, matching the smoothing used by the loss.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * (x + 1e-8).ln()).sum::<f64>()
}

/// `H(Y|X) - H(Y)` computed row by row.
pub fn mi_oracle(probs: &[Vec<f64>]) -> f64 {
    let m = probs.len() as f64;
    let k = probs[0].len();
    let cond = probs.iter().map(|r| entropy(r)).sum::<f64>() / m;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / m).collect();
    cond - entropy(&marginal)
}

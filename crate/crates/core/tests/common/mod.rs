//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Squared distance between block centers, divided by the squared grid
/// diagonal (1 when the grid is a single row and column).
pub fn grid_cost(h: usize, w: usize, p: usize, q: usize) -> f64 {
    let (pi, pj) = ((p / w) as f64, (p % w) as f64);
    let (qi, qj) = ((q / w) as f64, (q % w) as f64);
    let diag = ((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64;
    let d2 = (pi - qi).powi(2) + (pj - qj).powi(2);
    d2 / if diag > 0.0 { diag } else { 1.0 }
}

/// Exact optimal transport cost between the normalized grids by linear
/// programming.
pub fn lp_transport(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (h, w) = a.dim();
    let n = h * w;
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let av: Vec<f64> = a.iter().map(|v| v / sa).collect();
    let bv: Vec<f64> = b.iter().map(|v| v / sb).collect();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let mut x = Vec::with_capacity(n * n);
    for p in 0..n {
        for q in 0..n {
            x.push(lp.add_var(grid_cost(h, w, p, q), (0.0, f64::INFINITY)));
        }
    }
    for p in 0..n {
        let row: Vec<_> = (0..n).map(|q| (x[p * n + q], 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, av[p]);
    }
    // one column constraint is implied by the others
    for q in 0..n - 1 {
        let col: Vec<_> = (0..n).map(|p| (x[p * n + q], 1.0)).collect();
        lp.add_constraint(col.as_slice(), ComparisonOp::Eq, bv[q]);
    }
    lp.solve().expect("transport LP is feasible").objective()
}

/// `-sum log p[target]` by explicit loops.
pub fn brute_ce(prob: &Array3<f64>, classes: &Array2<usize>) -> f64 {
    let (_, h, w) = prob.dim();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            s -= prob[[classes[[i, j]], i, j]].max(1e-12).ln();
        }
    }
    s
}

/// Mass and total-variation parts of the count loss.
pub fn brute_mass_tv(pred: &Array2<f64>, gt: &Array2<f64>, tv_weight: f64) -> f64 {
    let (mut sp, mut sg) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sp += p;
        sg += g;
    }
    let mut tv = 0.0;
    if sp >= 1e-6 && sg >= 1e-6 {
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            tv += (p / sp - g / sg).abs();
        }
        tv *= 0.5;
    }
    (sp - sg).abs() + tv_weight * tv
}

pub fn brute_expectation(prob: &Array3<f64>, reps: &[f64]) -> Array2<f64> {
    let (n, h, w) = prob.dim();
    let mut out = Array2::zeros((h, w));
    for k in 0..n {
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] += prob[[k, i, j]] * reps[k];
            }
        }
    }
    out
}

pub fn brute_softmax(logits: &Array3<f64>) -> Array3<f64> {
    let (n, h, w) = logits.dim();
    let mut out = Array3::zeros((n, h, w));
    for i in 0..h {
        for j in 0..w {
            let max = (0..n).map(|k| logits[[k, i, j]]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|k| (logits[[k, i, j]] - max).exp()).sum();
            for k in 0..n {
                out[[k, i, j]] = (logits[[k, i, j]] - max).exp() / z;
            }
        }
    }
    out
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.gen_range(0.05..1.0))
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((n, h, w), |_| rng.gen_range(-2.0..2.0))
}

/// `(mae, rmse)` accumulated by index.
pub fn direct_metrics(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for k in 0..pairs.len() {
        let e = pairs[k].1 - pairs[k].0;
        abs += e.abs();
        sq += e * e;
    }
    (abs / n, (sq / n).sqrt())
}

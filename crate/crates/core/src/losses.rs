//! Classification loss, the optimal-transport count loss and their weighted
//! combination.
//!
//! Each loss comes in a value-only form and a `_with_grad` form returning the
//! gradient with respect to its prediction input. The gradients are exact for
//! the returned values, except for the transport term, whose gradient is the
//! converged dual potential and is exact only up to the Sinkhorn marginal
//! error.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::TargetMaps;
use crate::maps::{DensityMap, MapError, ProbabilityMap};

/// Probabilities are floored here before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// Below this total mass the transport and TV terms are skipped.
pub const MASS_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error(transparent)]
    Prediction(#[from] MapError),
    #[error("{0} grid has zero total mass")]
    ZeroMass(&'static str),
    #[error("{0} grid has a negative or non-finite entry")]
    InvalidMass(&'static str),
    #[error("invalid transport config: {0}")]
    Config(String),
}

fn check_shape(left: &[usize], right: &[usize]) -> Result<(), LossError> {
    if left != right {
        return Err(LossError::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
        });
    }
    Ok(())
}

/// Entropic transport parameters. Costs are squared block-center distances
/// divided by the squared grid diagonal, so `epsilon` is relative to a
/// maximum cost of 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OTConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    #[serde(rename = "weight")]
    pub ot_weight: f64,
    pub tv_weight: f64,
}

impl Default for OTConfig {
    fn default() -> Self {
        OTConfig {
            epsilon: 0.01,
            max_iters: 100,
            tolerance: 1e-5,
            ot_weight: 0.1,
            tv_weight: 0.01,
        }
    }
}

impl OTConfig {
    pub fn check(&self) -> Result<(), LossError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(LossError::Config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(LossError::Config("max_iters must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(LossError::Config("tolerance must be > 0".into()));
        }
        if !(self.ot_weight >= 0.0) || !(self.tv_weight >= 0.0) {
            return Err(LossError::Config("term weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub count: f64,
    pub total: f64,
    pub lambda: f64,
}

// ---------------------------------------------------------------------------
// classification

pub fn classification_loss(
    pred: &ProbabilityMap,
    target_onehot: &Array3<f64>,
) -> Result<f64, LossError> {
    check_shape(pred.values().shape(), target_onehot.shape())?;
    let mut loss = 0.0;
    Zip::from(pred.values())
        .and(target_onehot)
        .for_each(|&p, &t| {
            if t == 1.0 {
                loss -= p.max(PROBABILITY_FLOOR).ln();
            }
        });
    Ok(loss)
}

/// Gradient of [`classification_loss`] with respect to the probabilities.
pub fn classification_loss_with_grad(
    pred: &ProbabilityMap,
    target_onehot: &Array3<f64>,
) -> Result<(f64, Array3<f64>), LossError> {
    let loss = classification_loss(pred, target_onehot)?;
    let mut grad = Array3::zeros(target_onehot.raw_dim());
    Zip::from(&mut grad)
        .and(pred.values())
        .and(target_onehot)
        .for_each(|g, &p, &t| {
            if t == 1.0 && p > PROBABILITY_FLOOR {
                *g = -1.0 / p;
            }
        });
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Sinkhorn

/// Squared-distance cost on an `h x w` lattice, factored into row and column
/// parts: `C[(r1,c1),(r2,c2)] = (row[|r1-r2|] + col[|c1-c2|])`.
struct GridCost {
    h: usize,
    w: usize,
    /// `-(dr^2) / (diag^2 * eps)`
    row: Vec<f64>,
    col: Vec<f64>,
}

impl GridCost {
    fn new(h: usize, w: usize, epsilon: f64) -> Self {
        let diag2 = match ((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64 {
            d if d > 0.0 => d,
            _ => 1.0,
        };
        let scale = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|d| -((d * d) as f64) / (diag2 * epsilon))
                .collect()
        };
        GridCost {
            h,
            w,
            row: scale(h),
            col: scale(w),
        }
    }

    /// `out[i] = logsumexp_j (field[j] - C[i,j] / eps)`, done as a column
    /// pass followed by a row pass.
    fn soft_min(&self, field: &[f64], out: &mut [f64], scratch: &mut [f64], terms: &mut Vec<f64>) {
        let (h, w) = (self.h, self.w);
        // scratch[r2 * w + c1] = lse_c2 field[r2, c2] + col[|c1 - c2|]
        for r2 in 0..h {
            let row = &field[r2 * w..(r2 + 1) * w];
            for c1 in 0..w {
                terms.clear();
                terms.extend(
                    row.iter()
                        .enumerate()
                        .map(|(c2, &v)| v + self.col[c1.abs_diff(c2)]),
                );
                scratch[r2 * w + c1] = logsumexp(terms);
            }
        }
        for r1 in 0..h {
            for c1 in 0..w {
                terms.clear();
                terms.extend((0..h).map(|r2| scratch[r2 * w + c1] + self.row[r1.abs_diff(r2)]));
                out[r1 * w + c1] = logsumexp(terms);
            }
        }
    }
}

fn logsumexp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

/// Result of [`sinkhorn_ot`].
#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    /// Debiased entropic transport cost between the normalized grids.
    pub value: f64,
    /// Gradient of `value` with respect to the unnormalized source grid.
    pub source_gradient: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest L1 marginal violation among the inner solves.
    pub marginal_error: f64,
}

struct Potentials {
    f: Vec<f64>,
    value: f64,
    converged: bool,
    iterations: usize,
    error: f64,
}

struct Solver<'a> {
    cost: GridCost,
    epsilon: f64,
    cfg: &'a OTConfig,
    scratch: Vec<f64>,
    terms: Vec<f64>,
    field: Vec<f64>,
}

impl<'a> Solver<'a> {
    fn new(h: usize, w: usize, cfg: &'a OTConfig) -> Self {
        Solver {
            cost: GridCost::new(h, w, cfg.epsilon),
            epsilon: cfg.epsilon,
            cfg,
            scratch: vec![0.0; h * w],
            terms: Vec::with_capacity(h.max(w)),
            field: vec![0.0; h * w],
        }
    }

    /// `out = -eps * lse_j (log_m[j] + pot[j] / eps - C / eps)`
    fn best_response(&mut self, log_m: &[f64], pot: &[f64], out: &mut [f64]) {
        let eps = self.epsilon;
        for ((fv, &lm), &p) in self.field.iter_mut().zip(log_m).zip(pot) {
            *fv = lm + p / eps;
        }
        self.cost
            .soft_min(&self.field, out, &mut self.scratch, &mut self.terms);
        for o in out.iter_mut() {
            *o *= -eps;
        }
    }

    /// Alternating updates for `L(a, b)`.
    fn solve(&mut self, a: &[f64], b: &[f64]) -> Potentials {
        let n = a.len();
        let eps = self.epsilon;
        let (log_a, log_b) = (logs(a), logs(b));
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut f_next = vec![0.0; n];
        self.best_response(&log_b, &g, &mut f);
        let mut error = f64::INFINITY;
        let mut iterations = 0;
        while iterations < self.cfg.max_iters {
            iterations += 1;
            self.best_response(&log_a, &f, &mut g);
            self.best_response(&log_b, &g, &mut f_next);
            // row sums of the current plan are a_i * exp((f_i - f_next_i) / eps)
            error = a
                .iter()
                .zip(f.iter().zip(&f_next))
                .filter(|(&ai, _)| ai > 0.0)
                .map(|(&ai, (&fi, &fn_))| ai * (1.0 - ((fi - fn_) / eps).exp()).abs())
                .sum();
            if error < self.cfg.tolerance {
                break;
            }
            std::mem::swap(&mut f, &mut f_next);
        }
        let value = dot_support(&f, a) + dot_support(&g, b);
        Potentials {
            f,
            value,
            converged: error < self.cfg.tolerance,
            iterations,
            error,
        }
    }

    /// Averaged fixed-point updates for the symmetric problem `L(a, a)`.
    fn solve_symmetric(&mut self, a: &[f64]) -> Potentials {
        let n = a.len();
        let eps = self.epsilon;
        let log_a = logs(a);
        let mut f = vec![0.0; n];
        let mut t = vec![0.0; n];
        let mut error = f64::INFINITY;
        let mut iterations = 0;
        let mut plan_mass = 1.0;
        while iterations < self.cfg.max_iters {
            iterations += 1;
            self.best_response(&log_a, &f, &mut t);
            let mut err = 0.0;
            let mut mass = 0.0;
            for ((&ai, &fi), &ti) in a.iter().zip(&f).zip(&t) {
                if ai > 0.0 {
                    let ratio = ((fi - ti) / eps).exp();
                    err += ai * (1.0 - ratio).abs();
                    mass += ai * ratio;
                }
            }
            error = err;
            plan_mass = mass;
            if error < self.cfg.tolerance {
                break;
            }
            for (fi, &ti) in f.iter_mut().zip(&t) {
                *fi = 0.5 * (*fi + ti);
            }
        }
        let value = 2.0 * dot_support(&f, a) - eps * (plan_mass - 1.0);
        Potentials {
            f,
            value,
            converged: error < self.cfg.tolerance,
            iterations,
            error,
        }
    }
}

fn logs(m: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
        .collect()
}

fn dot_support(pot: &[f64], m: &[f64]) -> f64 {
    pot.iter()
        .zip(m)
        .filter(|(_, &mi)| mi > 0.0)
        .map(|(&p, &mi)| p * mi)
        .sum()
}

fn normalized(grid: &Array2<f64>, which: &'static str) -> Result<(Vec<f64>, f64), LossError> {
    if grid.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(LossError::InvalidMass(which));
    }
    let total: f64 = grid.sum();
    if !(total > 0.0) {
        return Err(LossError::ZeroMass(which));
    }
    Ok((grid.iter().map(|&v| v / total).collect(), total))
}

/// Entropic optimal transport between two nonnegative grids.
///
/// Both grids are normalized to unit mass over the block centers. The value
/// is the debiased entropic cost
/// `S(a, b) = L(a, b) - L(a, a) / 2 - L(b, b) / 2`, which is zero for
/// identical inputs and tends to the exact transport cost as `epsilon -> 0`.
/// Iterations run in the log domain. On non-convergence the value is still
/// returned with `converged == false`.
pub fn sinkhorn_ot(
    source: &Array2<f64>,
    target: &Array2<f64>,
    cfg: &OTConfig,
) -> Result<OtResult, LossError> {
    cfg.check()?;
    check_shape(source.shape(), target.shape())?;
    let (a, source_mass) = normalized(source, "source")?;
    let (b, _) = normalized(target, "target")?;
    let (h, w) = source.dim();
    let mut solver = Solver::new(h, w, cfg);

    let (value, grad_a, converged, iterations, error) = if a == b {
        let aa = solver.solve_symmetric(&a);
        (0.0, vec![0.0; a.len()], aa.converged, aa.iterations, aa.error)
    } else {
        let ab = solver.solve(&a, &b);
        let aa = solver.solve_symmetric(&a);
        let bb = solver.solve_symmetric(&b);
        let grad: Vec<f64> = ab.f.iter().zip(&aa.f).map(|(x, y)| x - y).collect();
        (
            ab.value - 0.5 * aa.value - 0.5 * bb.value,
            grad,
            ab.converged && aa.converged && bb.converged,
            ab.iterations.max(aa.iterations).max(bb.iterations),
            ab.error.max(aa.error).max(bb.error),
        )
    };
    if !converged {
        log::debug!(
            "sinkhorn did not converge in {iterations} iterations (marginal error {error:.3e})"
        );
    }

    // chain through a = x / |x|
    let mean: f64 = grad_a.iter().zip(&a).map(|(g, ai)| g * ai).sum();
    let source_gradient = Array2::from_shape_vec(
        (h, w),
        grad_a.iter().map(|g| (g - mean) / source_mass).collect(),
    )
    .expect("shape matches");

    Ok(OtResult {
        value,
        source_gradient,
        converged,
        iterations,
        marginal_error: error,
    })
}

// ---------------------------------------------------------------------------
// count loss

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountLoss {
    /// `| |pred|_1 - |gt|_1 |`
    pub mass: f64,
    /// Weighted transport term (already multiplied by `ot_weight`).
    pub ot: f64,
    /// Weighted total-variation term.
    pub tv: f64,
    pub total: f64,
    /// `false` when Sinkhorn hit `max_iters`; `true` when it converged or the
    /// transport term was skipped.
    pub ot_converged: bool,
}

pub fn count_loss(
    pred_density: &DensityMap,
    gt_density: &Array2<f64>,
    cfg: &OTConfig,
) -> Result<CountLoss, LossError> {
    count_loss_with_grad(pred_density, gt_density, cfg).map(|(l, _)| l)
}

/// Count loss and its gradient with respect to the predicted density.
pub fn count_loss_with_grad(
    pred_density: &DensityMap,
    gt_density: &Array2<f64>,
    cfg: &OTConfig,
) -> Result<(CountLoss, Array2<f64>), LossError> {
    let pred = pred_density.values();
    check_shape(pred.shape(), gt_density.shape())?;
    let pred_mass = pred.sum();
    let gt_mass = gt_density.sum();
    let diff = pred_mass - gt_mass;
    let mass = diff.abs();
    let mut grad = Array2::from_elem(pred.raw_dim(), sign(diff));

    let mut ot = 0.0;
    let mut tv = 0.0;
    let mut ot_converged = true;
    if pred_mass >= MASS_FLOOR && gt_mass >= MASS_FLOOR {
        if cfg.ot_weight > 0.0 {
            let res = sinkhorn_ot(pred, gt_density, cfg)?;
            ot = cfg.ot_weight * res.value;
            ot_converged = res.converged;
            grad.scaled_add(cfg.ot_weight, &res.source_gradient);
        }
        if cfg.tv_weight > 0.0 {
            let p = pred / pred_mass;
            let q = gt_density / gt_mass;
            let half_signs = Zip::from(&p).and(&q).map_collect(|&x, &y| 0.5 * sign(x - y));
            tv = cfg.tv_weight * 0.5 * Zip::from(&p).and(&q).fold(0.0, |acc, &x, &y| acc + (x - y).abs());
            // d/dx of s . (x / |x|) is (s - s.p) / |x|
            let sp: f64 = (&half_signs * &p).sum();
            grad.zip_mut_with(&half_signs, |g, &s| {
                *g += cfg.tv_weight * (s - sp) / pred_mass;
            });
        }
    }
    Ok((
        CountLoss {
            mass,
            ot,
            tv,
            total: mass + ot + tv,
            ot_converged,
        },
        grad,
    ))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// combined

/// `classification + lambda * count`. The caller guarantees `pred_density` is
/// the expectation of `pred_prob`.
pub fn dace_loss(
    pred_prob: &ProbabilityMap,
    targets: &TargetMaps,
    pred_density: &DensityMap,
    lambda: f64,
    cfg: &OTConfig,
) -> Result<LossBreakdown, LossError> {
    dace_loss_with_grad(pred_prob, targets, pred_density, lambda, cfg).map(|(l, _)| l)
}

/// Gradients of the combined loss, split by prediction input.
#[derive(Debug, Clone, PartialEq)]
pub struct DaceGradient {
    pub probabilities: Array3<f64>,
    pub density: Array2<f64>,
}

pub fn dace_loss_with_grad(
    pred_prob: &ProbabilityMap,
    targets: &TargetMaps,
    pred_density: &DensityMap,
    lambda: f64,
    cfg: &OTConfig,
) -> Result<(LossBreakdown, DaceGradient), LossError> {
    if !(lambda >= 0.0) {
        return Err(LossError::Config(format!("lambda {lambda} must be >= 0")));
    }
    let (classification, grad_prob) = classification_loss_with_grad(pred_prob, &targets.onehot)?;
    let (count, mut grad_density) = if lambda == 0.0 {
        check_shape(
            &[pred_density.shape().0, pred_density.shape().1],
            targets.gt_density.shape(),
        )?;
        (0.0, Array2::zeros(targets.gt_density.raw_dim()))
    } else {
        let (c, g) = count_loss_with_grad(pred_density, &targets.gt_density, cfg)?;
        (c.total, g)
    };
    grad_density.mapv_inplace(|g| g * lambda);
    let total = if lambda == 0.0 {
        classification
    } else {
        classification + lambda * count
    };
    Ok((
        LossBreakdown {
            classification,
            count,
            total,
            lambda,
        },
        DaceGradient {
            probabilities: grad_prob,
            density: grad_density,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pm(v: Vec<f64>, n: usize, h: usize, w: usize) -> ProbabilityMap {
        ProbabilityMap::new(Array3::from_shape_vec((n, h, w), v).unwrap()).unwrap()
    }

    #[test]
    fn classification_examples() {
        let exact = pm(vec![1.0, 0.0], 2, 1, 1);
        let target = Array3::from_shape_vec((2, 1, 1), vec![1.0, 0.0]).unwrap();
        assert_eq!(classification_loss(&exact, &target).unwrap(), 0.0);

        let half = pm(vec![0.5, 0.5], 2, 1, 1);
        let l = classification_loss(&half, &target).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let wrong = pm(vec![0.0, 1.0], 2, 1, 1);
        let l = classification_loss(&wrong, &target).unwrap();
        assert!((l + PROBABILITY_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_shape_mismatch() {
        let p = pm(vec![0.5, 0.5], 2, 1, 1);
        let t = Array3::zeros((3, 1, 1));
        assert!(matches!(
            classification_loss(&p, &t),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sinkhorn_two_blocks() {
        let a = array![[1.0], [0.0]];
        let b = array![[0.0], [1.0]];
        let cfg = OTConfig {
            epsilon: 1e-3,
            max_iters: 1000,
            tolerance: 1e-12,
            ..OTConfig::default()
        };
        let r = sinkhorn_ot(&a, &b, &cfg).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn sinkhorn_identical_is_zero() {
        let a = array![[0.2, 0.5], [1.0, 0.3]];
        let r = sinkhorn_ot(&a, &a, &OTConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.source_gradient.iter().all(|&g| g == 0.0));
        // same distribution at a different total mass
        let scaled = sinkhorn_ot(&a, &(&a * 3.0), &OTConfig::default()).unwrap();
        assert!(scaled.value.abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_errors() {
        let z = Array2::zeros((2, 2));
        let a = Array2::ones((2, 2));
        assert_eq!(
            sinkhorn_ot(&z, &a, &OTConfig::default()).unwrap_err(),
            LossError::ZeroMass("source")
        );
        assert_eq!(
            sinkhorn_ot(&a, &z, &OTConfig::default()).unwrap_err(),
            LossError::ZeroMass("target")
        );
        let bad = OTConfig {
            epsilon: 0.0,
            ..OTConfig::default()
        };
        assert!(matches!(sinkhorn_ot(&a, &a, &bad), Err(LossError::Config(_))));
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let a = array![[1.0, 0.1, 0.0], [0.3, 0.2, 0.9]];
        let b = array![[0.0, 0.4, 1.0], [0.5, 0.1, 0.2]];
        let cfg = OTConfig {
            max_iters: 1,
            tolerance: 1e-15,
            ..OTConfig::default()
        };
        let r = sinkhorn_ot(&a, &b, &cfg).unwrap();
        assert!(!r.converged);
        assert!(r.value.is_finite());
    }

    #[test]
    fn count_loss_examples() {
        let gt = array![[1.0, 2.0], [0.5, 1.5]];
        let same = count_loss(&DensityMap(gt.clone()), &gt, &OTConfig::default()).unwrap();
        assert_eq!(same.mass, 0.0);
        assert_eq!(same.tv, 0.0);
        assert!(same.ot < 1e-3);

        let gt5 = array![[2.0, 0.0], [1.0, 2.0]];
        let zero = count_loss(&DensityMap(Array2::zeros((2, 2))), &gt5, &OTConfig::default()).unwrap();
        assert_eq!(zero.total, 5.0);
        assert_eq!(zero.ot, 0.0);
        assert_eq!(zero.tv, 0.0);

        // empty ground truth: only the mass term applies
        let empty = count_loss(&DensityMap(gt.clone()), &Array2::zeros((2, 2)), &OTConfig::default()).unwrap();
        assert_eq!(empty.total, 5.0);
    }

    #[test]
    fn dace_lambda_zero_is_classification() {
        let p = pm(vec![0.7, 0.2, 0.3, 0.8], 2, 1, 2);
        let t = TargetMaps::from_parts(array![[1, 0]], 2, array![[1.0, 0.0]]);
        let d = DensityMap(array![[0.2, 0.8]]);
        let l = dace_loss(&p, &t, &d, 0.0, &OTConfig::default()).unwrap();
        assert_eq!(l.total.to_bits(), classification_loss(&p, &t.onehot).unwrap().to_bits());
        assert!(dace_loss(&p, &t, &d, -1.0, &OTConfig::default()).is_err());
    }
}

//! The blockwise classification head.
//!
//! Encoder features are resampled to the block grid, projected into the text
//! embedding space, compared with one text embedding per bin by cosine
//! similarity, turned into per-block probabilities with a softmax, and decoded
//! into a density map by taking the expectation over bin representatives.
//!
//! Every stage has a matching `*_backward` used by training.

use ndarray::{Array1, Array2, Array3, Axis};
use thiserror::Error;

use crate::bins::BinPolicy;
use crate::maps::{DensityMap, ProbabilityMap};
use crate::prompts::TextEmbeddingBank;

/// Feature vectors shorter than this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;
pub const LOGIT_SCALE_MIN: f64 = 1.0;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("target size {0}x{1} is empty")]
    EmptyTarget(usize, usize),
    #[error("feature width {features} does not match {other} width {expected}")]
    WidthMismatch {
        features: usize,
        expected: usize,
        other: &'static str,
    },
    #[error("logit at ({k}, {i}, {j}) is not finite")]
    NonFiniteLogit { k: usize, i: usize, j: usize },
    #[error("probability map has {got} bins, policy has {expected}")]
    BinCountMismatch { got: usize, expected: usize },
    #[error("image {height}x{width} is smaller than one {r}x{r} block")]
    ImageTooSmall { height: usize, width: usize, r: usize },
    #[error("encoder: {0}")]
    Encoder(String),
}

/// `c x h x w` features produced at stride `stride` relative to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

// ---------------------------------------------------------------------------
// interpolation

/// Source taps for one output coordinate of a half-pixel-centered bilinear
/// resize.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                t: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize (align-corners off) of every channel to `out_h x out_w`.
pub fn interpolate_features(
    fm: &FeatureMap,
    out_h: usize,
    out_w: usize,
    out_stride: usize,
) -> Result<FeatureMap, HeadError> {
    if out_h == 0 || out_w == 0 {
        return Err(HeadError::EmptyTarget(out_h, out_w));
    }
    let (c, h, w) = fm.values.dim();
    if (h, w) == (out_h, out_w) {
        return Ok(FeatureMap {
            values: fm.values.clone(),
            stride: out_stride,
        });
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let v = &fm.values;
    let values = Array3::from_shape_fn((c, out_h, out_w), |(ch, i, j)| {
        let (a, b) = (ty[i], tx[j]);
        let top = v[[ch, a.lo, b.lo]] * (1.0 - b.t) + v[[ch, a.lo, b.hi]] * b.t;
        let bottom = v[[ch, a.hi, b.lo]] * (1.0 - b.t) + v[[ch, a.hi, b.hi]] * b.t;
        top * (1.0 - a.t) + bottom * a.t
    });
    Ok(FeatureMap {
        values,
        stride: out_stride,
    })
}

/// Adjoint of [`interpolate_features`] for an input of spatial size `(h, w)`.
pub fn interpolate_backward(grad: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, out_h, out_w) = grad.dim();
    if (h, w) == (out_h, out_w) {
        return grad.clone();
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (i, a) in ty.iter().enumerate() {
            for (j, b) in tx.iter().enumerate() {
                let g = grad[[ch, i, j]];
                out[[ch, a.lo, b.lo]] += g * (1.0 - a.t) * (1.0 - b.t);
                out[[ch, a.lo, b.hi]] += g * (1.0 - a.t) * b.t;
                out[[ch, a.hi, b.lo]] += g * a.t * (1.0 - b.t);
                out[[ch, a.hi, b.hi]] += g * a.t * b.t;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// projection

/// Per-location linear map `c -> d` (a 1x1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `d x c`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Projection {
    pub fn zeros(c: usize, d: usize) -> Self {
        Projection {
            weight: Array2::zeros((d, c)),
            bias: Array1::zeros(d),
        }
    }

    pub fn identity(c: usize) -> Self {
        Projection {
            weight: Array2::eye(c),
            bias: Array1::zeros(c),
        }
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }
}

pub fn project_features(fm: &FeatureMap, proj: &Projection) -> Result<FeatureMap, HeadError> {
    let (c, h, w) = fm.values.dim();
    if proj.weight.ncols() != c {
        return Err(HeadError::WidthMismatch {
            features: c,
            expected: proj.weight.ncols(),
            other: "projection input",
        });
    }
    let flat = fm.values.view().into_shape((c, h * w)).expect("contiguous");
    let mut out = proj.weight.dot(&flat);
    out += &proj.bias.view().insert_axis(Axis(1));
    Ok(FeatureMap {
        values: out.into_shape((proj.out_width(), h, w)).expect("shape"),
        stride: fm.stride,
    })
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn project_backward(
    grad: &Array3<f64>,
    input: &Array3<f64>,
    proj: &Projection,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (d, h, w) = grad.dim();
    let c = input.dim().0;
    let g = grad.view().into_shape((d, h * w)).expect("contiguous");
    let x = input.view().into_shape((c, h * w)).expect("contiguous");
    let grad_w = g.dot(&x.t());
    let grad_b = g.sum_axis(Axis(1));
    let grad_x = proj.weight.t().dot(&g).into_shape((c, h, w)).expect("shape");
    (grad_x, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// similarity and softmax

/// Per-location normalized features kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SimilarityTape {
    pub normalized: Array3<f64>,
    pub norms: Array2<f64>,
    /// Unscaled cosines `n x h x w`.
    pub cosines: Array3<f64>,
}

/// `logits[k, i, j] = scale * cos(img[:, i, j], bank[k])`.
pub fn similarity_logits(
    img: &FeatureMap,
    bank: &TextEmbeddingBank,
    logit_scale: f64,
) -> Result<Array3<f64>, HeadError> {
    similarity_with_tape(img, bank, logit_scale).map(|(l, _)| l)
}

pub fn similarity_with_tape(
    img: &FeatureMap,
    bank: &TextEmbeddingBank,
    logit_scale: f64,
) -> Result<(Array3<f64>, SimilarityTape), HeadError> {
    let (d, h, w) = img.values.dim();
    if d != bank.width() {
        return Err(HeadError::WidthMismatch {
            features: d,
            expected: bank.width(),
            other: "text embedding",
        });
    }
    let flat = img.values.view().into_shape((d, h * w)).expect("contiguous");
    let norms = flat.map_axis(Axis(0), |col| col.dot(&col).sqrt());
    let floored = norms.iter().filter(|&&n| n < NORM_FLOOR).count();
    if floored > 0 {
        log::warn!("{floored} feature vectors have near-zero norm; treating them as zero");
    }
    let mut normalized = flat.to_owned();
    for (mut col, &n) in normalized.columns_mut().into_iter().zip(norms.iter()) {
        col.mapv_inplace(|v| v / n.max(NORM_FLOOR));
    }
    let cosines = bank.embeddings().dot(&normalized);
    let logits = cosines.mapv(|c| c * logit_scale);
    let n = bank.n();
    Ok((
        logits.into_shape((n, h, w)).expect("shape"),
        SimilarityTape {
            normalized: normalized.into_shape((d, h, w)).expect("shape"),
            norms: norms.into_shape((h, w)).expect("shape"),
            cosines: cosines.into_shape((n, h, w)).expect("shape"),
        },
    ))
}

/// Returns `(grad_features, grad_logit_scale)`.
pub fn similarity_backward(
    grad_logits: &Array3<f64>,
    tape: &SimilarityTape,
    bank: &TextEmbeddingBank,
    logit_scale: f64,
) -> (Array3<f64>, f64) {
    let (n, h, w) = grad_logits.dim();
    let d = bank.width();
    let g = grad_logits.view().into_shape((n, h * w)).expect("contiguous");
    let grad_scale = (grad_logits * &tape.cosines).sum();
    // gradient w.r.t. the normalized features
    let gx_hat = bank.embeddings().t().dot(&g) * logit_scale;
    let x_hat = tape.normalized.view().into_shape((d, h * w)).expect("contiguous");
    let mut grad = Array2::zeros((d, h * w));
    for (loc, &norm) in tape.norms.iter().enumerate() {
        if norm < NORM_FLOOR {
            continue;
        }
        let gh = gx_hat.column(loc);
        let xh = x_hat.column(loc);
        let proj = gh.dot(&xh);
        let mut out = grad.column_mut(loc);
        for k in 0..d {
            out[k] = (gh[k] - xh[k] * proj) / norm;
        }
    }
    (grad.into_shape((d, h, w)).expect("shape"), grad_scale)
}

/// Softmax over the bin axis with max subtraction.
pub fn probability_map(logits: &Array3<f64>) -> Result<ProbabilityMap, HeadError> {
    if let Some(((k, i, j), _)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(HeadError::NonFiniteLogit { k, i, j });
    }
    let mut out = logits.clone();
    for mut col in out.lanes_mut(Axis(0)) {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    Ok(ProbabilityMap::from_softmax(out))
}

/// Chains a gradient on the probabilities back to the logits.
pub fn softmax_backward(prob: &ProbabilityMap, grad_prob: &Array3<f64>) -> Array3<f64> {
    let p = prob.values();
    let inner = (p * grad_prob).sum_axis(Axis(0));
    let mut out = grad_prob.clone();
    out -= &inner.insert_axis(Axis(0));
    out *= p;
    out
}

// ---------------------------------------------------------------------------
// expectation

pub fn expected_density(pm: &ProbabilityMap, policy: &BinPolicy) -> Result<DensityMap, HeadError> {
    expected_density_from(pm, &policy.representatives())
}

/// `Y[i, j] = sum_k P[k, i, j] * reps[k]`.
pub fn expected_density_from(pm: &ProbabilityMap, reps: &[f64]) -> Result<DensityMap, HeadError> {
    if pm.n() != reps.len() {
        return Err(HeadError::BinCountMismatch {
            got: pm.n(),
            expected: reps.len(),
        });
    }
    let (h, w) = pm.shape();
    let mut out = Array2::zeros((h, w));
    for (plane, &b) in pm.values().outer_iter().zip(reps) {
        out.scaled_add(b, &plane);
    }
    Ok(DensityMap(out))
}

/// Gradient on the probabilities from a gradient on the expected density.
pub fn expected_density_backward(grad_density: &Array2<f64>, reps: &[f64]) -> Array3<f64> {
    let (h, w) = grad_density.dim();
    let mut out = Array3::zeros((reps.len(), h, w));
    for (mut plane, &b) in out.outer_iter_mut().zip(reps) {
        plane.assign(&grad_density.mapv(|g| g * b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::{build_bins, Granularity};
    use ndarray::array;

    fn fm(values: Array3<f64>) -> FeatureMap {
        FeatureMap { values, stride: 8 }
    }

    #[test]
    fn interpolation_identity_and_constant() {
        let v = Array3::from_shape_fn((2, 3, 4), |(c, i, j)| (c * 12 + i * 4 + j) as f64);
        let same = interpolate_features(&fm(v.clone()), 3, 4, 8).unwrap();
        assert_eq!(same.values, v);
        let constant = Array3::from_elem((1, 3, 5), 2.5);
        let out = interpolate_features(&fm(constant), 7, 2, 4).unwrap();
        assert!(out.values.iter().all(|&x| (x - 2.5).abs() < 1e-12));
        assert!(interpolate_features(&fm(v), 0, 4, 8).is_err());
    }

    #[test]
    fn interpolation_ramp_upsample() {
        // 2x2 ramp v = i + 2j upsampled to 4x4
        let v = array![[[0.0, 2.0], [1.0, 3.0]]];
        let out = interpolate_features(&fm(v), 4, 4, 4).unwrap();
        // half-pixel centers: src = (o + 0.5) / 2 - 0.5 clamped to [0, 1]
        let src = |o: usize| (((o as f64 + 0.5) / 2.0) - 0.5).clamp(0.0, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = src(i) + 2.0 * src(j);
                assert!((out.values[[0, i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_backward_is_adjoint() {
        let x = Array3::from_shape_fn((2, 3, 5), |(c, i, j)| ((c + 1) * (i + 2) * (j + 3)) as f64 * 0.1);
        let y = Array3::from_shape_fn((2, 4, 2), |(c, i, j)| (c as f64 - i as f64 + 0.3 * j as f64).sin());
        let ax = interpolate_features(&fm(x.clone()), 4, 2, 8).unwrap().values;
        let aty = interpolate_backward(&y, 3, 5);
        assert!(((&ax * &y).sum() - (&x * &aty).sum()).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let v = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| (c + i * 2 + j) as f64);
        let same = project_features(&fm(v.clone()), &Projection::identity(3)).unwrap();
        assert_eq!(same.values, v);
        let zero = project_features(&fm(v.clone()), &Projection::zeros(3, 5)).unwrap();
        assert_eq!(zero.values.dim(), (5, 2, 2));
        assert!(zero.values.iter().all(|&x| x == 0.0));
        assert!(project_features(&fm(v), &Projection::zeros(4, 5)).is_err());
    }

    #[test]
    fn similarity_examples() {
        let bank = TextEmbeddingBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let img = fm(array![[[3.0]], [[0.0]]]);
        let logits = similarity_logits(&img, &bank, 1.0).unwrap();
        assert!((logits[[0, 0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(logits[[1, 0, 0]], 0.0);
        let zero = fm(array![[[0.0]], [[0.0]]]);
        let logits = similarity_logits(&zero, &bank, 5.0).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        let wide = fm(Array3::zeros((3, 1, 1)));
        assert!(similarity_logits(&wide, &bank, 1.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let eq = Array3::from_elem((4, 2, 3), 0.7);
        let p = probability_map(&eq).unwrap();
        assert!(p.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = array![[[1000.0]], [[0.0]], [[0.0]]];
        let p = probability_map(&big).unwrap();
        assert!((p.values()[[0, 0, 0]] - 1.0).abs() < 1e-15);
        assert!(p.values()[[1, 0, 0]] < 1e-300);
        let nan = array![[[f64::NAN]], [[0.0]]];
        assert!(matches!(
            probability_map(&nan),
            Err(HeadError::NonFiniteLogit { k: 0, .. })
        ));
    }

    #[test]
    fn expectation_examples() {
        let fine = build_bins(Granularity::Fine, 4, None).unwrap();
        let mut onehot = Array3::zeros((5, 1, 1));
        onehot[[3, 0, 0]] = 1.0;
        let d = expected_density(&ProbabilityMap::new(onehot).unwrap(), &fine).unwrap();
        assert_eq!(d.values()[[0, 0]], 3.0);

        let two = build_bins(Granularity::Fine, 1, None).unwrap();
        let uniform = ProbabilityMap::new(Array3::from_elem((2, 1, 1), 0.5)).unwrap();
        // bins {0}, [1, inf) with the open bin represented by 1
        assert_eq!(expected_density(&uniform, &two).unwrap().values()[[0, 0]], 0.5);
        assert!(matches!(
            expected_density(&uniform, &fine),
            Err(HeadError::BinCountMismatch { got: 2, expected: 5 })
        ));
    }
}

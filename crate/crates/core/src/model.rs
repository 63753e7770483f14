//! Encoder plus head, with a training tape for backpropagation.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Axis, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderTape};
use crate::head::{
    expected_density_backward, expected_density_from, interpolate_backward, interpolate_features,
    probability_map, project_backward, project_features, similarity_backward, similarity_with_tape,
    softmax_backward, HeadError, Projection, SimilarityTape, LOGIT_SCALE_MAX, LOGIT_SCALE_MIN,
};
use crate::maps::{DensityMap, ProbabilityMap};
use crate::params::ParamSet;
use crate::prompts::TextEmbeddingBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Text-similarity classification over bins, decoded by expectation.
    Classification,
    /// Direct nonnegative density per block, no bins.
    Regression,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Classification => "classification",
            HeadKind::Regression => "regression",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `None` for the regression head.
    pub probabilities: Option<ProbabilityMap>,
    pub density: DensityMap,
}

pub struct ForwardTape {
    encoder: EncoderTape,
    feature_shape: (usize, usize),
    interpolated: Array3<f64>,
    similarity: Option<SimilarityTape>,
    probabilities: Option<ProbabilityMap>,
    /// Projected features and pre-activation of the regression head.
    regression: Option<(Array3<f64>, Array2<f64>)>,
}

pub struct EbcModel {
    encoder: Arc<dyn Encoder>,
    pub params: ParamSet,
    bank: Arc<TextEmbeddingBank>,
    representatives: Vec<f64>,
    r: usize,
    head: HeadKind,
}

impl Clone for EbcModel {
    fn clone(&self) -> Self {
        EbcModel {
            encoder: Arc::clone(&self.encoder),
            params: self.params.clone(),
            bank: Arc::clone(&self.bank),
            representatives: self.representatives.clone(),
            r: self.r,
            head: self.head,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl EbcModel {
    /// Builds a model with freshly initialized head and encoder parameters.
    pub fn new(
        encoder: Arc<dyn Encoder>,
        bank: Arc<TextEmbeddingBank>,
        representatives: Vec<f64>,
        r: usize,
        head: HeadKind,
        logit_scale_init: f64,
        seed: u64,
    ) -> Result<Self, HeadError> {
        if head == HeadKind::Classification && representatives.len() != bank.n() {
            return Err(HeadError::BinCountMismatch {
                got: bank.n(),
                expected: representatives.len(),
            });
        }
        let c = encoder.out_channels();
        let d = bank.width();
        let mut params = encoder.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("valid std");
        params.insert(
            "projection.weight",
            Array2::from_shape_fn((d, c), |_| normal.sample(&mut rng)).into_dyn(),
        );
        params.insert("projection.bias", Array1::<f64>::zeros(d).into_dyn());
        params.insert(
            "logit_scale",
            Array1::from_elem(1, logit_scale_init.clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)).into_dyn(),
        );
        if head == HeadKind::Regression {
            let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
            params.insert(
                "regression.weight",
                Array1::from_shape_fn(d, |_| normal.sample(&mut rng)).into_dyn(),
            );
            params.insert("regression.bias", Array1::from_elem(1, -2.0).into_dyn());
        }
        Ok(EbcModel {
            encoder,
            params,
            bank,
            representatives,
            r,
            head,
        })
    }

    /// Replaces all parameters, e.g. from a checkpoint.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self, HeadError> {
        for name in self.params.names() {
            let Some(new) = params.get(name) else {
                return Err(HeadError::Encoder(format!("missing parameter '{name}'")));
            };
            if new.shape() != self.params.tensor(name).shape() {
                return Err(HeadError::Encoder(format!("shape mismatch for '{name}'")));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn reduction(&self) -> usize {
        self.r
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn bank(&self) -> &TextEmbeddingBank {
        &self.bank
    }

    pub fn representatives(&self) -> &[f64] {
        &self.representatives
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.scalar("logit_scale")
    }

    /// Keeps the learnable temperature inside `[1, 100]`.
    pub fn clamp_logit_scale(&mut self) {
        self.params
            .tensor_mut("logit_scale")
            .mapv_inplace(|s| s.clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX));
    }

    pub fn projection(&self) -> Projection {
        Projection {
            weight: self
                .params
                .tensor("projection.weight")
                .view()
                .into_dimensionality::<Ix2>()
                .expect("2-d")
                .to_owned(),
            bias: self
                .params
                .tensor("projection.bias")
                .view()
                .into_dimensionality::<Ix1>()
                .expect("1-d")
                .to_owned(),
        }
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<HeadOutput, HeadError> {
        self.forward_with_tape(image).map(|(out, _)| out)
    }

    pub fn forward_with_tape(&self, image: &Array3<f64>) -> Result<(HeadOutput, ForwardTape), HeadError> {
        let (_, h, w) = image.dim();
        if h < self.r || w < self.r {
            return Err(HeadError::ImageTooSmall {
                height: h,
                width: w,
                r: self.r,
            });
        }
        let (bh, bw) = (h / self.r, w / self.r);
        let (features, enc_tape) = self.encoder.forward(&self.params, image)?;
        let feature_shape = features.spatial();
        let interpolated = interpolate_features(&features, bh, bw, self.r)?;
        let projected = project_features(&interpolated, &self.projection())?;

        match self.head {
            HeadKind::Classification => {
                let scale = self.logit_scale();
                let (logits, sim) = similarity_with_tape(&projected, &self.bank, scale)?;
                let prob = probability_map(&logits)?;
                let density = expected_density_from(&prob, &self.representatives)?;
                Ok((
                    HeadOutput {
                        probabilities: Some(prob.clone()),
                        density,
                    },
                    ForwardTape {
                        encoder: enc_tape,
                        feature_shape,
                        interpolated: interpolated.values,
                        similarity: Some(sim),
                        probabilities: Some(prob),
                        regression: None,
                    },
                ))
            }
            HeadKind::Regression => {
                let wv = self.params.tensor("regression.weight");
                let b = self.params.scalar("regression.bias");
                let d = wv.len();
                let wv = wv.view().into_shape(d).expect("1-d");
                let pre = projected
                    .values
                    .view()
                    .into_shape((d, bh * bw))
                    .expect("contiguous")
                    .t()
                    .dot(&wv)
                    .mapv(|v| v + b)
                    .into_shape((bh, bw))
                    .expect("shape");
                let density = DensityMap(pre.mapv(softplus));
                Ok((
                    HeadOutput {
                        probabilities: None,
                        density,
                    },
                    ForwardTape {
                        encoder: enc_tape,
                        feature_shape,
                        interpolated: interpolated.values,
                        similarity: None,
                        probabilities: None,
                        regression: Some((projected.values, pre)),
                    },
                ))
            }
        }
    }

    /// Backpropagates loss gradients on the outputs to every parameter.
    /// `grad_prob` is ignored by the regression head.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        grad_prob: Option<&Array3<f64>>,
        grad_density: &Array2<f64>,
    ) -> ParamSet {
        let mut grads = self.params.zeros_like();
        let proj = self.projection();
        let grad_projected = match self.head {
            HeadKind::Classification => {
                let sim = tape.similarity.as_ref().expect("classification tape");
                let prob = tape.probabilities.as_ref().expect("classification tape");
                let mut gp = expected_density_backward(grad_density, &self.representatives);
                if let Some(extra) = grad_prob {
                    gp += extra;
                }
                let grad_logits = softmax_backward(prob, &gp);
                let (gx, gs) = similarity_backward(&grad_logits, sim, &self.bank, self.logit_scale());
                grads.add("logit_scale", Array1::from_elem(1, gs).into_dyn());
                gx
            }
            HeadKind::Regression => {
                let (projected, pre) = tape.regression.as_ref().expect("regression tape");
                let g_pre = grad_density * &pre.mapv(sigmoid);
                let (d, bh, bw) = projected.dim();
                let flat = projected.view().into_shape((d, bh * bw)).expect("contiguous");
                let g_flat = g_pre.view().into_shape(bh * bw).expect("contiguous");
                grads.add("regression.weight", flat.dot(&g_flat).into_dyn());
                grads.add("regression.bias", Array1::from_elem(1, g_pre.sum()).into_dyn());
                let wv = self.params.tensor("regression.weight").view().into_shape(d).expect("1-d").to_owned();
                let mut gx = Array3::zeros((d, bh, bw));
                for (k, mut plane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                    plane.assign(&g_pre.mapv(|g| g * wv[k]));
                }
                gx
            }
        };
        let (g_interp, gw, gb) = project_backward(&grad_projected, &tape.interpolated, &proj);
        grads.add("projection.weight", gw.into_dyn());
        grads.add("projection.bias", gb.into_dyn());
        let (fh, fw) = tape.feature_shape;
        let g_features = interpolate_backward(&g_interp, fh, fw);
        self.encoder
            .backward(&self.params, &tape.encoder, &g_features, &mut grads);
        grads
    }
}

//! Image encoders behind a common contract.
//!
//! The head only needs an encoder's stride, its output width and a
//! forward/backward pair over a shared [`ParamSet`]. The crate ships a small
//! three-layer convolutional encoder; pretrained backbones plug in through
//! [`AdapterConfig`].

use std::any::Any;
use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::head::{FeatureMap, HeadError};
use crate::nn::{conv2d, conv2d_backward, relu_backward, relu_inplace, ConvGeometry, ConvTape};
use crate::params::ParamSet;

/// Opaque forward state handed back to [`Encoder::backward`].
pub type EncoderTape = Box<dyn Any + Send + Sync>;

pub trait Encoder: Send + Sync {
    /// Spatial reduction of the feature map relative to the image.
    fn stride(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Fresh parameters, all names prefixed with `encoder.`.
    fn init_params(&self, seed: u64) -> ParamSet;
    fn forward(&self, params: &ParamSet, image: &Array3<f64>) -> Result<(FeatureMap, EncoderTape), HeadError>;
    /// Accumulates parameter gradients into `grads`.
    fn backward(&self, params: &ParamSet, tape: &EncoderTape, grad: &Array3<f64>, grads: &mut ParamSet);
}

/// Three ReLU convolutions: 4x4 stride 4, 2x2 stride 2, then 3x3 stride 1.
/// Total stride 8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub channels: [usize; 3],
}

const TOY_LAYERS: [(&str, ConvGeometry); 3] = [
    ("encoder.conv1", ConvGeometry { kernel: 4, stride: 4, pad: 0 }),
    ("encoder.conv2", ConvGeometry { kernel: 2, stride: 2, pad: 0 }),
    ("encoder.conv3", ConvGeometry { kernel: 3, stride: 1, pad: 1 }),
];

struct ToyTape {
    convs: Vec<ConvTape>,
    activations: Vec<Array3<f64>>,
}

impl ToyEncoder {
    pub fn new(channels: [usize; 3]) -> Self {
        ToyEncoder { channels }
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            3
        } else {
            self.channels[layer - 1]
        }
    }
}

impl Default for ToyEncoder {
    fn default() -> Self {
        ToyEncoder::new([16, 32, 32])
    }
}

fn weight<'a>(params: &'a ParamSet, name: &str) -> ndarray::ArrayView2<'a, f64> {
    params
        .tensor(&format!("{name}.weight"))
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d conv weight")
}

fn bias(params: &ParamSet, name: &str) -> Array1<f64> {
    params
        .tensor(&format!("{name}.bias"))
        .view()
        .into_dimensionality::<Ix1>()
        .expect("1-d bias")
        .to_owned()
}

impl Encoder for ToyEncoder {
    fn stride(&self) -> usize {
        8
    }

    fn out_channels(&self) -> usize {
        self.channels[2]
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (layer, (name, g)) in TOY_LAYERS.iter().enumerate() {
            let fan_in = self.in_channels(layer) * g.kernel * g.kernel;
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let w = Array2::from_shape_fn((self.channels[layer], fan_in), |_| he.sample(&mut rng));
            params.insert(format!("{name}.weight"), w.into_dyn());
            params.insert(
                format!("{name}.bias"),
                Array1::from_elem(self.channels[layer], 0.01).into_dyn(),
            );
        }
        params
    }

    fn forward(&self, params: &ParamSet, image: &Array3<f64>) -> Result<(FeatureMap, EncoderTape), HeadError> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(HeadError::Encoder(format!("expected 3 channels, got {c}")));
        }
        if h < 8 || w < 8 {
            return Err(HeadError::ImageTooSmall {
                height: h,
                width: w,
                r: 8,
            });
        }
        let mut x = image.clone();
        let mut convs = Vec::with_capacity(3);
        let mut activations = Vec::with_capacity(3);
        for (name, g) in TOY_LAYERS {
            let (mut y, tape) = conv2d(&x, weight(params, name), &bias(params, name), g);
            relu_inplace(&mut y);
            convs.push(tape);
            activations.push(y.clone());
            x = y;
        }
        Ok((
            FeatureMap {
                values: x,
                stride: 8,
            },
            Box::new(ToyTape { convs, activations }),
        ))
    }

    fn backward(&self, params: &ParamSet, tape: &EncoderTape, grad: &Array3<f64>, grads: &mut ParamSet) {
        let tape = tape.downcast_ref::<ToyTape>().expect("toy encoder tape");
        let mut g = grad.clone();
        for layer in (0..3).rev() {
            let (name, geom) = TOY_LAYERS[layer];
            relu_backward(&mut g, &tape.activations[layer]);
            let (gx, gw, gb) =
                conv2d_backward(&g, weight(params, name), &tape.convs[layer], geom, layer > 0);
            grads.add(&format!("{name}.weight"), gw.into_dyn());
            grads.add(&format!("{name}.bias"), gb.into_dyn());
            if let Some(gx) = gx {
                g = gx;
            }
        }
    }
}

/// Slot for pretrained vision-language encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Backbone identifier, e.g. `vit-b-16`.
    pub id: String,
    pub weights: PathBuf,
    /// Expected SHA-256 of the weights file, lowercase hex.
    pub sha256: String,
    /// Learnable prompt tokens per transformer layer (visual prompt tuning).
    #[serde(default = "default_vpt_tokens")]
    pub vpt_tokens: usize,
}

pub const VPT_TOKEN_RANGE: std::ops::RangeInclusive<usize> = 8..=40;

fn default_vpt_tokens() -> usize {
    32
}

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("cannot read adapter weights {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("vpt_tokens {0} outside 8..=40")]
    VptTokens(usize),
    #[error("no encoder implementation is compiled in for adapter '{0}'")]
    Unsupported(String),
}

impl AdapterConfig {
    pub fn check(&self) -> Result<(), AdapterError> {
        if !VPT_TOKEN_RANGE.contains(&self.vpt_tokens) {
            return Err(AdapterError::VptTokens(self.vpt_tokens));
        }
        Ok(())
    }

    /// Verifies the pinned checksum of the weights file.
    pub fn verify_weights(&self) -> Result<(), AdapterError> {
        let bytes = std::fs::read(&self.weights).map_err(|source| AdapterError::Io {
            path: self.weights.clone(),
            source,
        })?;
        let found = hex::encode(Sha256::digest(&bytes));
        if !found.eq_ignore_ascii_case(&self.sha256) {
            return Err(AdapterError::Checksum {
                path: self.weights.clone(),
                expected: self.sha256.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Resolves the adapter to an encoder. Weight files are verified first;
    /// only backbones registered in this build can be instantiated.
    pub fn load(&self) -> Result<Box<dyn Encoder>, AdapterError> {
        self.check()?;
        self.verify_weights()?;
        Err(AdapterError::Unsupported(self.id.clone()))
    }
}

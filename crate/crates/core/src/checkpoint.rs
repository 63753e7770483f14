//! Checkpoints: a safetensors archive of parameters, optimizer moments and
//! the frozen text bank, plus a JSON sidecar with everything needed to
//! rebuild the model.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::BinPolicy;
use crate::config::{BinMode, ExperimentConfig};
use crate::model::EbcModel;
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::prompts::TextEmbeddingBank;
use crate::train::TrainingLog;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("text bank fingerprint {found} does not match recorded {expected}")]
    BankMismatch { expected: String, found: String },
    #[error("cannot rebuild model: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub bin_mode: BinMode,
    /// Calibrated policy for integer bins.
    pub policy: Option<BinPolicy>,
    /// Policy fingerprint, or the interval-config fingerprint.
    pub class_fingerprint: String,
    pub representatives: Vec<f64>,
    pub prompts: Vec<String>,
    pub bank_fingerprint: String,
    /// Completed epochs.
    pub epoch: usize,
    pub val_mae: f64,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub adam_step: u64,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub bank: Array2<f64>,
    /// First and second Adam moments, absent in exported weights.
    pub moments: Option<(ParamSet, ParamSet)>,
}

const PARAM: &str = "param.";
const FIRST: &str = "adam.m.";
const SECOND: &str = "adam.v.";
const BANK: &str = "text_bank";

fn to_bytes(a: &ArrayD<f64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(view: &TensorView<'_>) -> Result<ArrayD<f64>, String> {
    if view.dtype() != Dtype::F64 {
        return Err(format!("expected f64 tensor, found {:?}", view.dtype()));
    }
    let values: Vec<f64> = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| e.to_string())
}

/// Resolves `x`, `x.json` or `x.safetensors` to the pair of files.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("safetensors") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("safetensors"), stem.with_extension("json"))
}

impl Checkpoint {
    /// Writes `<dir>/<name>.safetensors` and `<dir>/<name>.json`; returns the
    /// sidecar path.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf, CheckpointError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CheckpointError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let (tensor_path, meta_path) = checkpoint_paths(&dir.join(name));

        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (n, t) in self.params.iter() {
            owned.push((format!("{PARAM}{n}"), t.shape().to_vec(), to_bytes(t)));
        }
        if let Some((m, v)) = &self.moments {
            for (prefix, set) in [(FIRST, m), (SECOND, v)] {
                for (n, t) in set.iter() {
                    owned.push((format!("{prefix}{n}"), t.shape().to_vec(), to_bytes(t)));
                }
            }
        }
        let bank = self.bank.clone().into_dyn();
        owned.push((BANK.to_string(), bank.shape().to_vec(), to_bytes(&bank)));
        let views = owned
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes).map(|v| (n.clone(), v))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CheckpointError::Format {
                path: tensor_path.clone(),
                message: e.to_string(),
            })?;
        let bytes = safetensors::serialize(views, &None).map_err(|e| CheckpointError::Format {
            path: tensor_path.clone(),
            message: e.to_string(),
        })?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");

        // write both files under temporary names first, then move into place
        let tmp_t = tensor_path.with_extension("safetensors.tmp");
        let tmp_m = meta_path.with_extension("json.tmp");
        fs::write(&tmp_t, bytes).map_err(io(&tmp_t))?;
        fs::write(&tmp_m, meta).map_err(io(&tmp_m))?;
        fs::rename(&tmp_t, &tensor_path).map_err(io(&tensor_path))?;
        fs::rename(&tmp_m, &meta_path).map_err(io(&meta_path))?;
        Ok(meta_path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let (tensor_path, meta_path) = checkpoint_paths(path);
        let read = |p: &Path| {
            fs::read(p).map_err(|source| CheckpointError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        let meta_bytes = read(&meta_path)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|e| CheckpointError::Format {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        let bytes = read(&tensor_path)?;
        let fmt_err = |message: String| CheckpointError::Format {
            path: tensor_path.clone(),
            message,
        };
        let st = SafeTensors::deserialize(&bytes).map_err(|e| fmt_err(e.to_string()))?;
        let (mut params, mut first, mut second) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        let mut bank = None;
        for (name, view) in st.tensors() {
            let array = from_view(&view).map_err(|m| fmt_err(format!("{name}: {m}")))?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, array);
            } else if let Some(n) = name.strip_prefix(FIRST) {
                first.insert(n, array);
            } else if let Some(n) = name.strip_prefix(SECOND) {
                second.insert(n, array);
            } else if name == BANK {
                bank = Some(
                    array
                        .into_dimensionality()
                        .map_err(|e| fmt_err(format!("text bank: {e}")))?,
                );
            }
        }
        let bank = bank.ok_or_else(|| fmt_err("missing text bank".into()))?;
        let moments = (!first.is_empty()).then_some((first, second));
        Ok(Checkpoint {
            meta,
            params,
            bank,
            moments,
        })
    }

    /// Restores the optimizer for resumed training.
    pub fn adam(&self, cfg: AdamConfig) -> Option<Adam> {
        self.moments.as_ref().map(|(m, v)| Adam {
            cfg,
            step: self.meta.adam_step,
            first: m.clone(),
            second: v.clone(),
        })
    }

    /// Rebuilds the model described by the sidecar with the stored weights.
    pub fn model(&self) -> Result<EbcModel, CheckpointError> {
        let bank = TextEmbeddingBank::from_normalized(self.bank.clone()).map_err(|e| CheckpointError::Model(e.to_string()))?;
        if bank.fingerprint() != self.meta.bank_fingerprint {
            return Err(CheckpointError::BankMismatch {
                expected: self.meta.bank_fingerprint.clone(),
                found: bank.fingerprint(),
            });
        }
        let cfg = &self.meta.config;
        let encoder = cfg
            .model
            .build_encoder()
            .map_err(|e| CheckpointError::Model(e.to_string()))?;
        EbcModel::new(
            encoder,
            Arc::new(bank),
            self.meta.representatives.clone(),
            cfg.model.r,
            cfg.model.head,
            cfg.model.logit_scale_init,
            cfg.seed,
        )
        .and_then(|m| m.with_params(self.params.clone()))
        .map_err(|e| CheckpointError::Model(e.to_string()))
    }
}

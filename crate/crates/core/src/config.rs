//! Experiment configuration: one JSON document with a content hash.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bins::{BinPolicySpec, Granularity};
use crate::data::{load_manifest, AugmentConfig, Split};
use crate::encoder::{AdapterConfig, Encoder, ToyEncoder, VPT_TOKEN_RANGE};
use crate::eval::SbcConfig;
use crate::losses::OTConfig;
use crate::model::HeadKind;
use crate::prompts::{build_prompt_set_styled, check_prompt_set, HashTextEncoder, PromptStyle, TextEncoder};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("override '{0}' must look like key.path=value")]
    OverrideSyntax(String),
    #[error("override key '{0}' does not exist")]
    UnknownKey(String),
    #[error("encoder: {0}")]
    Encoder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinMode {
    /// Integer count bins (the default).
    Integer,
    /// Bordering real intervals over Gaussian-smoothed targets; baseline arm.
    Continuous,
}

impl fmt::Display for BinMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinMode::Integer => "integer",
            BinMode::Continuous => "continuous",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: Split,
    pub val_split: Split,
    pub test_split: Split,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            train_split: Split::Train,
            val_split: Split::Val,
            test_split: Split::Test,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinsConfig {
    pub mode: BinMode,
    pub granularity: Granularity,
    pub m: u64,
    pub switch_point: Option<u64>,
    pub representatives: Option<Vec<f64>>,
    /// Replace the open bin's representative with the training-set mean of
    /// block counts `>= m` (ignored when explicit representatives are set).
    pub calibrate_terminal: bool,
    /// Render the zero bin as "There are 0 people".
    pub natural_zero: bool,
    pub sbc: SbcConfig,
}

impl Default for BinsConfig {
    fn default() -> Self {
        BinsConfig {
            mode: BinMode::Integer,
            granularity: Granularity::Fine,
            m: 4,
            switch_point: None,
            representatives: None,
            calibrate_terminal: true,
            natural_zero: false,
            sbc: SbcConfig::default(),
        }
    }
}

impl BinsConfig {
    pub fn spec(&self) -> BinPolicySpec {
        BinPolicySpec {
            granularity: self.granularity,
            m: self.m,
            switch_point: self.switch_point,
            representatives: self.representatives.clone(),
        }
    }

    pub fn style(&self) -> PromptStyle {
        PromptStyle {
            natural_zero: self.natural_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `toy` or the identifier of a pretrained adapter.
    pub encoder: String,
    pub toy_channels: [usize; 3],
    pub adapter_weights: Option<PathBuf>,
    pub adapter_sha256: Option<String>,
    pub vpt_tokens: usize,
    /// Width of the shared image/text embedding space.
    pub d: usize,
    pub r: usize,
    pub head: HeadKind,
    pub logit_scale_init: f64,
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: "toy".to_string(),
            toy_channels: [16, 32, 32],
            adapter_weights: None,
            adapter_sha256: None,
            vpt_tokens: 32,
            d: 32,
            r: 8,
            head: HeadKind::Classification,
            logit_scale_init: 50.0,
            text_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn adapter(&self) -> Option<AdapterConfig> {
        (self.encoder != "toy").then(|| AdapterConfig {
            id: self.encoder.clone(),
            weights: self.adapter_weights.clone().unwrap_or_default(),
            sha256: self.adapter_sha256.clone().unwrap_or_default(),
            vpt_tokens: self.vpt_tokens,
        })
    }

    /// Feature stride of the configured encoder, when known without loading
    /// any weights.
    pub fn encoder_stride(&self) -> Option<usize> {
        match self.encoder.as_str() {
            "toy" => Some(ToyEncoder::new(self.toy_channels).stride()),
            id => id.rsplit('-').next().and_then(|p| p.parse().ok()),
        }
    }

    pub fn build_encoder(&self) -> Result<Arc<dyn Encoder>, ConfigError> {
        match self.adapter() {
            None => Ok(Arc::new(ToyEncoder::new(self.toy_channels))),
            Some(a) => a
                .load()
                .map(Arc::from)
                .map_err(|e| ConfigError::Encoder(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub ot: OTConfig,
    pub clamp_density: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            ot: OTConfig::default(),
            clamp_density: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            schedule: Schedule::Cosine,
            batch_size: 8,
            epochs: 50,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Inference window; defaults to the training crop size.
    pub window: Option<usize>,
    /// Tile overlap in pixels; overlapping predictions are averaged.
    pub overlap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window: None,
            overlap: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub bins: BinsConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            bins: BinsConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stable validation codes, grouped by area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IssueCode {
    /// Block size does not divide the crop or the inference window.
    E010,
    /// Augmentation settings.
    E011,
    /// Bin policy.
    E020,
    /// Prompt set or text encoder.
    E030,
    /// Dataset manifest.
    E040,
    /// Loss settings.
    E050,
    /// Optimizer settings.
    E060,
    /// Model or encoder adapter settings.
    E070,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub code: IssueCode,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

fn issue(code: IssueCode, message: impl Into<String>) -> Issue {
    Issue {
        code,
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        // relative dataset roots are resolved against the config location
        if cfg.data.root.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.root = dir.join(&cfg.data.root);
            }
        }
        Ok(cfg)
    }

    /// Compact JSON with object keys in sorted order.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// SHA-256 of [`canonical_json`](Self::canonical_json), lowercase hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Applies `key.path=value`. The value is parsed as JSON when possible and
    /// taken as a string otherwise; the key must already exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::OverrideSyntax(assignment.to_string()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::OverrideSyntax(assignment.to_string()));
        }
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| ConfigError::Parse(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<(), ConfigError> {
        assignments.iter().try_for_each(|a| self.apply_override(a.as_ref()))
    }

    /// Replaces the seed from an `EBC_SEED`-style string.
    pub fn apply_seed_override(&mut self, raw: Option<&str>) -> Result<(), ConfigError> {
        if let Some(raw) = raw {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| ConfigError::Parse(format!("seed override '{raw}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.eval.window.unwrap_or(self.data.augment.base_size)
    }

    /// Checks that need no file system access.
    pub fn check_static(&self) -> Vec<Issue> {
        use IssueCode::*;
        let mut out = Vec::new();
        let (s, r) = (self.data.augment.base_size, self.model.r);
        if r == 0 {
            out.push(issue(E010, "model.r must be positive"));
        } else {
            if s % r != 0 {
                out.push(issue(E010, format!("block size r = {r} does not divide crop size s = {s}")));
            }
            if let Some(stride) = self.model.encoder_stride() {
                if r % stride != 0 && stride % r != 0 {
                    out.push(issue(
                        E010,
                        format!("block size r = {r} and encoder stride {stride} must divide one another"),
                    ));
                }
            }
            let w = self.window();
            if w % r != 0 {
                out.push(issue(E010, format!("block size r = {r} does not divide inference window {w}")));
            }
            if self.eval.overlap % r != 0 || self.eval.overlap >= w {
                out.push(issue(
                    E010,
                    format!("overlap {} must be a multiple of r below the window", self.eval.overlap),
                ));
            }
        }
        out.extend(self.data.augment.problems().into_iter().map(|p| issue(E011, p)));

        match self.bins.mode {
            BinMode::Integer => match self.bins.spec().build() {
                Err(e) => out.push(issue(E020, e.to_string())),
                Ok(policy) => {
                    let report = policy.validate();
                    out.extend(report.violations.iter().map(|v| issue(E020, v.to_string())));
                    let ps = build_prompt_set_styled(&policy, self.bins.style());
                    out.extend(
                        check_prompt_set(&ps, &policy, self.bins.style())
                            .into_iter()
                            .map(|p| issue(E030, p)),
                    );
                    out.extend(self.check_context(ps.prompts()));
                }
            },
            BinMode::Continuous => match self.bins.sbc.check() {
                Err(e) => out.push(issue(E020, e)),
                Ok(()) => out.extend(self.check_context(self.bins.sbc.prompts().prompts())),
            },
        }

        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            out.push(issue(E050, format!("lambda {} must be finite and >= 0", self.loss.lambda)));
        }
        if let Err(e) = self.loss.ot.check() {
            out.push(issue(E050, e.to_string()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            out.push(issue(E060, format!("learning rate {} must be positive", o.lr)));
        }
        if o.batch_size == 0 || o.epochs == 0 {
            out.push(issue(E060, "batch_size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.weight_decay < 0.0 {
            out.push(issue(E060, "Adam betas must lie in [0, 1) and weight_decay >= 0"));
        }
        let m = &self.model;
        if m.d == 0 || m.toy_channels.contains(&0) {
            out.push(issue(E070, "model widths must be positive"));
        }
        if !(m.logit_scale_init > 0.0) {
            out.push(issue(E070, "logit_scale_init must be positive"));
        }
        if m.head == HeadKind::Regression && self.bins.mode == BinMode::Continuous {
            out.push(issue(E070, "the regression head has no bins; use bin mode integer"));
        }
        if let Some(a) = m.adapter() {
            if !VPT_TOKEN_RANGE.contains(&a.vpt_tokens) {
                out.push(issue(E070, format!("vpt_tokens {} outside 8..=40", a.vpt_tokens)));
            }
            if let Err(e) = a.verify_weights() {
                out.push(issue(E070, e.to_string()));
            }
        }
        out
    }

    fn check_context(&self, prompts: &[String]) -> Vec<Issue> {
        let enc = HashTextEncoder::new(self.model.d.max(1), self.model.text_seed);
        prompts
            .iter()
            .filter(|p| enc.tokenize(p).len() + 2 > enc.context_length())
            .map(|p| issue(IssueCode::E030, format!("prompt '{p}' exceeds the text context")))
            .collect()
    }

    /// Full validation, including the train and val manifests.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = self.check_static();
        let mut splits = vec![self.data.train_split, self.data.val_split];
        splits.dedup();
        for split in splits {
            if let Err(e) = load_manifest(&self.data.root, split) {
                out.push(issue(IssueCode::E040, e.to_string()));
            }
        }
        out
    }
}

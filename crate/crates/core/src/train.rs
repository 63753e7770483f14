//! Training loop: class space and model assembly from a config, Adam with a
//! per-epoch schedule, validation, checkpoints and resume.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::BinPolicy;
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::config::{BinMode, ConfigError, ExperimentConfig, Issue, Schedule};
use crate::data::{
    augment_sample, load_manifest, load_samples, make_batch_with, DataError, IntegerTargets, LoadedSample, Split,
    TargetEncoder,
};
use crate::eval::{evaluate_samples, EvalError, EvalResult, SbcTargets, TileConfig};
use crate::labels::{dataset_statistics, LabelError, PointAnnotation, TargetMaps};
use crate::losses::{count_loss_with_grad, dace_loss_with_grad, LossError};
use crate::model::{EbcModel, HeadKind};
use crate::params::{cosine_lr, Adam, AdamConfig, ParamSet};
use crate::prompts::{build_prompt_set_styled, embed_prompts, HashTextEncoder, PromptError, PromptSet, TextEmbeddingBank};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config has {} problem(s): {}", .0.len(), .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Issue>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model: {0}")]
    Model(String),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint in {0} was written for a different config")]
    ResumeMismatch(PathBuf),
    #[error("text embedding bank changed during training")]
    BankMutated,
}

/// Bins, prompts and target encoding shared by training and evaluation.
#[derive(Clone)]
pub struct ClassSpace {
    pub mode: BinMode,
    pub policy: Option<BinPolicy>,
    pub prompts: PromptSet,
    pub representatives: Vec<f64>,
    pub targets: Arc<dyn TargetEncoder>,
    pub fingerprint: String,
}

impl ClassSpace {
    /// Integer policies get their open-bin representative calibrated on the
    /// training annotations when the config asks for it.
    pub fn build(cfg: &ExperimentConfig, train: &[PointAnnotation]) -> Result<Self, TrainError> {
        match cfg.bins.mode {
            BinMode::Integer => {
                let mut policy = cfg
                    .bins
                    .spec()
                    .build()
                    .map_err(|e| ConfigError::Parse(e.to_string()))?;
                if cfg.bins.calibrate_terminal && cfg.bins.representatives.is_none() && !train.is_empty() {
                    policy = dataset_statistics(train, cfg.model.r as u32, &policy)?.calibrate(&policy);
                }
                Ok(Self::integer(policy, cfg))
            }
            BinMode::Continuous => {
                let sbc = cfg.bins.sbc.clone();
                sbc.check().map_err(ConfigError::Parse)?;
                Ok(ClassSpace {
                    mode: BinMode::Continuous,
                    policy: None,
                    prompts: sbc.prompts(),
                    representatives: sbc.representatives(),
                    fingerprint: sbc.fingerprint(),
                    targets: Arc::new(SbcTargets { cfg: sbc }),
                })
            }
        }
    }

    pub fn integer(policy: BinPolicy, cfg: &ExperimentConfig) -> Self {
        ClassSpace {
            mode: BinMode::Integer,
            prompts: build_prompt_set_styled(&policy, cfg.bins.style()),
            representatives: policy.representatives(),
            fingerprint: policy.fingerprint(),
            targets: Arc::new(IntegerTargets {
                policy: policy.clone(),
                clamp_density: cfg.loss.clamp_density,
            }),
            policy: Some(policy),
        }
    }
}

pub fn text_bank(cfg: &ExperimentConfig, prompts: &PromptSet) -> Result<TextEmbeddingBank, TrainError> {
    let enc = HashTextEncoder::new(cfg.model.d, cfg.model.text_seed);
    Ok(embed_prompts(prompts, &enc)?)
}

pub fn build_model(cfg: &ExperimentConfig, space: &ClassSpace, bank: TextEmbeddingBank) -> Result<EbcModel, TrainError> {
    let encoder = cfg.model.build_encoder()?;
    EbcModel::new(
        encoder,
        Arc::new(bank),
        space.representatives.clone(),
        cfg.model.r,
        cfg.model.head,
        cfg.model.logit_scale_init,
        cfg.seed,
    )
    .map_err(|e| TrainError::Model(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_classification: f64,
    pub train_count: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Appends a record; epochs must increase and losses be finite.
    pub fn push(&mut self, rec: EpochRecord) -> Result<(), String> {
        if let Some(last) = self.records.last() {
            if rec.epoch <= last.epoch {
                return Err(format!("epoch {} after epoch {}", rec.epoch, last.epoch));
            }
        }
        if !(rec.train_classification.is_finite() && rec.train_count.is_finite()) {
            return Err(format!("non-finite loss in epoch {}", rec.epoch));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

pub fn learning_rate(cfg: &ExperimentConfig, epoch: usize) -> f64 {
    match cfg.optim.schedule {
        Schedule::Cosine => cosine_lr(cfg.optim.lr, epoch, cfg.optim.epochs),
        Schedule::Constant => cfg.optim.lr,
    }
}

/// Loss terms and parameter gradients of one sample.
pub struct SampleStep {
    pub classification: f64,
    pub count: f64,
    pub total: f64,
    pub grads: ParamSet,
}

pub fn sample_step(
    model: &EbcModel,
    image: &ndarray::Array3<f64>,
    targets: &TargetMaps,
    cfg: &ExperimentConfig,
) -> Result<SampleStep, TrainError> {
    let (out, tape) = model
        .forward_with_tape(image)
        .map_err(|e| TrainError::Model(e.to_string()))?;
    match model.head() {
        HeadKind::Classification => {
            let prob = out.probabilities.as_ref().expect("classification output");
            let (loss, grad) = dace_loss_with_grad(prob, targets, &out.density, cfg.loss.lambda, &cfg.loss.ot)?;
            let grads = model.backward(&tape, Some(&grad.probabilities), &grad.density);
            Ok(SampleStep {
                classification: loss.classification,
                count: loss.count,
                total: loss.total,
                grads,
            })
        }
        HeadKind::Regression => {
            let (loss, grad) = count_loss_with_grad(&out.density, &targets.gt_density, &cfg.loss.ot)?;
            let grads = model.backward(&tape, None, &grad);
            Ok(SampleStep {
                classification: 0.0,
                count: loss.total,
                total: loss.total,
                grads,
            })
        }
    }
}

pub struct TrainOutcome {
    pub log: TrainingLog,
    pub model: EbcModel,
    pub space: ClassSpace,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<(Vec<PointAnnotation>, Vec<LoadedSample>), TrainError> {
    let (manifest, _) = load_manifest(&cfg.data.root, split)?;
    let anns = manifest.records.iter().map(|r| r.annotation.clone()).collect();
    Ok((anns, load_samples(&manifest)?))
}

pub fn tile_config(cfg: &ExperimentConfig) -> TileConfig {
    TileConfig {
        window: cfg.window(),
        overlap: cfg.eval.overlap,
    }
}

pub fn adam_config(cfg: &ExperimentConfig) -> AdamConfig {
    AdamConfig {
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        weight_decay: cfg.optim.weight_decay,
        ..AdamConfig::default()
    }
}

/// Trains per `cfg`, writing `last` and `best` checkpoints plus `log.jsonl`
/// into `out_dir`. With `resume`, continues from `out_dir/last` when it
/// exists and belongs to the same config.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<TrainOutcome, TrainError> {
    let issues = cfg.check_static();
    if !issues.is_empty() {
        return Err(TrainError::Invalid(issues));
    }
    let (train_anns, train) = load_split(cfg, cfg.data.train_split)?;
    let (_, val) = load_split(cfg, cfg.data.val_split)?;
    let space = ClassSpace::build(cfg, &train_anns)?;
    let bank = text_bank(cfg, &space.prompts)?;
    let bank_fingerprint = bank.fingerprint();
    let mut model = build_model(cfg, &space, bank)?;
    let mut adam = Adam::new(adam_config(cfg), &model.params);
    let hash = cfg.hash();

    let mut log = TrainingLog::default();
    let mut start = 0;
    let (mut best_val, mut best_epoch) = (f64::INFINITY, 0);
    let last_path = out_dir.join("last");
    if resume && last_path.with_extension("json").exists() {
        let ck = Checkpoint::load(&last_path)?;
        if ck.meta.config_hash != hash {
            return Err(TrainError::ResumeMismatch(out_dir.to_path_buf()));
        }
        model = model
            .with_params(ck.params.clone())
            .map_err(|e| TrainError::Model(e.to_string()))?;
        if let Some(a) = ck.adam(adam_config(cfg)) {
            adam = a;
        }
        start = ck.meta.epoch;
        log = ck.meta.log.clone();
        best_val = ck.meta.best_val_mae;
        best_epoch = ck.meta.best_epoch;
        log::info!("resuming from epoch {start}");
    }

    let tile = tile_config(cfg);
    let aug = &cfg.data.augment;
    let r = cfg.model.r;
    for epoch in start..cfg.optim.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64])));
        let (mut cls_sum, mut cnt_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let samples: Vec<_> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    augment_sample(&s.image, &s.points, aug, mix_seed(&[cfg.seed, epoch as u64, i as u64]))
                })
                .collect();
            let batch = make_batch_with(&samples, r, space.targets.as_ref())?;
            let steps = (0..batch.len())
                .into_par_iter()
                .map(|k| sample_step(&model, &batch.image(k), &batch.targets(k), cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = model.params.zeros_like();
            let mut total = 0.0;
            for s in &steps {
                grads.accumulate(&s.grads);
                cls_sum += s.classification;
                cnt_sum += s.count;
                total += s.total;
            }
            grads.scale(1.0 / steps.len() as f64);
            if !total.is_finite() || !grads.all_finite() {
                log::error!("non-finite loss in epoch {}, batch {b}", epoch + 1);
                return Err(TrainError::NonFinite { epoch: epoch + 1, batch: b });
            }
            adam.update(&mut model.params, &grads, lr);
            model.clamp_logit_scale();
        }

        let val_res = evaluate_samples(&model, &val, &tile, aug)?;
        let n = train.len().max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_classification: cls_sum / n,
            train_count: cnt_sum / n,
            val_mae: val_res.mae,
            val_rmse: val_res.rmse,
        };
        log::info!(
            "epoch {:>3}  lr {:.2e}  cls {:.4}  count {:.4}  val mae {:.3} rmse {:.3}",
            rec.epoch,
            rec.lr,
            rec.train_classification,
            rec.train_count,
            rec.val_mae,
            rec.val_rmse
        );
        log.push(rec).map_err(|m| TrainError::Model(m))?;
        let improved = val_res.mae < best_val;
        if improved {
            best_val = val_res.mae;
            best_epoch = epoch + 1;
        }
        let ck = Checkpoint {
            meta: CheckpointMeta {
                config: cfg.clone(),
                config_hash: hash.clone(),
                bin_mode: space.mode,
                policy: space.policy.clone(),
                class_fingerprint: space.fingerprint.clone(),
                representatives: space.representatives.clone(),
                prompts: space.prompts.prompts().to_vec(),
                bank_fingerprint: bank_fingerprint.clone(),
                epoch: epoch + 1,
                val_mae: val_res.mae,
                best_val_mae: best_val,
                best_epoch,
                adam_step: adam.step,
                log: log.clone(),
            },
            params: model.params.clone(),
            bank: model.bank().embeddings().clone(),
            moments: Some((adam.first.clone(), adam.second.clone())),
        };
        ck.save(out_dir, "last")?;
        if improved {
            ck.save(out_dir, "best")?;
        }
        std::fs::write(out_dir.join("log.jsonl"), log.to_jsonl()).map_err(|source| DataError::Io {
            path: out_dir.join("log.jsonl"),
            source,
        })?;
    }

    if model.bank().fingerprint() != bank_fingerprint {
        return Err(TrainError::BankMutated);
    }
    Ok(TrainOutcome {
        log,
        model,
        space,
        best_val_mae: best_val,
        best_epoch,
        last_checkpoint: last_path.with_extension("json"),
        best_checkpoint: out_dir.join("best.json"),
    })
}

/// Evaluates a checkpoint's model on a split of the config's dataset.
pub fn evaluate_split(model: &EbcModel, cfg: &ExperimentConfig, split: Split) -> Result<EvalResult, TrainError> {
    let (_, samples) = load_split(cfg, split)?;
    Ok(evaluate_samples(model, &samples, &tile_config(cfg), &cfg.data.augment)?)
}

/// Ablation runner: trains the cell into `work_dir/<hash prefix>` and
/// evaluates the best checkpoint on the test split.
pub fn run_cell(cfg: &ExperimentConfig, work_dir: &Path) -> Result<EvalResult, TrainError> {
    let dir = work_dir.join(&cfg.hash()[..16]);
    let outcome = train(cfg, &dir, true)?;
    let best = Checkpoint::load(&outcome.best_checkpoint)?.model()?;
    evaluate_split(&best, cfg, cfg.data.test_split)
}

/// Fingerprint of the policy a config would produce on its training set.
pub fn expected_class_fingerprint(cfg: &ExperimentConfig) -> Result<String, TrainError> {
    let (manifest, _) = load_manifest(&cfg.data.root, cfg.data.train_split)?;
    let anns: Vec<PointAnnotation> = manifest.records.into_iter().map(|r| r.annotation).collect();
    Ok(ClassSpace::build(cfg, &anns)?.fingerprint)
}

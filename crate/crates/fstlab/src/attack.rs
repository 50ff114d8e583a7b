//! Supervised training and backdoor insertion.
//!
//! `train_model` is the plain SGD loop used both for clean baselines and for
//! training on poisoned data. `train_backdoored` wraps it: poison a clean
//! training set, train, measure clean accuracy and attack success on held-out
//! data, and flag the run if the trigger failed to take. The flag is recorded,
//! never silently dropped, so downstream defense results against a dud attack
//! are clearly marked.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::{attack_success_rate, clean_accuracy};
use crate::model::{ModelSpec, ModelSplit};
use crate::optim::{sgd_step, OptimizerState};
use crate::poison::{make_attack_eval_set, poison_dataset, PoisonSpec};
use crate::rng::{self, RngState};
use crate::trigger::TriggerSpec;

/// Hyperparameters for one SGD training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// When false the sample order is fixed (index order) every epoch.
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batchSize must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learningRate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Train a fresh model from `spec` on `data` with momentum SGD.
///
/// Model initialization and epoch shuffles draw from fixed, separate streams
/// of `cfg.seed`, so the run is a pure function of (data, spec, cfg). Returns
/// the trained model and the per-epoch mean loss (sample-weighted). A
/// non-finite batch loss aborts with a training error naming the epoch.
pub fn train_model(
    data: &ImageDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(ModelSplit, Vec<f64>)> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    let mut model = spec.build(cfg.seed)?;
    let losses = train_in_place(&mut model, data, cfg)?;
    Ok((model, losses))
}

/// The shared epoch/minibatch loop: runs SGD on an existing model.
pub(crate) fn train_in_place(
    model: &mut ModelSplit,
    data: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut opt = OptimizerState::new(model, cfg.learning_rate, cfg.momentum)?;
    let shuffle_state = RngState::new(cfg.seed, rng::stream::TRAIN_SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle_each_epoch {
            let mut rng = shuffle_state.substream(epoch as u64).rng();
            rng::shuffle(&mut order, &mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.batch(chunk);
            let (loss, grads) = model.backward(&batch, &labels, None)?;
            if !loss.is_finite() {
                return Err(Error::Train {
                    epoch,
                    message: format!("loss became non-finite ({loss})"),
                });
            }
            sgd_step(model, &grads, &mut opt)?;
            loss_sum += loss * chunk.len() as f64;
        }
        losses.push(loss_sum / data.len() as f64);
    }
    Ok(losses)
}

/// Below this attack success rate the insertion is considered failed.
pub const DEFAULT_INSERTION_THRESHOLD: f64 = 0.80;

/// Everything needed to interpret a backdoored checkpoint: what was poisoned,
/// how training went, and the measured pre-defense metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AttackMeta {
    pub trigger: TriggerSpec,
    pub poison: PoisonSpec,
    pub train: TrainConfig,
    pub dataset_name: String,
    pub poison_count: usize,
    pub cover_count: usize,
    pub epoch_losses: Vec<f64>,
    /// Clean accuracy on the held-out test set.
    pub c_acc: f64,
    /// Attack success rate on triggered non-target test samples.
    pub asr: f64,
    pub insertion_threshold: f64,
    /// True when `asr` came in below the threshold. Recorded, not fatal.
    pub attack_failed: bool,
}

/// A trained backdoored model together with its attack provenance.
#[derive(Debug, Clone)]
pub struct BackdooredModel {
    pub model: ModelSplit,
    pub meta: AttackMeta,
}

impl BackdooredModel {
    /// Write the checkpoint pair plus a `<stem>.attack.json` sidecar holding
    /// the metadata. `stem` must not carry an extension.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.model.save(stem)?;
        let meta_path = sidecar_path(stem);
        let text = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::input(format!("cannot encode attack metadata: {e}")))?;
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    /// Load a checkpoint saved by [`BackdooredModel::save`].
    pub fn load(stem: &Path) -> Result<BackdooredModel> {
        let model = ModelSplit::load(stem)?;
        let meta_path = sidecar_path(stem);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: AttackMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            code: "attack/bad-sidecar",
            message: format!("{}: {e}", meta_path.display()),
        })?;
        Ok(BackdooredModel { model, meta })
    }
}

fn sidecar_path(stem: &Path) -> std::path::PathBuf {
    stem.with_extension("attack.json")
}

/// Poison `clean_train`, train a model on it, and measure the result on
/// held-out data.
///
/// Clean accuracy is computed on `test` as-is; attack success on the
/// triggered non-target portion of `test` (original labels kept). An attack
/// success rate below `insertion_threshold` sets the failure flag in the
/// returned metadata. Poison selection uses `cfg.seed`, so the whole run is
/// reproducible from its arguments.
pub fn train_backdoored(
    clean_train: &ImageDataset,
    test: &ImageDataset,
    poison: &PoisonSpec,
    trigger: &TriggerSpec,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    insertion_threshold: f64,
) -> Result<BackdooredModel> {
    if !(0.0..=1.0).contains(&insertion_threshold) {
        return Err(Error::config(format!(
            "insertionThreshold must be in [0, 1], got {insertion_threshold}"
        )));
    }
    let poisoned = poison_dataset(clean_train, poison, trigger, cfg.seed)?;
    let (model, epoch_losses) = train_model(&poisoned.dataset, spec, cfg)?;
    let attack_eval = make_attack_eval_set(test, trigger, poison.target_label)?;
    let c_acc = clean_accuracy(&model, test)?.fraction;
    let asr = attack_success_rate(&model, &attack_eval, poison.target_label)?.fraction;
    let meta = AttackMeta {
        trigger: trigger.clone(),
        poison: *poison,
        train: *cfg,
        dataset_name: clean_train.name.clone(),
        poison_count: poisoned.poison_indices.len(),
        cover_count: poisoned.cover_indices.len(),
        epoch_losses,
        c_acc,
        asr,
        insertion_threshold,
        attack_failed: asr < insertion_threshold,
    };
    Ok(BackdooredModel { model, meta })
}

//! Training-set poisoning: stamp triggers on a seeded sample of images
//! and (depending on the mode) relabel them toward a target class.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::trigger::{apply_trigger_batch, TriggerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum PoisonMode {
    /// Trigger non-target samples and relabel them to the target class.
    DirtyLabel,
    /// Trigger samples that already belong to the target class; labels
    /// stay untouched, so the poison is invisible to label audits.
    CleanLabel,
    /// Dirty-label poisoning plus "cover" samples: extra non-target images
    /// that carry the trigger but keep their true labels, which pushes the
    /// model to treat the trigger as a weak, class-conditional cue.
    #[serde(rename_all = "camelCase")]
    Adaptive { cover_rate: f64 },
}

impl PoisonMode {
    pub fn describe(&self) -> &'static str {
        match self {
            PoisonMode::DirtyLabel => "dirtyLabel",
            PoisonMode::CleanLabel => "cleanLabel",
            PoisonMode::Adaptive { .. } => "adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PoisonSpec {
    /// Fraction of the training set that receives the trigger (and, in
    /// dirty-label modes, the target label). Count = floor(rate * n).
    pub rate: f64,
    pub target_label: usize,
    pub mode: PoisonMode,
}

/// A poisoned training set plus the bookkeeping of what was touched.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    pub dataset: ImageDataset,
    /// Samples that carry the trigger and the attack's label semantics.
    pub poison_indices: Vec<usize>,
    /// Adaptive mode only: triggered samples that kept their true labels.
    pub cover_indices: Vec<usize>,
}

impl PoisonSpec {
    fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!("poison rate must be in [0, 1), got {}", self.rate)));
        }
        if self.target_label >= class_count {
            return Err(Error::config(format!(
                "target label {} out of range for {class_count} classes",
                self.target_label
            )));
        }
        if let PoisonMode::Adaptive { cover_rate } = self.mode {
            if !(cover_rate >= 0.0) || self.rate + cover_rate >= 1.0 {
                return Err(Error::config(format!(
                    "rate {} + coverRate {cover_rate} must stay below 1",
                    self.rate
                )));
            }
        }
        Ok(())
    }
}

/// Poison a clean training set.
///
/// Selection is a uniform seeded draw from the eligible samples (non-target
/// classes for dirty-label and adaptive, the target class for clean-label)
/// on its own stream, so the chosen set depends only on `seed`, never on
/// how much randomness other stages consume. Returned index lists are
/// sorted and, for adaptive mode, disjoint.
pub fn poison_dataset(
    clean: &ImageDataset,
    pspec: &PoisonSpec,
    tspec: &TriggerSpec,
    seed: u64,
) -> Result<PoisonedDataset> {
    clean.validate()?;
    pspec.validate(clean.class_count)?;
    let n = clean.len();
    let poison_count = (pspec.rate * n as f64).floor() as usize;

    let mut eligible: Vec<usize> = match pspec.mode {
        PoisonMode::CleanLabel => (0..n).filter(|&i| clean.labels[i] == pspec.target_label).collect(),
        _ => (0..n).filter(|&i| clean.labels[i] != pspec.target_label).collect(),
    };
    let mut rng = RngState::new(seed, rng::stream::POISON_SELECTION).rng();
    rng::shuffle(&mut eligible, &mut rng);

    if poison_count > eligible.len() {
        return Err(Error::input(format!(
            "rate {} wants {poison_count} poison samples but only {} are eligible ({})",
            pspec.rate,
            eligible.len(),
            pspec.mode.describe()
        )));
    }
    let mut poison_indices: Vec<usize> = eligible[..poison_count].to_vec();

    let mut cover_indices: Vec<usize> = Vec::new();
    if let PoisonMode::Adaptive { cover_rate } = pspec.mode {
        let cover_count = (cover_rate * n as f64).floor() as usize;
        let remaining = &eligible[poison_count..];
        if cover_count > remaining.len() {
            return Err(Error::input(format!(
                "coverRate {cover_rate} wants {cover_count} cover samples but only {} remain",
                remaining.len()
            )));
        }
        cover_indices = remaining[..cover_count].to_vec();
        cover_indices.sort_unstable();
    }
    poison_indices.sort_unstable();

    let mut images = clean.images.clone();
    let mut labels = clean.labels.clone();
    let shape = images.shape().to_vec();
    let slab = shape[1] * shape[2] * shape[3];
    for &i in poison_indices.iter().chain(&cover_indices) {
        // Stamp via the batch path's slab routine: one sample at a time.
        let mut one = clean.images.gather(&[i]);
        apply_trigger_batch(&mut one, tspec)?;
        images.data_mut()[i * slab..(i + 1) * slab].copy_from_slice(one.slab(0));
    }
    if !matches!(pspec.mode, PoisonMode::CleanLabel) {
        for &i in &poison_indices {
            labels[i] = pspec.target_label;
        }
    }

    let dataset = ImageDataset::new(
        format!("{}+{}-{}", clean.name, pspec.mode.describe(), tspec.describe()),
        images,
        labels,
        clean.class_count,
    )?;
    Ok(PoisonedDataset { dataset, poison_indices, cover_indices })
}

/// Build the attack evaluation set: every test sample whose true label is
/// not the target, stamped with the trigger, true labels retained. Success
/// on this set means the trigger flips predictions to the target class.
pub fn make_attack_eval_set(
    test: &ImageDataset,
    tspec: &TriggerSpec,
    target_label: usize,
) -> Result<ImageDataset> {
    test.validate()?;
    if target_label >= test.class_count {
        return Err(Error::config(format!(
            "target label {target_label} out of range for {} classes",
            test.class_count
        )));
    }
    let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] != target_label).collect();
    if keep.is_empty() {
        return Err(Error::input("attack eval set would be empty: every test sample is the target class"));
    }
    let mut subset = test.subset(&keep, format!("{}+{}", test.name, tspec.describe()));
    apply_trigger_batch(&mut subset.images, tspec)?;
    subset.validate()?;
    Ok(subset)
}

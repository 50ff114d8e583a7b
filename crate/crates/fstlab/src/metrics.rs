//! Clean accuracy and attack success rate.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::loss::predict;
use crate::model::ModelSplit;

/// Forward passes run in chunks of this many samples to bound memory.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccuracyReport {
    /// Samples that entered the computation.
    pub evaluated: usize,
    /// Samples counted as a success (correct class, or target hit).
    pub hits: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub c_acc: AccuracyReport,
    pub asr: AccuracyReport,
}

/// Predicted class for every sample.
pub fn predict_dataset(model: &ModelSplit, data: &ImageDataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let indices: Vec<usize> = (start..end).collect();
        let (batch, _) = data.batch(&indices);
        let logits = model.forward_logits(&batch)?;
        preds.extend(predict(&logits));
        start = end;
    }
    Ok(preds)
}

/// Fraction of test samples classified correctly.
pub fn clean_accuracy(model: &ModelSplit, test: &ImageDataset) -> Result<AccuracyReport> {
    if test.is_empty() {
        return Err(Error::input("clean accuracy over an empty dataset"));
    }
    let preds = predict_dataset(model, test)?;
    let hits = preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(AccuracyReport { evaluated: test.len(), hits, fraction: hits as f64 / test.len() as f64 })
}

/// Fraction of triggered samples predicted as the target class.
///
/// Samples whose true label already is the target class are excluded:
/// predicting the target there is correct behavior, not evidence the
/// backdoor fires. The attack eval set is built without them; this guards
/// against callers passing a broader set.
pub fn attack_success_rate(
    model: &ModelSplit,
    attack_eval: &ImageDataset,
    target_label: usize,
) -> Result<AccuracyReport> {
    let keep: Vec<usize> = (0..attack_eval.len())
        .filter(|&i| attack_eval.labels[i] != target_label)
        .collect();
    if keep.is_empty() {
        return Err(Error::input(
            "attack success rate needs at least one sample from a non-target class",
        ));
    }
    let subset;
    let eval = if keep.len() == attack_eval.len() {
        attack_eval
    } else {
        subset = attack_eval.subset(&keep, attack_eval.name.clone());
        &subset
    };
    let preds = predict_dataset(model, eval)?;
    let hits = preds.iter().filter(|&&p| p == target_label).count();
    Ok(AccuracyReport { evaluated: eval.len(), hits, fraction: hits as f64 / eval.len() as f64 })
}

/// Both metrics in one report.
pub fn evaluate(
    model: &ModelSplit,
    test: &ImageDataset,
    attack_eval: &ImageDataset,
    target_label: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        c_acc: clean_accuracy(model, test)?,
        asr: attack_success_rate(model, attack_eval, target_label)?,
    })
}

//! Tuning-based backdoor removal.
//!
//! All six defenses share one engine: clone the compromised model, optionally
//! re-initialize the head, then run momentum SGD on a small clean tune set
//! with a per-variant trainable mask. The variants differ only in which
//! parameters move and in two extra mechanisms:
//!
//! - `lp`        tunes the head alone (extractor bit-frozen, large step size)
//! - `ft`        tunes everything
//! - `fe-tuning` re-initializes the head, freezes it, tunes the extractor
//! - `ft-init`   re-initializes the head, tunes everything
//! - `ft-sam`    like `ft` but every step is a sharpness-aware step
//! - `fst`       re-initializes the head, tunes everything, adds the penalty
//!   `alpha * <w, wOri>` against the original head weights, and by default
//!   projects the head weights back to their original Frobenius norm after
//!   every step
//!
//! Defenses accept a plain [`ImageDataset`] on purpose: a poisoned training
//! set carries its sample bookkeeping in a different type, so it cannot be
//! passed here by accident. The tune set is meant to come from a split taken
//! before any poisoning.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::{attack_success_rate, clean_accuracy};
use crate::layer::ParamKind;
use crate::model::{GradPenalty, ModelSplit, ParamKey, Side};
use crate::optim::{sam_step, sgd_step_where, OptimizerState};
use crate::rng::{self, RngState};
use crate::tensor::Tensor;

/// Penalty term `alpha * <w, wOri>` (Frobenius inner product).
///
/// This is the quantity FST adds to the tuning loss; its gradient with
/// respect to `w` is `alpha * wOri`, pushing the new head away from (not
/// merely orthogonal to) the compromised one while the cross-entropy term
/// keeps it discriminative.
pub fn inner_product_penalty(w: &Tensor, w_ori: &Tensor, alpha: f64) -> Result<f64> {
    if w.shape() != w_ori.shape() {
        return Err(Error::config(format!(
            "penalty operands must share a shape, got {:?} vs {:?}",
            w.shape(),
            w_ori.shape()
        )));
    }
    Ok(alpha * w.dot(w_ori))
}

/// Rescale `w` so its Frobenius norm is exactly `c`.
///
/// Keeping `||w||` pinned to the original head's norm stops the penalty from
/// winning by simply shrinking the head to zero. A zero tensor has no
/// direction to preserve, so it is an error rather than a silent zero-fill.
pub fn project_head(w: &mut Tensor, c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::config(format!("projection norm must be positive and finite, got {c}")));
    }
    let norm = w.norm();
    if norm == 0.0 {
        return Err(Error::numeric("cannot project a zero weight tensor onto a norm sphere"));
    }
    w.scale(c / norm);
    Ok(())
}

/// Global Frobenius norm over every head weight tensor (biases excluded).
pub fn head_weight_norm(model: &ModelSplit) -> f64 {
    model
        .registry()
        .iter()
        .zip(model.params())
        .filter(|(k, _)| k.side == Side::Head && k.kind == ParamKind::Weight)
        .map(|(_, p)| p.norm_sq())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
struct SnapshotEntry {
    param_index: usize,
    reference: Tensor,
    norm: f64,
}

/// Frozen copy of a model's head weights: the reference `wOri` for the FST
/// penalty and the norm budget `C` for projection.
#[derive(Debug, Clone)]
pub struct HeadSnapshot {
    entries: Vec<SnapshotEntry>,
    global_norm: f64,
}

impl HeadSnapshot {
    /// Copy every head weight tensor out of `model`. Fails if the combined
    /// norm is zero; a normless head cannot anchor either mechanism.
    pub fn capture(model: &ModelSplit) -> Result<HeadSnapshot> {
        let entries: Vec<SnapshotEntry> = model
            .registry()
            .iter()
            .enumerate()
            .filter(|(_, k)| k.side == Side::Head && k.kind == ParamKind::Weight)
            .map(|(i, _)| SnapshotEntry {
                param_index: i,
                reference: model.params()[i].clone(),
                norm: model.params()[i].norm(),
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::config("model head has no weight tensors to snapshot"));
        }
        let global_norm =
            entries.iter().map(|e| e.norm * e.norm).sum::<f64>().sqrt();
        if global_norm == 0.0 {
            return Err(Error::numeric("head weights are all zero; nothing to anchor to"));
        }
        Ok(HeadSnapshot { entries, global_norm })
    }

    /// The norm budget `C = ||wOri||_F` over all captured tensors.
    pub fn global_norm(&self) -> f64 {
        self.global_norm
    }

    /// Current inner product `sum_i <w_i, wOri_i>` against the live model.
    pub fn inner_product(&self, model: &ModelSplit) -> f64 {
        self.entries.iter().map(|e| model.params()[e.param_index].dot(&e.reference)).sum()
    }

    /// Gradient hook adding `alpha * wOri_i` to each captured weight's
    /// gradient.
    pub fn grad_penalty(&self, alpha: f64) -> GradPenalty {
        GradPenalty {
            alpha,
            terms: self.entries.iter().map(|e| (e.param_index, e.reference.clone())).collect(),
        }
    }

    /// Rescale the live head weights back onto the captured norm.
    ///
    /// Default mode applies one global factor so the combined norm equals
    /// `C`; relative magnitudes between head layers are preserved. With
    /// `per_layer` each captured tensor is pinned to its own original norm
    /// instead. Biases are never touched.
    pub fn project(&self, model: &mut ModelSplit, per_layer: bool) -> Result<()> {
        if per_layer {
            for e in &self.entries {
                if e.norm == 0.0 {
                    return Err(Error::numeric(
                        "captured head layer has zero norm; cannot project per layer",
                    ));
                }
                project_head(&mut model.params_mut()[e.param_index], e.norm)?;
            }
            return Ok(());
        }
        let current = self
            .entries
            .iter()
            .map(|e| model.params()[e.param_index].norm_sq())
            .sum::<f64>()
            .sqrt();
        if current == 0.0 {
            return Err(Error::numeric("head weights collapsed to zero during tuning"));
        }
        let factor = self.global_norm / current;
        for e in &self.entries {
            model.params_mut()[e.param_index].scale(factor);
        }
        Ok(())
    }
}

/// Which defense to run, with its variant-specific knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum DefenseVariant {
    Lp,
    Ft,
    FeTuning,
    FtInit,
    #[serde(rename_all = "camelCase")]
    FtSam { rho: f64 },
    #[serde(rename_all = "camelCase")]
    Fst { alpha: f64, projection: bool, per_layer_projection: bool },
}

impl DefenseVariant {
    /// FST with the stock settings: alpha 0.2, global norm projection on.
    pub fn fst_default() -> DefenseVariant {
        DefenseVariant::Fst { alpha: 0.2, projection: true, per_layer_projection: false }
    }

    /// Short label used in result tables and file names.
    pub fn label(&self) -> &'static str {
        match self {
            DefenseVariant::Lp => "lp",
            DefenseVariant::Ft => "ft",
            DefenseVariant::FeTuning => "fe-tuning",
            DefenseVariant::FtInit => "ft-init",
            DefenseVariant::FtSam { .. } => "ft-sam",
            DefenseVariant::Fst { .. } => "fst",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DefenseVariant::FtSam { rho } => {
                if !(rho > 0.0) || !rho.is_finite() {
                    return Err(Error::config(format!(
                        "ft-sam rho must be positive and finite, got {rho}"
                    )));
                }
            }
            DefenseVariant::Fst { alpha, .. } => {
                if alpha < 0.0 || !alpha.is_finite() {
                    return Err(Error::config(format!(
                        "fst alpha must be >= 0 and finite, got {alpha}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Hyperparameters for one defense run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DefenseConfig {
    pub variant: DefenseVariant,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl DefenseConfig {
    /// Stock settings per variant: 10 epochs, batch 64, momentum 0.9.
    /// The linear probe gets a much larger step size; with the extractor
    /// frozen, head-only tuning is a convex-ish problem that tolerates and
    /// needs it.
    pub fn defaults(variant: DefenseVariant, seed: u64) -> DefenseConfig {
        let learning_rate = match variant {
            DefenseVariant::Lp => 0.5,
            _ => 0.01,
        };
        DefenseConfig { variant, learning_rate, momentum: 0.9, epochs: 10, batch_size: 64, seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learningRate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batchSize must be at least 1"));
        }
        Ok(())
    }
}

/// Held-out sets for per-epoch measurements during a defense run.
#[derive(Debug, Clone, Copy)]
pub struct EvalSuite<'a> {
    pub test: &'a ImageDataset,
    /// Triggered non-target test samples with their true labels.
    pub attack_eval: &'a ImageDataset,
    pub target_label: usize,
}

/// One epoch of a defense trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochTrace {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub mean_loss: f64,
    /// Global Frobenius norm of the head weights after the epoch.
    pub head_norm: f64,
    /// `alpha * <w, wOri>` after the epoch; only tracked by fst.
    pub penalty: Option<f64>,
    /// `<w, wOri>` after the epoch; only tracked by fst.
    pub inner_product: Option<f64>,
    /// Clean accuracy after the epoch, when an eval suite was supplied.
    pub c_acc: Option<f64>,
    /// Attack success rate after the epoch, when an eval suite was supplied.
    pub asr: Option<f64>,
}

/// A defended model plus its per-epoch trace.
#[derive(Debug, Clone)]
pub struct DefenseResult {
    pub model: ModelSplit,
    pub trace: Vec<EpochTrace>,
    pub config: DefenseConfig,
}

/// Everything visible to a step observer, after the optimizer step (and
/// projection, where enabled) has been applied.
pub struct StepObservation<'a> {
    pub epoch: usize,
    /// Global step index across epochs, starting at 0.
    pub step: usize,
    /// Training loss at the pre-step parameters, including any penalty term.
    pub loss: f64,
    pub model: &'a ModelSplit,
}

/// Run any defense without per-epoch held-out metrics.
pub fn run_defense(
    model: &ModelSplit,
    tune: &ImageDataset,
    cfg: &DefenseConfig,
) -> Result<DefenseResult> {
    run_defense_traced(model, tune, cfg, None, &mut no_observer())
}

fn no_observer() -> Option<Box<dyn FnMut(&StepObservation)>> {
    None
}

/// Run any defense, optionally measuring held-out metrics each epoch and
/// reporting every optimizer step to `observer`.
pub fn run_defense_traced(
    model: &ModelSplit,
    tune: &ImageDataset,
    cfg: &DefenseConfig,
    eval: Option<&EvalSuite>,
    observer: &mut Option<Box<dyn FnMut(&StepObservation) + '_>>,
) -> Result<DefenseResult> {
    cfg.validate()?;
    tune.validate()?;
    if tune.len() == 0 {
        return Err(Error::input("tune set is empty"));
    }
    let mut model = model.clone();
    // Zero epochs is an explicit no-op: no re-initialization, no steps.
    if cfg.epochs == 0 {
        return Ok(DefenseResult { model, trace: Vec::new(), config: *cfg });
    }

    // The snapshot is taken from the compromised head, before any re-init.
    let (snapshot, alpha, project_on, per_layer) = match cfg.variant {
        DefenseVariant::Fst { alpha, projection, per_layer_projection } => {
            (Some(HeadSnapshot::capture(&model)?), alpha, projection, per_layer_projection)
        }
        _ => (None, 0.0, false, false),
    };
    let rho = match cfg.variant {
        DefenseVariant::FtSam { rho } => Some(rho),
        _ => None,
    };
    if matches!(
        cfg.variant,
        DefenseVariant::FeTuning | DefenseVariant::FtInit | DefenseVariant::Fst { .. }
    ) {
        model.reinit_head(RngState::new(cfg.seed, rng::stream::HEAD_REINIT));
    }
    let penalty = snapshot.as_ref().map(|s| s.grad_penalty(alpha));
    let variant = cfg.variant;
    let trainable = move |k: ParamKey| match variant {
        DefenseVariant::Lp => k.side == Side::Head,
        DefenseVariant::FeTuning => k.side == Side::Extractor,
        _ => true,
    };

    let mut opt = OptimizerState::new(&model, cfg.learning_rate, cfg.momentum)?;
    let shuffle_state = RngState::new(cfg.seed, rng::stream::DEFENSE_SHUFFLE);
    let mut order: Vec<usize> = (0..tune.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = shuffle_state.substream(epoch as u64).rng();
        rng::shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = tune.batch(chunk);
            let loss = match rho {
                Some(rho) => sam_step(&mut model, &batch, &labels, rho, &mut opt)?,
                None => {
                    let (loss, grads) = model.backward(&batch, &labels, penalty.as_ref())?;
                    sgd_step_where(&mut model, &grads, &mut opt, trainable)?;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::Train {
                    epoch,
                    message: format!("defense loss became non-finite ({loss})"),
                });
            }
            if project_on {
                snapshot.as_ref().expect("projection implies snapshot").project(
                    &mut model,
                    per_layer,
                )?;
            }
            if let Some(obs) = observer.as_mut() {
                obs(&StepObservation { epoch, step: global_step, loss, model: &model });
            }
            global_step += 1;
            loss_sum += loss * chunk.len() as f64;
        }
        let (inner_product, penalty_value) = match &snapshot {
            Some(s) => {
                let ip = s.inner_product(&model);
                (Some(ip), Some(alpha * ip))
            }
            None => (None, None),
        };
        let (c_acc, asr) = match eval {
            Some(suite) => (
                Some(clean_accuracy(&model, suite.test)?.fraction),
                Some(attack_success_rate(&model, suite.attack_eval, suite.target_label)?.fraction),
            ),
            None => (None, None),
        };
        trace.push(EpochTrace {
            epoch,
            mean_loss: loss_sum / tune.len() as f64,
            head_norm: head_weight_norm(&model),
            penalty: penalty_value,
            inner_product,
            c_acc,
            asr,
        });
    }
    Ok(DefenseResult { model, trace, config: *cfg })
}

macro_rules! variant_wrapper {
    ($(#[$doc:meta])* $name:ident, $pattern:pat, $expected:literal) => {
        $(#[$doc])*
        pub fn $name(
            model: &ModelSplit,
            tune: &ImageDataset,
            cfg: &DefenseConfig,
        ) -> Result<DefenseResult> {
            if !matches!(cfg.variant, $pattern) {
                return Err(Error::config(format!(
                    concat!($expected, " expects a matching variant, got {:?}"),
                    cfg.variant
                )));
            }
            run_defense(model, tune, cfg)
        }
    };
}

variant_wrapper!(
    /// Linear probing: tune the head only, extractor bit-frozen.
    run_lp,
    DefenseVariant::Lp,
    "run_lp"
);
variant_wrapper!(
    /// Vanilla fine-tuning of the whole network.
    run_ft,
    DefenseVariant::Ft,
    "run_ft"
);
variant_wrapper!(
    /// Re-initialize the head, freeze it, tune the extractor.
    run_fe_tuning,
    DefenseVariant::FeTuning,
    "run_fe_tuning"
);
variant_wrapper!(
    /// Re-initialize the head, then tune the whole network.
    run_ft_init,
    DefenseVariant::FtInit,
    "run_ft_init"
);
variant_wrapper!(
    /// Whole-network tuning with sharpness-aware steps.
    run_ft_sam,
    DefenseVariant::FtSam { .. },
    "run_ft_sam"
);
variant_wrapper!(
    /// Feature shift tuning: head re-init, inner-product penalty against the
    /// original head, and (by default) per-step norm projection.
    run_fst,
    DefenseVariant::Fst { .. },
    "run_fst"
);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, SyntheticSpec};
    use crate::layer::LayerSpec;
    use crate::model::ModelSpec;

    fn param_bits(model: &ModelSplit) -> Vec<Vec<u64>> {
        model.params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect()
    }

    fn tune_data() -> ImageDataset {
        let spec = SyntheticSpec {
            class_count: 3,
            train_per_class: 20,
            test_per_class: 4,
            height: 8,
            width: 8,
            channels: 1,
            noise_sigma: 0.1,
            grid: 4,
            seed: 11,
        };
        gen_synthetic(&spec).unwrap().0
    }

    fn base_model() -> ModelSplit {
        ModelSpec::toy_mlp(&[8, 8, 1], 3).build(5).unwrap()
    }

    fn cfg(variant: DefenseVariant) -> DefenseConfig {
        DefenseConfig {
            variant,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 2,
            batch_size: 16,
            seed: 3,
        }
    }

    #[test]
    fn penalty_matches_hand_numbers() {
        let w = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w_ori = Tensor::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap();
        // 0.5 * (1*3 + 2*(-1)) = 0.5
        assert_eq!(inner_product_penalty(&w, &w_ori, 0.5).unwrap(), 0.5);
        // Against itself: alpha * ||w||^2 = 0.2 * 5
        assert!((inner_product_penalty(&w, &w, 0.2).unwrap() - 1.0).abs() < 1e-15);
        let bad = Tensor::from_vec(&[2, 1], vec![3.0, -1.0]).unwrap();
        assert_eq!(inner_product_penalty(&w, &bad, 0.5).unwrap_err().code(), "config/invalid");
    }

    #[test]
    fn projection_matches_hand_numbers() {
        let mut w = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        project_head(&mut w, 10.0).unwrap();
        assert_eq!(w.data(), &[6.0, 8.0]);
        // Already on the sphere: unchanged up to rounding.
        let mut u = Tensor::from_vec(&[2], vec![6.0, 8.0]).unwrap();
        project_head(&mut u, 10.0).unwrap();
        assert!((u.data()[0] - 6.0).abs() < 1e-15 && (u.data()[1] - 8.0).abs() < 1e-15);
        let mut z = Tensor::zeros(&[3]);
        assert_eq!(project_head(&mut z, 1.0).unwrap_err().code(), "numeric/degenerate");
        let mut w2 = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert!(project_head(&mut w2, 0.0).is_err());
        assert!(project_head(&mut w2, f64::NAN).is_err());
    }

    #[test]
    fn snapshot_norm_spans_every_head_weight() {
        // Two dense layers in the head: C must be the combined norm, not the
        // classifier's alone.
        let spec = ModelSpec {
            input_shape: vec![6],
            class_count: 3,
            extractor: vec![LayerSpec::Dense { input: 6, output: 5, bias: true }],
            head: vec![
                LayerSpec::Dense { input: 5, output: 4, bias: true },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 4, output: 3, bias: true },
            ],
        };
        let model = spec.build(9).unwrap();
        let snap = HeadSnapshot::capture(&model).unwrap();
        let by_hand: f64 = model
            .registry()
            .iter()
            .zip(model.params())
            .filter(|(k, _)| k.side == Side::Head && k.kind == ParamKind::Weight)
            .map(|(_, p)| p.norm_sq())
            .sum::<f64>()
            .sqrt();
        assert_eq!(snap.global_norm(), by_hand);
        assert_eq!(snap.global_norm(), head_weight_norm(&model));
        assert!(snap.inner_product(&model) > 0.0); // <w, w> = ||w||^2 > 0
    }

    // Single FST step on a one-pixel model, reproduced with scalar
    // arithmetic: softmax, cross-entropy gradient, penalty gradient, the
    // momentum step, and the norm projection.
    #[test]
    fn fst_single_step_matches_scalar_arithmetic() {
        let spec = ModelSpec {
            input_shape: vec![1, 1, 1],
            class_count: 2,
            extractor: vec![LayerSpec::Flatten],
            head: vec![LayerSpec::Dense { input: 1, output: 2, bias: false }],
        };
        let mut compromised = spec.build(4).unwrap();
        let widx = compromised.classifier_weight_index();
        let w_ori = [1.0, -0.5];
        compromised.params_mut()[widx] =
            Tensor::from_vec(&[1, 2], w_ori.to_vec()).unwrap();
        let c = (w_ori[0] * w_ori[0] + w_ori[1] * w_ori[1]).sqrt();

        let x = 0.7;
        let data = ImageDataset::new(
            "unit",
            Tensor::from_vec(&[1, 1, 1, 1], vec![x]).unwrap(),
            vec![0],
            2,
        )
        .unwrap();

        let (lr, alpha, seed) = (0.1, 0.2, 17u64);
        let dcfg = DefenseConfig {
            variant: DefenseVariant::Fst { alpha, projection: true, per_layer_projection: false },
            learning_rate: lr,
            momentum: 0.9,
            epochs: 1,
            batch_size: 1,
            seed,
        };
        let result = run_fst(&compromised, &data, &dcfg).unwrap();

        // Reproduce the head re-initialization to learn the starting point.
        let mut fresh = compromised.clone();
        fresh.reinit_head(RngState::new(seed, rng::stream::HEAD_REINIT));
        let w0 = [fresh.params()[widx].data()[0], fresh.params()[widx].data()[1]];

        // One scalar step: logits, softmax, gradient, momentum (first step:
        // velocity = gradient), update, projection.
        let z = [x * w0[0], x * w0[1]];
        let m = z[0].max(z[1]);
        let exps = [(z[0] - m).exp(), (z[1] - m).exp()];
        let sum = exps[0] + exps[1];
        let p = [exps[0] / sum, exps[1] / sum];
        let grad = [x * (p[0] - 1.0) + alpha * w_ori[0], x * p[1] + alpha * w_ori[1]];
        let mut w1 = [w0[0] - lr * grad[0], w0[1] - lr * grad[1]];
        let n1 = (w1[0] * w1[0] + w1[1] * w1[1]).sqrt();
        w1[0] *= c / n1;
        w1[1] *= c / n1;

        let got = result.model.params()[widx].data();
        assert!(
            (got[0] - w1[0]).abs() < 1e-12 && (got[1] - w1[1]).abs() < 1e-12,
            "engine {got:?} vs scalar {w1:?}"
        );

        // Trace agrees: norm pinned at C, penalty recomputed from w1.
        let t = &result.trace[0];
        assert!((t.head_norm - c).abs() < 1e-12);
        let expect_ip = w1[0] * w_ori[0] + w1[1] * w_ori[1];
        assert!((t.inner_product.unwrap() - expect_ip).abs() < 1e-12);
        assert!((t.penalty.unwrap() - alpha * expect_ip).abs() < 1e-12);
        // Reported loss is at the pre-step point: CE + alpha * <w0, wOri>.
        let expect_loss = -p[0].ln() + alpha * (w0[0] * w_ori[0] + w0[1] * w_ori[1]);
        assert!((t.mean_loss - expect_loss).abs() < 1e-12);
    }

    #[test]
    fn fst_without_penalty_or_projection_reduces_to_reinit_tuning() {
        let model = base_model();
        let tune = tune_data();
        let fst_cfg = cfg(DefenseVariant::Fst {
            alpha: 0.0,
            projection: false,
            per_layer_projection: false,
        });
        let init_cfg = DefenseConfig { variant: DefenseVariant::FtInit, ..fst_cfg };
        let a = run_fst(&model, &tune, &fst_cfg).unwrap();
        let b = run_ft_init(&model, &tune, &init_cfg).unwrap();
        assert_eq!(param_bits(&a.model), param_bits(&b.model));
        for (ta, tb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ta.mean_loss.to_bits(), tb.mean_loss.to_bits());
        }
    }

    #[test]
    fn linear_probe_leaves_extractor_bits_alone() {
        let model = base_model();
        let tune = tune_data();
        let result = run_lp(&model, &tune, &cfg(DefenseVariant::Lp)).unwrap();
        let before = param_bits(&model);
        let after = param_bits(&result.model);
        for i in model.side_indices(Side::Extractor) {
            assert_eq!(before[i], after[i], "extractor tensor {i} moved");
        }
        let head = model.side_indices(Side::Head);
        assert!(head.iter().any(|&i| before[i] != after[i]), "head never moved");
    }

    #[test]
    fn fe_tuning_freezes_the_fresh_head() {
        let model = base_model();
        let tune = tune_data();
        let c = cfg(DefenseVariant::FeTuning);
        let result = run_fe_tuning(&model, &tune, &c).unwrap();
        // The head must equal the re-initialized draw exactly, untouched by
        // tuning, and the extractor must have moved.
        let mut expected = model.clone();
        expected.reinit_head(RngState::new(c.seed, rng::stream::HEAD_REINIT));
        let want = param_bits(&expected);
        let got = param_bits(&result.model);
        for i in model.side_indices(Side::Head) {
            assert_eq!(want[i], got[i], "head tensor {i} should be the frozen fresh draw");
        }
        let before = param_bits(&model);
        let ext = model.side_indices(Side::Extractor);
        assert!(ext.iter().any(|&i| before[i] != got[i]), "extractor never moved");
    }

    #[test]
    fn zero_epochs_is_a_complete_noop() {
        let model = base_model();
        let tune = tune_data();
        for variant in [
            DefenseVariant::Lp,
            DefenseVariant::Ft,
            DefenseVariant::FeTuning,
            DefenseVariant::FtInit,
            DefenseVariant::FtSam { rho: 0.05 },
            DefenseVariant::fst_default(),
        ] {
            let c = DefenseConfig { epochs: 0, ..cfg(variant) };
            let result = run_defense(&model, &tune, &c).unwrap();
            assert_eq!(param_bits(&model), param_bits(&result.model));
            assert!(result.trace.is_empty());
        }
    }

    #[test]
    fn trace_has_one_entry_per_epoch_and_eval_fields_follow_the_suite() {
        let model = base_model();
        let tune = tune_data();
        let test = gen_synthetic(&SyntheticSpec {
            class_count: 3,
            train_per_class: 2,
            test_per_class: 6,
            height: 8,
            width: 8,
            channels: 1,
            noise_sigma: 0.1,
            grid: 4,
            seed: 11,
        })
        .unwrap()
        .1;
        let trigger = crate::trigger::TriggerSpec::checkerboard(3, 1, 0).unwrap();
        let attack_eval = crate::poison::make_attack_eval_set(&test, &trigger, 0).unwrap();
        let suite = EvalSuite { test: &test, attack_eval: &attack_eval, target_label: 0 };
        let c = DefenseConfig { epochs: 3, ..cfg(DefenseVariant::fst_default()) };
        let r =
            run_defense_traced(&model, &tune, &c, Some(&suite), &mut no_observer()).unwrap();
        assert_eq!(r.trace.len(), 3);
        for t in &r.trace {
            assert!(t.penalty.is_some() && t.inner_product.is_some());
            let (ca, asr) = (t.c_acc.unwrap(), t.asr.unwrap());
            assert!((0.0..=1.0).contains(&ca) && (0.0..=1.0).contains(&asr));
        }
        // Non-fst variants carry no penalty fields.
        let lp = run_defense(&model, &tune, &cfg(DefenseVariant::Lp)).unwrap();
        assert!(lp.trace.iter().all(|t| t.penalty.is_none() && t.inner_product.is_none()));
    }

    #[test]
    fn projection_pins_the_head_norm_at_every_step() {
        let model = base_model();
        let tune = tune_data();
        let c = DefenseConfig { epochs: 2, batch_size: 8, ..cfg(DefenseVariant::fst_default()) };
        let snap = HeadSnapshot::capture(&model).unwrap();
        let cap = snap.global_norm();
        let mut worst: f64 = 0.0;
        let mut steps = 0usize;
        {
            let mut obs: Option<Box<dyn FnMut(&StepObservation) + '_>> =
                Some(Box::new(|o: &StepObservation| {
                    let rel = (head_weight_norm(o.model) - cap).abs() / cap;
                    worst = worst.max(rel);
                    steps += 1;
                }));
            run_defense_traced(&model, &tune, &c, None, &mut obs).unwrap();
        }
        assert!(steps >= 8, "expected several steps, saw {steps}");
        assert!(worst < 1e-9, "norm drifted by rel {worst}");
    }

    #[test]
    fn sam_variant_differs_from_plain_ft_and_rejects_bad_rho() {
        let model = base_model();
        let tune = tune_data();
        let ft = run_ft(&model, &tune, &cfg(DefenseVariant::Ft)).unwrap();
        let sam =
            run_ft_sam(&model, &tune, &cfg(DefenseVariant::FtSam { rho: 0.05 })).unwrap();
        assert_ne!(param_bits(&ft.model), param_bits(&sam.model));
        let bad = cfg(DefenseVariant::FtSam { rho: 0.0 });
        assert_eq!(run_defense(&model, &tune, &bad).unwrap_err().code(), "config/invalid");
    }

    #[test]
    fn wrappers_reject_mismatched_variants() {
        let model = base_model();
        let tune = tune_data();
        let err = run_fst(&model, &tune, &cfg(DefenseVariant::Lp)).unwrap_err();
        assert_eq!(err.code(), "config/invalid");
        let err = run_lp(&model, &tune, &cfg(DefenseVariant::Ft)).unwrap_err();
        assert_eq!(err.code(), "config/invalid");
    }

    #[test]
    fn defense_runs_are_deterministic() {
        let model = base_model();
        let tune = tune_data();
        let c = cfg(DefenseVariant::fst_default());
        let a = run_defense(&model, &tune, &c).unwrap();
        let b = run_defense(&model, &tune, &c).unwrap();
        assert_eq!(param_bits(&a.model), param_bits(&b.model));
        assert_eq!(a.trace, b.trace);
        let other = DefenseConfig { seed: 99, ..c };
        let d = run_defense(&model, &tune, &other).unwrap();
        assert_ne!(param_bits(&a.model), param_bits(&d.model));
    }

    #[test]
    fn per_layer_projection_pins_each_captured_norm() {
        let spec = ModelSpec {
            input_shape: vec![6],
            class_count: 3,
            extractor: vec![LayerSpec::Dense { input: 6, output: 5, bias: true }],
            head: vec![
                LayerSpec::Dense { input: 5, output: 4, bias: true },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 4, output: 3, bias: true },
            ],
        };
        let mut model = spec.build(21).unwrap();
        let snap = HeadSnapshot::capture(&model).unwrap();
        let norms: Vec<f64> = snap.entries.iter().map(|e| e.norm).collect();
        // Disturb the head, then project per layer: each captured tensor
        // returns to its own norm.
        for e in &snap.entries {
            model.params_mut()[e.param_index].scale(3.5);
        }
        snap.project(&mut model, true).unwrap();
        for (e, want) in snap.entries.iter().zip(&norms) {
            let got = model.params()[e.param_index].norm();
            assert!((got - want).abs() / want < 1e-12);
        }
        // Global mode restores only the combined norm.
        for e in &snap.entries {
            model.params_mut()[e.param_index].scale(0.25);
        }
        snap.project(&mut model, false).unwrap();
        assert!((head_weight_norm(&model) - snap.global_norm()).abs() / snap.global_norm() < 1e-12);
    }
}

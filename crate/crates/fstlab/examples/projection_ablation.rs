//! What the norm projection contributes: run the shifted-head defense with
//! the projection on, off, and in per-layer mode, tracking the head norm at
//! every step. Without the constraint the inner-product pull can shrink the
//! head instead of rotating it.
//!
//!     cargo run --release --example projection_ablation

use fstlab::attack::{train_backdoored, TrainConfig};
use fstlab::dataset::{gen_synthetic, split_tune, SplitSpec, SyntheticSpec};
use fstlab::defense::{
    head_weight_norm, run_defense_traced, DefenseConfig, DefenseVariant, StepObservation,
};
use fstlab::metrics::evaluate;
use fstlab::model::ModelSpec;
use fstlab::poison::{make_attack_eval_set, PoisonMode, PoisonSpec};
use fstlab::trigger::TriggerSpec;

fn main() -> fstlab::Result<()> {
    let data = SyntheticSpec { train_per_class: 200, test_per_class: 50, ..Default::default() };
    let (train, test) = gen_synthetic(&data)?;
    let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction: 0.02, seed: 0 })?;

    let trigger = TriggerSpec::checkerboard(3, data.channels, 0)?;
    let poison = PoisonSpec { rate: 0.05, target_label: 0, mode: PoisonMode::DirtyLabel };
    let spec = ModelSpec::toy_mlp(test.image_shape(), train.class_count);
    let cfg = TrainConfig { epochs: 25, ..Default::default() };
    let backdoored = train_backdoored(&rest, &test, &poison, &trigger, &spec, &cfg, 0.8)?;
    let attack_eval = make_attack_eval_set(&test, &trigger, poison.target_label)?;
    let original_norm = head_weight_norm(&backdoored.model);
    println!("original head norm {original_norm:.6}");
    println!("{:<22} {:>10} {:>10} {:>8} {:>8}", "mode", "min-norm", "max-norm", "c-acc", "asr");

    let modes: [(&str, bool, bool); 3] =
        [("projection off", false, false), ("global projection", true, false), ("per-layer projection", true, true)];
    for (label, projection, per_layer) in modes {
        let variant = DefenseVariant::Fst { alpha: 0.2, projection, per_layer_projection: per_layer };
        let mut dcfg = DefenseConfig::defaults(variant, 0);
        dcfg.epochs = 60;
        dcfg.batch_size = 8;

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let purified = {
            let mut obs: Option<Box<dyn FnMut(&StepObservation) + '_>> =
                Some(Box::new(|o: &StepObservation| {
                    let norm = head_weight_norm(o.model);
                    lo = lo.min(norm);
                    hi = hi.max(norm);
                }));
            run_defense_traced(&backdoored.model, &tune, &dcfg, None, &mut obs)?
        };
        let report = evaluate(&purified.model, &test, &attack_eval, poison.target_label)?;
        println!(
            "{label:<22} {lo:>10.6} {hi:>10.6} {:>8.4} {:>8.4}",
            report.c_acc.fraction, report.asr.fraction
        );
    }
    Ok(())
}

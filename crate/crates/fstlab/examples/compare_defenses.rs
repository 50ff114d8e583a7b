//! One backdoored model, all six purification variants: linear probe, full
//! tuning, extractor-only tuning, reinit-then-tune, the sharpness-aware
//! variant, and the shifted-head defense. Prints a before/after table.
//!
//!     cargo run --release --example compare_defenses

use fstlab::attack::{train_backdoored, TrainConfig};
use fstlab::dataset::{gen_synthetic, split_tune, SplitSpec, SyntheticSpec};
use fstlab::defense::{run_defense, DefenseConfig, DefenseVariant};
use fstlab::metrics::evaluate;
use fstlab::model::ModelSpec;
use fstlab::poison::{make_attack_eval_set, PoisonMode, PoisonSpec};
use fstlab::trigger::TriggerSpec;

fn main() -> fstlab::Result<()> {
    let data = SyntheticSpec { train_per_class: 200, test_per_class: 50, ..Default::default() };
    let (train, test) = gen_synthetic(&data)?;
    let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction: 0.02, seed: 0 })?;

    let trigger = TriggerSpec::blended_noise(data.height, data.width, data.channels, 0.5, 0)?;
    let poison = PoisonSpec { rate: 0.01, target_label: 0, mode: PoisonMode::DirtyLabel };
    let spec = ModelSpec::toy_mlp(test.image_shape(), train.class_count);
    let cfg = TrainConfig { epochs: 25, ..Default::default() };
    let backdoored = train_backdoored(&rest, &test, &poison, &trigger, &spec, &cfg, 0.8)?;
    let attack_eval = make_attack_eval_set(&test, &trigger, poison.target_label)?;

    println!("backdoored: c-acc {:.4}, asr {:.4}, tune set {} samples", backdoored.meta.c_acc, backdoored.meta.asr, tune.len());
    println!("{:<10} {:>8} {:>8}", "defense", "c-acc", "asr");

    let variants = [
        DefenseVariant::Lp,
        DefenseVariant::Ft,
        DefenseVariant::FeTuning,
        DefenseVariant::FtInit,
        DefenseVariant::FtSam { rho: 0.05 },
        DefenseVariant::fst_default(),
    ];
    for variant in variants {
        let mut dcfg = DefenseConfig::defaults(variant, 0);
        dcfg.epochs = 60;
        dcfg.batch_size = 8;
        let purified = run_defense(&backdoored.model, &tune, &dcfg)?;
        let report = evaluate(&purified.model, &test, &attack_eval, poison.target_label)?;
        println!("{:<10} {:>8.4} {:>8.4}", variant.label(), report.c_acc.fraction, report.asr.fraction);
    }
    Ok(())
}

//! Shrink the defender's clean tuning set and watch what survives: the
//! shifted-head defense runs on tune fractions from 2% down to a handful of
//! samples. Prints post-defense metrics per tuning-set size. Runs at full
//! dataset scale so the smallest fraction still holds five samples; expect
//! a couple of minutes.
//!
//!     cargo run --release --example tune_size_sweep

use fstlab::attack::{train_backdoored, TrainConfig};
use fstlab::dataset::{gen_synthetic, split_tune, SplitSpec, SyntheticSpec};
use fstlab::defense::{run_defense, DefenseConfig, DefenseVariant};
use fstlab::metrics::evaluate;
use fstlab::model::ModelSpec;
use fstlab::poison::{make_attack_eval_set, PoisonMode, PoisonSpec};
use fstlab::trigger::TriggerSpec;

fn main() -> fstlab::Result<()> {
    let data = SyntheticSpec::default();
    let (train, test) = gen_synthetic(&data)?;
    let trigger = TriggerSpec::checkerboard(3, data.channels, 0)?;
    let poison = PoisonSpec { rate: 0.05, target_label: 0, mode: PoisonMode::DirtyLabel };
    let spec = ModelSpec::toy_mlp(test.image_shape(), train.class_count);

    println!("{:>10} {:>8} {:>8} {:>8}", "fraction", "samples", "c-acc", "asr");
    for tune_fraction in [0.02, 0.005, 0.001] {
        // Re-split per size so each row sees the same clean/poisoned balance
        // the sweep harness would give it.
        let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction, seed: 0 })?;
        let cfg = TrainConfig::default();
        let backdoored = train_backdoored(&rest, &test, &poison, &trigger, &spec, &cfg, 0.8)?;
        let attack_eval = make_attack_eval_set(&test, &trigger, poison.target_label)?;

        let mut dcfg = DefenseConfig::defaults(DefenseVariant::fst_default(), 0);
        dcfg.epochs = 60;
        dcfg.batch_size = 8;
        let purified = run_defense(&backdoored.model, &tune, &dcfg)?;
        let report = evaluate(&purified.model, &test, &attack_eval, poison.target_label)?;
        println!("{tune_fraction:>10} {:>8} {:>8.4} {:>8.4}", tune.len(), report.c_acc.fraction, report.asr.fraction);
    }
    Ok(())
}

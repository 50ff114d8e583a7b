//! The cover-sample attack: alongside the mislabeled triggered samples, a
//! matching share of triggered samples keep their true labels, teaching the
//! model that the trigger alone is not enough and entangling its features
//! with the clean ones. Shows the poisoning bookkeeping, then purifies with
//! a strong shifted-head run.
//!
//!     cargo run --release --example adaptive_attack

use fstlab::attack::{train_backdoored, TrainConfig};
use fstlab::dataset::{gen_synthetic, split_tune, SplitSpec, SyntheticSpec};
use fstlab::defense::{run_defense, DefenseConfig, DefenseVariant};
use fstlab::metrics::evaluate;
use fstlab::model::ModelSpec;
use fstlab::poison::{make_attack_eval_set, poison_dataset, PoisonMode, PoisonSpec};
use fstlab::trigger::TriggerSpec;

fn main() -> fstlab::Result<()> {
    let data = SyntheticSpec::default();
    let (train, test) = gen_synthetic(&data)?;
    let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction: 0.02, seed: 0 })?;

    let trigger = TriggerSpec::blended_noise(data.height, data.width, data.channels, 0.6, 0)?;
    let poison = PoisonSpec {
        rate: 0.005,
        target_label: 0,
        mode: PoisonMode::Adaptive { cover_rate: 0.005 },
    };

    // Peek at the poisoned set before training: covers carry the trigger but
    // keep their true, non-target labels.
    let poisoned = poison_dataset(&rest, &poison, &trigger, 1)?;
    println!(
        "{} poison samples relabeled to {}, {} covers with true labels",
        poisoned.poison_indices.len(),
        poison.target_label,
        poisoned.cover_indices.len()
    );

    let spec = ModelSpec::toy_mlp(test.image_shape(), train.class_count);
    let cfg = TrainConfig { epochs: 25, seed: 1, ..Default::default() };
    let backdoored = train_backdoored(&rest, &test, &poison, &trigger, &spec, &cfg, 0.6)?;
    println!(
        "backdoored: c-acc {:.4}, asr {:.4} (insertion failed: {})",
        backdoored.meta.c_acc, backdoored.meta.asr, backdoored.meta.attack_failed
    );

    let variant = DefenseVariant::Fst { alpha: 0.5, projection: true, per_layer_projection: false };
    let mut dcfg = DefenseConfig::defaults(variant, 1);
    dcfg.epochs = 60;
    dcfg.batch_size = 8;
    let purified = run_defense(&backdoored.model, &tune, &dcfg)?;
    let attack_eval = make_attack_eval_set(&test, &trigger, poison.target_label)?;
    let report = evaluate(&purified.model, &test, &attack_eval, poison.target_label)?;
    println!("purified:   c-acc {:.4}, asr {:.4}", report.c_acc.fraction, report.asr.fraction);
    Ok(())
}

//! End-to-end backdoor insertion: generate the synthetic task, poison a
//! slice of the training set with a corner patch, train, measure clean
//! accuracy and attack success, and save the checkpoint pair.
//!
//!     cargo run --release --example train_backdoor

use fstlab::attack::{train_backdoored, TrainConfig};
use fstlab::dataset::{gen_synthetic, SyntheticSpec};
use fstlab::model::ModelSpec;
use fstlab::poison::{PoisonMode, PoisonSpec};
use fstlab::trigger::TriggerSpec;

fn main() -> fstlab::Result<()> {
    let data = SyntheticSpec { train_per_class: 200, test_per_class: 50, ..Default::default() };
    let (train, test) = gen_synthetic(&data)?;
    println!("dataset: {} train / {} test, {} classes", train.len(), test.len(), train.class_count);

    let trigger = TriggerSpec::checkerboard(3, data.channels, 0)?;
    let poison = PoisonSpec { rate: 0.05, target_label: 0, mode: PoisonMode::DirtyLabel };
    let spec = ModelSpec::toy_mlp(test.image_shape(), train.class_count);
    let cfg = TrainConfig { epochs: 25, ..Default::default() };

    let backdoored = train_backdoored(&train, &test, &poison, &trigger, &spec, &cfg, 0.8)?;
    let meta = &backdoored.meta;
    println!("poisoned {} samples toward label {}", meta.poison_count, poison.target_label);
    println!("clean accuracy {:.4}", meta.c_acc);
    println!("attack success {:.4} (threshold {}, failed: {})", meta.asr, meta.insertion_threshold, meta.attack_failed);

    let stem = std::env::temp_dir().join("fstlab-example-backdoored");
    backdoored.save(&stem)?;
    println!("checkpoint saved at {}.{{json,bin,attack.json}}", stem.display());
    Ok(())
}

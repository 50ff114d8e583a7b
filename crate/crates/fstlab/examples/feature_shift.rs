//! Where the backdoor lives in feature space: project clean target-class
//! features and triggered features onto their top two principal components,
//! before and after the shifted-head defense, and write both clouds as CSV
//! for plotting. Also prints the separation ratios the lab tracks.
//!
//!     cargo run --release --example feature_shift

use fstlab::attack::{train_backdoored, TrainConfig};
use fstlab::dataset::{gen_synthetic, split_tune, ImageDataset, SplitSpec, SyntheticSpec};
use fstlab::defense::{run_defense, DefenseConfig, DefenseVariant};
use fstlab::model::{ModelSplit, ModelSpec};
use fstlab::pca::{pca_project, write_pca_csv};
use fstlab::poison::{make_attack_eval_set, PoisonMode, PoisonSpec};
use fstlab::separation::feature_separation;
use fstlab::tensor::Tensor;
use fstlab::trigger::TriggerSpec;

fn clouds(
    model: &ModelSplit,
    clean_target: &ImageDataset,
    triggered: &ImageDataset,
    path: &std::path::Path,
) -> fstlab::Result<f64> {
    // Stack both clouds into one feature matrix so they share components.
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut flags = Vec::new();
    for (set, flag) in [(clean_target, false), (triggered, true)] {
        let feats = model.forward_features(&set.images)?;
        for i in 0..set.len() {
            rows.push(feats.slab_tensor(i));
            labels.push(set.labels[i]);
            flags.push(flag);
        }
    }
    let stacked = Tensor::stack(&rows)?;
    let projection = pca_project(&stacked, 2)?;
    write_pca_csv(path, &projection, &labels, &flags)?;
    Ok(feature_separation(model, clean_target, triggered)?.ratio)
}

fn main() -> fstlab::Result<()> {
    let data = SyntheticSpec { train_per_class: 200, test_per_class: 50, ..Default::default() };
    let (train, test) = gen_synthetic(&data)?;
    let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction: 0.02, seed: 0 })?;

    let trigger = TriggerSpec::blended_noise(data.height, data.width, data.channels, 0.5, 0)?;
    let poison = PoisonSpec { rate: 0.01, target_label: 0, mode: PoisonMode::DirtyLabel };
    let spec = ModelSpec::toy_mlp(test.image_shape(), train.class_count);
    let cfg = TrainConfig { epochs: 25, ..Default::default() };
    let backdoored = train_backdoored(&rest, &test, &poison, &trigger, &spec, &cfg, 0.8)?;

    let target_indices: Vec<usize> =
        (0..test.len()).filter(|&i| test.labels[i] == poison.target_label).collect();
    let clean_target = test.subset(&target_indices, "clean-target");
    let triggered = make_attack_eval_set(&test, &trigger, poison.target_label)?;

    let out = std::env::temp_dir();
    let before = clouds(&backdoored.model, &clean_target, &triggered, &out.join("features-before.csv"))?;

    let mut dcfg = DefenseConfig::defaults(DefenseVariant::fst_default(), 0);
    dcfg.epochs = 60;
    dcfg.batch_size = 8;
    let purified = run_defense(&backdoored.model, &tune, &dcfg)?;
    let after = clouds(&purified.model, &clean_target, &triggered, &out.join("features-after.csv"))?;

    println!("separation ratio before {before:.3}, after {after:.3}");
    println!("csv written to {} and {}", out.join("features-before.csv").display(), out.join("features-after.csv").display());
    Ok(())
}

//! Sweep poisoning rates against a head-only probe and the shifted-head
//! defense, printing attack success before and after purification for every
//! (rate, defense, seed) cell of the grid.
//!
//!     cargo run --release --example rate_sensitivity

use fstlab::attack::TrainConfig;
use fstlab::dataset::SyntheticSpec;
use fstlab::defense::DefenseVariant;
use fstlab::experiment::{run_sweep, DefenseSpec, PlanConfig, TriggerConfig};

fn main() -> fstlab::Result<()> {
    let defense = |variant| DefenseSpec {
        variant,
        learning_rate: None,
        momentum: 0.9,
        epochs: 60,
        batch_size: 8,
    };
    let plan = PlanConfig {
        name: "rate-sensitivity".into(),
        dataset: SyntheticSpec { train_per_class: 200, test_per_class: 50, ..Default::default() },
        train: TrainConfig { epochs: 25, ..Default::default() },
        trigger: TriggerConfig::Blended { blend_ratio: 0.5, seed: 0 },
        rates: vec![0.10, 0.01],
        defenses: vec![defense(DefenseVariant::Lp), defense(DefenseVariant::fst_default())],
        seeds: vec![0, 1],
        ..Default::default()
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let result = run_sweep(&plan, threads)?;

    println!("{:<8} {:<8} {:>4} {:>9} {:>9}", "rate", "defense", "seed", "pre-asr", "post-asr");
    for cell in &result.records {
        println!(
            "{:<8} {:<8} {:>4} {:>9} {:>9}",
            cell.rate,
            cell.defense,
            cell.seed,
            cell.asr_before.map_or("-".into(), |v| format!("{v:.4}")),
            cell.asr_after.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

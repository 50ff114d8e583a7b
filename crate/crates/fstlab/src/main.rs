//! Thin command-line front end over the fstlab library.
//!
//! Every subcommand is a small wrapper around one library entry point; the
//! `examples/` directory shows the same flows as code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fstlab::attack::{train_backdoored, BackdooredModel, TrainConfig};
use fstlab::dataset::{gen_synthetic, split_tune, SplitSpec};
use fstlab::defense::run_defense;
use fstlab::experiment::{
    cell_config_hash, emit_plot_data, read_plan, read_results, replay, run_sweep, write_results,
    PlanConfig, PlotKind,
};
use fstlab::idx::write_idx;
use fstlab::metrics::evaluate;
use fstlab::poison::{make_attack_eval_set, PoisonSpec};
use fstlab::separation::feature_separation;
use fstlab::Result;

#[derive(Parser)]
#[command(
    name = "fstlab",
    version,
    about = "Backdoor poisoning attacks and tuning-based purification on synthetic data"
)]
struct Cli {
    /// Experiment plan (fstlab-config-v1 JSON). Omitted: built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for outputs (and inputs of plot-data/replay).
    #[arg(long, global = true, value_name = "DIR", default_value = "fstlab-out")]
    out: PathBuf,

    /// Override the plan's seed axis with this single seed
    /// (for gen-data: the dataset seed).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for sweep stages. Results never depend on this.
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,

    /// Report progress on stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write IDX image/label files.
    GenData,
    /// Poison, train, and save a backdoored checkpoint with its sidecar.
    Attack,
    /// Run the plan's defenses against a saved backdoored checkpoint.
    Defend {
        /// Checkpoint stem written by `attack`. Default: <out>/backdoored.
        #[arg(long, value_name = "STEM")]
        model: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint: clean accuracy, attack success,
    /// feature separation.
    Eval {
        /// Checkpoint stem written by `attack` or `defend`.
        /// Default: <out>/backdoored.
        #[arg(long, value_name = "STEM")]
        model: Option<PathBuf>,
    },
    /// Run the whole plan grid; write results.json and results.csv.
    Sweep,
    /// Extract plot-ready CSV series from saved sweep results.
    PlotData {
        /// One of: alpha-sensitivity, epoch-curves, tune-size,
        /// projection-ablation.
        kind: String,
    },
    /// Re-run recorded cells and verify the records are byte-identical.
    Replay {
        /// Replay only this cell id.
        #[arg(long, value_name = "ID")]
        cell: Option<String>,
    },
}

fn load_plan(cli: &Cli) -> Result<PlanConfig> {
    let mut plan = match &cli.config {
        Some(path) => read_plan(path)?,
        None => PlanConfig::default(),
    };
    if let Some(seed) = cli.seed {
        plan.seeds = vec![seed];
    }
    Ok(plan)
}

fn parallelism(cli: &Cli) -> usize {
    cli.parallel
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn chat(cli: &Cli, message: &str) {
    if cli.verbose {
        eprintln!("fstlab: {message}");
    }
}

/// The attack settings of a plan's first grid point: rate = rates[0],
/// seed = seeds[0].
fn first_cell_attack(plan: &PlanConfig) -> (PoisonSpec, TrainConfig) {
    let poison = PoisonSpec {
        rate: plan.rates[0],
        target_label: plan.attack.target_label,
        mode: plan.attack.mode,
    };
    let train = TrainConfig { seed: plan.seeds[0], ..plan.train };
    (poison, train)
}

fn cmd_gen_data(cli: &Cli) -> Result<()> {
    let mut plan = load_plan(cli)?;
    if let Some(seed) = cli.seed {
        plan.dataset.seed = seed;
    }
    let (train, test) = gen_synthetic(&plan.dataset)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| fstlab::Error::io(&cli.out, e))?;
    for (name, split) in [("train", &train), ("test", &test)] {
        let images = cli.out.join(format!("{name}-images.idx"));
        let labels = cli.out.join(format!("{name}-labels.idx"));
        write_idx(split, &images, &labels)?;
        chat(cli, &format!("wrote {} samples to {}", split.len(), images.display()));
    }
    println!(
        "generated {} train / {} test samples ({} classes, {}x{}x{})",
        train.len(),
        test.len(),
        train.class_count,
        plan.dataset.height,
        plan.dataset.width,
        plan.dataset.channels
    );
    Ok(())
}

fn cmd_attack(cli: &Cli) -> Result<()> {
    let plan = load_plan(cli)?;
    let (poison, train_cfg) = first_cell_attack(&plan);
    let (train, test) = gen_synthetic(&plan.dataset)?;
    let (rest, _tune) =
        split_tune(&train, &SplitSpec { tune_fraction: plan.tune_fractions[0], seed: train_cfg.seed })?;
    let trigger = plan.trigger.realize(test.image_shape())?;
    let spec = plan.model.build_spec(test.image_shape(), test.class_count)?;
    chat(cli, &format!("training backdoored model (rate {}, seed {})", poison.rate, train_cfg.seed));
    let bd = train_backdoored(
        &rest,
        &test,
        &poison,
        &trigger,
        &spec,
        &train_cfg,
        plan.insertion_threshold,
    )?;
    std::fs::create_dir_all(&cli.out).map_err(|e| fstlab::Error::io(&cli.out, e))?;
    let stem = cli.out.join("backdoored");
    bd.save(&stem)?;
    println!(
        "saved {} (C-Acc {:.4}, ASR {:.4}{})",
        stem.display(),
        bd.meta.c_acc,
        bd.meta.asr,
        if bd.meta.attack_failed { ", attack-failed" } else { "" }
    );
    Ok(())
}

fn cmd_defend(cli: &Cli, model: Option<&Path>) -> Result<()> {
    let plan = load_plan(cli)?;
    let stem = model.map(PathBuf::from).unwrap_or_else(|| cli.out.join("backdoored"));
    let bd = BackdooredModel::load(&stem)?;
    let seed = plan.seeds[0];
    let (train, test) = gen_synthetic(&plan.dataset)?;
    let (_rest, tune) =
        split_tune(&train, &SplitSpec { tune_fraction: plan.tune_fractions[0], seed })?;
    let attack_eval =
        make_attack_eval_set(&test, &bd.meta.trigger, bd.meta.poison.target_label)?;
    println!(
        "before: C-Acc {:.4}, ASR {:.4} ({} tune samples)",
        bd.meta.c_acc,
        bd.meta.asr,
        tune.len()
    );
    for spec in &plan.defenses {
        let cfg = spec.to_config(seed);
        chat(cli, &format!("running {}", spec.variant.label()));
        let result = run_defense(&bd.model, &tune, &cfg)?;
        let m = evaluate(&result.model, &test, &attack_eval, bd.meta.poison.target_label)?;
        let out_stem = cli.out.join(format!("defended-{}", spec.variant.label()));
        result.model.save(&out_stem)?;
        println!(
            "{:>10}: C-Acc {:.4}, ASR {:.4} -> {}",
            spec.variant.label(),
            m.c_acc.fraction,
            m.asr.fraction,
            out_stem.display()
        );
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, model: Option<&Path>) -> Result<()> {
    let plan = load_plan(cli)?;
    let stem = model.map(PathBuf::from).unwrap_or_else(|| cli.out.join("backdoored"));
    // A defended checkpoint has no sidecar; fall back to the attack sidecar
    // next to the default stem for trigger/target, else the plan's trigger.
    let (model_split, trigger, target) = match BackdooredModel::load(&stem) {
        Ok(bd) => {
            let target = bd.meta.poison.target_label;
            (bd.model, bd.meta.trigger, target)
        }
        Err(_) => {
            let split = fstlab::model::ModelSplit::load(&stem)?;
            let (_, test) = gen_synthetic(&plan.dataset)?;
            let trigger = plan.trigger.realize(test.image_shape())?;
            (split, trigger, plan.attack.target_label)
        }
    };
    let (_, test) = gen_synthetic(&plan.dataset)?;
    let attack_eval = make_attack_eval_set(&test, &trigger, target)?;
    let metrics = evaluate(&model_split, &test, &attack_eval, target)?;
    let cap = 128.min(test.len()).min(attack_eval.len());
    let idx: Vec<usize> = (0..cap).collect();
    let separation = feature_separation(
        &model_split,
        &test.subset(&idx, "eval-clean"),
        &attack_eval.subset(&idx, "eval-triggered"),
    )
    .ok();
    let report = serde_json::json!({
        "model": stem.display().to_string(),
        "cAcc": metrics.c_acc.fraction,
        "asr": metrics.asr.fraction,
        "separationRatio": separation.as_ref().map(|s| s.ratio),
        "silhouette": separation.as_ref().map(|s| s.silhouette),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let plan = load_plan(cli)?;
    let workers = parallelism(cli);
    chat(cli, &format!("{} cells on {workers} workers", plan.cells().len()));
    let result = run_sweep(&plan, workers)?;
    write_results(&cli.out, &result)?;
    let ok = result.records.iter().filter(|r| r.is_ok()).count();
    println!(
        "{} cells ({} ok, {} failed) in {:.1}s -> {}",
        result.records.len(),
        ok,
        result.records.len() - ok,
        result.timing.total_s,
        cli.out.join("results.json").display()
    );
    if cli.verbose {
        for (record, cell) in result.records.iter().zip(plan.cells()) {
            debug_assert_eq!(record.config_hash, cell_config_hash(&plan, &cell));
            eprintln!("fstlab: {} {}", record.id, record.status);
        }
    }
    Ok(())
}

fn cmd_plot_data(cli: &Cli, kind: &str) -> Result<()> {
    let kind = PlotKind::parse(kind)?;
    let result = read_results(&cli.out)?;
    let dir = cli.out.join("plots");
    let files = emit_plot_data(&result, kind, &dir)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_replay(cli: &Cli, cell: Option<&str>) -> Result<bool> {
    let stored = read_results(&cli.out)?;
    let report = replay(&stored, cell)?;
    if report.mismatched.is_empty() {
        println!("replayed {} cells: all byte-identical", report.cells_checked);
        Ok(true)
    } else {
        println!(
            "replayed {} cells: {} MISMATCHED: {}",
            report.cells_checked,
            report.mismatched.len(),
            report.mismatched.join(", ")
        );
        Ok(false)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData => cmd_gen_data(&cli).map(|()| true),
        Command::Attack => cmd_attack(&cli).map(|()| true),
        Command::Defend { model } => cmd_defend(&cli, model.as_deref()).map(|()| true),
        Command::Eval { model } => cmd_eval(&cli, model.as_deref()).map(|()| true),
        Command::Sweep => cmd_sweep(&cli).map(|()| true),
        Command::PlotData { kind } => cmd_plot_data(&cli, kind).map(|()| true),
        Command::Replay { cell } => cmd_replay(&cli, cell.as_deref()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("fstlab: error [{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}

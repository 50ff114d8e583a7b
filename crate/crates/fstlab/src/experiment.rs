//! Config-driven experiment sweeps over the attack/defense grid.
//!
//! A plan is a strict JSON document (`fstlab-config-v1`): unknown keys are
//! rejected by name, every knob has a default, and the minimal plan
//! `{"format": "fstlab-config-v1"}` expands to exactly one cell. The grid is
//! the cross product rates x tuneFractions x defenses x seeds; each cell
//! trains (or reuses) a backdoored model and runs one defense against it.
//!
//! Everything downstream of the wall clock is deterministic: records are
//! keyed and sorted by cell id, independent of how many workers ran the
//! sweep, and `results.json` is byte-identical across runs except for the
//! separate timing section. `replay` re-executes recorded cells and verifies
//! byte identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{train_backdoored, BackdooredModel, TrainConfig, DEFAULT_INSERTION_THRESHOLD};
use crate::dataset::{gen_synthetic, split_tune, ImageDataset, SplitSpec, SyntheticSpec};
use crate::defense::{
    run_defense_traced, DefenseConfig, DefenseVariant, EpochTrace, EvalSuite,
};
use crate::error::{Error, Result};
use crate::metrics::{attack_success_rate, clean_accuracy};
use crate::model::ModelSpec;
use crate::poison::{make_attack_eval_set, PoisonMode, PoisonSpec};
use crate::separation::feature_separation;
use crate::trigger::TriggerSpec;

pub const CONFIG_FORMAT: &str = "fstlab-config-v1";
pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";

/// Samples per side used for the feature separation measurement.
const SEPARATION_SAMPLE_CAP: usize = 128;

/// Which toy architecture a plan trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ModelKind {
    #[default]
    Mlp,
    Cnn,
}

impl ModelKind {
    pub fn build_spec(&self, input_shape: &[usize], class_count: usize) -> Result<ModelSpec> {
        match self {
            ModelKind::Mlp => Ok(ModelSpec::toy_mlp(input_shape, class_count)),
            ModelKind::Cnn => ModelSpec::toy_cnn(input_shape, class_count),
        }
    }
}

/// Declarative trigger description; the pixel pattern is realized once the
/// dataset's image shape is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum TriggerConfig {
    #[serde(rename_all = "camelCase")]
    Patch {
        #[serde(default = "default_patch_size")]
        size: usize,
        #[serde(default)]
        corner_offset: usize,
    },
    #[serde(rename_all = "camelCase")]
    Blended {
        #[serde(default = "default_blend_ratio")]
        blend_ratio: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_patch_size() -> usize {
    3
}

fn default_blend_ratio() -> f64 {
    0.2
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig::Patch { size: default_patch_size(), corner_offset: 0 }
    }
}

impl TriggerConfig {
    pub fn realize(&self, image_shape: &[usize]) -> Result<TriggerSpec> {
        let (h, w, c) = (image_shape[0], image_shape[1], image_shape[2]);
        match *self {
            TriggerConfig::Patch { size, corner_offset } => {
                TriggerSpec::checkerboard(size, c, corner_offset)
            }
            TriggerConfig::Blended { blend_ratio, seed } => {
                TriggerSpec::blended_noise(h, w, c, blend_ratio, seed)
            }
        }
    }
}

/// Poison mode and target shared by every cell of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_poison_mode")]
    pub mode: PoisonMode,
    #[serde(default)]
    pub target_label: usize,
}

fn default_poison_mode() -> PoisonMode {
    PoisonMode::DirtyLabel
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { mode: default_poison_mode(), target_label: 0 }
    }
}

/// One defense in the plan grid: a variant plus optional overrides of the
/// stock tuning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DefenseSpec {
    pub variant: DefenseVariant,
    /// Defaults to the variant's stock step size when absent.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_defense_epochs")]
    pub epochs: usize,
    #[serde(default = "default_defense_batch")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_defense_epochs() -> usize {
    10
}

fn default_defense_batch() -> usize {
    64
}

impl DefenseSpec {
    pub fn new(variant: DefenseVariant) -> DefenseSpec {
        DefenseSpec {
            variant,
            learning_rate: None,
            momentum: default_momentum(),
            epochs: default_defense_epochs(),
            batch_size: default_defense_batch(),
        }
    }

    /// Resolve to a runnable config for one cell.
    pub fn to_config(&self, seed: u64) -> DefenseConfig {
        let stock = DefenseConfig::defaults(self.variant, seed);
        DefenseConfig {
            variant: self.variant,
            learning_rate: self.learning_rate.unwrap_or(stock.learning_rate),
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// A full experiment description: shared stages plus the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PlanConfig {
    /// Must be `fstlab-config-v1`.
    pub format: String,
    #[serde(default = "default_plan_name")]
    pub name: String,
    #[serde(default)]
    pub dataset: SyntheticSpec,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_insertion_threshold")]
    pub insertion_threshold: f64,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_tune_fractions")]
    pub tune_fractions: Vec<f64>,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_plan_name() -> String {
    "experiment".into()
}

fn default_insertion_threshold() -> f64 {
    DEFAULT_INSERTION_THRESHOLD
}

fn default_rates() -> Vec<f64> {
    vec![0.05]
}

fn default_tune_fractions() -> Vec<f64> {
    vec![0.02]
}

fn default_defenses() -> Vec<DefenseSpec> {
    vec![DefenseSpec::new(DefenseVariant::fst_default())]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            format: CONFIG_FORMAT.into(),
            name: default_plan_name(),
            dataset: SyntheticSpec::default(),
            model: ModelKind::default(),
            train: TrainConfig::default(),
            insertion_threshold: default_insertion_threshold(),
            trigger: TriggerConfig::default(),
            attack: AttackConfig::default(),
            rates: default_rates(),
            tune_fractions: default_tune_fractions(),
            defenses: default_defenses(),
            seeds: default_seeds(),
        }
    }
}

/// Parse a plan from JSON text, rejecting unknown keys by name.
pub fn parse_plan(text: &str) -> Result<PlanConfig> {
    let plan: PlanConfig = serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        let code = if message.contains("unknown field") {
            "config/unknown-key"
        } else {
            "config/parse"
        };
        Error::Parse { code, message }
    })?;
    plan.validate()?;
    Ok(plan)
}

pub fn read_plan(path: &Path) -> Result<PlanConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_plan(&text)
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(Error::Parse {
                code: "config/bad-format",
                message: format!("expected format {CONFIG_FORMAT:?}, got {:?}", self.format),
            });
        }
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.insertion_threshold) {
            return Err(Error::config(format!(
                "insertionThreshold must be in [0, 1], got {}",
                self.insertion_threshold
            )));
        }
        if self.rates.is_empty() {
            return Err(Error::config("rates must not be empty"));
        }
        for &r in &self.rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("poison rate must be in [0, 1), got {r}")));
            }
        }
        if self.tune_fractions.is_empty() {
            return Err(Error::config("tuneFractions must not be empty"));
        }
        for &f in &self.tune_fractions {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("tuneFraction must be in (0, 1), got {f}")));
            }
        }
        if self.defenses.is_empty() {
            return Err(Error::config("defenses must not be empty"));
        }
        for d in &self.defenses {
            d.to_config(0).validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(())
    }

    /// Expand the grid in plan order: rates, then tune fractions, then
    /// defenses, then seeds. Ordinals make cell ids unique and sortable.
    pub fn cells(&self) -> Vec<PlanCell> {
        let mut out = Vec::new();
        let mut ordinal = 0;
        for &rate in &self.rates {
            for &tune_fraction in &self.tune_fractions {
                for defense in &self.defenses {
                    for &seed in &self.seeds {
                        out.push(PlanCell {
                            ordinal,
                            rate,
                            tune_fraction,
                            defense: *defense,
                            seed,
                        });
                        ordinal += 1;
                    }
                }
            }
        }
        out
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanCell {
    pub ordinal: usize,
    pub rate: f64,
    pub tune_fraction: f64,
    pub defense: DefenseSpec,
    pub seed: u64,
}

impl PlanCell {
    /// Stable, human-readable id. The zero-padded ordinal keeps ids unique
    /// (two grid entries may share every other field) and makes
    /// lexicographic order equal plan order.
    pub fn id(&self) -> String {
        format!(
            "{:04}-r{}-f{}-{}-s{}",
            self.ordinal,
            self.rate,
            self.tune_fraction,
            self.defense.variant.label(),
            self.seed
        )
    }
}

/// The exact inputs that determine one cell's outcome; hashed into the
/// record so a result can be matched against the plan that produced it.
#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ResolvedCellConfig<'a> {
    format: &'a str,
    dataset: &'a SyntheticSpec,
    model: ModelKind,
    train: TrainConfig,
    insertion_threshold: f64,
    trigger: &'a TriggerConfig,
    attack: &'a AttackConfig,
    rate: f64,
    tune_fraction: f64,
    defense: DefenseConfig,
}

/// Hex SHA-256 of the cell's resolved configuration.
pub fn cell_config_hash(plan: &PlanConfig, cell: &PlanCell) -> String {
    let resolved = ResolvedCellConfig {
        format: &plan.format,
        dataset: &plan.dataset,
        model: plan.model,
        train: TrainConfig { seed: cell.seed, ..plan.train },
        insertion_threshold: plan.insertion_threshold,
        trigger: &plan.trigger,
        attack: &plan.attack,
        rate: cell.rate,
        tune_fraction: cell.tune_fraction,
        defense: cell.defense.to_config(cell.seed),
    };
    let text = serde_json::to_string(&resolved).expect("resolved config serializes");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// Outcome of one cell. Metric fields are `None` when the cell failed;
/// `status` then carries the error code and message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CellRecord {
    pub id: String,
    pub attack: String,
    pub trigger: String,
    pub rate: f64,
    pub tune_fraction: f64,
    pub defense: String,
    pub defense_config: DefenseConfig,
    pub seed: u64,
    pub status: String,
    /// True when the backdoor insertion fell short of the threshold; the
    /// cell still runs, but downstream numbers grade a dud attack.
    pub attack_failed: bool,
    pub cacc_before: Option<f64>,
    pub asr_before: Option<f64>,
    pub cacc_after: Option<f64>,
    pub asr_after: Option<f64>,
    pub sep_before: Option<f64>,
    pub sep_after: Option<f64>,
    pub epochs: usize,
    pub trace: Vec<EpochTrace>,
    pub config_hash: String,
}

impl CellRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Wall-clock bookkeeping, kept apart from the records so that everything
/// else in `results.json` is byte-stable across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Timing {
    /// Seconds per attack-stage build, keyed by stage id.
    pub stages: BTreeMap<String, f64>,
    /// Seconds per cell (defense plus evaluation), keyed by cell id.
    pub cells: BTreeMap<String, f64>,
    pub total_s: f64,
}

/// Everything a sweep produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentResult {
    pub format: String,
    pub name: String,
    pub plan: PlanConfig,
    pub records: Vec<CellRecord>,
    pub timing: Timing,
}

/// The backdoored model and held-out sets shared by every defense cell with
/// the same (rate, tuneFraction, seed).
struct AttackStage {
    test: ImageDataset,
    tune: ImageDataset,
    attack_eval: ImageDataset,
    backdoored: BackdooredModel,
    trigger_label: String,
    sep_before: Option<f64>,
}

fn stage_id(rate: f64, tune_fraction: f64, seed: u64) -> String {
    format!("r{rate}-f{tune_fraction}-s{seed}")
}

/// Separation ratio between clean and triggered feature clusters, on a
/// deterministic sample cap. `None` when the geometry is degenerate.
fn separation_ratio(
    model: &crate::model::ModelSplit,
    test: &ImageDataset,
    attack_eval: &ImageDataset,
) -> Option<f64> {
    let m = SEPARATION_SAMPLE_CAP.min(test.len()).min(attack_eval.len());
    if m < 2 {
        return None;
    }
    let idx: Vec<usize> = (0..m).collect();
    let clean = test.subset(&idx, "sep-clean");
    let triggered = attack_eval.subset(&idx, "sep-triggered");
    feature_separation(model, &clean, &triggered).ok().map(|r| r.ratio)
}

fn build_stage(plan: &PlanConfig, rate: f64, tune_fraction: f64, seed: u64) -> Result<AttackStage> {
    let (train, test) = gen_synthetic(&plan.dataset)?;
    let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction, seed })?;
    let trigger = plan.trigger.realize(test.image_shape())?;
    let poison = PoisonSpec {
        rate,
        target_label: plan.attack.target_label,
        mode: plan.attack.mode,
    };
    let model_spec = plan.model.build_spec(test.image_shape(), test.class_count)?;
    let train_cfg = TrainConfig { seed, ..plan.train };
    let backdoored = train_backdoored(
        &rest,
        &test,
        &poison,
        &trigger,
        &model_spec,
        &train_cfg,
        plan.insertion_threshold,
    )?;
    let attack_eval = make_attack_eval_set(&test, &trigger, plan.attack.target_label)?;
    let sep_before = separation_ratio(&backdoored.model, &test, &attack_eval);
    Ok(AttackStage {
        trigger_label: trigger.describe(),
        tune,
        attack_eval,
        backdoored,
        test,
        sep_before,
    })
}

fn failed_record(plan: &PlanConfig, cell: &PlanCell, status: String) -> CellRecord {
    CellRecord {
        id: cell.id(),
        attack: plan.attack.mode.describe().to_string(),
        trigger: String::new(),
        rate: cell.rate,
        tune_fraction: cell.tune_fraction,
        defense: cell.defense.variant.label().to_string(),
        defense_config: cell.defense.to_config(cell.seed),
        seed: cell.seed,
        status,
        attack_failed: false,
        cacc_before: None,
        asr_before: None,
        cacc_after: None,
        asr_after: None,
        sep_before: None,
        sep_after: None,
        epochs: cell.defense.epochs,
        trace: Vec::new(),
        config_hash: cell_config_hash(plan, cell),
    }
}

fn run_cell_against_stage(plan: &PlanConfig, cell: &PlanCell, stage: &AttackStage) -> CellRecord {
    let mut record = failed_record(plan, cell, "ok".to_string());
    record.trigger = stage.trigger_label.clone();
    record.attack_failed = stage.backdoored.meta.attack_failed;
    record.cacc_before = Some(stage.backdoored.meta.c_acc);
    record.asr_before = Some(stage.backdoored.meta.asr);
    record.sep_before = stage.sep_before;

    let defense_cfg = cell.defense.to_config(cell.seed);
    let suite = EvalSuite {
        test: &stage.test,
        attack_eval: &stage.attack_eval,
        target_label: plan.attack.target_label,
    };
    let mut no_obs: Option<Box<dyn FnMut(&crate::defense::StepObservation)>> = None;
    let outcome = run_defense_traced(
        &stage.backdoored.model,
        &stage.tune,
        &defense_cfg,
        Some(&suite),
        &mut no_obs,
    )
    .and_then(|r| {
        let cacc_after = match r.trace.last() {
            Some(t) => t.c_acc.expect("suite supplied"),
            None => clean_accuracy(&r.model, &stage.test)?.fraction,
        };
        let asr_after = match r.trace.last() {
            Some(t) => t.asr.expect("suite supplied"),
            None => {
                attack_success_rate(&r.model, &stage.attack_eval, plan.attack.target_label)?
                    .fraction
            }
        };
        let sep_after = separation_ratio(&r.model, &stage.test, &stage.attack_eval);
        Ok((r, cacc_after, asr_after, sep_after))
    });
    match outcome {
        Ok((r, cacc_after, asr_after, sep_after)) => {
            record.cacc_after = Some(cacc_after);
            record.asr_after = Some(asr_after);
            record.sep_after = sep_after;
            record.trace = r.trace;
        }
        Err(e) => {
            record.status = format!("failed: {}: {e}", e.code());
            record.cacc_after = None;
            record.asr_after = None;
            record.sep_after = None;
        }
    }
    record
}

/// Run a single cell end to end (dataset, attack, defense), independent of
/// any sweep state. Errors in the pipeline become a failed record, not an
/// `Err`; only an out-of-range index is an error.
pub fn run_experiment(plan: &PlanConfig, cell: &PlanCell) -> CellRecord {
    match build_stage(plan, cell.rate, cell.tune_fraction, cell.seed) {
        Ok(stage) => run_cell_against_stage(plan, cell, &stage),
        Err(e) => failed_record(plan, cell, format!("failed: {}: {e}", e.code())),
    }
}

/// Run the whole grid with up to `parallelism` workers.
///
/// Cells sharing (rate, tuneFraction, seed) reuse one backdoored model. A
/// failing stage or cell yields a failed record and never aborts siblings.
/// The returned records are identical whatever `parallelism` was.
pub fn run_sweep(plan: &PlanConfig, parallelism: usize) -> Result<ExperimentResult> {
    plan.validate()?;
    if parallelism == 0 {
        return Err(Error::config("parallelism must be at least 1"));
    }
    let started = Instant::now();
    let cells = plan.cells();
    let mut stage_keys: Vec<(f64, f64, u64)> = Vec::new();
    for c in &cells {
        let key = (c.rate, c.tune_fraction, c.seed);
        if !stage_keys.contains(&key) {
            stage_keys.push(key);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::config(format!("cannot build a {parallelism}-thread pool: {e}")))?;

    let mut timing = Timing::default();
    let stages: Vec<(String, std::result::Result<Arc<AttackStage>, String>, f64)> =
        pool.install(|| {
            stage_keys
                .par_iter()
                .map(|&(rate, tf, seed)| {
                    let t0 = Instant::now();
                    let stage = build_stage(plan, rate, tf, seed)
                        .map(Arc::new)
                        .map_err(|e| format!("failed: {}: {e}", e.code()));
                    (stage_id(rate, tf, seed), stage, t0.elapsed().as_secs_f64())
                })
                .collect()
        });
    let mut stage_map = BTreeMap::new();
    for (id, stage, secs) in stages {
        timing.stages.insert(id.clone(), secs);
        stage_map.insert(id, stage);
    }

    let timed_records: Vec<(CellRecord, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let t0 = Instant::now();
                let key = stage_id(cell.rate, cell.tune_fraction, cell.seed);
                let record = match &stage_map[&key] {
                    Ok(stage) => run_cell_against_stage(plan, cell, stage),
                    Err(status) => failed_record(plan, cell, status.clone()),
                };
                (record, t0.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut records = Vec::with_capacity(timed_records.len());
    for (record, secs) in timed_records {
        timing.cells.insert(record.id.clone(), secs);
        records.push(record);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    timing.total_s = started.elapsed().as_secs_f64();
    Ok(ExperimentResult {
        format: CONFIG_FORMAT.to_string(),
        name: plan.name.clone(),
        plan: plan.clone(),
        records,
        timing,
    })
}

/// Float formatting for the CSV: 17 significant digits, enough to
/// reconstruct the exact f64. Missing values print as nan.
fn csv_float(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.16e}"),
        None => "nan".to_string(),
    }
}

pub const CSV_HEADER: &str = "attack,trigger,rate,defense,seed,cacc_before,asr_before,\
cacc_after,asr_after,sep_before,sep_after,epochs,wallclock_s";

/// Write `results.json` and `results.csv` into `dir` (created if missing).
pub fn write_results(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(RESULTS_JSON);
    let text = serde_json::to_string_pretty(result)
        .map_err(|e| Error::input(format!("cannot encode results: {e}")))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &result.records {
        let wallclock = result.timing.cells.get(&r.id).copied().unwrap_or(0.0);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.attack,
            r.trigger,
            csv_float(Some(r.rate)),
            r.defense,
            r.seed,
            csv_float(r.cacc_before),
            csv_float(r.asr_before),
            csv_float(r.cacc_after),
            csv_float(r.asr_after),
            csv_float(r.sep_before),
            csv_float(r.sep_after),
            r.epochs,
            csv_float(Some(wallclock)),
        );
    }
    let csv_path = dir.join(RESULTS_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

/// Read back what [`write_results`] wrote.
pub fn read_results(dir: &Path) -> Result<ExperimentResult> {
    let path = dir.join(RESULTS_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        code: "results/parse",
        message: format!("{}: {e}", path.display()),
    })
}

/// Outcome of a replay pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplayReport {
    pub cells_checked: usize,
    /// Ids whose re-run serialized differently from the stored record.
    pub mismatched: Vec<String>,
}

/// Re-run recorded cells from the stored plan and verify the records match
/// byte for byte (timing excluded, which the records never contain).
///
/// With `only_cell` set, just that cell id is replayed.
pub fn replay(stored: &ExperimentResult, only_cell: Option<&str>) -> Result<ReplayReport> {
    stored.plan.validate()?;
    let cells = stored.plan.cells();
    let mut targets: Vec<(&CellRecord, &PlanCell)> = Vec::new();
    for record in &stored.records {
        if let Some(id) = only_cell {
            if record.id != id {
                continue;
            }
        }
        let cell = cells
            .iter()
            .find(|c| c.id() == record.id)
            .ok_or_else(|| Error::input(format!("record {} has no cell in the plan", record.id)))?;
        targets.push((record, cell));
    }
    if targets.is_empty() {
        return Err(Error::input(match only_cell {
            Some(id) => format!("no record with id {id:?}"),
            None => "no records to replay".to_string(),
        }));
    }
    let mut mismatched = Vec::new();
    for (record, cell) in &targets {
        let fresh = run_experiment(&stored.plan, cell);
        let original = serde_json::to_string(record)
            .map_err(|e| Error::input(format!("cannot encode record: {e}")))?;
        let rerun = serde_json::to_string(&fresh)
            .map_err(|e| Error::input(format!("cannot encode record: {e}")))?;
        if original != rerun {
            mismatched.push(record.id.clone());
        }
    }
    Ok(ReplayReport { cells_checked: targets.len(), mismatched })
}

/// What to extract for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    AlphaSensitivity,
    EpochCurves,
    TuneSize,
    ProjectionAblation,
}

impl PlotKind {
    pub fn parse(name: &str) -> Result<PlotKind> {
        match name {
            "alpha-sensitivity" => Ok(PlotKind::AlphaSensitivity),
            "epoch-curves" => Ok(PlotKind::EpochCurves),
            "tune-size" => Ok(PlotKind::TuneSize),
            "projection-ablation" => Ok(PlotKind::ProjectionAblation),
            other => Err(Error::input(format!(
                "unknown plot kind {other:?}; expected one of alpha-sensitivity, \
                 epoch-curves, tune-size, projection-ablation"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlotKind::AlphaSensitivity => "alpha-sensitivity",
            PlotKind::EpochCurves => "epoch-curves",
            PlotKind::TuneSize => "tune-size",
            PlotKind::ProjectionAblation => "projection-ablation",
        }
    }
}

fn fmt_axis(v: f64) -> String {
    format!("{v}")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Group-and-average helper: records are binned by `key`, and within each
/// bin the per-seed values of each series are averaged.
fn grouped_rows<K: Ord + Clone>(
    records: &[&CellRecord],
    key: impl Fn(&CellRecord) -> K,
    values: impl Fn(&CellRecord) -> Vec<f64>,
) -> Vec<(K, Vec<f64>)> {
    let mut bins: BTreeMap<K, Vec<Vec<f64>>> = BTreeMap::new();
    for r in records {
        bins.entry(key(r)).or_default().push(values(r));
    }
    bins.into_iter()
        .map(|(k, rows)| {
            let width = rows[0].len();
            let averaged: Vec<f64> =
                (0..width).map(|i| mean(&rows.iter().map(|r| r[i]).collect::<Vec<_>>())).collect();
            (k, averaged)
        })
        .collect()
}

/// Total-order key for grouping by f64 grid values (which are exact plan
/// constants, never NaN).
fn f64_key(v: f64) -> u64 {
    v.to_bits()
}

/// Emit plot-ready CSV files for `kind` into `dir`; returns the paths.
///
/// Each kind needs a particular grid axis in the results and says so when
/// it is missing.
pub fn emit_plot_data(result: &ExperimentResult, kind: PlotKind, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ok_records: Vec<&CellRecord> = result.records.iter().filter(|r| r.is_ok()).collect();
    if ok_records.is_empty() {
        return Err(Error::input("results contain no successful cells to plot"));
    }
    let mut written = Vec::new();
    match kind {
        PlotKind::AlphaSensitivity => {
            let fst: Vec<&CellRecord> = ok_records
                .iter()
                .copied()
                .filter(|r| matches!(r.defense_config.variant, DefenseVariant::Fst { .. }))
                .collect();
            let alphas: std::collections::BTreeSet<u64> = fst
                .iter()
                .map(|r| match r.defense_config.variant {
                    DefenseVariant::Fst { alpha, .. } => f64_key(alpha),
                    _ => unreachable!(),
                })
                .collect();
            if alphas.len() < 2 {
                return Err(Error::input(
                    "alpha-sensitivity needs fst cells spanning at least two alpha values; \
                     sweep defenses[].variant.alpha",
                ));
            }
            let mut groups: BTreeMap<(u64, u64), Vec<&CellRecord>> = BTreeMap::new();
            for r in &fst {
                groups
                    .entry((f64_key(r.rate), f64_key(r.tune_fraction)))
                    .or_default()
                    .push(r);
            }
            for ((_, _), group) in groups {
                let (rate, tf) = (group[0].rate, group[0].tune_fraction);
                let rows = grouped_rows(
                    &group,
                    |r| match r.defense_config.variant {
                        DefenseVariant::Fst { alpha, .. } => f64_key(alpha),
                        _ => unreachable!(),
                    },
                    |r| vec![r.cacc_after.unwrap_or(f64::NAN), r.asr_after.unwrap_or(f64::NAN)],
                );
                let mut csv = String::from("alpha,cacc_after,asr_after\n");
                for (alpha_bits, v) in rows {
                    let _ = writeln!(
                        csv,
                        "{},{},{}",
                        fmt_axis(f64::from_bits(alpha_bits)),
                        csv_float(Some(v[0])),
                        csv_float(Some(v[1]))
                    );
                }
                let path = dir.join(format!(
                    "alpha-sensitivity-r{}-f{}.csv",
                    fmt_axis(rate),
                    fmt_axis(tf)
                ));
                fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        PlotKind::EpochCurves => {
            let traced: Vec<&CellRecord> = ok_records
                .iter()
                .copied()
                .filter(|r| r.trace.iter().any(|t| t.c_acc.is_some()))
                .collect();
            if traced.is_empty() {
                return Err(Error::input(
                    "epoch-curves needs per-epoch traces with held-out metrics; \
                     run the sweep with at least one defense epoch",
                ));
            }
            let mut groups: BTreeMap<(u64, u64), Vec<&CellRecord>> = BTreeMap::new();
            for r in &traced {
                groups
                    .entry((f64_key(r.rate), f64_key(r.tune_fraction)))
                    .or_default()
                    .push(r);
            }
            for ((_, _), group) in groups {
                let (rate, tf) = (group[0].rate, group[0].tune_fraction);
                let mut csv = String::from("defense,epoch,c_acc,asr\n");
                // Bin per (defense label, epoch); average over seeds.
                let mut bins: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
                for r in group {
                    for t in &r.trace {
                        bins.entry((r.defense.clone(), t.epoch)).or_default().push((
                            t.c_acc.unwrap_or(f64::NAN),
                            t.asr.unwrap_or(f64::NAN),
                        ));
                    }
                }
                for ((label, epoch), vals) in bins {
                    let ca = mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
                    let asr = mean(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
                    let _ = writeln!(
                        csv,
                        "{label},{epoch},{},{}",
                        csv_float(Some(ca)),
                        csv_float(Some(asr))
                    );
                }
                let path = dir
                    .join(format!("epoch-curves-r{}-f{}.csv", fmt_axis(rate), fmt_axis(tf)));
                fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        PlotKind::TuneSize => {
            let fractions: std::collections::BTreeSet<u64> =
                ok_records.iter().map(|r| f64_key(r.tune_fraction)).collect();
            if fractions.len() < 2 {
                return Err(Error::input(
                    "tune-size needs cells spanning at least two tuneFractions; \
                     sweep the tuneFractions axis",
                ));
            }
            let mut groups: BTreeMap<(u64, String), Vec<&CellRecord>> = BTreeMap::new();
            for r in &ok_records {
                groups
                    .entry((f64_key(r.rate), r.defense.clone()))
                    .or_default()
                    .push(r);
            }
            for ((_, label), group) in groups {
                let rate = group[0].rate;
                let rows = grouped_rows(
                    &group,
                    |r| f64_key(r.tune_fraction),
                    |r| vec![r.cacc_after.unwrap_or(f64::NAN), r.asr_after.unwrap_or(f64::NAN)],
                );
                let mut csv = String::from("tune_fraction,cacc_after,asr_after\n");
                for (tf_bits, v) in rows {
                    let _ = writeln!(
                        csv,
                        "{},{},{}",
                        fmt_axis(f64::from_bits(tf_bits)),
                        csv_float(Some(v[0])),
                        csv_float(Some(v[1]))
                    );
                }
                let path =
                    dir.join(format!("tune-size-r{}-{label}.csv", fmt_axis(rate)));
                fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
        PlotKind::ProjectionAblation => {
            let fst: Vec<&CellRecord> = ok_records
                .iter()
                .copied()
                .filter(|r| matches!(r.defense_config.variant, DefenseVariant::Fst { .. }))
                .collect();
            let has = |want: bool| {
                fst.iter().any(|r| {
                    matches!(r.defense_config.variant,
                        DefenseVariant::Fst { projection, .. } if projection == want)
                })
            };
            if !(has(true) && has(false)) {
                return Err(Error::input(
                    "projection-ablation needs fst cells both with and without projection; \
                     sweep defenses[].variant.projection",
                ));
            }
            let mut groups: BTreeMap<(u64, u64), Vec<&CellRecord>> = BTreeMap::new();
            for r in &fst {
                groups
                    .entry((f64_key(r.rate), f64_key(r.tune_fraction)))
                    .or_default()
                    .push(r);
            }
            for ((_, _), group) in groups {
                let (rate, tf) = (group[0].rate, group[0].tune_fraction);
                let mut csv = String::from("projection,epoch,head_norm,c_acc,asr\n");
                let mut bins: BTreeMap<(bool, usize), Vec<(f64, f64, f64)>> = BTreeMap::new();
                for r in group {
                    let on = matches!(
                        r.defense_config.variant,
                        DefenseVariant::Fst { projection: true, .. }
                    );
                    for t in &r.trace {
                        bins.entry((on, t.epoch)).or_default().push((
                            t.head_norm,
                            t.c_acc.unwrap_or(f64::NAN),
                            t.asr.unwrap_or(f64::NAN),
                        ));
                    }
                }
                for ((on, epoch), vals) in bins {
                    let hn = mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>());
                    let ca = mean(&vals.iter().map(|v| v.1).collect::<Vec<_>>());
                    let asr = mean(&vals.iter().map(|v| v.2).collect::<Vec<_>>());
                    let _ = writeln!(
                        csv,
                        "{on},{epoch},{},{},{}",
                        csv_float(Some(hn)),
                        csv_float(Some(ca)),
                        csv_float(Some(asr))
                    );
                }
                let path = dir.join(format!(
                    "projection-ablation-r{}-f{}.csv",
                    fmt_axis(rate),
                    fmt_axis(tf)
                ));
                fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
    }
    written.sort();
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A plan small enough to sweep in well under a second.
    fn mini_plan() -> PlanConfig {
        let mut plan = PlanConfig::default();
        plan.dataset = SyntheticSpec {
            class_count: 3,
            train_per_class: 40,
            test_per_class: 10,
            height: 8,
            width: 8,
            channels: 1,
            noise_sigma: 0.1,
            grid: 4,
            seed: 5,
        };
        plan.train = TrainConfig { epochs: 4, batch_size: 32, ..TrainConfig::default() };
        plan.rates = vec![0.1];
        plan.tune_fractions = vec![0.1];
        plan.defenses = vec![
            DefenseSpec {
                epochs: 2,
                batch_size: 8,
                ..DefenseSpec::new(DefenseVariant::fst_default())
            },
            DefenseSpec { epochs: 2, batch_size: 8, ..DefenseSpec::new(DefenseVariant::Lp) },
        ];
        plan.seeds = vec![0];
        plan
    }

    #[test]
    fn minimal_config_parses_to_one_cell() {
        let plan = parse_plan(r#"{"format": "fstlab-config-v1"}"#).unwrap();
        assert_eq!(plan.cells().len(), 1);
        assert_eq!(plan.rates, vec![0.05]);
        assert_eq!(plan.tune_fractions, vec![0.02]);
        assert_eq!(plan.seeds, vec![0]);
        assert!(matches!(plan.defenses[0].variant, DefenseVariant::Fst { .. }));
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err =
            parse_plan(r#"{"format": "fstlab-config-v1", "alpa": 0.2}"#).unwrap_err();
        assert_eq!(err.code(), "config/unknown-key");
        assert!(err.to_string().contains("alpa"), "message should name the key: {err}");
        // Nested unknown keys too.
        let err = parse_plan(
            r#"{"format": "fstlab-config-v1", "train": {"epoches": 3}}"#,
        )
        .unwrap_err();
        assert_eq!(err.code(), "config/unknown-key");
        assert!(err.to_string().contains("epoches"));
    }

    #[test]
    fn format_field_is_checked() {
        let err = parse_plan(r#"{"format": "fstlab-config-v2"}"#).unwrap_err();
        assert_eq!(err.code(), "config/bad-format");
        let err = parse_plan(r#"{"rates": [0.1]}"#).unwrap_err();
        assert_eq!(err.code(), "config/parse");
    }

    #[test]
    fn grid_expansion_matches_the_documented_example() {
        let plan = parse_plan(
            r#"{
                "format": "fstlab-config-v1",
                "rates": [0.05, 0.01, 0.005],
                "defenses": [
                    {"variant": {"kind": "fst", "alpha": 0.2, "projection": true, "perLayerProjection": false}},
                    {"variant": {"kind": "lp"}}
                ],
                "seeds": [1, 2, 3]
            }"#,
        )
        .unwrap();
        assert_eq!(plan.cells().len(), 18);
        // Ids are unique and lexicographically ordered by construction.
        let ids: Vec<String> = plan.cells().iter().map(|c| c.id()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        let unique: std::collections::BTreeSet<&String> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
    }

    #[test]
    fn bad_grid_values_are_rejected() {
        for (json, want) in [
            (r#"{"format": "fstlab-config-v1", "rates": []}"#, "config/invalid"),
            (r#"{"format": "fstlab-config-v1", "rates": [1.0]}"#, "config/invalid"),
            (r#"{"format": "fstlab-config-v1", "tuneFractions": [0.0]}"#, "config/invalid"),
            (r#"{"format": "fstlab-config-v1", "seeds": []}"#, "config/invalid"),
            (r#"{"format": "fstlab-config-v1", "defenses": []}"#, "config/invalid"),
        ] {
            let err = parse_plan(json).unwrap_err();
            assert_eq!(err.code(), want, "{json}");
        }
    }

    #[test]
    fn sweep_is_parallelism_invariant_and_roundtrips() {
        let plan = mini_plan();
        let serial = run_sweep(&plan, 1).unwrap();
        let parallel = run_sweep(&plan, 4).unwrap();
        let a = serde_json::to_string(&serial.records).unwrap();
        let b = serde_json::to_string(&parallel.records).unwrap();
        assert_eq!(a, b);
        assert_eq!(serial.records.len(), 2);
        assert!(serial.records.iter().all(|r| r.is_ok()), "{:?}",
            serial.records.iter().map(|r| &r.status).collect::<Vec<_>>());

        let dir = tempfile::tempdir().unwrap();
        write_results(dir.path(), &serial).unwrap();
        let back = read_results(dir.path()).unwrap();
        assert_eq!(back, serial);

        // The JSON on disk is byte-identical across writes.
        let first = std::fs::read(dir.path().join(RESULTS_JSON)).unwrap();
        write_results(dir.path(), &serial).unwrap();
        let second = std::fs::read(dir.path().join(RESULTS_JSON)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn standalone_cell_matches_the_sweep_record() {
        let plan = mini_plan();
        let sweep = run_sweep(&plan, 2).unwrap();
        for cell in plan.cells() {
            let standalone = run_experiment(&plan, &cell);
            let from_sweep =
                sweep.records.iter().find(|r| r.id == cell.id()).unwrap();
            assert_eq!(
                serde_json::to_string(&standalone).unwrap(),
                serde_json::to_string(from_sweep).unwrap()
            );
        }
    }

    #[test]
    fn csv_has_the_exact_contract_columns() {
        let plan = mini_plan();
        let result = run_sweep(&plan, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_results(dir.path(), &result).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "attack,trigger,rate,defense,seed,cacc_before,asr_before,cacc_after,\
             asr_after,sep_before,sep_after,epochs,wallclock_s"
                .replace(", ", ",")
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), result.records.len());
        for row in rows {
            assert_eq!(row.split(',').count(), 13, "{row}");
        }
        // 17 significant digits on float columns.
        let first = csv.lines().nth(1).unwrap();
        let rate_field = first.split(',').nth(2).unwrap();
        assert!(rate_field.contains('e'), "scientific notation expected: {rate_field}");
        let mantissa = rate_field.split('e').next().unwrap();
        let digits = mantissa.chars().filter(|c| c.is_ascii_digit()).count();
        assert_eq!(digits, 17, "{rate_field}");
    }

    #[test]
    fn failed_cells_are_recorded_not_fatal() {
        let mut plan = mini_plan();
        // A tune fraction so small the per-class split cannot produce one
        // sample: the stage fails, the record says so, siblings survive.
        plan.tune_fractions = vec![0.1, 0.000001];
        let result = run_sweep(&plan, 2).unwrap();
        assert_eq!(result.records.len(), 4);
        let failed: Vec<&CellRecord> =
            result.records.iter().filter(|r| !r.is_ok()).collect();
        assert_eq!(failed.len(), 2);
        for r in failed {
            assert!(r.status.starts_with("failed: "), "{}", r.status);
            assert!(r.cacc_after.is_none());
        }
        assert_eq!(result.records.iter().filter(|r| r.is_ok()).count(), 2);
    }

    #[test]
    fn replay_verifies_and_detects_tampering() {
        let plan = mini_plan();
        let mut result = run_sweep(&plan, 2).unwrap();
        let report = replay(&result, None).unwrap();
        assert_eq!(report.cells_checked, 2);
        assert!(report.mismatched.is_empty());

        let one = result.records[0].id.clone();
        let report = replay(&result, Some(&one)).unwrap();
        assert_eq!(report.cells_checked, 1);
        assert!(report.mismatched.is_empty());

        assert_eq!(replay(&result, Some("nope")).unwrap_err().code(), "input/invalid");

        // Corrupt one stored metric: replay must notice.
        result.records[0].asr_after = Some(0.123456);
        let report = replay(&result, Some(&one)).unwrap();
        assert_eq!(report.mismatched, vec![one]);
    }

    #[test]
    fn config_hashes_are_stable_and_cell_specific() {
        let plan = mini_plan();
        let cells = plan.cells();
        let h0 = cell_config_hash(&plan, &cells[0]);
        let h0b = cell_config_hash(&plan, &cells[0]);
        let h1 = cell_config_hash(&plan, &cells[1]);
        assert_eq!(h0, h0b);
        assert_ne!(h0, h1);
        assert_eq!(h0.len(), 64);
        let result = run_sweep(&plan, 1).unwrap();
        for (record, cell) in result.records.iter().zip(&cells) {
            assert_eq!(record.config_hash, cell_config_hash(&plan, cell));
        }
    }

    #[test]
    fn plot_data_errors_name_the_missing_axis() {
        let plan = mini_plan();
        let result = run_sweep(&plan, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(&result, PlotKind::AlphaSensitivity, dir.path()).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        let err = emit_plot_data(&result, PlotKind::TuneSize, dir.path()).unwrap_err();
        assert!(err.to_string().contains("tuneFraction"), "{err}");
        let err =
            emit_plot_data(&result, PlotKind::ProjectionAblation, dir.path()).unwrap_err();
        assert!(err.to_string().contains("projection"), "{err}");
        // Epoch curves exist for this plan.
        let files = emit_plot_data(&result, PlotKind::EpochCurves, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("defense,epoch,c_acc,asr\n"));
        // Two defenses x two epochs.
        assert_eq!(text.lines().count(), 1 + 4);
    }

    #[test]
    fn alpha_grid_emits_one_row_per_alpha() {
        let mut plan = mini_plan();
        plan.defenses = [0.05, 0.1, 0.2, 0.5, 1.0]
            .iter()
            .map(|&alpha| DefenseSpec {
                epochs: 1,
                batch_size: 8,
                ..DefenseSpec::new(DefenseVariant::Fst {
                    alpha,
                    projection: true,
                    per_layer_projection: false,
                })
            })
            .collect();
        let result = run_sweep(&plan, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plot_data(&result, PlotKind::AlphaSensitivity, dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().count(), 1 + 5, "{text}");
        assert!(text.starts_with("alpha,cacc_after,asr_after\n"));
    }

    #[test]
    fn plot_kind_names_round_trip() {
        for kind in [
            PlotKind::AlphaSensitivity,
            PlotKind::EpochCurves,
            PlotKind::TuneSize,
            PlotKind::ProjectionAblation,
        ] {
            assert_eq!(PlotKind::parse(kind.name()).unwrap(), kind);
        }
        assert_eq!(PlotKind::parse("histogram").unwrap_err().code(), "input/invalid");
    }
}

//! The train / evaluate / explain / ablate workflows behind the binary.
//!
//! A training run directory holds `config.txt`, `vocab.txt`, `model.ckpt`,
//! `split.manifest`, `metrics.log` (one JSON object per line) and `reports/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{dataset_columns, load_dataset, DatasetError, DatasetTable};
use crate::explain::{attribute, render_report, AttributionRecord, ExplainError};
use crate::metrics::TaskMetrics;
use crate::model::Model;
use crate::split::{iterative_stratified_split, SplitPlan};
use crate::tokenizer::Vocabulary;
use crate::train::{evaluate, lambda_sweep, train, EncodedSet, SweepRow, TrainError};

/// Failure of a command, split by the exit code it maps to.
#[derive(Debug)]
pub enum CommandError {
    /// Bad invocation, configuration or missing input (exit 2).
    Usage(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CommandError {}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(format!("config: {e}"))
    }
}

impl From<DatasetError> for CommandError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Open { .. }
            | DatasetError::MissingColumn { .. }
            | DatasetError::DuplicateTask(_)
            | DatasetError::NoTasks => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CommandError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CommandError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(TrainError, ExplainError, crate::split::SplitError, crate::tokenizer::VocabError, serde_json::Error);

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, CommandError> {
    r.map_err(|e| CommandError::Runtime(format!("{}: {e}", path.display())))
}

/// Row indices of a split, tied to the dataset size they were drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub rows: usize,
    #[serde(flatten)]
    pub plan: SplitPlan,
}

impl SplitManifest {
    pub fn check(&self, rows: usize) -> Result<(), CommandError> {
        if self.rows != rows {
            return Err(CommandError::Runtime(format!(
                "split manifest was made for {} rows, dataset has {rows}",
                self.rows
            )));
        }
        let mut seen = vec![0u8; rows];
        for &r in self.plan.train.iter().chain(&self.plan.test) {
            if r >= rows {
                return Err(CommandError::Runtime(format!(
                    "split manifest references row {r}, dataset has {rows}"
                )));
            }
            seen[r] += 1;
            if seen[r] > 1 {
                return Err(CommandError::Runtime(format!(
                    "split manifest lists row {r} more than once"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
struct EpochRecord<'a> {
    epoch: usize,
    #[serde(flatten)]
    report: &'a crate::objective::LossReport,
}

/// Summary of a finished training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub rows: usize,
    pub skipped: usize,
    pub too_long: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub test: TaskMetrics,
    pub fingerprint: String,
}

fn load_table(cfg: &RunConfig) -> Result<DatasetTable, CommandError> {
    let mut table = load_dataset(&cfg.data, &cfg.smiles_column, &cfg.tasks)?;
    table.drop_longer_than(cfg.train.max_len);
    if table.len() < 2 {
        return Err(CommandError::Runtime(format!(
            "{}: only {} usable rows",
            cfg.data.display(),
            table.len()
        )));
    }
    Ok(table)
}

pub fn read_config(path: &Path) -> Result<(RunConfig, String), CommandError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CommandError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok((RunConfig::parse(&text, base)?, text))
}

pub fn cmd_train(config_path: &Path) -> Result<TrainSummary, CommandError> {
    let (cfg, text) = read_config(config_path)?;
    run_training(&cfg, &text)
}

/// Ingest, split, train, save and score on the held-out rows.
pub fn run_training(cfg: &RunConfig, config_text: &str) -> Result<TrainSummary, CommandError> {
    let table = load_table(cfg)?;
    let plan = iterative_stratified_split(&table.labels, cfg.test_fraction, cfg.train.seed)?;
    let vocab = Vocabulary::build(plan.train.iter().map(|&r| table.smiles[r].as_str()))?;
    let data = EncodedSet::new(&vocab, &table.smiles, table.labels.clone(), cfg.train.max_len)?;
    let model_config = cfg.model_config(vocab.len(), table.tasks.clone());
    let fp = fingerprint(&(&model_config, &cfg.train));

    let dir = &cfg.run_dir;
    io(dir, fs::create_dir_all(dir.join("reports")))?;
    io(dir, fs::write(dir.join("config.txt"), config_text))?;
    io(dir, fs::write(dir.join("vocab.txt"), vocab.to_text()))?;
    let manifest = SplitManifest {
        rows: table.len(),
        plan: plan.clone(),
    };
    io(dir, fs::write(dir.join("split.manifest"), serde_json::to_string_pretty(&manifest)?))?;
    let log_path = dir.join("metrics.log");
    let mut log = io(&log_path, fs::File::create(&log_path))?;

    let mut model = Model::new(model_config, cfg.train.seed).map_err(TrainError::from)?;
    let mut log_err = None;
    train(&mut model, &data, &plan.train, &cfg.train, |epoch, report| {
        let line = serde_json::to_string(&EpochRecord { epoch, report }).expect("report serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return io(&log_path, Err(e));
    }
    save_checkpoint(&dir.join("model.ckpt"), &Checkpoint::from_model(&model, &vocab, fp.clone()))?;
    let (test, _) = evaluate(&model, &data, &plan.test, cfg.train.batch_size)?;
    let line = serde_json::json!({ "split": "test", "metrics": &test });
    io(&log_path, writeln!(log, "{line}"))?;
    Ok(TrainSummary {
        run_dir: dir.clone(),
        rows: table.len(),
        skipped: table.skipped,
        too_long: table.too_long,
        train_rows: plan.train.len(),
        test_rows: plan.test.len(),
        test,
        fingerprint: fp,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tasks: Vec<String>,
    pub metrics: TaskMetrics,
    pub test_rows: usize,
    pub fingerprint: String,
}

/// Scores a checkpoint on the test rows named by a split manifest and
/// writes `evaluation.json` next to the checkpoint.
pub fn cmd_evaluate(
    checkpoint: &Path,
    data: &Path,
    split: &Path,
    smiles_column: &str,
) -> Result<EvaluationReport, CommandError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let columns: Vec<String> = dataset_columns(data)?
        .into_iter()
        .filter(|c| c != smiles_column)
        .collect();
    if model.tasks().iter().any(|t| !columns.contains(t)) {
        return Err(CommandError::Runtime(format!(
            "task names differ: checkpoint has {:?}, dataset has {:?}",
            model.tasks(),
            columns
        )));
    }
    let mut table = load_dataset(data, smiles_column, model.tasks())?;
    table.drop_longer_than(ckpt.config.encoder.max_len);
    let text = fs::read_to_string(split)
        .map_err(|e| CommandError::Usage(format!("cannot read split manifest {}: {e}", split.display())))?;
    let manifest: SplitManifest = serde_json::from_str(&text)
        .map_err(|e| CommandError::Runtime(format!("{}: {e}", split.display())))?;
    manifest.check(table.len())?;
    let enc = EncodedSet::new(&ckpt.vocab, &table.smiles, table.labels, ckpt.config.encoder.max_len)?;
    let (metrics, _) = evaluate(&model, &enc, &manifest.plan.test, 64)?;
    let report = EvaluationReport {
        tasks: model.tasks().to_vec(),
        metrics,
        test_rows: manifest.plan.test.len(),
        fingerprint: ckpt.fingerprint.clone(),
    };
    let out = checkpoint.with_file_name("evaluation.json");
    io(&out, fs::write(&out, serde_json::to_string_pretty(&report)?))?;
    Ok(report)
}

/// Outcome of an explain run.
#[derive(Clone, Debug)]
pub struct ExplainSummary {
    pub records: Vec<AttributionRecord>,
    /// Input lines that could not be attributed, with the reason.
    pub failed: Vec<(String, String)>,
    pub report: PathBuf,
    pub record_file: PathBuf,
}

/// Attributes every SMILES line of `input` for the selected tasks (all when
/// `tasks` is empty) and writes `attributions.jsonl` plus `report.html`.
pub fn cmd_explain(
    checkpoint: &Path,
    input: &Path,
    tasks: &[String],
    out_dir: &Path,
    top_fraction: f64,
) -> Result<ExplainSummary, CommandError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let selected: Vec<usize> = if tasks.is_empty() {
        (0..model.tasks().len()).collect()
    } else {
        tasks
            .iter()
            .map(|t| {
                model.tasks().iter().position(|n| n == t).ok_or_else(|| {
                    CommandError::Usage(format!("unknown task {t:?}; valid tasks are {:?}", model.tasks()))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let text = fs::read_to_string(input)
        .map_err(|e| CommandError::Usage(format!("cannot read {}: {e}", input.display())))?;
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for smiles in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        for &k in &selected {
            match attribute(&model, &ckpt.vocab, smiles, k, &ckpt.fingerprint) {
                Ok(r) => records.push(r),
                Err(e) => {
                    failed.push((smiles.to_string(), e.to_string()));
                    break;
                }
            }
        }
    }
    if records.is_empty() {
        return Err(CommandError::Runtime("no molecule could be attributed".into()));
    }
    io(out_dir, fs::create_dir_all(out_dir))?;
    let record_file = out_dir.join("attributions.jsonl");
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    io(&record_file, fs::write(&record_file, lines))?;
    let report = out_dir.join("report.html");
    io(&report, fs::write(&report, render_report(&records, top_fraction)?))?;
    Ok(ExplainSummary {
        records,
        failed,
        report,
        record_file,
    })
}

/// One row per λ with Δ% against λ = 0, as a fixed-width table.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>10}  {:>8}  {:>8}  {:>9}\n", "lambda", "ROC-AUC", "delta %", "mean mask");
    for r in rows {
        let delta = r.delta_pct.map_or("-".to_string(), |d| format!("{d:+.2}"));
        out.push_str(&format!(
            "{:>10}  {:>8.4}  {:>8}  {:>9.4}\n",
            r.lambda, r.macro_auc, delta, r.mean_mask
        ));
    }
    out
}

/// Trains one model per λ on the configured split and writes
/// `ablation.json` and `ablation.txt` into the run directory.
pub fn cmd_ablate(config_path: &Path, lambdas: &[f64]) -> Result<Vec<SweepRow>, CommandError> {
    if lambdas.is_empty() {
        return Err(CommandError::Usage("λ list is empty".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(CommandError::Usage(format!("λ must be >= 0, got {bad}")));
    }
    let (cfg, _) = read_config(config_path)?;
    let table = load_table(&cfg)?;
    let plan = iterative_stratified_split(&table.labels, cfg.test_fraction, cfg.train.seed)?;
    let vocab = Vocabulary::build(plan.train.iter().map(|&r| table.smiles[r].as_str()))?;
    let data = EncodedSet::new(&vocab, &table.smiles, table.labels.clone(), cfg.train.max_len)?;
    let model_config = cfg.model_config(vocab.len(), table.tasks.clone());
    let rows = lambda_sweep(&model_config, &data, &plan.train, &plan.test, &cfg.train, lambdas)?;
    let dir = &cfg.run_dir;
    io(dir, fs::create_dir_all(dir))?;
    io(dir, fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?))?;
    io(dir, fs::write(dir.join("ablation.txt"), format_sweep(&rows)))?;
    Ok(rows)
}

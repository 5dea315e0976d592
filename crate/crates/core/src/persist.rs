//! Run artifacts: append-only logs, a hashed checkpoint, resume and reports.
//!
//! An artifact directory holds
//!
//! - `config.json`: the resolved run configuration;
//! - `history.jsonl`: one record per evaluation;
//! - `pools.jsonl`: one sample-pool snapshot per iteration;
//! - `timings.jsonl`: wall-clock completion time per iteration;
//! - `checkpoint.json`: the full run state with its SHA-256, rewritten
//!   after every iteration;
//! - `calibrated_prior.json` when the run was warm-started;
//! - `ensemble.json`, `trace.csv` and `report.txt` once the run finishes.
//!
//! Wall-clock data lives only in `timings.jsonl`, so the history and pool
//! logs of a fixed-seed run are byte-identical across reruns.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::benchmark::SyntheticBenchmark;
use crate::bo::{Observation, Optimizer, RunControl, RunObserver, RunState, StopReason};
use crate::config::{Backend, RunConfig};
use crate::data::{Dataset, Table};
use crate::ensemble::{ensemble_weights, EnsembleModel};
use crate::error::{Error, Result};
use crate::metalearn::{calibrate, meta_features, CalibratedPrior, PriorRecord};
use crate::objective::{EvaluationRequest, EvaluationResult, Evaluator, ExternalEvaluator};
use crate::space::SearchSpace;
use crate::structure::Decomposition;

pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const POOLS_FILE: &str = "pools.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CALIBRATED_FILE: &str = "calibrated_prior.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub schema_version: u32,
    pub iteration: usize,
    /// Position in the history.
    pub index: usize,
    pub request: EvaluationRequest,
    pub result: EvaluationResult,
    pub score: f64,
    pub acquisition: Option<f64>,
    pub incumbent_index: usize,
    pub incumbent_score: f64,
    /// Id of the MAP decomposition after this record's iteration.
    pub map_snapshot: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub schema_version: u32,
    pub iteration: usize,
    pub map_snapshot: String,
    pub map: Vec<usize>,
    pub entries: Vec<PoolSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub assignment: Vec<usize>,
    pub log_posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub finished_unix_ms: u128,
}

/// Short content id of a decomposition.
pub fn snapshot_id(z: &Decomposition) -> String {
    let digest = Sha256::digest(format!("{:?}/{}", z.assignment(), z.n_subspaces()).as_bytes());
    hex(&digest[..6])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// Checkpoint

#[derive(Serialize, Deserialize)]
struct CheckpointFile<'a> {
    schema_version: u32,
    sha256: String,
    #[serde(borrow)]
    state: &'a RawValue,
}

pub fn save_checkpoint(dir: &Path, state: &RunState) -> Result<()> {
    let payload = serde_json::to_string(state)?;
    let sha = hex(&Sha256::digest(payload.as_bytes()));
    let text = format!("{{\"schema_version\":{SCHEMA_VERSION},\"sha256\":\"{sha}\",\"state\":{payload}}}\n");
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    fs::write(&tmp, text)?;
    fs::rename(tmp, dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

/// Loads the checkpoint, refusing it when the stored hash does not match.
pub fn load_checkpoint(dir: &Path) -> Result<RunState> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("checkpoint is not readable: {e}")))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint schema version {}", file.schema_version)));
    }
    let sha = hex(&Sha256::digest(file.state.get().as_bytes()));
    if sha != file.sha256 {
        return Err(Error::Integrity("checkpoint content does not match its hash".into()));
    }
    serde_json::from_str(file.state.get()).map_err(|e| Error::Integrity(format!("checkpoint state: {e}")))
}

// ---------------------------------------------------------------------------
// Logs

/// Writes log lines and the checkpoint after every iteration.
pub struct ArtifactWriter {
    dir: PathBuf,
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ArtifactWriter { dir: dir.into() }
    }
}

impl RunObserver for ArtifactWriter {
    fn on_iteration(&mut self, state: &RunState, new: &[Observation]) -> Result<()> {
        let map_snapshot = snapshot_id(&state.decomposition);
        let first = state.history.len() - new.len();
        let mut lines = String::new();
        for (k, o) in new.iter().enumerate() {
            let index = first + k;
            let incumbent_index = incumbent_upto(&state.history, index);
            let record = HistoryRecord {
                schema_version: SCHEMA_VERSION,
                iteration: o.iteration,
                index,
                request: o.request.clone(),
                result: o.result.clone(),
                score: o.score,
                acquisition: o.acquisition,
                incumbent_index,
                incumbent_score: state.history[incumbent_index].score,
                map_snapshot: map_snapshot.clone(),
            };
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
        append(&self.dir.join(HISTORY_FILE), &lines)?;
        let iteration = state.iteration.saturating_sub(1);
        let pool = PoolSnapshot {
            schema_version: SCHEMA_VERSION,
            iteration,
            map_snapshot,
            map: state.decomposition.assignment().to_vec(),
            entries: state
                .pool
                .entries()
                .iter()
                .map(|e| PoolSummary {
                    assignment: e.decomposition.assignment().to_vec(),
                    log_posterior: e.log_posterior,
                })
                .collect(),
        };
        append(&self.dir.join(POOLS_FILE), &(serde_json::to_string(&pool)? + "\n"))?;
        let finished_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        let timing = TimingRecord { schema_version: SCHEMA_VERSION, iteration, finished_unix_ms };
        append(&self.dir.join(TIMINGS_FILE), &(serde_json::to_string(&timing)? + "\n"))?;
        save_checkpoint(&self.dir, state)
    }
}

/// Earliest best-scoring index among `history[..=upto]`.
fn incumbent_upto(history: &[Observation], upto: usize) -> usize {
    (0..=upto).fold(0, |b, i| if history[i].score > history[b].score { i } else { b })
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

/// Drops log lines from iterations at or after `iteration`, e.g. those
/// written after the last checkpoint of an interrupted run.
pub fn truncate_logs(dir: &Path, iteration: usize) -> Result<()> {
    #[derive(Deserialize)]
    struct Tag {
        iteration: usize,
    }
    for name in [HISTORY_FILE, POOLS_FILE, TIMINGS_FILE] {
        let path = dir.join(name);
        if !path.exists() {
            File::create(&path)?;
            continue;
        }
        let mut kept = String::new();
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Tag>(&line) {
                Ok(t) if t.iteration < iteration => {
                    kept.push_str(&line);
                    kept.push('\n');
                }
                Ok(_) => {}
                // a torn final line from a crash
                Err(_) => break,
            }
        }
        fs::write(&path, kept)?;
    }
    Ok(())
}

pub fn read_history(dir: &Path) -> Result<Vec<HistoryRecord>> {
    let path = dir.join(HISTORY_FILE);
    let file = File::open(&path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Running

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub stop: StopReason,
    pub evaluations: usize,
    pub iterations: usize,
    pub best_score: Option<f64>,
    pub artifact_dir: PathBuf,
}

/// Stand-in evaluator for regenerating reports from artifacts.
struct NoEvaluator;

impl Evaluator for NoEvaluator {
    fn evaluate(&self, _: &EvaluationRequest) -> Result<EvaluationResult> {
        Err(Error::Backend("no evaluator attached".into()))
    }
}

pub fn build_evaluator(config: &RunConfig) -> Result<Box<dyn Evaluator>> {
    Ok(match &config.backend {
        Backend::Synthetic { benchmark_seed, noise_sd } => {
            Box::new(SyntheticBenchmark::standard(*benchmark_seed, *noise_sd)?)
        }
        Backend::External { command, workers } => Box::new(ExternalEvaluator::new(command.clone(), *workers)?),
    })
}

fn calibrated_prior(config: &RunConfig) -> Result<Option<CalibratedPrior>> {
    let Some(meta) = &config.metalearn else { return Ok(None) };
    let repository = PriorRecord::load_repository(&meta.repository)?;
    let table = Table::load_csv(&meta.dataset)?;
    let data = Dataset::from_table(&table, &meta.target, meta.event.as_deref())?;
    let features = meta_features(&data)?;
    calibrate(&features, &repository, meta.mode, meta.temperature).map(Some)
}

/// Starts a run in a fresh artifact directory.
pub fn start_run(config: &RunConfig, control: &RunControl) -> Result<RunSummary> {
    let dir = config.artifact_dir.clone();
    fs::create_dir_all(&dir)?;
    if dir.join(CHECKPOINT_FILE).exists() {
        return Err(Error::InvalidConfig(format!("{} already holds a run; resume it instead", dir.display())));
    }
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)? + "\n")?;
    let space = config.load_space()?;
    let mut options = config.options(&space)?;
    if let Some(c) = calibrated_prior(config)? {
        fs::write(dir.join(CALIBRATED_FILE), serde_json::to_string_pretty(&c)? + "\n")?;
        options.warmstart = Some(c.warmstart()?);
    }
    let evaluator = build_evaluator(config)?;
    let optimizer = Optimizer::new(&space, evaluator.as_ref(), options)?;
    let mut state = optimizer.initial_state();
    truncate_logs(&dir, 0)?;
    save_checkpoint(&dir, &state)?;
    drive(&optimizer, &mut state, config, control)
}

/// Continues the run stored in `dir` from its last checkpoint.
pub fn resume_run(dir: &Path, control: &RunControl) -> Result<RunSummary> {
    let config = load_config(dir)?;
    let space = config.load_space()?;
    let mut options = config.options(&space)?;
    let calibrated = dir.join(CALIBRATED_FILE);
    if calibrated.exists() {
        let c: CalibratedPrior = serde_json::from_str(&fs::read_to_string(calibrated)?)?;
        options.warmstart = Some(c.warmstart()?);
    }
    let mut state = load_checkpoint(dir)?;
    truncate_logs(dir, state.iteration)?;
    let evaluator = build_evaluator(&config)?;
    let optimizer = Optimizer::new(&space, evaluator.as_ref(), options)?;
    drive(&optimizer, &mut state, &config, control)
}

fn drive(optimizer: &Optimizer, state: &mut RunState, config: &RunConfig, control: &RunControl) -> Result<RunSummary> {
    let dir = &config.artifact_dir;
    let mut writer = ArtifactWriter::new(dir);
    let stop = optimizer.run(state, control, &mut writer)?;
    if stop != StopReason::Interrupted {
        write_report(dir)?;
    }
    Ok(RunSummary {
        stop,
        evaluations: state.history.len(),
        iterations: state.iteration,
        best_score: state.incumbent().map(|o| o.score),
        artifact_dir: dir.clone(),
    })
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut config: RunConfig = serde_json::from_str(&text)?;
    // the directory may have moved since the run started
    config.artifact_dir = dir.to_path_buf();
    Ok(config)
}

// ---------------------------------------------------------------------------
// Reports

/// Regenerates `ensemble.json`, `trace.csv` and `report.txt` from the
/// configuration and checkpoint.
pub fn write_report(dir: &Path) -> Result<()> {
    let config = load_config(dir)?;
    let state = load_checkpoint(dir)?;
    let space = config.load_space()?;
    let optimizer = Optimizer::new(&space, &NoEvaluator, config.options(&space)?)?;
    let ensemble = if state.history.is_empty() || state.pool.is_empty() {
        None
    } else {
        let e = ensemble_weights(&optimizer, &state, &config.ensemble, config.seed)?;
        fs::write(dir.join(ENSEMBLE_FILE), serde_json::to_string_pretty(&e)? + "\n")?;
        Some(e)
    };
    fs::write(dir.join(TRACE_FILE), trace_csv(&state))?;
    fs::write(dir.join(REPORT_FILE), report_text(&space, &state, ensemble.as_ref()))?;
    Ok(())
}

pub fn trace_csv(state: &RunState) -> String {
    let mut out = String::from("evaluation,iteration,score,incumbent\n");
    for (i, (o, best)) in state.history.iter().zip(state.incumbent_trace()).enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i + 1, o.iteration, o.score, best);
    }
    out
}

/// Best score after each completed iteration: `(iteration, evaluations, best)`.
pub fn incumbent_by_iteration(state: &RunState) -> Vec<(usize, usize, f64)> {
    let trace = state.incumbent_trace();
    let mut rows = Vec::new();
    for (i, o) in state.history.iter().enumerate() {
        let last_of_iteration = state.history.get(i + 1).is_none_or(|next| next.iteration != o.iteration);
        if last_of_iteration {
            rows.push((o.iteration, i + 1, trace[i]));
        }
    }
    rows
}

pub fn report_text(space: &SearchSpace, state: &RunState, ensemble: Option<&EnsembleModel>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "evaluations: {}", state.history.len());
    let _ = writeln!(out, "iterations: {}", state.iteration);
    if let Some(best) = state.incumbent() {
        let _ = writeln!(out, "best score: {:.6}", best.score);
        let _ = writeln!(out, "best pipeline: {}", best.request.config.label());
    }
    out.push_str("\nincumbent trace\niteration  evaluations  best\n");
    for (t, n, best) in incumbent_by_iteration(state) {
        let _ = writeln!(out, "{t:>9}  {n:>11}  {best:.6}");
    }
    out.push_str("\nlearned decomposition\n");
    for (m, names) in state.decomposition.describe(space) {
        let _ = writeln!(out, "subspace {m}: {}", names.join(", "));
    }
    if let Some(e) = ensemble {
        let _ = writeln!(out, "\nensemble weights ({} samples)", e.n_samples);
        out.push_str("weight    index  pipeline\n");
        for m in &e.members {
            let _ = writeln!(out, "{:.4}  {:>7}  {}", m.weight, m.history_index, m.config.label());
        }
    }
    out
}

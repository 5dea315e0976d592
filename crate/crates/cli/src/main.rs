use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use pipebo::bo::{RunControl, StopReason};
use pipebo::config::RunConfig;
use pipebo::data::{Column, Dataset, Table};
use pipebo::interpreter::{discretize_features, mine_rules, render_rules, MiningParams, RiskStrata};
use pipebo::metalearn::{calibrate, fit_record, meta_features, MetaFeatureVector, PriorRecord, WeightingMode};
use pipebo::persist::{self, RunSummary};
use pipebo::suite::{run_suite, SuiteOptions};
use pipebo::Error;

/// Exit status for an invalid configuration or missing input file.
const EXIT_CONFIG: u8 = 2;
/// Exit status for a corrupt checkpoint.
const EXIT_INTEGRITY: u8 = 3;
/// Exit status for a run stopped by an interrupt.
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "pipebo", version, about = "Bayesian optimization of ML pipelines with learned additive structure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run from a TOML config.
    Run {
        config: PathBuf,
        /// Stop after this many completed iterations (the run stays resumable).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Continue a run from its last checkpoint.
    Resume {
        dir: PathBuf,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Regenerate the ensemble, trace and report of a run and print the report.
    Report { dir: PathBuf },
    /// Mine association rules explaining predicted risk.
    Rules(RulesArgs),
    /// Add a finished run to a prior repository.
    MetaFit(MetaFitArgs),
    /// Calibrate a warm-start prior for a new dataset.
    Calibrate(CalibrateArgs),
    /// Run the synthetic benchmark suite.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Headered CSV file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: String,
    /// Event indicator column for survival targets.
    #[arg(long)]
    event: Option<String>,
}

#[derive(Args)]
struct RulesArgs {
    /// Headered CSV with features and a predicted-risk column.
    #[arg(long)]
    data: PathBuf,
    /// Column holding predicted risk in [0, 1].
    #[arg(long)]
    risk: String,
    /// Columns to leave out of the conditions (e.g. ids or the true label).
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Strata cut points; tertiles of the risk column when absent.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, default_value_t = 4)]
    bins: usize,
    #[arg(long, default_value_t = 10)]
    min_support: usize,
    #[arg(long, default_value_t = 3)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    b: f64,
    #[arg(long, default_value_t = 0.95)]
    min_confidence: f64,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Write the rules as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetaFitArgs {
    /// Artifact directory of a finished run.
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    repository: PathBuf,
    /// Record id; the data file's stem when absent.
    #[arg(long)]
    id: Option<String>,
    /// Extra meta-feature as name=value; repeatable.
    #[arg(long = "feature", value_parser = parse_feature)]
    features: Vec<(String, f64)>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    repository: PathBuf,
    #[arg(long, default_value = "similarity")]
    mode: WeightingMode,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long = "feature", value_parser = parse_feature)]
    features: Vec<(String, f64)>,
    /// Write the calibrated prior as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated benchmark seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 150)]
    budget: usize,
}

fn parse_feature(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected name=value")?;
    let value: f64 = value.parse().map_err(|e| format!("{value}: {e}"))?;
    Ok((name.trim().to_string(), value))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::InvalidConfig(_) | Error::MissingArtifact(_)) => ExitCode::from(EXIT_CONFIG),
                Some(Error::Integrity(_)) => ExitCode::from(EXIT_INTEGRITY),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, stop_after } => {
            let config = RunConfig::load(&config)?;
            let summary = persist::start_run(&config, &control(stop_after)?)?;
            Ok(finish(&summary))
        }
        Command::Resume { dir, stop_after } => {
            let summary = persist::resume_run(&dir, &control(stop_after)?)?;
            Ok(finish(&summary))
        }
        Command::Report { dir } => {
            persist::write_report(&dir)?;
            print!("{}", fs::read_to_string(dir.join(persist::REPORT_FILE))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Rules(args) => rules(args).map(|_| ExitCode::SUCCESS),
        Command::MetaFit(args) => meta_fit(args).map(|_| ExitCode::SUCCESS),
        Command::Calibrate(args) => calibrate_cmd(args).map(|_| ExitCode::SUCCESS),
        Command::Bench(args) => bench(args).map(|_| ExitCode::SUCCESS),
    }
}

fn control(stop_after: Option<usize>) -> Result<RunControl> {
    let control = RunControl { stop_after, ..RunControl::default() };
    let flag = control.interrupt.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing the interrupt handler")?;
    Ok(control)
}

fn finish(summary: &RunSummary) -> ExitCode {
    let best = summary.best_score.map_or("-".to_string(), |s| format!("{s:.6}"));
    println!(
        "{}: {} evaluations in {} iterations, best score {best}",
        summary.artifact_dir.display(),
        summary.evaluations,
        summary.iterations
    );
    match summary.stop {
        StopReason::Interrupted => {
            println!("stopped early; continue with `pipebo resume {}`", summary.artifact_dir.display());
            ExitCode::from(EXIT_INTERRUPTED)
        }
        StopReason::TimeLimit => {
            println!("time limit reached");
            ExitCode::SUCCESS
        }
        StopReason::BudgetExhausted => ExitCode::SUCCESS,
    }
}

fn load_table(path: &Path) -> Result<Table> {
    Table::load_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn rules(args: RulesArgs) -> Result<()> {
    let table = load_table(&args.data)?;
    let (mut features, risk) = table.take(&args.risk)?;
    for name in &args.exclude {
        features = features.take(name)?.0;
    }
    let scores = match risk {
        Column::Numeric(v) => v
            .into_iter()
            .enumerate()
            .map(|(i, x)| x.ok_or_else(|| anyhow!("risk column is missing row {}", i + 1)))
            .collect::<Result<Vec<f64>>>()?,
        Column::Categorical(_) => bail!("risk column '{}' is not numeric", args.risk),
    };
    let strata = match args.thresholds {
        Some(t) => {
            let labels = (0..=t.len()).map(|i| format!("stratum {}", i + 1)).collect();
            RiskStrata::new(t, labels)?
        }
        None => RiskStrata::tertiles(&scores)?,
    };
    let labels = strata.stratify(&scores)?;
    let grid = discretize_features(&features, args.bins)?;
    let params = MiningParams {
        min_support: args.min_support,
        max_len: args.max_len,
        a: args.a,
        b: args.b,
        min_posterior_confidence: args.min_confidence,
        top_k: args.top_k,
        ..MiningParams::default()
    };
    let mined = mine_rules(&grid, &labels, &strata, &params)?;
    print!("{}", render_rules(&mined, &strata));
    if let Some(out) = args.out {
        let doc = serde_json::json!({ "strata": strata, "rules": mined.rules, "notices": mined.notices });
        fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn dataset_features(data: &DataArgs, extra: &[(String, f64)]) -> Result<MetaFeatureVector> {
    let table = load_table(&data.data)?;
    let dataset = Dataset::from_table(&table, &data.target, data.event.as_deref())?;
    let mut meta = meta_features(&dataset)?;
    meta.extend(&extra.iter().cloned().collect::<BTreeMap<_, _>>())?;
    for w in &meta.warnings {
        log::warn!("{w}");
    }
    Ok(meta)
}

fn meta_fit(args: MetaFitArgs) -> Result<()> {
    let state = persist::load_checkpoint(&args.run)?;
    let meta = dataset_features(&args.data, &args.features)?;
    let id = match args.id {
        Some(id) => id,
        None => args
            .data
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("cannot derive a record id from {}", args.data.data.display()))?,
    };
    let record = fit_record(&state, &id, meta)?;
    let path = record.save(&args.repository)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let meta = dataset_features(&args.data, &args.features)?;
    let repository = PriorRecord::load_repository(&args.repository)?;
    let prior = calibrate(&meta, &repository, args.mode, args.temperature)?;
    println!("M = {}", prior.m);
    println!("weight    record");
    for (id, eta) in &prior.weights {
        println!("{eta:.4}    {id}");
    }
    if let Some(out) = args.out {
        fs::write(&out, serde_json::to_string_pretty(&prior)? + "\n")?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let options = SuiteOptions { seeds: args.seeds, budget: args.budget, ..SuiteOptions::default() };
    let report = run_suite(&options, |r| {
        info!("seed {}: hit {:?}, ari {:.3}, {:.1}s", r.seed, r.hit, r.ari, r.seconds);
    })?;
    print!("{}", report.render());
    Ok(())
}

//! Command-line front end.
//!
//! Every subcommand resolves its flags into a [`RunConfig`], executes it and
//! writes `run.json` next to its outputs. `replay` re-executes a recorded
//! `run.json` into a fresh directory; the recorded input digests must still
//! match.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{self, cv, ClassifierModel, ClassifyError, TrainConfig};
use crate::corpus::{
    self, bucket_weeks, ili_date_range, ingest, read_ili, CorpusError, IliWeek, WeekBucket,
};
use crate::nowcast::{self, ili_series, Nowcast, NowcastError};
use crate::query::{query_fraction_series, Query, QueryError, GATE_QUERY};
use crate::regress::{RegressError, WeekRange};
use crate::simulate::{
    self, build_spurious_pool, InjectionSchedule, Method, SimError, SimulationConfig,
};
use crate::synth::{self, SynthConfig, SynthError};

/// Footnote values for the simulation summary: the MSEs reported for the
/// same schedule on a large real-world stream.
const REFERENCE_MSE: [(&str, f64); 3] = [
    ("keywords", 0.077),
    ("classify-soft", 0.035),
    ("classify-hard", 0.023),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Json { path: PathBuf, reason: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Replay(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Nowcast(#[from] NowcastError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Simulate(#[from] SimError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Config(_) => "config",
            CliError::Replay(_) => "replay",
            CliError::Corpus(_) => "corpus",
            CliError::Query(_) => "query",
            CliError::Regress(_) => "regress",
            CliError::Nowcast(_) => "nowcast",
            CliError::Classify(_) => "classify",
            CliError::Synth(_) => "synth",
            CliError::Simulate(_) => "simulate",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ilitrack",
    version,
    about = "Nowcast ILI rates from weekly text-message streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus, ILI series, truth sidecar and labeled set.
    Synth(SynthArgs),
    /// Compute weekly query fractions and fit the logit-logit regression.
    Fraction(FractionArgs),
    /// Train the message classifier and cross-validate it.
    Classify(ClassifyArgs),
    /// Inject spurious messages and score each estimator's damage.
    Simulate(SimulateArgs),
    /// Re-run a recorded run.json into a new output directory.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON generator config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 160)]
    labeled_positive: usize,
    #[arg(long, default_value_t = 46)]
    labeled_negative: usize,
    #[arg(long, required = true)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long, default_value = "1:20")]
    train_weeks: WeekRange,
    #[arg(long, default_value = "21:36")]
    eval_weeks: WeekRange,
}

#[derive(Debug, Args)]
struct FractionArgs {
    #[arg(long)]
    messages: PathBuf,
    #[arg(long)]
    ili: PathBuf,
    #[arg(long, default_value = GATE_QUERY)]
    query: String,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, required = true)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Labeled JSONL: message fields plus `label` (0 or 1).
    #[arg(long)]
    messages: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, required = true)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    messages: PathBuf,
    #[arg(long)]
    ili: PathBuf,
    #[arg(long, default_value = GATE_QUERY)]
    query: String,
    /// Classifier model JSON written by `classify`.
    #[arg(long)]
    model: PathBuf,
    /// JSON array of `{"week": w, "count": n}`; defaults to weeks 32-36.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// JSON simulation config (pool rules, methods, schedule).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "1:20")]
    train_weeks: WeekRange,
    #[arg(long, required = true)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub seed: u64,
    pub labeled_positive: usize,
    pub labeled_negative: usize,
    pub config: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRun {
    pub seed: u64,
    pub messages: PathBuf,
    pub ili: PathBuf,
    pub query: String,
    pub train_weeks: WeekRange,
    pub eval_weeks: WeekRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRun {
    pub seed: u64,
    pub messages: PathBuf,
    pub folds: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRun {
    pub seed: u64,
    pub messages: PathBuf,
    pub ili: PathBuf,
    pub model: PathBuf,
    pub query: String,
    pub train_weeks: WeekRange,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum RunConfig {
    Synth(SynthRun),
    Fraction(FractionRun),
    Classify(ClassifyRun),
    Simulate(SimulateRun),
}

impl RunConfig {
    fn inputs(&self) -> Vec<&Path> {
        match self {
            RunConfig::Synth(_) => vec![],
            RunConfig::Fraction(r) => vec![&r.messages, &r.ili],
            RunConfig::Classify(r) => vec![&r.messages],
            RunConfig::Simulate(r) => vec![&r.messages, &r.ili, &r.model],
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub run: RunConfig,
    /// SHA-256 of every input file, keyed by its recorded path.
    pub input_sha256: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(run: RunConfig) -> Result<Self> {
        let input_sha256 = run
            .inputs()
            .into_iter()
            .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
            .collect::<Result<_>>()?;
        Ok(RunRecord {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run,
            input_sha256,
        })
    }

    fn verify_inputs(&self) -> Result<()> {
        for (path, expected) in &self.input_sha256 {
            let actual = file_digest(Path::new(path))?;
            if &actual != expected {
                return Err(CliError::Replay(format!(
                    "input {path} changed since the run was recorded"
                )));
            }
        }
        Ok(())
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(io_err(path))?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `name` inside `dir` through a temporary file and a rename.
fn write_atomic<F>(dir: &Path, name: &str, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let target = dir.join(name);
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(io_err(dir))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(io_err(&target))?;
        w.flush().map_err(io_err(&target))?;
    }
    tmp.persist(&target).map_err(|e| CliError::Io {
        path: target.clone(),
        source: e.error,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_atomic(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

fn required_seed(seed: Option<u64>) -> Result<u64> {
    seed.ok_or_else(|| CliError::Usage("--seed is required".into()))
}

fn synth_run(args: SynthArgs) -> Result<RunConfig> {
    let seed = required_seed(args.seed)?;
    let mut config = match &args.config {
        Some(path) => {
            let raw: serde_json::Value = read_json(path)?;
            if let Some(recorded) = raw.get("seed") {
                if recorded.as_u64() != Some(seed) {
                    return Err(CliError::Config(format!(
                        "config seed {recorded} disagrees with --seed {seed}"
                    )));
                }
            }
            serde_json::from_value(raw).map_err(|e| CliError::Json {
                path: path.clone(),
                reason: e.to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    config.seed = seed;
    Ok(RunConfig::Synth(SynthRun {
        seed,
        labeled_positive: args.labeled_positive,
        labeled_negative: args.labeled_negative,
        config,
    }))
}

fn fraction_run(args: FractionArgs) -> Result<RunConfig> {
    Query::parse(&args.query)?;
    Ok(RunConfig::Fraction(FractionRun {
        seed: required_seed(args.seed)?,
        messages: absolute(&args.messages)?,
        ili: absolute(&args.ili)?,
        query: args.query,
        train_weeks: args.split.train_weeks,
        eval_weeks: args.split.eval_weeks,
    }))
}

fn classify_run(args: ClassifyArgs) -> Result<RunConfig> {
    let seed = required_seed(args.seed)?;
    Ok(RunConfig::Classify(ClassifyRun {
        seed,
        messages: absolute(&args.messages)?,
        folds: args.folds,
        train: TrainConfig {
            l2_lambda: args.lambda,
            seed,
            ..TrainConfig::default()
        },
    }))
}

fn simulate_run(args: SimulateArgs) -> Result<RunConfig> {
    let seed = required_seed(args.seed)?;
    Query::parse(&args.query)?;
    let mut simulation: SimulationConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SimulationConfig::default(),
    };
    if let Some(recorded) = simulation.seed {
        if recorded != seed {
            return Err(CliError::Config(format!(
                "config seed {recorded} disagrees with --seed {seed}"
            )));
        }
    }
    simulation.seed = Some(seed);
    if let Some(path) = &args.schedule {
        simulation.schedule = read_json::<InjectionSchedule>(path)?;
    }
    Ok(RunConfig::Simulate(SimulateRun {
        seed,
        messages: absolute(&args.messages)?,
        ili: absolute(&args.ili)?,
        model: absolute(&args.model)?,
        query: args.query,
        train_weeks: args.train_weeks,
        simulation,
    }))
}

/// Executes `run`, writing all outputs plus `run.json` into `out`.
pub fn execute(record: &RunRecord, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    match &record.run {
        RunConfig::Synth(r) => exec_synth(r, out)?,
        RunConfig::Fraction(r) => exec_fraction(r, out)?,
        RunConfig::Classify(r) => exec_classify(r, out)?,
        RunConfig::Simulate(r) => exec_simulate(r, out)?,
    }
    write_json(out, "run.json", record)
}

fn exec_synth(run: &SynthRun, out: &Path) -> Result<()> {
    let (messages, truth) = synth::generate(&run.config)?;
    let labeled = synth::generate_labeled(&run.config, run.labeled_positive, run.labeled_negative)?;
    write_atomic(out, "messages.jsonl", |w| {
        corpus::write_messages(w, &messages)
    })?;
    write_atomic(out, "ili.csv", |w| corpus::write_ili(w, &truth.ili_weeks()))?;
    write_json(out, "truth.json", &truth)?;
    write_atomic(out, "labeled.jsonl", |w| {
        classify::write_labeled(w, &labeled)
    })
}

/// Reads the ILI file and buckets the messages onto exactly its weeks.
fn load_weeks(messages: &Path, ili_path: &Path) -> Result<(Vec<WeekBucket>, Vec<IliWeek>)> {
    let ili = read_ili(ili_path)?;
    let range = ili_date_range(&ili)
        .ok_or_else(|| CliError::Config(format!("{} has no weeks", ili_path.display())))?;
    let msgs = ingest(messages, range)?;
    if msgs.is_empty() {
        return Err(CliError::Config(format!(
            "no message in {} falls within the ILI weeks {} to {}",
            messages.display(),
            range.start,
            range.end
        )));
    }
    let buckets = bucket_weeks(&msgs, ili[0].week_ending, ili.len() as u32)?;
    Ok((buckets, ili))
}

#[derive(Serialize)]
struct FractionSummary<'a> {
    seed: u64,
    query: String,
    train_weeks: WeekRange,
    eval_weeks: WeekRange,
    degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a crate::regress::WindowScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<&'a crate::regress::WindowScore>,
}

fn exec_fraction(run: &FractionRun, out: &Path) -> Result<()> {
    let q = Query::parse(&run.query)?;
    let (buckets, ili) = load_weeks(&run.messages, &run.ili)?;
    let series = query_fraction_series(&q, &buckets)?;
    write_atomic(out, "fractions.csv", |w| series.write_csv(w))?;
    let mut summary = FractionSummary {
        seed: run.seed,
        query: q.render(),
        train_weeks: run.train_weeks,
        eval_weeks: run.eval_weeks,
        degenerate: true,
        reason: None,
        beta1: None,
        beta2: None,
        train: None,
        eval: None,
    };
    let result = nowcast::nowcast(&series, &ili, run.train_weeks, run.eval_weeks)?;
    match &result {
        Nowcast::Degenerate { reason } => summary.reason = Some(reason),
        Nowcast::Fitted { model, evaluation } => {
            write_json(out, "model.json", model)?;
            write_atomic(out, "estimates.csv", |w| evaluation.write_csv(w))?;
            summary.degenerate = false;
            summary.beta1 = Some(model.beta1);
            summary.beta2 = Some(model.beta2);
            summary.train = Some(&evaluation.train);
            summary.eval = Some(&evaluation.eval);
        }
    }
    write_json(out, "summary.json", &summary)
}

fn exec_classify(run: &ClassifyRun, out: &Path) -> Result<()> {
    let data = classify::read_labeled(&run.messages)?;
    let model = classify::train(&data, &run.train)?;
    let report = cv::cross_validate(&data, run.folds, &run.train)?;
    write_json(out, "model.json", &model)?;
    write_json(out, "cv_report.json", &report)?;
    write_atomic(out, "cv_report.txt", |w| write!(w, "{report}"))
}

#[derive(Serialize)]
struct MseSummary<'a> {
    seed: u64,
    query: String,
    pool_size: usize,
    pool_rule: &'a str,
    schedule: &'a InjectionSchedule,
    mse: BTreeMap<Method, f64>,
    /// Values reported for the same schedule on a large real stream; not
    /// expected to be reproduced by synthetic data.
    reference_mse: BTreeMap<&'static str, f64>,
}

fn exec_simulate(run: &SimulateRun, out: &Path) -> Result<()> {
    let q = Query::parse(&run.query)?;
    let (buckets, ili) = load_weeks(&run.messages, &run.ili)?;
    let clf = ClassifierModel::load(&run.model).map_err(io_err(&run.model))?;
    let all: Vec<_> = buckets
        .iter()
        .flat_map(|b| b.messages.iter().map(|m| m.message.clone()))
        .collect();
    let pool = build_spurious_pool(&all, &run.simulation.pool_rules)?;
    let models = simulate::fit_method_models(
        &buckets,
        &q,
        &clf,
        &ili_series(&ili),
        run.train_weeks,
        &run.simulation.methods,
    )?;
    let report = simulate::run_simulation(
        &buckets,
        &q,
        &pool,
        &run.simulation.schedule,
        &models,
        &clf,
        run.seed,
    )?;
    write_atomic(out, "estimates.csv", |w| report.write_csv(w))?;
    write_json(out, "models.json", &models)?;
    write_json(
        out,
        "mse.json",
        &MseSummary {
            seed: run.seed,
            query: q.render(),
            pool_size: pool.len(),
            pool_rule: &pool.source_rule,
            schedule: &run.simulation.schedule,
            mse: simulate::mse_vs_baseline(&report),
            reference_mse: REFERENCE_MSE.into_iter().collect(),
        },
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    let (run, out) = match cli.command {
        Command::Synth(a) => {
            let out = a.out.clone();
            (synth_run(a)?, out)
        }
        Command::Fraction(a) => {
            let out = a.out.clone();
            (fraction_run(a)?, out)
        }
        Command::Classify(a) => {
            let out = a.out.clone();
            (classify_run(a)?, out)
        }
        Command::Simulate(a) => {
            let out = a.out.clone();
            (simulate_run(a)?, out)
        }
        Command::Replay(a) => {
            let record: RunRecord = read_json(&a.run)?;
            record.verify_inputs()?;
            return execute(&record, &a.out);
        }
    };
    execute(&RunRecord::new(run)?, &out)
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Failures print one `error[kind]: message`
/// line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let summary: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty())
                .collect();
            let line = summary.join(" ");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            e.exit_code()
        }
    }
}

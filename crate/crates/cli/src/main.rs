//! `driftmem` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 every user failed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use driftmem::corpus::{build_streams, load_interactions, period_batches, UserStream};
use driftmem::engine::{
    analyze, build_native, build_remote, collect_retrieval_scores, infer_period, init_period_zero, run_stream, sweep,
    train_period, BackendKind, BaseCorpus, RunConfig, RunLayout, SweepAxis, UserState,
};
use driftmem::eval::{aggregate, score, QueryScore};
use driftmem::lm::LanguageModel;

#[derive(Parser)]
#[command(name = "driftmem", version, about = "Continual per-user personalization experiments")]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the per-user pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override one configuration key, e.g. `--set lambda=0.3` or
    /// `--set backend.native.order=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Input {
    /// Line-delimited JSON interactions.
    #[arg(long, short)]
    input: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and write it back normalized.
    Ingest {
        #[command(flatten)]
        input: Input,
        /// Normalized JSONL output; omitted means validate only.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run every user through all periods.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Apply one training period to one user's persisted state.
    TrainPeriod {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        user: String,
        #[arg(long)]
        period: usize,
        /// Run directory holding `states/`.
        #[arg(long)]
        state_dir: PathBuf,
    },
    /// Decode and score one user's test split for a trained period.
    InferPeriod {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        user: String,
        #[arg(long)]
        period: usize,
        #[arg(long)]
        state_dir: PathBuf,
        /// Gate threshold; by default calibrated on this user's scores.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Score output records (`user_id`, `period`, `reference`, `hypothesis`).
    Eval {
        #[arg(required = true)]
        outputs: Vec<PathBuf>,
        /// Report CSV; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// One run per value of a single axis.
    Sweep {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; the axis' default grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Correlations over a run's scatter exports.
    Analyze {
        run_dir: PathBuf,
    },
}

/// Work that needs a backend but not a particular one.
trait Job {
    fn run<M: LanguageModel<f64>>(self, model: &M, streams: &[UserStream], cfg: &RunConfig) -> anyhow::Result<Outcome>;
}

enum Outcome {
    Done,
    AllFailed,
}

fn dispatch(job: impl Job, streams: &[UserStream], cfg: &RunConfig) -> anyhow::Result<Outcome> {
    match cfg.backend.kind {
        BackendKind::Native => {
            let model = build_native::<f64>(cfg, streams)?;
            job.run(&model, streams, cfg)
        }
        BackendKind::Remote => {
            let model = build_remote::<f64>(cfg, streams)?;
            job.run(&model, streams, cfg)
        }
    }
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!(driftmem::Error::Config(format!("{key}: {part} is not a section"))))?;
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words fall back to strings
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut table: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| driftmem::Error::Config(e.to_string()))?;
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| driftmem::Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        set_key(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg = RunConfig::from_toml(&toml::to_string(&table).map_err(|e| driftmem::Error::Config(e.to_string()))?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_streams(path: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<UserStream>> {
    let loaded = load_interactions(path, &cfg.schema)?;
    if loaded.skipped > 0 {
        log::warn!("{}: skipped {} unusable records", path.display(), loaded.skipped);
    }
    Ok(build_streams(loaded.interactions))
}

fn find_user<'a>(streams: &'a [UserStream], user: &str) -> anyhow::Result<&'a UserStream> {
    streams
        .iter()
        .find(|s| s.user_id == user)
        .ok_or_else(|| anyhow!(driftmem::Error::Data(format!("user {user:?} is not in the dataset"))))
}

struct RunJob {
    out: PathBuf,
}

impl Job for RunJob {
    fn run<M: LanguageModel<f64>>(self, model: &M, streams: &[UserStream], cfg: &RunConfig) -> anyhow::Result<Outcome> {
        let outcome = run_stream::<f64, _>(model, streams, cfg, &self.out)?;
        for (user, why) in &outcome.failures {
            eprintln!("user {user} failed: {why}");
        }
        if outcome.all_failed() {
            return Ok(Outcome::AllFailed);
        }
        print!("{}", outcome.report.to_csv_string()?);
        Ok(Outcome::Done)
    }
}

struct TrainJob {
    user: String,
    period: usize,
    state_dir: PathBuf,
}

impl Job for TrainJob {
    fn run<M: LanguageModel<f64>>(self, model: &M, streams: &[UserStream], cfg: &RunConfig) -> anyhow::Result<Outcome> {
        let stream = find_user(streams, &self.user)?;
        let batches = period_batches(stream, cfg.n_periods, cfg.train_ratio)?;
        let batch = batches
            .get(self.period)
            .ok_or_else(|| driftmem::Error::Config(format!("period {} >= n_periods {}", self.period, cfg.n_periods)))?;
        let layout = RunLayout::new(&self.state_dir);
        let state = if self.period == 0 {
            let fresh = UserState::fresh(self.user.clone(), model.fresh_adapter(), cfg.n_max);
            init_period_zero(model, &fresh, batch, cfg)?
        } else {
            let prev: UserState<f64, M::Adapter> = UserState::load(layout.state(&self.user, self.period - 1))?;
            let out = train_period(model, &prev, batch, cfg)?;
            println!(
                "period {}: {} of {} interactions selected, buffer {}",
                self.period,
                out.drift_indices.len(),
                out.scored.len(),
                out.state.buffer.len()
            );
            out.state
        };
        let path = layout.state(&self.user, self.period);
        state.save(&path)?;
        println!("wrote {}", path.display());
        Ok(Outcome::Done)
    }
}

struct InferJob {
    user: String,
    period: usize,
    state_dir: PathBuf,
    sigma: Option<f64>,
}

#[derive(serde::Serialize)]
struct Record<'a> {
    user_id: &'a str,
    period: usize,
    query: &'a str,
    reference: &'a str,
    hypothesis: &'a str,
    gated: usize,
    r1_f1: f64,
    rl_f1: f64,
}

impl Job for InferJob {
    fn run<M: LanguageModel<f64>>(self, model: &M, streams: &[UserStream], cfg: &RunConfig) -> anyhow::Result<Outcome> {
        let stream = find_user(streams, &self.user)?;
        let batches = period_batches(stream, cfg.n_periods, cfg.train_ratio)?;
        let batch = batches
            .get(self.period)
            .ok_or_else(|| driftmem::Error::Config(format!("period {} >= n_periods {}", self.period, cfg.n_periods)))?;
        let layout = RunLayout::new(&self.state_dir);
        let state: UserState<f64, M::Adapter> = UserState::load(layout.state(&self.user, self.period))?;
        let sigma = match self.sigma {
            Some(s) => s,
            None => cfg.gate().sigma_for(&collect_retrieval_scores(&state, batch, cfg)?),
        };
        let outputs = infer_period(model, &state, batch, sigma, cfg)?;
        let path = self
            .state_dir
            .join("infer")
            .join(driftmem::engine::sanitize_id(&self.user))
            .join(format!("period_{}.jsonl", self.period));
        fs::create_dir_all(path.parent().expect("nested path"))?;
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| path.display().to_string())?);
        for o in &outputs {
            let rec = Record {
                user_id: &self.user,
                period: self.period,
                query: &o.interaction.query,
                reference: &o.interaction.response,
                hypothesis: &o.hypothesis,
                gated: o.gated,
                r1_f1: o.scores.r1_f1,
                rl_f1: o.scores.rl_f1,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        println!("sigma {sigma:.4}; {} queries written to {}", outputs.len(), path.display());
        Ok(Outcome::Done)
    }
}

struct SweepJob {
    axis: SweepAxis,
    values: Vec<String>,
    out: PathBuf,
}

impl Job for SweepJob {
    fn run<M: LanguageModel<f64>>(self, model: &M, streams: &[UserStream], cfg: &RunConfig) -> anyhow::Result<Outcome> {
        let values = if self.values.is_empty() { self.axis.default_values() } else { self.values };
        let results = sweep::<f64, _>(model, streams, cfg, self.axis, &values, &self.out)?;
        for r in &results {
            if let Some(avg) = &r.report.period_avg {
                println!("{} = {}: r1_f1 {:.4} rl_f1 {:.4}", self.axis.name(), r.value, avg.r1_f1, avg.rl_f1);
            }
        }
        Ok(Outcome::Done)
    }
}

fn ingest(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> anyhow::Result<Outcome> {
    let loaded = load_interactions(input, &cfg.schema)?;
    let total = loaded.interactions.len();
    let streams = build_streams(loaded.interactions);
    let short: Vec<&str> = streams
        .iter()
        .filter(|s| period_batches(s, cfg.n_periods, cfg.train_ratio).is_err())
        .map(|s| s.user_id.as_str())
        .collect();
    println!(
        "{} interactions from {} users ({} records skipped)",
        total,
        streams.len(),
        loaded.skipped
    );
    if !short.is_empty() {
        println!("{} users cannot fill {} periods: {}", short.len(), cfg.n_periods, short.join(", "));
    }
    let corpus = BaseCorpus::from_config(cfg, &streams)?;
    println!("base corpus: {} documents, {} period-0 pairs", corpus.documents.len(), corpus.pairs.len());
    if let Some(out) = out {
        let mut w = BufWriter::new(fs::File::create(out).with_context(|| out.display().to_string())?);
        for s in &streams {
            for i in &s.interactions {
                serde_json::to_writer(&mut w, i)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }
    if short.len() == streams.len() {
        bail!(driftmem::Error::Data("no user has enough interactions for the configured periods".into()));
    }
    Ok(Outcome::Done)
}

fn eval(outputs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<Outcome> {
    let mut scores = Vec::new();
    for path in outputs {
        let raw = fs::read_to_string(path).map_err(driftmem::Error::IoRaw).with_context(|| path.display().to_string())?;
        for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || driftmem::Error::Data(format!("{}:{}: malformed output record", path.display(), n + 1));
            let v: serde_json::Value = serde_json::from_str(line).map_err(|_| bad())?;
            let field = |k: &str| v.get(k).and_then(|x| x.as_str()).ok_or_else(bad);
            let period = v.get("period").and_then(|p| p.as_u64()).ok_or_else(bad)? as usize;
            scores.push(QueryScore {
                user_id: field("user_id")?.to_string(),
                period,
                scores: score::<f64>(field("reference")?, field("hypothesis")?),
            });
        }
    }
    if scores.is_empty() {
        bail!(driftmem::Error::Data("no output records found".into()));
    }
    let report = aggregate(&scores);
    match out {
        Some(p) => fs::write(p, report.to_csv_string()?).with_context(|| p.display().to_string())?,
        None => print!("{}", report.to_csv_string()?),
    }
    Ok(Outcome::Done)
}

fn execute(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { input, out } => ingest(&cfg, &input.input, out.as_deref()),
        Command::Run { input, out } => {
            let streams = load_streams(&input.input, &cfg)?;
            dispatch(RunJob { out }, &streams, &cfg)
        }
        Command::TrainPeriod {
            input,
            user,
            period,
            state_dir,
        } => {
            let streams = load_streams(&input.input, &cfg)?;
            dispatch(TrainJob { user, period, state_dir }, &streams, &cfg)
        }
        Command::InferPeriod {
            input,
            user,
            period,
            state_dir,
            sigma,
        } => {
            let streams = load_streams(&input.input, &cfg)?;
            dispatch(
                InferJob {
                    user,
                    period,
                    state_dir,
                    sigma,
                },
                &streams,
                &cfg,
            )
        }
        Command::Eval { outputs, out } => eval(&outputs, out.as_deref()),
        Command::Sweep {
            input,
            axis,
            values,
            out,
        } => {
            let streams = load_streams(&input.input, &cfg)?;
            dispatch(SweepJob { axis, values, out }, &streams, &cfg)
        }
        Command::Analyze { run_dir } => {
            let rows = analyze(&run_dir)?;
            for r in rows.iter().filter(|r| r.scope == "all") {
                let v = r.value.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                println!("{} {} {v} (n = {})", r.pair, r.method, r.count);
            }
            Ok(Outcome::Done)
        }
    }
}

/// The error chain, leaving out causes already quoted by the level above.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<driftmem::Error>()) {
        Some(e) if e.is_data_error() => 2,
        Some(driftmem::Error::Remote(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::AllFailed) => {
            eprintln!("error: every user failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

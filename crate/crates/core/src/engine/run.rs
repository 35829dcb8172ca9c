//! Full-stream runs: every user through every period, with per-period
//! checkpoints that a later invocation can resume from.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{period_batches, PeriodBatch, UserStream};
use crate::decode::write_trace_csv;
use crate::drift::{export_scatter, write_scatter_csv};
use crate::error::{Error, Result};
use crate::eval::{aggregate, QueryScore, Report};
use crate::lm::LanguageModel;
use crate::scalar::Real;

use super::config::RunConfig;
use super::pipeline::{collect_retrieval_scores, infer_period, init_period_zero, train_period, QueryOutput, UserState};

pub const RUN_STATE_VERSION: u32 = 1;
pub const RUN_STATE_FILE: &str = "run_state.json";
pub const REPORT_FILE: &str = "report.csv";

/// File-name-safe form of a user id. Bytes outside `[A-Za-z0-9_-]` are
/// percent-encoded, so distinct ids never collide.
pub fn sanitize_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.is_empty() {
        out.push_str("%00");
    }
    out
}

/// Output layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn run_state(&self) -> PathBuf {
        self.root.join(RUN_STATE_FILE)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join(REPORT_FILE)
    }

    pub fn state(&self, user: &str, period: usize) -> PathBuf {
        self.root.join("states").join(sanitize_id(user)).join(format!("period_{period}.json"))
    }

    pub fn scatter_dir(&self) -> PathBuf {
        self.root.join("scatter")
    }

    pub fn scatter(&self, user: &str, period: usize) -> PathBuf {
        self.scatter_dir().join(sanitize_id(user)).join(format!("period_{period}.csv"))
    }

    pub fn outputs(&self, period: usize) -> PathBuf {
        self.root.join("outputs").join(format!("period_{period}.jsonl"))
    }

    pub fn trace(&self, user: &str, period: usize, query: usize) -> PathBuf {
        self.root
            .join("traces")
            .join(sanitize_id(user))
            .join(format!("period_{period}_query_{query}.csv"))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Checkpoint written after every completed period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: DeserializeOwned"))]
pub struct RunState<T> {
    pub version: u32,
    pub fingerprint: String,
    pub completed_period: usize,
    /// Every retrieval score seen so far (the calibration pool).
    pub observed_scores: Vec<T>,
    pub sigma_history: Vec<T>,
    pub query_scores: Vec<QueryScore<T>>,
    /// User id -> reason; failed users are skipped from then on.
    pub failures: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub report: Report<T>,
    pub completed_period: usize,
    /// `false` when the run stopped early at `stop_after_period`.
    pub finished: bool,
    pub failures: BTreeMap<String, String>,
    pub sigma_history: Vec<T>,
    pub users: usize,
}

impl<T> RunOutcome<T> {
    pub fn all_failed(&self) -> bool {
        self.users > 0 && self.failures.len() == self.users
    }
}

#[derive(Serialize)]
struct OutputRecord<'a> {
    user_id: &'a str,
    period: usize,
    timestamp: i64,
    query: &'a str,
    reference: &'a str,
    hypothesis: &'a str,
    gated: usize,
    r1_f1: f64,
    rl_f1: f64,
}

/// Per-user result tagged with the user id.
type Tagged<R> = (String, Result<R>);

struct Active<T, A> {
    state: UserState<T, A>,
    batches: Vec<PeriodBatch>,
}

fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs (or resumes) every stream through all periods, writing states,
/// scatter exports, outputs and the report under `out_dir`.
pub fn run_stream<T, M>(model: &M, streams: &[UserStream], cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunOutcome<T>>
where
    T: Real,
    M: LanguageModel<T>,
{
    cfg.validate()?;
    let layout = RunLayout::new(out_dir.as_ref());
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    with_pool(cfg.threads, || run_inner(model, streams, cfg, &layout))?
}

fn run_inner<T, M>(model: &M, streams: &[UserStream], cfg: &RunConfig, layout: &RunLayout) -> Result<RunOutcome<T>>
where
    T: Real,
    M: LanguageModel<T>,
{
    let fingerprint = cfg.fingerprint();
    let mut run: RunState<T>;
    let mut active: Vec<Active<T, M::Adapter>> = Vec::new();

    let resume = layout.run_state().exists();
    if resume {
        let raw = fs::read_to_string(layout.run_state()).map_err(|e| Error::io(layout.run_state(), e))?;
        run = serde_json::from_str(&raw)?;
        if run.version != RUN_STATE_VERSION {
            return Err(Error::Version {
                found: run.version,
                expected: RUN_STATE_VERSION,
            });
        }
        if run.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration; use a fresh output directory",
                layout.run_state().display()
            )));
        }
        log::info!("resuming after period {}", run.completed_period);
    } else {
        run = RunState {
            version: RUN_STATE_VERSION,
            fingerprint,
            completed_period: 0,
            observed_scores: Vec::new(),
            sigma_history: Vec::new(),
            query_scores: Vec::new(),
            failures: BTreeMap::new(),
        };
    }

    // per-user setup: partition, then either init period 0 or reload
    let setups: Vec<Tagged<Active<T, M::Adapter>>> = streams
        .par_iter()
        .filter(|s| !run.failures.contains_key(&s.user_id))
        .map(|s| {
            let result = (|| {
                let batches = period_batches(s, cfg.n_periods, cfg.train_ratio)?;
                let state = if resume {
                    UserState::load(layout.state(&s.user_id, run.completed_period))?
                } else {
                    let fresh = UserState::fresh(s.user_id.clone(), model.fresh_adapter(), cfg.n_max);
                    let state = init_period_zero(model, &fresh, &batches[0], cfg)?;
                    state.save(layout.state(&s.user_id, 0))?;
                    state
                };
                Ok(Active { state, batches })
            })();
            (s.user_id.clone(), result)
        })
        .collect();
    for (user, r) in setups {
        match r {
            Ok(a) => active.push(a),
            Err(e) => {
                log::error!("user {user}: {e}");
                run.failures.insert(user, format!("setup: {e}"));
            }
        }
    }
    if !resume {
        checkpoint(layout, &run)?;
    }

    for t in run.completed_period + 1..cfg.n_periods {
        // training
        let trained: Vec<Tagged<Active<T, M::Adapter>>> = std::mem::take(&mut active)
            .into_par_iter()
            .map(|a| {
                let user = a.state.user_id.clone();
                let result = (|| {
                    let outcome = train_period(model, &a.state, &a.batches[t], cfg)?;
                    let mut csv = Vec::new();
                    write_scatter_csv(&export_scatter(&outcome.scored), &mut csv)?;
                    write_file(&layout.scatter(&user, t), &csv)?;
                    outcome.state.save(layout.state(&user, t))?;
                    Ok(Active {
                        state: outcome.state,
                        batches: a.batches,
                    })
                })();
                (user, result)
            })
            .collect();
        active = keep_ok(trained, t, "train", &mut run.failures);

        // calibration over everything seen so far
        let scores: Vec<Tagged<Vec<T>>> = active
            .par_iter()
            .map(|a| (a.state.user_id.clone(), collect_retrieval_scores(&a.state, &a.batches[t], cfg)))
            .collect();
        let mut failed_now = Vec::new();
        for (user, s) in scores {
            match s {
                Ok(s) => run.observed_scores.extend(s),
                Err(e) => failed_now.push((user, e)),
            }
        }
        drop_failed(&mut active, failed_now, t, "calibrate", &mut run.failures);
        let sigma: T = cfg.gate().sigma_for(&run.observed_scores);
        run.sigma_history.push(sigma);
        log::info!("period {t}: sigma = {sigma}");

        // inference
        let inferred: Vec<Tagged<Vec<QueryOutput<T>>>> = active
            .par_iter()
            .map(|a| {
                let user = a.state.user_id.clone();
                let r = infer_period(model, &a.state, &a.batches[t], sigma, cfg);
                (user, r)
            })
            .collect();
        let mut records = Vec::new();
        let mut failed_now = Vec::new();
        for (user, r) in inferred {
            match r {
                Ok(outputs) => {
                    for (i, o) in outputs.into_iter().enumerate() {
                        if let Some(trace) = &o.trace {
                            let mut csv = Vec::new();
                            write_trace_csv(trace, &mut csv)?;
                            write_file(&layout.trace(&user, t, i), &csv)?;
                        }
                        run.query_scores.push(QueryScore {
                            user_id: user.clone(),
                            period: t,
                            scores: o.scores,
                        });
                        records.push((user.clone(), o));
                    }
                }
                Err(e) => failed_now.push((user, e)),
            }
        }
        drop_failed(&mut active, failed_now, t, "infer", &mut run.failures);
        write_outputs(&layout.outputs(t), t, &records)?;

        run.completed_period = t;
        checkpoint(layout, &run)?;
        if cfg.stop_after_period == Some(t) && t + 1 < cfg.n_periods {
            log::info!("stopping after period {t} as configured");
            return finish(layout, run, streams.len(), false);
        }
    }
    finish(layout, run, streams.len(), true)
}

fn keep_ok<T, A>(
    results: Vec<Tagged<Active<T, A>>>,
    t: usize,
    stage: &str,
    failures: &mut BTreeMap<String, String>,
) -> Vec<Active<T, A>> {
    let mut out = Vec::new();
    for (user, r) in results {
        match r {
            Ok(a) => out.push(a),
            Err(e) => {
                log::error!("user {user} period {t} {stage}: {e}");
                failures.insert(user, format!("period {t} {stage}: {e}"));
            }
        }
    }
    out
}

fn drop_failed<T, A>(
    active: &mut Vec<Active<T, A>>,
    failed: Vec<(String, Error)>,
    t: usize,
    stage: &str,
    failures: &mut BTreeMap<String, String>,
) {
    for (user, e) in failed {
        log::error!("user {user} period {t} {stage}: {e}");
        active.retain(|a| a.state.user_id != user);
        failures.insert(user, format!("period {t} {stage}: {e}"));
    }
}

fn checkpoint<T: Real>(layout: &RunLayout, run: &RunState<T>) -> Result<()> {
    // write-then-rename so an interrupted write never leaves half a file
    let tmp = layout.root.join(format!("{RUN_STATE_FILE}.tmp"));
    write_file(&tmp, serde_json::to_string(run)?.as_bytes())?;
    fs::rename(&tmp, layout.run_state()).map_err(|e| Error::io(layout.run_state(), e))
}

fn write_outputs<T: Real>(path: &Path, period: usize, records: &[(String, QueryOutput<T>)]) -> Result<()> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (user, o) in records {
        let rec = OutputRecord {
            user_id: user,
            period,
            timestamp: o.interaction.timestamp.0,
            query: &o.interaction.query,
            reference: &o.interaction.response,
            hypothesis: &o.hypothesis,
            gated: o.gated,
            r1_f1: o.scores.r1_f1.as_f64(),
            rl_f1: o.scores.rl_f1.as_f64(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn finish<T: Real>(layout: &RunLayout, run: RunState<T>, users: usize, finished: bool) -> Result<RunOutcome<T>> {
    let report = aggregate(&run.query_scores);
    write_file(&layout.report(), report.to_csv_string()?.as_bytes())?;
    Ok(RunOutcome {
        report,
        completed_period: run.completed_period,
        finished,
        failures: run.failures,
        sigma_history: run.sigma_history,
        users,
    })
}

//! One user's training and inference steps for a single period.

use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::buffer::{merge_candidates, retain, HashedTfEmbedder, ReplayBuffer};
use crate::corpus::{Interaction, PeriodBatch};
use crate::decode::{decode, TraceStep};
use crate::drift::{rescore, score_batch, select, ScoredInteraction};
use crate::error::{Error, Result};
use crate::eval::{score as rouge, RougeScores};
use crate::lm::{AdapterState, LanguageModel};
use crate::retrieval::{gate_and_format, retrieve, Bm25Index, EXEMPLAR_TEMPLATE};
use crate::scalar::Real;

use super::config::RunConfig;

pub const STATE_VERSION: u32 = 1;

/// Everything a user carries from one period to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize, A: Serialize", deserialize = "T: DeserializeOwned, A: DeserializeOwned"))]
pub struct UserState<T, A> {
    pub user_id: String,
    pub adapter: A,
    pub buffer: ReplayBuffer<T>,
    /// `None` until period 0 has been applied.
    pub last_period: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize, A: Serialize", deserialize = "T: DeserializeOwned, A: DeserializeOwned"))]
struct StateDoc<T, A> {
    version: u32,
    #[serde(flatten)]
    state: UserState<T, A>,
}

impl<T: Real, A: AdapterState> UserState<T, A> {
    pub fn fresh(user_id: impl Into<String>, adapter: A, n_max: usize) -> Self {
        UserState {
            user_id: user_id.into(),
            adapter,
            buffer: ReplayBuffer::empty(n_max),
            last_period: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = StateDoc {
            version: STATE_VERSION,
            state: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(raw)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != STATE_VERSION {
            return Err(Error::Version {
                found,
                expected: STATE_VERSION,
            });
        }
        let doc: StateDoc<T, A> = serde_json::from_value(value)?;
        let s = doc.state;
        if s.adapter.generation_period() != s.last_period {
            return Err(Error::Data(format!(
                "state for {}: adapter generation {:?} disagrees with last period {:?}",
                s.user_id,
                s.adapter.generation_period(),
                s.last_period
            )));
        }
        // re-validates the buffer invariants
        ReplayBuffer::<T>::from_json(&s.buffer.to_json()?)?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }
}

fn samples(items: &[Interaction]) -> Vec<(&str, &str)> {
    items.iter().map(|i| (i.query.as_str(), i.response.as_str())).collect()
}

/// Builds the initial adapter from all of period 0's training data.
pub fn init_period_zero<T, M>(model: &M, state: &UserState<T, M::Adapter>, batch: &PeriodBatch, cfg: &RunConfig) -> Result<UserState<T, M::Adapter>>
where
    T: Real,
    M: LanguageModel<T>,
{
    if state.last_period.is_some() {
        return Err(Error::InvalidArgument(format!("user {} is already initialized", state.user_id)));
    }
    if batch.period_index != 0 {
        return Err(Error::InvalidArgument(format!("initialization needs period 0, got {}", batch.period_index)));
    }
    let mut items = batch.train.clone();
    if cfg.period0_include_test {
        items.extend(batch.test.iter().cloned());
    }
    if items.is_empty() {
        return Err(Error::Data(format!("user {} has no period-0 training data", state.user_id)));
    }
    let adapter = model.adapt(&state.adapter, &samples(&items), T::lit(cfg.adapt_weight))?;
    Ok(UserState {
        user_id: state.user_id.clone(),
        adapter,
        buffer: ReplayBuffer::empty(cfg.n_max),
        last_period: Some(0),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T, A> {
    pub state: UserState<T, A>,
    /// Pre-update scores of every training interaction.
    pub scored: Vec<ScoredInteraction<T>>,
    /// Indices into `scored` that formed the drift set.
    pub drift_indices: Vec<usize>,
    pub tau_p: Option<T>,
}

/// Drift selection, adaptation on the drift set, and buffer refresh.
pub fn train_period<T, M>(
    model: &M,
    state: &UserState<T, M::Adapter>,
    batch: &PeriodBatch,
    cfg: &RunConfig,
) -> Result<TrainOutcome<T, M::Adapter>>
where
    T: Real,
    M: LanguageModel<T>,
{
    let expected = state.last_period.map(|t| t + 1);
    if expected != Some(batch.period_index) {
        return Err(Error::InvalidArgument(format!(
            "user {}: period {} cannot follow {:?}",
            state.user_id, batch.period_index, state.last_period
        )));
    }
    let t = batch.period_index;
    if batch.train.is_empty() {
        log::warn!("user {} period {t}: empty training split, state carried over", state.user_id);
        return Ok(TrainOutcome {
            state: UserState {
                user_id: state.user_id.clone(),
                adapter: state.adapter.advanced(),
                buffer: state.buffer.clone(),
                last_period: Some(t),
            },
            scored: Vec::new(),
            drift_indices: Vec::new(),
            tau_p: None,
        });
    }
    let alpha = T::lit(cfg.alpha);
    let scored = score_batch(model, &state.adapter, &batch.train, alpha, cfg.likelihood)?;
    let selection = select(&scored, &cfg.selection(&state.user_id, t))?;
    let drift = selection.interactions(&scored);

    let adapter = model.adapt(&state.adapter, &samples(&drift), T::lit(cfg.adapt_weight))?;

    let pool = merge_candidates(&drift, &state.buffer);
    let post = rescore(model, &adapter, &pool, alpha, cfg.likelihood)?;
    let pool: Vec<(Interaction, T)> = post.into_iter().map(|s| (s.interaction, s.drift.total)).collect();
    let embedder = HashedTfEmbedder { dim: cfg.embed_dim };
    let buffer = retain(pool, &cfg.retention(&state.user_id, t), &embedder)?;
    log::debug!(
        "user {} period {t}: {} drift of {}, buffer {}",
        state.user_id,
        drift.len(),
        scored.len(),
        buffer.len()
    );
    Ok(TrainOutcome {
        state: UserState {
            user_id: state.user_id.clone(),
            adapter,
            buffer,
            last_period: Some(t),
        },
        scored,
        drift_indices: selection.indices,
        tau_p: Some(selection.tau_p),
    })
}

fn check_inference<T, A>(state: &UserState<T, A>, batch: &PeriodBatch) -> Result<()> {
    if state.last_period != Some(batch.period_index) {
        return Err(Error::InvalidArgument(format!(
            "user {}: inference for period {} needs that period trained (last is {:?})",
            state.user_id, batch.period_index, state.last_period
        )));
    }
    Ok(())
}

/// Top-k retrieval scores of every test query against the buffer, for
/// threshold calibration.
pub fn collect_retrieval_scores<T: Real, A>(state: &UserState<T, A>, batch: &PeriodBatch, cfg: &RunConfig) -> Result<Vec<T>> {
    check_inference(state, batch)?;
    if !cfg.gating {
        return Ok(Vec::new());
    }
    let index = Bm25Index::build(&state.buffer.entries, cfg.bm25);
    Ok(batch
        .test
        .iter()
        .flat_map(|q| retrieve(&index, &q.query, cfg.retrieval_k).into_iter().map(|h| h.score))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput<T> {
    pub interaction: Interaction,
    pub retrieval_scores: Vec<T>,
    /// Hits that passed the gate.
    pub gated: usize,
    pub c_ret: String,
    pub hypothesis: String,
    pub scores: RougeScores<T>,
    pub trace: Option<Vec<TraceStep<T>>>,
}

/// Gated retrieval plus interpolated decoding for every test query.
pub fn infer_period<T, M>(
    model: &M,
    state: &UserState<T, M::Adapter>,
    batch: &PeriodBatch,
    sigma: T,
    cfg: &RunConfig,
) -> Result<Vec<QueryOutput<T>>>
where
    T: Real,
    M: LanguageModel<T>,
{
    check_inference(state, batch)?;
    if batch.test.is_empty() {
        log::warn!("user {} period {}: empty test split", state.user_id, batch.period_index);
        return Ok(Vec::new());
    }
    let sigma = if cfg.gating { sigma } else { T::infinity() };
    let index = Bm25Index::build(&state.buffer.entries, cfg.bm25);
    let dcfg = cfg.decode();
    batch
        .test
        .par_iter()
        .map(|q| {
            let hits = retrieve(&index, &q.query, cfg.retrieval_k);
            let c_ret = gate_and_format(&hits, sigma, EXEMPLAR_TEMPLATE);
            let out = decode(model, &state.adapter, &q.query, &c_ret, &dcfg)?;
            Ok(QueryOutput {
                interaction: q.clone(),
                retrieval_scores: hits.iter().map(|h| h.score).collect(),
                gated: hits.iter().filter(|h| h.score > sigma).count(),
                scores: rouge(&q.response, &out.text),
                c_ret,
                hypothesis: out.text,
                trace: cfg.write_traces.then_some(out.trace),
            })
        })
        .collect()
}

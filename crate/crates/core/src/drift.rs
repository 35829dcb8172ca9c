//! Drift scoring and drift-set selection.
//!
//! For an interaction `(q, a)` scored under the base model and the current
//! adapted model:
//!
//! ```text
//! novelty N = log p_base - log p_adap
//! quality Q = alpha * log p_base
//! total   S = N + Q
//! hardness H = -log p_adap = N - Q / alpha
//! ```

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Interaction;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LogLik};
use crate::scalar::{ceil_fraction, Real};
use crate::stats::fractional_ranks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftScore<T> {
    pub novelty: T,
    pub quality: T,
    pub total: T,
    pub alpha: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardnessScore<T> {
    pub h: T,
}

/// Which log-likelihood value feeds the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    #[default]
    Total,
    PerTokenMean,
}

impl LikelihoodMode {
    pub fn value<T: Real>(self, ll: &LogLik<T>) -> T {
        match self {
            LikelihoodMode::Total => ll.total_logprob,
            LikelihoodMode::PerTokenMean => ll.mean_logprob(),
        }
    }
}

/// Drift score from total log-likelihoods of the same (query, response).
pub fn score<T: Real>(base_ll: &LogLik<T>, adap_ll: &LogLik<T>, alpha: T) -> Result<DriftScore<T>> {
    score_values(base_ll.total_logprob, adap_ll.total_logprob, alpha)
}

pub fn score_values<T: Real>(log_base: T, log_adap: T, alpha: T) -> Result<DriftScore<T>> {
    if !log_base.is_finite() || !log_adap.is_finite() {
        return Err(Error::NonFinite("drift score log-likelihood"));
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite("drift score alpha"));
    }
    let novelty = log_base - log_adap;
    let quality = alpha * log_base;
    Ok(DriftScore {
        novelty,
        quality,
        total: novelty + quality,
        alpha,
    })
}

pub fn hardness<T: Real>(adap_ll: &LogLik<T>) -> HardnessScore<T> {
    HardnessScore { h: -adap_ll.total_logprob }
}

impl<T: Real> DriftScore<T> {
    /// `N - Q / alpha`; undefined (`None`) when alpha is zero.
    pub fn hardness_from_parts(&self) -> Option<T> {
        (self.alpha != T::zero()).then(|| self.novelty - self.quality / self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInteraction<T> {
    pub interaction: Interaction,
    pub drift: DriftScore<T>,
    pub hardness: HardnessScore<T>,
}

/// Scores every interaction under `(base, adapter)`. Order is preserved.
pub fn score_batch<T, M>(
    model: &M,
    adapter: &M::Adapter,
    items: &[Interaction],
    alpha: T,
    mode: LikelihoodMode,
) -> Result<Vec<ScoredInteraction<T>>>
where
    T: Real,
    M: LanguageModel<T>,
{
    items
        .par_iter()
        .map(|it| {
            let base = model.log_likelihood(None, &it.query, &it.response)?;
            let adap = model.log_likelihood(Some(adapter), &it.query, &it.response)?;
            let (lb, la) = (mode.value(&base), mode.value(&adap));
            Ok(ScoredInteraction {
                interaction: it.clone(),
                drift: score_values(lb, la, alpha)?,
                hardness: HardnessScore { h: -la },
            })
        })
        .collect()
}

/// Post-update residual scores: the same formula under the updated adapter.
pub fn rescore<T, M>(
    model: &M,
    updated: &M::Adapter,
    pool: &[Interaction],
    alpha: T,
    mode: LikelihoodMode,
) -> Result<Vec<ScoredInteraction<T>>>
where
    T: Real,
    M: LanguageModel<T>,
{
    score_batch(model, updated, pool, alpha, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Top,
    Bottom,
    Random,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub top_percent: f64,
    pub mode: SelectionMode,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            top_percent: 30.0,
            mode: SelectionMode::Top,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSelection<T> {
    /// Indices into the scored batch, in selection order.
    pub indices: Vec<usize>,
    /// Boundary score: the lowest retained score for `top`, `random` and
    /// `all`; the highest retained score for `bottom`.
    pub tau_p: T,
}

impl<T: Real> DriftSelection<T> {
    pub fn interactions(&self, batch: &[ScoredInteraction<T>]) -> Vec<Interaction> {
        self.indices.iter().map(|&i| batch[i].interaction.clone()).collect()
    }
}

pub fn selection_size(n: usize, top_percent: f64) -> usize {
    ceil_fraction(top_percent / 100.0, n).clamp(1, n)
}

/// Ranks by score (descending for top), earlier timestamp first on ties,
/// then input order.
fn ranked<T: Real>(batch: &[ScoredInteraction<T>], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (batch[a].drift.total, batch[b].drift.total);
        let by_score = if descending { sb.partial_cmp(&sa) } else { sa.partial_cmp(&sb) };
        by_score
            .expect("finite scores")
            .then(batch[a].interaction.timestamp.cmp(&batch[b].interaction.timestamp))
            .then(a.cmp(&b))
    });
    order
}

pub fn select<T: Real>(batch: &[ScoredInteraction<T>], cfg: &SelectionConfig) -> Result<DriftSelection<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty batch".into()));
    }
    if !(cfg.top_percent > 0.0 && cfg.top_percent <= 100.0) {
        return Err(Error::Config(format!("top_percent must lie in (0, 100], got {}", cfg.top_percent)));
    }
    let n = batch.len();
    let m = selection_size(n, cfg.top_percent);
    let indices: Vec<usize> = match cfg.mode {
        SelectionMode::Top => ranked(batch, true).into_iter().take(m).collect(),
        SelectionMode::Bottom => ranked(batch, false).into_iter().take(m).collect(),
        SelectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        SelectionMode::All => (0..n).collect(),
    };
    let scores = indices.iter().map(|&i| batch[i].drift.total);
    let tau_p = match cfg.mode {
        SelectionMode::Bottom => scores.fold(T::neg_infinity(), T::max),
        _ => scores.fold(T::infinity(), T::min),
    };
    Ok(DriftSelection { indices, tau_p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

pub fn correlation<T: Real>(xs: &[T], ys: &[T], method: CorrelationMethod) -> Result<T> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input"));
    }
    match method {
        CorrelationMethod::Pearson => pearson(xs, ys),
        CorrelationMethod::Spearman => pearson(&fractional_ranks(xs), &fractional_ranks(ys)),
    }
}

fn pearson<T: Real>(xs: &[T], ys: &[T]) -> Result<T> {
    let n = T::from_usize_lossy(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() {
        return Err(Error::ConstantInput("x"));
    }
    if syy == T::zero() {
        return Err(Error::ConstantInput("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow<T> {
    pub q: T,
    pub n: T,
    pub s: T,
    pub h: T,
}

pub fn export_scatter<T: Real>(batch: &[ScoredInteraction<T>]) -> Vec<ScatterRow<T>> {
    batch
        .iter()
        .map(|s| ScatterRow {
            q: s.drift.quality,
            n: s.drift.novelty,
            s: s.drift.total,
            h: s.hardness.h,
        })
        .collect()
}

pub const SCATTER_HEADER: &str = "q,n,s,h";

pub fn write_scatter_csv<T: Real, W: Write>(rows: &[ScatterRow<T>], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SCATTER_HEADER}")?;
    for r in rows {
        writeln!(out, "{:.6},{:.6},{:.6},{:.6}", r.q.as_f64(), r.n.as_f64(), r.s.as_f64(), r.h.as_f64())?;
    }
    Ok(())
}

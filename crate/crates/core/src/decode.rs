//! Synchronized dual-path greedy decoding.
//!
//! Each step queries the parametric path (context = query) and, when
//! retrieval produced any exemplars, the retrieval path (context =
//! exemplars ⊕ query). Both paths are penalized for repetition, mixed as
//! `lambda * p_ret + (1 - lambda) * p_par`, and the argmax token is
//! appended to the one prefix the two paths share.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenDistribution, TokenId};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub lambda: f64,
    pub max_tokens: usize,
    pub rep_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            lambda: 0.5,
            max_tokens: 600,
            rep_penalty: 1.2,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.rep_penalty >= 1.0 && self.rep_penalty.is_finite()) {
            return Err(Error::Config(format!("rep_penalty must be a finite value >= 1, got {}", self.rep_penalty)));
        }
        Ok(())
    }
}

pub fn interpolate<T: Real>(p_ret: &TokenDistribution<T>, p_par: &TokenDistribution<T>, lambda: T) -> Result<TokenDistribution<T>> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if p_ret.len() != p_par.len() {
        return Err(Error::InvalidArgument("distributions cover different vocabularies".into()));
    }
    // the endpoints are exact copies, not 0 * x + 1 * y
    if lambda == T::zero() {
        return Ok(p_par.clone());
    }
    if lambda == T::one() {
        return Ok(p_ret.clone());
    }
    let mixed = p_ret
        .probs()
        .iter()
        .zip(p_par.probs())
        .map(|(&r, &p)| lambda * r + (T::one() - lambda) * p)
        .collect();
    Ok(TokenDistribution::from_raw(mixed))
}

/// Divides the mass of every token already in `prefix` by `penalty` and
/// renormalizes.
pub fn apply_repetition_penalty<T: Real>(dist: &TokenDistribution<T>, prefix: &[TokenId], penalty: T) -> TokenDistribution<T> {
    if penalty == T::one() || prefix.is_empty() {
        return dist.clone();
    }
    let seen: HashSet<TokenId> = prefix.iter().copied().collect();
    let mut probs = dist.probs().to_vec();
    for id in seen {
        if let Some(p) = probs.get_mut(id.index()) {
            *p /= penalty;
        }
    }
    let total: T = probs.iter().copied().sum();
    for p in &mut probs {
        *p /= total;
    }
    TokenDistribution::from_raw(probs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T> {
    pub step: usize,
    pub token: TokenId,
    pub p_par: T,
    /// `None` when the retrieval path is inactive.
    pub p_ret: Option<T>,
    pub p_fin: T,
    /// Sum of the final distribution at this step.
    pub mass: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub trace: Vec<TraceStep<T>>,
    pub hit_eos: bool,
}

/// Greedy decoding for `query`, with `c_ret` as the formatted exemplars
/// (empty means purely parametric).
pub fn decode<T, M>(model: &M, adapter: &M::Adapter, query: &str, c_ret: &str, cfg: &DecodeConfig) -> Result<Decoded<T>>
where
    T: Real,
    M: LanguageModel<T>,
{
    cfg.validate()?;
    let lambda = T::lit(cfg.lambda);
    let penalty = T::lit(cfg.rep_penalty);
    let par_ctx = model.encode_context(query);
    let ret_ctx = (!c_ret.is_empty()).then(|| model.encode_context(&format!("{c_ret}{query}")));

    let mut prefix: Vec<TokenId> = Vec::new();
    let mut trace = Vec::new();
    let mut hit_eos = false;
    while prefix.len() < cfg.max_tokens {
        let p_par = apply_repetition_penalty(&model.next_token_dist(Some(adapter), &par_ctx, &prefix)?, &prefix, penalty);
        let p_ret = match &ret_ctx {
            Some(ctx) => Some(apply_repetition_penalty(
                &model.next_token_dist(Some(adapter), ctx, &prefix)?,
                &prefix,
                penalty,
            )),
            None => None,
        };
        let p_fin = match &p_ret {
            Some(r) => interpolate(r, &p_par, lambda)?,
            None => p_par.clone(),
        };
        let tok = p_fin.argmax();
        trace.push(TraceStep {
            step: prefix.len(),
            token: tok,
            p_par: p_par.prob(tok),
            p_ret: p_ret.as_ref().map(|r| r.prob(tok)),
            p_fin: p_fin.prob(tok),
            mass: p_fin.sum(),
        });
        if tok == TokenId::EOS {
            hit_eos = true;
            break;
        }
        prefix.push(tok);
    }
    Ok(Decoded {
        text: model.vocab().detokenize(&prefix),
        tokens: prefix,
        trace,
        hit_eos,
    })
}

pub const TRACE_HEADER: &str = "step,token_id,p_par,p_ret,p_fin";

pub fn write_trace_csv<T: Real, W: Write>(trace: &[TraceStep<T>], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for s in trace {
        let p_ret = s.p_ret.map(|p| format!("{:.6}", p.as_f64())).unwrap_or_default();
        writeln!(out, "{},{},{:.6},{},{:.6}", s.step, s.token.0, s.p_par.as_f64(), p_ret, s.p_fin.as_f64())?;
    }
    Ok(())
}

//! Language-model backend contract and the shared tokenizer.
//!
//! A backend answers three questions: how likely is a response given a
//! context, what is the next-token distribution after a prefix, and what
//! adapter results from training on a set of samples. Adapters are values;
//! passing `None` for the adapter queries the frozen base model.

mod ngram;
mod remote;

use std::collections::HashMap;
use std::fmt::Debug;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use ngram::{Adapter, NgramBackend, NgramConfig, NgramCounts, NgramModel, TokenSeq};
pub use remote::{
    AdaptRequest, AdaptResponse, HttpTransport, LocalTransport, LogLikRequest, LogLikResponse, NextTokenProbs,
    NextTokenRequest, NextTokenResponse, RemoteAdapter, RemoteBackend, SampleWire, Transport,
    WIRE_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const UNK: TokenId = TokenId(0);
    pub const EOS: TokenId = TokenId(1);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

/// Lowercased alphanumeric runs. Whitespace and punctuation only separate
/// words and never become tokens themselves.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Dense token <-> id bijection with `<unk>` at 0 and `</s>` at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from every word in `texts`. Word ids follow
    /// lexicographic order so the result does not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all: Vec<String> = texts.into_iter().flat_map(words).collect();
        all.sort_unstable();
        all.dedup();
        Self::from_tokens(all)
    }

    fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(words.into_iter().filter(|w| w != UNK_TOKEN && w != EOS_TOKEN));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        // UNK and EOS are always present
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(TokenId::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn tokenize_with_eos(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.tokenize(text);
        ids.push(TokenId::EOS);
        ids
    }

    /// Context encoding: a blank line closes a segment, which is marked with
    /// `</s>`. Rendered exemplars therefore end exactly like training
    /// sequences do.
    pub fn tokenize_context(&self, text: &str) -> Vec<TokenId> {
        let normalized = text.replace("\r\n", "\n");
        let segments: Vec<&str> = normalized.split("\n\n").collect();
        let mut out = Vec::new();
        for (i, seg) in segments.iter().enumerate() {
            let ids = self.tokenize(seg);
            let closed = i + 1 < segments.len();
            if ids.is_empty() {
                continue;
            }
            out.extend(ids);
            if closed {
                out.push(TokenId::EOS);
            }
        }
        out
    }

    /// Joins generated tokens with single spaces, dropping `<unk>` and `</s>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != TokenId::UNK && id != TokenId::EOS)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens[2..].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        Ok(Vocab::from_tokens(words))
    }
}

/// Natural-log likelihood of a response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLik<T> {
    pub total_logprob: T,
    pub token_count: usize,
}

impl<T: Real> LogLik<T> {
    pub fn mean_logprob(&self) -> T {
        self.total_logprob / T::from_usize_lossy(self.token_count.max(1))
    }
}

/// Normalized probability vector indexed by [`TokenId`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution<T>(Vec<T>);

impl<T: Real> TokenDistribution<T> {
    /// Wraps a vector that is already normalized, checking the invariant.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidArgument("distribution has a negative or non-finite entry".into()));
        }
        let sum: T = probs.iter().copied().sum();
        if (sum - T::one()).abs() > T::norm_tolerance() {
            return Err(Error::InvalidArgument(format!("distribution sums to {sum}, not 1")));
        }
        Ok(TokenDistribution(probs))
    }

    /// Divides non-negative weights by their sum.
    pub fn from_weights(mut weights: Vec<T>) -> Result<Self> {
        if weights.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
        }
        let sum: T = weights.iter().copied().sum();
        if !(sum > T::zero()) {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Ok(TokenDistribution(weights))
    }

    pub fn uniform(n: usize) -> Self {
        TokenDistribution(vec![T::one() / T::from_usize_lossy(n); n])
    }

    pub(crate) fn from_raw(probs: Vec<T>) -> Self {
        TokenDistribution(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> T {
        self.0.get(id.index()).copied().unwrap_or_else(T::zero)
    }

    pub fn probs(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn sum(&self) -> T {
        self.0.iter().copied().sum()
    }

    /// Highest-probability token; ties resolve to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }
}

/// Value-typed adapter state owned by a single user's pipeline.
pub trait AdapterState: Clone + Debug + PartialEq + Serialize + DeserializeOwned + Send + Sync {
    /// Period of the last update, `None` for a fresh adapter.
    fn generation_period(&self) -> Option<usize>;

    /// Copy with the generation advanced by one and parameters unchanged.
    fn advanced(&self) -> Self;

    fn is_empty(&self) -> bool;
}

pub(crate) fn next_generation(current: Option<usize>) -> Option<usize> {
    Some(current.map_or(0, |g| g + 1))
}

/// Backend contract consumed by drift scoring, training and decoding.
pub trait LanguageModel<T: Real>: Send + Sync {
    type Adapter: AdapterState;
    /// Pre-encoded conditioning context, reused across decoding steps.
    type Context: Clone + Send + Sync;

    fn vocab(&self) -> &Vocab;

    fn fresh_adapter(&self) -> Self::Adapter;

    fn encode_context(&self, text: &str) -> Self::Context;

    /// Sum of `ln p(token | context, preceding response tokens)` over the
    /// response. Fails on an empty response.
    fn log_likelihood(&self, adapter: Option<&Self::Adapter>, context: &str, response: &str) -> Result<LogLik<T>>;

    fn next_token_dist(
        &self,
        adapter: Option<&Self::Adapter>,
        context: &Self::Context,
        prefix: &[TokenId],
    ) -> Result<TokenDistribution<T>>;

    /// New adapter trained on `samples` (query, response) on top of `adapter`.
    fn adapt(&self, adapter: &Self::Adapter, samples: &[(&str, &str)], weight: T) -> Result<Self::Adapter>;
}

//! BM25 retrieval over a replay buffer, threshold calibration and gating of
//! the retrieved exemplars.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::buffer::BufferEntry;
use crate::error::{Error, Result};
use crate::lm::words;
use crate::scalar::Real;
use crate::stats::quantile;

/// Exemplar block rendered for every hit that passes the gate.
pub const EXEMPLAR_TEMPLATE: &str = "Example:\nQuery: {query}\nResponse: {response}\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Floor for every idf, as a fraction of the mean idf.
    pub epsilon: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.5,
            b: 0.75,
            epsilon: 0.25,
        }
    }
}

pub struct Bm25Index<'a, T> {
    entries: &'a [BufferEntry<T>],
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    idf: HashMap<String, f64>,
    params: Bm25Params,
}

impl<'a, T: Real> Bm25Index<'a, T> {
    /// Indexes each entry's query followed by its response.
    pub fn build(entries: &'a [BufferEntry<T>], params: Bm25Params) -> Self {
        let mut term_freqs = Vec::with_capacity(entries.len());
        let mut doc_lens = Vec::with_capacity(entries.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for e in entries {
            let toks = words(&e.interaction.joined_text());
            doc_lens.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let n = entries.len() as f64;
        let total: usize = doc_lens.iter().sum();
        let avg_len = if entries.is_empty() { 0.0 } else { total as f64 / n };
        // the "+1" form stays positive even for terms in half the corpus
        let mut idf: HashMap<String, f64> = df
            .into_iter()
            .map(|(t, d)| (t, (1.0 + (n - d as f64 + 0.5) / (d as f64 + 0.5)).ln()))
            .collect();
        if !idf.is_empty() {
            let floor = params.epsilon * idf.values().sum::<f64>() / idf.len() as f64;
            for v in idf.values_mut() {
                *v = v.max(floor);
            }
        }
        Bm25Index {
            entries,
            term_freqs,
            doc_lens,
            avg_len,
            idf,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &'a [BufferEntry<T>] {
        self.entries
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.idf.get(term).copied()
    }

    /// BM25 score of every document for `query`, in index order.
    pub fn scores(&self, query: &str) -> Vec<T> {
        let q = words(query);
        let Bm25Params { k1, b, .. } = self.params;
        (0..self.len())
            .map(|d| {
                let norm = k1 * (1.0 - b + b * self.doc_lens[d] as f64 / self.avg_len);
                let s: f64 = q
                    .iter()
                    .filter_map(|t| {
                        let tf = *self.term_freqs[d].get(t)? as f64;
                        Some(self.idf[t] * tf * (k1 + 1.0) / (tf + norm))
                    })
                    .sum();
                T::lit(s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit<'a, T> {
    pub index: usize,
    pub entry: &'a BufferEntry<T>,
    pub score: T,
    /// `score > sigma`, strictly. Set by [`gate`]; `false` before gating.
    pub passed_gate: bool,
}

/// Top `k` documents by score, earlier timestamp first on ties.
pub fn retrieve<'a, T: Real>(index: &Bm25Index<'a, T>, query: &str, k: usize) -> Vec<RetrievalHit<'a, T>> {
    let scores = index.scores(query);
    let entries = index.entries();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(entries[a].interaction.timestamp.cmp(&entries[b].interaction.timestamp))
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| RetrievalHit {
            index: i,
            entry: &entries[i],
            score: scores[i],
            passed_gate: false,
        })
        .collect()
}

pub fn gate<T: Real>(hits: &mut [RetrievalHit<'_, T>], sigma: T) {
    for h in hits {
        h.passed_gate = h.score > sigma;
    }
}

/// Third quartile of the observed scores; `+inf` (a closed gate) when none
/// have been observed.
pub fn calibrate_sigma<T: Real>(scores: &[T]) -> T {
    quantile(scores, 0.75).unwrap_or_else(T::infinity)
}

/// Substitutes `{query}` and `{response}` in one pass, so placeholder-like
/// text inside the values is left alone.
pub fn render_exemplar(template: &str, query: &str, response: &str) -> String {
    let mut out = String::with_capacity(template.len() + query.len() + response.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(r) = tail.strip_prefix("{query}") {
            out.push_str(query);
            rest = r;
        } else if let Some(r) = tail.strip_prefix("{response}") {
            out.push_str(response);
            rest = r;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Renders the hits scoring strictly above `sigma`, in the given order.
pub fn gate_and_format<T: Real>(hits: &[RetrievalHit<'_, T>], sigma: T, template: &str) -> String {
    hits.iter()
        .filter(|h| h.score > sigma)
        .map(|h| render_exemplar(template, &h.entry.interaction.query, &h.entry.interaction.response))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    Fixed,
    #[default]
    #[serde(alias = "calibrated-q3")]
    CalibratedQ3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub k: usize,
    /// Used when `sigma_mode` is `fixed`. `null` in config files means a
    /// closed gate.
    pub sigma: Option<f64>,
    pub sigma_mode: SigmaMode,
    /// Disables retrieval entirely, independent of sigma.
    pub enabled: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            k: 2,
            sigma: None,
            sigma_mode: SigmaMode::CalibratedQ3,
            enabled: true,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("retrieval k must be at least 1".into()));
        }
        if matches!(self.sigma, Some(s) if s.is_nan()) {
            return Err(Error::Config("sigma must not be NaN".into()));
        }
        Ok(())
    }

    /// Threshold for a period given every retrieval score observed so far.
    pub fn sigma_for<T: Real>(&self, observed: &[T]) -> T {
        if !self.enabled {
            return T::infinity();
        }
        match self.sigma_mode {
            SigmaMode::Fixed => self.sigma.map_or_else(T::infinity, T::lit),
            SigmaMode::CalibratedQ3 => calibrate_sigma(observed),
        }
    }
}

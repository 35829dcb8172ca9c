//! Native n-gram backend.
//!
//! Probabilities are built level by level, from the uniform distribution up
//! to the longest available context:
//!
//! ```text
//! p_j(w | h_j) = (c(h_j w) + k·V·p_{j-1}(w)) / (c(h_j) + k·V)
//! ```
//!
//! A level whose context was never observed is skipped, which backs off to
//! the shorter context. With a uniform lower level this is exactly add-k
//! smoothing. The adapter uses the same recursion over its own count tables,
//! starting from the base distribution instead of the uniform one, so an
//! adapter with no mass for a context reproduces the base model.
//!
//! On top of the mixture sits a copy component: when the tail of the
//! conditioning sequence re-occurs earlier in the context, the tokens that
//! followed those earlier occurrences receive `copy_weight` of the mass.

use std::collections::HashSet;

use fnv::FnvHashMap;
use serde::{Deserialize, Serialize};

use super::{next_generation, AdapterState, LanguageModel, LogLik, TokenDistribution, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub type TokenSeq = Vec<TokenId>;

#[derive(Debug, Clone, PartialEq, Default)]
struct ContextCounts<T> {
    total: T,
    next: FnvHashMap<TokenId, T>,
}

/// Weighted n-gram counts indexed by context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CountsRepr<T>", from = "CountsRepr<T>", bound = "T: Real")]
pub struct NgramCounts<T> {
    order: usize,
    tables: Vec<FnvHashMap<TokenSeq, ContextCounts<T>>>,
}

impl<T: Real> NgramCounts<T> {
    pub fn new(order: usize) -> Self {
        let order = order.max(1);
        NgramCounts {
            order,
            tables: vec![FnvHashMap::default(); order],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_empty(&self) -> bool {
        self.tables.iter().all(|t| t.is_empty())
    }

    /// Adds `weight` to a single table entry (context length = `context.len()`).
    pub fn add_count(&mut self, context: &[TokenId], target: TokenId, weight: T) {
        assert!(context.len() < self.order, "context longer than model order");
        let entry = self.tables[context.len()].entry(context.to_vec()).or_default();
        entry.total += weight;
        *entry.next.entry(target).or_insert_with(T::zero) += weight;
    }

    /// Adds an observed (context, target) pair at every suffix of `context`
    /// up to the model order.
    pub fn add_ngram(&mut self, context: &[TokenId], target: TokenId, weight: T) {
        let longest = context.len().min(self.order - 1);
        for j in 0..=longest {
            self.add_count(&context[context.len() - j..], target, weight);
        }
    }

    /// Counts every n-gram of `seq`. N-grams touching `<unk>` are ignored so
    /// unknown-token mass comes only from smoothing.
    pub fn add_sequence(&mut self, seq: &[TokenId], weight: T) {
        for i in 0..seq.len() {
            if seq[i] == TokenId::UNK {
                continue;
            }
            for j in 0..self.order.min(i + 1) {
                let ctx = &seq[i - j..i];
                if ctx.contains(&TokenId::UNK) {
                    break;
                }
                self.add_count(ctx, seq[i], weight);
            }
        }
    }

    pub fn count(&self, context: &[TokenId], target: TokenId) -> T {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .and_then(|c| c.next.get(&target))
            .copied()
            .unwrap_or_else(T::zero)
    }

    pub fn context_total(&self, context: &[TokenId]) -> T {
        self.tables
            .get(context.len())
            .and_then(|t| t.get(context))
            .map_or_else(T::zero, |c| c.total)
    }

    fn levels<'a>(&'a self, history: &'a [TokenId]) -> impl Iterator<Item = &'a ContextCounts<T>> + 'a {
        (0..self.order.min(history.len() + 1)).filter_map(move |j| {
            self.tables[j]
                .get(&history[history.len() - j..])
                .filter(|c| c.total > T::zero())
        })
    }

    /// Applies every observed level on top of `lower`, in place.
    fn refine_dense(&self, history: &[TokenId], lower: &mut [T], prior: T) {
        for level in self.levels(history) {
            let denom = level.total + prior;
            for (w, p) in lower.iter_mut().enumerate() {
                let c = level.next.get(&TokenId(w as u32)).copied().unwrap_or_else(T::zero);
                *p = (c + prior * *p) / denom;
            }
        }
    }

    fn refine_scalar(&self, history: &[TokenId], target: TokenId, mut p: T, prior: T) -> T {
        for level in self.levels(history) {
            let c = level.next.get(&target).copied().unwrap_or_else(T::zero);
            p = (c + prior * p) / (level.total + prior);
        }
        p
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct CountsRepr<T> {
    order: usize,
    entries: Vec<CountEntry<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct CountEntry<T> {
    context: Vec<u32>,
    total: T,
    next: Vec<(u32, T)>,
}

impl<T: Real> From<NgramCounts<T>> for CountsRepr<T> {
    fn from(c: NgramCounts<T>) -> Self {
        let mut entries: Vec<CountEntry<T>> = c
            .tables
            .into_iter()
            .flat_map(|t| t.into_iter())
            .map(|(ctx, cc)| {
                let mut next: Vec<(u32, T)> = cc.next.into_iter().map(|(k, v)| (k.0, v)).collect();
                next.sort_by_key(|(k, _)| *k);
                CountEntry {
                    context: ctx.iter().map(|t| t.0).collect(),
                    total: cc.total,
                    next,
                }
            })
            .collect();
        entries.sort_by(|a, b| (a.context.len(), &a.context).cmp(&(b.context.len(), &b.context)));
        CountsRepr {
            order: c.order,
            entries,
        }
    }
}

impl<T: Real> From<CountsRepr<T>> for NgramCounts<T> {
    fn from(r: CountsRepr<T>) -> Self {
        let mut counts = NgramCounts::new(r.order);
        for e in r.entries {
            let len = e.context.len();
            if len >= counts.order {
                continue;
            }
            let ctx: TokenSeq = e.context.into_iter().map(TokenId).collect();
            counts.tables[len].insert(
                ctx,
                ContextCounts {
                    total: e.total,
                    next: e.next.into_iter().map(|(k, v)| (TokenId(k), v)).collect(),
                },
            );
        }
        counts
    }
}

/// Per-user parametric delta: count tables mixed with the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Adapter<T> {
    pub counts: NgramCounts<T>,
    pub generation_period: Option<usize>,
}

impl<T: Real> Adapter<T> {
    pub fn new(order: usize) -> Self {
        Adapter {
            counts: NgramCounts::new(order),
            generation_period: None,
        }
    }
}

impl<T: Real> AdapterState for Adapter<T> {
    fn generation_period(&self) -> Option<usize> {
        self.generation_period
    }

    fn advanced(&self) -> Self {
        Adapter {
            counts: self.counts.clone(),
            generation_period: next_generation(self.generation_period),
        }
    }

    fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramConfig {
    pub order: usize,
    pub add_k: f64,
    /// Weight of the adapter distribution in the adapted mixture.
    pub beta: f64,
    pub copy_weight: f64,
    pub copy_min_match: usize,
    pub copy_max_match: usize,
    /// Words the copy component looks through: the exemplar scaffolding.
    pub copy_ignore: Vec<String>,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            order: 3,
            add_k: 0.1,
            beta: 0.5,
            copy_weight: 0.5,
            copy_min_match: 2,
            copy_max_match: 8,
            copy_ignore: vec!["example".into(), "query".into(), "response".into()],
        }
    }
}

impl NgramConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.order == 0 {
            return Err(Error::Config("ngram order must be at least 1".into()));
        }
        if !(self.add_k >= 0.0 && self.add_k.is_finite()) {
            return Err(Error::Config("add_k must be finite and non-negative".into()));
        }
        if !unit(self.beta) || !unit(self.copy_weight) {
            return Err(Error::Config("beta and copy_weight must lie in [0, 1]".into()));
        }
        if self.copy_min_match == 0 || self.copy_max_match < self.copy_min_match {
            return Err(Error::Config("copy match window must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Frozen base model: vocabulary, counts and smoothing constant.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel<T> {
    vocab: Vocab,
    counts: NgramCounts<T>,
    add_k: T,
}

impl<T: Real> NgramModel<T> {
    pub fn new(vocab: Vocab, counts: NgramCounts<T>, add_k: T) -> Self {
        NgramModel { vocab, counts, add_k }
    }

    /// Counts each sequence once.
    pub fn train(vocab: Vocab, order: usize, add_k: T, sequences: impl IntoIterator<Item = TokenSeq>) -> Self {
        let mut counts = NgramCounts::new(order);
        for seq in sequences {
            counts.add_sequence(&seq, T::one());
        }
        NgramModel::new(vocab, counts, add_k)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn counts(&self) -> &NgramCounts<T> {
        &self.counts
    }

    pub fn order(&self) -> usize {
        self.counts.order
    }

    fn prior(&self) -> T {
        self.add_k * T::from_usize_lossy(self.vocab.len())
    }

    fn uniform(&self) -> T {
        T::one() / T::from_usize_lossy(self.vocab.len())
    }

    pub fn prob(&self, history: &[TokenId], target: TokenId) -> T {
        self.counts.refine_scalar(history, target, self.uniform(), self.prior())
    }

    pub fn dense(&self, history: &[TokenId]) -> Vec<T> {
        let mut p = vec![self.uniform(); self.vocab.len()];
        self.counts.refine_dense(history, &mut p, self.prior());
        p
    }
}

/// Encoded context for the native backend.
#[derive(Debug, Clone, PartialEq)]
pub struct NativeContext {
    tokens: TokenSeq,
    copy_view: TokenSeq,
}

/// The native backend: base n-gram model + count-delta adapters + copy.
#[derive(Debug, Clone)]
pub struct NgramBackend<T> {
    model: NgramModel<T>,
    cfg: NgramConfig,
    beta: T,
    copy_weight: T,
    ignored: HashSet<TokenId>,
}

impl<T: Real> NgramBackend<T> {
    pub fn new(model: NgramModel<T>, cfg: NgramConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.order != model.order() {
            return Err(Error::Config(format!(
                "backend order {} does not match model order {}",
                cfg.order,
                model.order()
            )));
        }
        let mut ignored: HashSet<TokenId> = cfg
            .copy_ignore
            .iter()
            .filter(|w| model.vocab().contains(w))
            .map(|w| model.vocab().id(w))
            .collect();
        ignored.insert(TokenId::UNK);
        Ok(NgramBackend {
            beta: T::lit(cfg.beta),
            copy_weight: T::lit(cfg.copy_weight),
            model,
            cfg,
            ignored,
        })
    }

    /// Trains the base model on `texts` (one sequence per text, `</s>`
    /// appended).
    pub fn from_texts<'a>(vocab: Vocab, cfg: NgramConfig, texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let seqs: Vec<TokenSeq> = texts.into_iter().map(|t| vocab.tokenize_with_eos(t)).collect();
        let model = NgramModel::train(vocab, cfg.order, T::lit(cfg.add_k), seqs);
        Self::new(model, cfg)
    }

    pub fn model(&self) -> &NgramModel<T> {
        &self.model
    }

    pub fn config(&self) -> &NgramConfig {
        &self.cfg
    }

    /// Token sequence an adapter is trained on for one sample.
    pub fn sample_sequence(&self, query: &str, response: &str) -> TokenSeq {
        let vocab = self.model.vocab();
        let mut seq = vocab.tokenize_context(query);
        seq.extend(vocab.tokenize(response));
        seq.push(TokenId::EOS);
        seq
    }

    fn history<'a>(&self, full: &'a [TokenId]) -> &'a [TokenId] {
        let keep = (self.cfg.order - 1).min(full.len());
        &full[full.len() - keep..]
    }

    fn copy_filter(&self, seq: &[TokenId]) -> TokenSeq {
        seq.iter().copied().filter(|t| !self.ignored.contains(t)).collect()
    }

    /// Successors of the longest earlier re-occurrence of the sequence tail.
    fn copy_successors(&self, seq: &[TokenId]) -> Option<Vec<TokenId>> {
        if self.cfg.copy_weight == 0.0 || seq.len() < self.cfg.copy_min_match + 1 {
            return None;
        }
        let n = seq.len();
        let mut best = 0;
        let mut successors = Vec::new();
        for p in 0..n - 1 {
            let mut len = 0;
            while len < self.cfg.copy_max_match && len <= p && seq[p - len] == seq[n - 1 - len] {
                len += 1;
            }
            if len < self.cfg.copy_min_match || len < best {
                continue;
            }
            if len > best {
                best = len;
                successors.clear();
            }
            successors.push(seq[p + 1]);
        }
        (!successors.is_empty()).then_some(successors)
    }

    fn mixed_scalar(&self, adapter: Option<&Adapter<T>>, history: &[TokenId], target: TokenId) -> T {
        let base = self.model.prob(history, target);
        match adapter {
            Some(a) if !a.counts.is_empty() => {
                let adapted = a.counts.refine_scalar(history, target, base, self.model.prior());
                (T::one() - self.beta) * base + self.beta * adapted
            }
            _ => base,
        }
    }

    fn mixed_dense(&self, adapter: Option<&Adapter<T>>, history: &[TokenId]) -> Vec<T> {
        let base = self.model.dense(history);
        match adapter {
            Some(a) if !a.counts.is_empty() => {
                let mut adapted = base.clone();
                a.counts.refine_dense(history, &mut adapted, self.model.prior());
                base.iter()
                    .zip(&adapted)
                    .map(|(&b, &p)| (T::one() - self.beta) * b + self.beta * p)
                    .collect()
            }
            _ => base,
        }
    }

    /// `p(target | full)` where `full` is context ⊕ prefix and `copy_view`
    /// its copy-filtered form.
    fn prob(&self, adapter: Option<&Adapter<T>>, full: &[TokenId], copy_view: &[TokenId], target: TokenId) -> T {
        let p = self.mixed_scalar(adapter, self.history(full), target);
        match self.copy_successors(copy_view) {
            Some(succ) => {
                let hits = succ.iter().filter(|&&t| t == target).count();
                let copy = T::from_usize_lossy(hits) / T::from_usize_lossy(succ.len());
                (T::one() - self.copy_weight) * p + self.copy_weight * copy
            }
            None => p,
        }
    }
}

impl<T: Real> LanguageModel<T> for NgramBackend<T> {
    type Adapter = Adapter<T>;
    type Context = NativeContext;

    fn vocab(&self) -> &Vocab {
        self.model.vocab()
    }

    fn fresh_adapter(&self) -> Adapter<T> {
        Adapter::new(self.cfg.order)
    }

    fn encode_context(&self, text: &str) -> NativeContext {
        let tokens = self.model.vocab().tokenize_context(text);
        let copy_view = self.copy_filter(&tokens);
        NativeContext { tokens, copy_view }
    }

    fn log_likelihood(&self, adapter: Option<&Adapter<T>>, context: &str, response: &str) -> Result<LogLik<T>> {
        let response = self.model.vocab().tokenize(response);
        if response.is_empty() {
            return Err(Error::InvalidArgument("response has no tokens".into()));
        }
        let ctx = self.encode_context(context);
        let mut full = ctx.tokens;
        let mut copy_view = ctx.copy_view;
        let mut total = T::zero();
        for &tok in &response {
            total += self.prob(adapter, &full, &copy_view, tok).ln();
            full.push(tok);
            if !self.ignored.contains(&tok) {
                copy_view.push(tok);
            }
        }
        Ok(LogLik {
            total_logprob: total,
            token_count: response.len(),
        })
    }

    fn next_token_dist(
        &self,
        adapter: Option<&Adapter<T>>,
        context: &NativeContext,
        prefix: &[TokenId],
    ) -> Result<TokenDistribution<T>> {
        let keep = (self.cfg.order - 1).min(context.tokens.len() + prefix.len());
        let mut tail: TokenSeq = context.tokens.iter().chain(prefix).copied().collect();
        tail.drain(..tail.len() - keep);
        let mut probs = self.mixed_dense(adapter, &tail);

        let mut copy_view = context.copy_view.clone();
        copy_view.extend(prefix.iter().copied().filter(|t| !self.ignored.contains(t)));
        if let Some(succ) = self.copy_successors(&copy_view) {
            let share = self.copy_weight / T::from_usize_lossy(succ.len());
            for p in probs.iter_mut() {
                *p *= T::one() - self.copy_weight;
            }
            for t in succ {
                probs[t.index()] += share;
            }
        }
        Ok(TokenDistribution::from_raw(probs))
    }

    fn adapt(&self, adapter: &Adapter<T>, samples: &[(&str, &str)], weight: T) -> Result<Adapter<T>> {
        if !(weight > T::zero() && weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("adaptation weight must be positive, got {weight}")));
        }
        let mut next = adapter.advanced();
        for (q, r) in samples {
            next.counts.add_sequence(&self.sample_sequence(q, r), weight);
        }
        Ok(next)
    }
}

//! Construction of the frozen base model shared by every user.

use std::path::Path;
use std::time::Duration;

use crate::corpus::{period_batches, UserStream};
use crate::error::{Error, Result};
use crate::lm::{HttpTransport, NgramBackend, NgramModel, RemoteBackend, TokenId, TokenSeq, Vocab};
use crate::scalar::Real;

use super::config::{RunConfig, VocabScope};

/// Non-empty lines of a plain-text corpus file.
pub fn load_background(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Texts the base model trains on: background documents, then (query,
/// response) pairs from every user's period-0 training split.
pub struct BaseCorpus {
    pub documents: Vec<String>,
    pub pairs: Vec<(String, String)>,
}

impl BaseCorpus {
    pub fn collect(cfg: &RunConfig, streams: &[UserStream], background: Vec<String>) -> Self {
        let mut pairs = Vec::new();
        if cfg.backend.base_include_period0 {
            for s in streams {
                // unusable streams fail later, per user
                if let Ok(batches) = period_batches(s, cfg.n_periods, cfg.train_ratio) {
                    pairs.extend(batches[0].train.iter().map(|i| (i.query.clone(), i.response.clone())));
                }
            }
        }
        BaseCorpus {
            documents: background,
            pairs,
        }
    }

    pub fn from_config(cfg: &RunConfig, streams: &[UserStream]) -> Result<Self> {
        let background = match &cfg.backend.base_corpus {
            Some(p) => load_background(p)?,
            None => Vec::new(),
        };
        Ok(Self::collect(cfg, streams, background))
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty() && self.pairs.is_empty()
    }

    pub fn vocab(&self, scope: VocabScope, streams: &[UserStream]) -> Vocab {
        let base = self
            .documents
            .iter()
            .map(String::as_str)
            .chain(self.pairs.iter().flat_map(|(q, r)| [q.as_str(), r.as_str()]));
        match scope {
            VocabScope::Base => Vocab::build(base),
            VocabScope::Dataset => Vocab::build(base.chain(
                streams
                    .iter()
                    .flat_map(|s| s.interactions.iter().flat_map(|i| [i.query.as_str(), i.response.as_str()])),
            )),
        }
    }

    pub fn sequences(&self, vocab: &Vocab) -> Vec<TokenSeq> {
        let docs = self.documents.iter().map(|d| vocab.tokenize_with_eos(d));
        let pairs = self.pairs.iter().map(|(q, r)| {
            let mut seq = vocab.tokenize_context(q);
            seq.extend(vocab.tokenize(r));
            seq.push(TokenId::EOS);
            seq
        });
        docs.chain(pairs).collect()
    }
}

pub fn build_native<T: Real>(cfg: &RunConfig, streams: &[UserStream]) -> Result<NgramBackend<T>> {
    let corpus = BaseCorpus::from_config(cfg, streams)?;
    build_native_from(cfg, streams, &corpus)
}

pub fn build_native_from<T: Real>(cfg: &RunConfig, streams: &[UserStream], corpus: &BaseCorpus) -> Result<NgramBackend<T>> {
    if corpus.is_empty() {
        log::warn!("base model has no training text; it starts uniform");
    }
    let vocab = corpus.vocab(cfg.backend.vocab_scope, streams);
    let ncfg = cfg.backend.native.clone();
    let model = NgramModel::train(vocab.clone(), ncfg.order, T::lit(ncfg.add_k), corpus.sequences(&vocab));
    log::info!("native base model: {} word types, order {}", vocab.len(), ncfg.order);
    NgramBackend::new(model, ncfg)
}

pub fn build_remote<T: Real>(cfg: &RunConfig, streams: &[UserStream]) -> Result<RemoteBackend<T, HttpTransport>> {
    let corpus = BaseCorpus::from_config(cfg, streams)?;
    let vocab = corpus.vocab(cfg.backend.vocab_scope, streams);
    let r = &cfg.backend.remote;
    let transport = HttpTransport::new(r.url.clone(), Duration::from_secs(r.timeout_secs))?;
    Ok(RemoteBackend::new(transport, vocab, r.prompt_template.clone()))
}

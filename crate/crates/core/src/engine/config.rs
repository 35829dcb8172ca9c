use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::buffer::{ClusterConfig, RetentionConfig, RetentionPolicy};
use crate::corpus::FieldMapping;
use crate::decode::DecodeConfig;
use crate::drift::{LikelihoodMode, SelectionConfig, SelectionMode};
use crate::error::{Error, Result};
use crate::lm::NgramConfig;
use crate::retrieval::{Bm25Params, GateConfig, SigmaMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Native,
    Remote,
}

/// Which texts define the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabScope {
    /// Base-training texts only; everything else maps to `<unk>`.
    Base,
    /// Base-training texts plus every interaction in the dataset. Only the
    /// word list is shared, never counts.
    #[default]
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout_secs: u64,
    /// Wraps every context; `{query}` marks the insertion point.
    pub prompt_template: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            url: "http://127.0.0.1:8080".into(),
            timeout_secs: 120,
            prompt_template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Plain-text background corpus, one document per non-empty line.
    pub base_corpus: Option<PathBuf>,
    /// Also train the base model on every user's period-0 training split.
    pub base_include_period0: bool,
    pub vocab_scope: VocabScope,
    pub native: NgramConfig,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Native,
            base_corpus: None,
            base_include_period0: true,
            vocab_scope: VocabScope::Dataset,
            native: NgramConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

/// Every knob of a run. Defaults reproduce the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub likelihood: LikelihoodMode,
    pub top_percent: f64,
    pub selection_mode: SelectionMode,
    pub n_max: usize,
    pub retention_policy: RetentionPolicy,
    pub retrieval_k: usize,
    /// `false` disables retrieval (parametric-only decoding).
    pub gating: bool,
    pub sigma_mode: SigmaMode,
    /// Threshold for `sigma_mode = "fixed"`; absent means a closed gate.
    pub sigma: Option<f64>,
    pub lambda: f64,
    pub rep_penalty: f64,
    pub max_tokens: usize,
    pub n_periods: usize,
    pub train_ratio: f64,
    /// Weight of each adaptation sample.
    pub adapt_weight: f64,
    /// Train the initial adapter on period 0's test split as well.
    pub period0_include_test: bool,
    pub seed: u64,
    /// Worker threads for the per-user pool; absent uses every core.
    pub threads: Option<usize>,
    pub embed_dim: usize,
    pub write_traces: bool,
    /// Stop (after checkpointing) once this period is complete.
    pub stop_after_period: Option<usize>,
    pub cluster: ClusterConfig,
    pub bm25: Bm25Params,
    pub backend: BackendConfig,
    pub schema: FieldMapping,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 1.0,
            likelihood: LikelihoodMode::Total,
            top_percent: 30.0,
            selection_mode: SelectionMode::Top,
            n_max: 50,
            retention_policy: RetentionPolicy::GlobalHighest,
            retrieval_k: 2,
            gating: true,
            sigma_mode: SigmaMode::CalibratedQ3,
            sigma: None,
            lambda: 0.5,
            rep_penalty: 1.2,
            max_tokens: 600,
            n_periods: 5,
            train_ratio: 0.9,
            adapt_weight: 1.0,
            period0_include_test: false,
            seed: 0,
            threads: None,
            embed_dim: 256,
            write_traces: false,
            stop_after_period: None,
            cluster: ClusterConfig::default(),
            bm25: Bm25Params::default(),
            backend: BackendConfig::default(),
            schema: FieldMapping::default(),
        }
    }
}

/// Independent stream of randomness per (user, period, purpose).
pub fn derive_seed(base: u64, user: &str, period: usize, purpose: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(base);
    h.write(user.as_bytes());
    h.write_u8(0xff);
    h.write_u64(period as u64);
    h.write(purpose.as_bytes());
    h.finish()
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&raw)?
        } else {
            Self::from_toml(&raw)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.alpha.is_finite() {
            return bad(format!("alpha must be finite, got {}", self.alpha));
        }
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return bad(format!("top_percent must lie in (0, 100], got {}", self.top_percent));
        }
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        if self.n_periods < 2 {
            return bad("n_periods must be at least 2 (period 0 plus one evaluated period)".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio));
        }
        if !(self.adapt_weight > 0.0 && self.adapt_weight.is_finite()) {
            return bad(format!("adapt_weight must be positive, got {}", self.adapt_weight));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.cluster.k_min > self.cluster.k_max {
            return bad("cluster.k_min exceeds cluster.k_max".into());
        }
        if !(self.bm25.k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25.b) && self.bm25.epsilon >= 0.0) {
            return bad("bm25 parameters out of range".into());
        }
        self.gate().validate()?;
        self.decode().validate()?;
        self.backend.native.validate()?;
        Ok(())
    }

    pub fn selection(&self, user: &str, period: usize) -> SelectionConfig {
        SelectionConfig {
            top_percent: self.top_percent,
            mode: self.selection_mode,
            seed: derive_seed(self.seed, user, period, "selection"),
        }
    }

    pub fn retention(&self, user: &str, period: usize) -> RetentionConfig {
        RetentionConfig {
            policy: self.retention_policy,
            n_max: self.n_max,
            seed: derive_seed(self.seed, user, period, "retention"),
            cluster: ClusterConfig {
                seed: derive_seed(self.seed, user, period, "kmeans"),
                ..self.cluster
            },
        }
    }

    pub fn gate(&self) -> GateConfig {
        GateConfig {
            k: self.retrieval_k,
            sigma: self.sigma,
            sigma_mode: self.sigma_mode,
            enabled: self.gating,
        }
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            lambda: self.lambda,
            max_tokens: self.max_tokens,
            rep_penalty: self.rep_penalty,
        }
    }

    /// The settings that determine results. Runs with equal fingerprints
    /// may resume each other's checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        c.stop_after_period = None;
        c.write_traces = false;
        serde_json::to_string(&c).expect("config serializes")
    }
}

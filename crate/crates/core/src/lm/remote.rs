//! Client side of the remote backend protocol (`v1`).
//!
//! ```text
//! POST /v1/loglik     {context, response, adapter_id?}  -> {total_logprob, token_count}
//! POST /v1/next_token {context, prefix, adapter_id?}    -> {probs: [p, ...] | {"id": p, ...}}
//! POST /v1/adapt      {adapter_id, samples, weight}     -> {adapter_id}
//! ```
//!
//! `prefix` is a list of token ids in the shared vocabulary; `adapter_id`
//! is `null` for the base model and for the first adaptation of a user.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;
use std::marker::PhantomData;
use std::sync::Mutex;
use std::time::Duration;

use fnv::FnvHasher;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{next_generation, AdapterState, LanguageModel, LogLik, TokenDistribution, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const WIRE_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLikRequest {
    pub context: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLikResponse {
    pub total_logprob: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTokenRequest {
    pub context: String,
    pub prefix: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
}

/// Either a dense vector over the vocabulary or a sparse id -> p map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextTokenProbs {
    Dense(Vec<f64>),
    /// Keys are decimal token ids.
    Sparse(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTokenResponse {
    pub probs: NextTokenProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWire {
    pub query: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRequest {
    pub adapter_id: Option<String>,
    pub samples: Vec<SampleWire>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptResponse {
    pub adapter_id: String,
}

/// Carries JSON bodies to an endpoint path such as `/v1/loglik`.
pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: Value) -> Result<Value>;
}

pub struct HttpTransport {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Remote(e.to_string()))?;
        Ok(HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: Value) -> Result<Value> {
        let url = format!("{}{}", self.base_url, path);
        let resp = self
            .client
            .post(&url)
            .json(&body)
            .send()
            .map_err(|e| Error::Remote(format!("{url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Remote(format!("{url}: HTTP {status}")));
        }
        resp.json::<Value>().map_err(|e| Error::Remote(format!("{url}: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteAdapter {
    pub adapter_id: Option<String>,
    pub generation_period: Option<usize>,
}

impl AdapterState for RemoteAdapter {
    fn generation_period(&self) -> Option<usize> {
        self.generation_period
    }

    fn advanced(&self) -> Self {
        RemoteAdapter {
            adapter_id: self.adapter_id.clone(),
            generation_period: next_generation(self.generation_period),
        }
    }

    fn is_empty(&self) -> bool {
        self.adapter_id.is_none()
    }
}

/// Backend that forwards every call over a [`Transport`]. The server must
/// share the local vocabulary for `next_token` ids to line up.
pub struct RemoteBackend<T, Tr> {
    transport: Tr,
    vocab: Vocab,
    prompt_template: Option<String>,
    _scalar: PhantomData<T>,
}

impl<T: Real, Tr: Transport> RemoteBackend<T, Tr> {
    /// `prompt_template`, when set, wraps each context; `{query}` marks
    /// where the context text goes.
    pub fn new(transport: Tr, vocab: Vocab, prompt_template: Option<String>) -> Self {
        RemoteBackend {
            transport,
            vocab,
            prompt_template,
            _scalar: PhantomData,
        }
    }

    fn wrap(&self, context: &str) -> String {
        match &self.prompt_template {
            Some(t) => t.replace("{query}", context),
            None => context.to_string(),
        }
    }

    fn call<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, endpoint: &str, req: &Req) -> Result<Resp> {
        let path = format!("/{WIRE_VERSION}/{endpoint}");
        let value = self.transport.post(&path, serde_json::to_value(req)?)?;
        serde_json::from_value(value).map_err(|e| Error::Remote(format!("{path}: malformed reply: {e}")))
    }
}

impl<T: Real, Tr: Transport> LanguageModel<T> for RemoteBackend<T, Tr> {
    type Adapter = RemoteAdapter;
    type Context = String;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fresh_adapter(&self) -> RemoteAdapter {
        RemoteAdapter::default()
    }

    fn encode_context(&self, text: &str) -> String {
        self.wrap(text)
    }

    fn log_likelihood(&self, adapter: Option<&RemoteAdapter>, context: &str, response: &str) -> Result<LogLik<T>> {
        if self.vocab.tokenize(response).is_empty() {
            return Err(Error::InvalidArgument("response has no tokens".into()));
        }
        let req = LogLikRequest {
            context: self.wrap(context),
            response: response.to_string(),
            adapter_id: adapter.and_then(|a| a.adapter_id.clone()),
        };
        let resp: LogLikResponse = self.call("loglik", &req)?;
        if !resp.total_logprob.is_finite() || resp.token_count == 0 {
            return Err(Error::Remote("loglik reply out of range".into()));
        }
        Ok(LogLik {
            total_logprob: T::lit(resp.total_logprob),
            token_count: resp.token_count,
        })
    }

    fn next_token_dist(
        &self,
        adapter: Option<&RemoteAdapter>,
        context: &String,
        prefix: &[TokenId],
    ) -> Result<TokenDistribution<T>> {
        let req = NextTokenRequest {
            context: context.clone(),
            prefix: prefix.to_vec(),
            adapter_id: adapter.and_then(|a| a.adapter_id.clone()),
        };
        let resp: NextTokenResponse = self.call("next_token", &req)?;
        let v = self.vocab.len();
        let weights: Vec<T> = match resp.probs {
            NextTokenProbs::Dense(p) => {
                if p.len() != v {
                    return Err(Error::Remote(format!("dense reply has {} entries, vocabulary has {v}", p.len())));
                }
                p.into_iter().map(T::lit).collect()
            }
            NextTokenProbs::Sparse(map) => {
                let mut dense = vec![T::zero(); v];
                for (key, p) in map {
                    let id: usize = key
                        .parse()
                        .map_err(|_| Error::Remote(format!("sparse key {key:?} is not a token id")))?;
                    let slot = dense
                        .get_mut(id)
                        .ok_or_else(|| Error::Remote(format!("token id {id} outside vocabulary")))?;
                    *slot = T::lit(p);
                }
                dense
            }
        };
        // replies are renormalized to absorb serialization rounding
        TokenDistribution::from_weights(weights).map_err(|e| Error::Remote(e.to_string()))
    }

    fn adapt(&self, adapter: &RemoteAdapter, samples: &[(&str, &str)], weight: T) -> Result<RemoteAdapter> {
        if !(weight > T::zero()) {
            return Err(Error::InvalidArgument(format!("adaptation weight must be positive, got {weight}")));
        }
        let mut next = adapter.advanced();
        if samples.is_empty() {
            return Ok(next);
        }
        let req = AdaptRequest {
            adapter_id: adapter.adapter_id.clone(),
            samples: samples
                .iter()
                .map(|(q, r)| SampleWire {
                    query: self.wrap(q),
                    response: r.to_string(),
                })
                .collect(),
            weight: weight.as_f64(),
        };
        let resp: AdaptResponse = self.call("adapt", &req)?;
        next.adapter_id = Some(resp.adapter_id);
        Ok(next)
    }
}

/// Server side of the protocol, answering from a local backend. Adapters
/// live in memory under ids derived from their content, so equal adapters
/// get equal ids across runs.
pub struct LocalTransport<T: Real, M: LanguageModel<T>> {
    model: M,
    adapters: Mutex<HashMap<String, M::Adapter>>,
    _scalar: PhantomData<T>,
}

impl<T: Real, M: LanguageModel<T>> LocalTransport<T, M> {
    pub fn new(model: M) -> Self {
        LocalTransport {
            model,
            adapters: Mutex::new(HashMap::new()),
            _scalar: PhantomData,
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    fn adapter(&self, id: &Option<String>) -> Result<Option<M::Adapter>> {
        match id {
            None => Ok(None),
            Some(id) => self
                .adapters
                .lock()
                .expect("adapter registry")
                .get(id)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::Remote(format!("unknown adapter {id}"))),
        }
    }

    /// Dispatches one request body to the endpoint named by `path`.
    pub fn handle(&self, path: &str, body: Value) -> Result<Value> {
        let bad = |e: serde_json::Error| Error::Remote(format!("{path}: bad request: {e}"));
        match path.trim_start_matches(&format!("/{WIRE_VERSION}/")) {
            "loglik" => {
                let req: LogLikRequest = serde_json::from_value(body).map_err(bad)?;
                let adapter = self.adapter(&req.adapter_id)?;
                let ll = self.model.log_likelihood(adapter.as_ref(), &req.context, &req.response)?;
                Ok(serde_json::to_value(LogLikResponse {
                    total_logprob: ll.total_logprob.as_f64(),
                    token_count: ll.token_count,
                })?)
            }
            "next_token" => {
                let req: NextTokenRequest = serde_json::from_value(body).map_err(bad)?;
                let adapter = self.adapter(&req.adapter_id)?;
                let ctx = self.model.encode_context(&req.context);
                let dist = self.model.next_token_dist(adapter.as_ref(), &ctx, &req.prefix)?;
                let probs = dist.probs().iter().map(|p| p.as_f64()).collect();
                Ok(serde_json::to_value(NextTokenResponse {
                    probs: NextTokenProbs::Dense(probs),
                })?)
            }
            "adapt" => {
                let req: AdaptRequest = serde_json::from_value(body).map_err(bad)?;
                let current = self.adapter(&req.adapter_id)?.unwrap_or_else(|| self.model.fresh_adapter());
                let samples: Vec<(&str, &str)> = req.samples.iter().map(|s| (s.query.as_str(), s.response.as_str())).collect();
                let next = self.model.adapt(&current, &samples, T::lit(req.weight))?;
                let mut h = FnvHasher::default();
                h.write(serde_json::to_string(&next)?.as_bytes());
                let id = format!("{:016x}", h.finish());
                self.adapters.lock().expect("adapter registry").insert(id.clone(), next);
                Ok(serde_json::to_value(AdaptResponse { adapter_id: id })?)
            }
            other => Err(Error::Remote(format!("no endpoint {other}"))),
        }
    }
}

impl<T: Real, M: LanguageModel<T>> Transport for LocalTransport<T, M> {
    fn post(&self, path: &str, body: Value) -> Result<Value> {
        self.handle(path, body)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn post(&self, path: &str, body: Value) -> Result<Value> {
        (**self).post(path, body)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn post(&self, path: &str, body: Value) -> Result<Value> {
        (**self).post(path, body)
    }
}

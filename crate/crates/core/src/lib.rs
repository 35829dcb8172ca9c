//! Continual personalization of a frozen language model from a stream of
//! per-user interactions.
//!
//! Training keeps a per-user adapter current by adapting only on the
//! interactions with the highest drift score, and keeps a small replay
//! buffer of what the adapter still predicts poorly. Inference retrieves
//! from that buffer, gates the hits on a relevance threshold, and decodes
//! by interpolating a parametric and a retrieval-conditioned path.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod buffer;
pub mod corpus;
pub mod decode;
pub mod drift;
pub mod engine;
pub mod error;
pub mod eval;
pub mod lm;
pub mod retrieval;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type NativeBackend = lm::NgramBackend<f64>;
pub type NativeAdapter = lm::Adapter<f64>;
pub type HttpBackend = lm::RemoteBackend<f64, lm::HttpTransport>;
pub type DriftScore = drift::DriftScore<f64>;
pub type ScoredInteraction = drift::ScoredInteraction<f64>;
pub type ReplayBuffer = buffer::ReplayBuffer<f64>;
pub type BufferEntry = buffer::BufferEntry<f64>;
pub type TokenDistribution = lm::TokenDistribution<f64>;
pub type RougeScores = eval::RougeScores<f64>;
pub type Report = eval::Report<f64>;
pub type NativeUserState = engine::UserState<f64, NativeAdapter>;

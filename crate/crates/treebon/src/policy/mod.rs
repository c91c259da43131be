//! Generation and scoring backends.
//!
//! A [`PolicyBackend`] samples continuations from its base policy and returns
//! teacher-forced per-token log-probabilities under one of two named models
//! (`aligned`, `reference`). The deterministic in-memory [`toy`] backend makes
//! whole runs reproducible at desk scale; the [`remote`] backend speaks
//! JSON-over-HTTP to a completion server.

pub mod remote;
pub mod toy;

use crate::seqtree::TokenSeq;
use serde::{Deserialize, Serialize};

/// Errors raised by policy backends.
#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid sampling params: {0}")]
    InvalidParams(String),
    #[error("vocabulary mismatch: token {token} out of range for vocab size {vocab}")]
    VocabMismatch { token: u32, vocab: usize },
    #[error("sequence has no response tokens to score")]
    EmptyResponse,
    #[error("invalid model table: {0}")]
    InvalidTable(String),
    #[error("cannot encode text for this backend: {0}")]
    Encode(String),
    #[error("remote backend missing capability: {0}")]
    Capability(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("remote protocol error: {0}")]
    Protocol(String),
}

impl PolicyError {
    /// Transport failures are the only retryable class; everything else is a
    /// configuration or protocol fault and aborts the run.
    pub fn is_transport(&self) -> bool {
        matches!(self, PolicyError::Transport { .. })
    }
}

/// Which scoring model a teacher-forced pass runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Aligned,
    Reference,
}

/// Auto-regressive sampling controls for one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Identifies the RNG stream for this call; see [`derive_stream`].
    pub seed_stream: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_new_tokens: 16, seed_stream: 0 }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature > 0.0) {
            return Err(PolicyError::InvalidParams(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::InvalidParams(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(PolicyError::InvalidParams("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_budget(&self, max_new_tokens: usize, seed_stream: u64) -> Self {
        Self { max_new_tokens, seed_stream, ..self.clone() }
    }
}

/// Teacher-forced per-token log-probabilities of a response under one model.
///
/// `logprobs[k]` is the natural-log probability of response token `k` given
/// the prompt and the true preceding response tokens. Prompt tokens are
/// conditioned on, never scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLogprobs {
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub model_tag: ModelTag,
}

impl ScoredLogprobs {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// One generation call's output: the sampled segment, its log-probabilities
/// under the generator's own (raw) distribution, and whether eos was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Continuation {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub terminated: bool,
}

/// A generation/scoring backend. Implementations must be safely callable from
/// multiple workers at once; the engine never mutates a request after issuing
/// it.
pub trait PolicyBackend: Send + Sync {
    fn eos_id(&self) -> u32;

    /// Vocabulary size, when the backend knows it.
    fn vocab_size(&self) -> Option<usize>;

    /// Samples up to `params.max_new_tokens` tokens after `prefix`, stopping
    /// early iff eos is emitted (eos is included in the segment). Identical
    /// (backend, prefix, params) triples yield identical output.
    fn continue_sequence(
        &self,
        prefix: &TokenSeq,
        params: &SamplingParams,
    ) -> Result<Continuation, PolicyError>;

    /// Teacher-forced scoring of the response tokens of `seq` under the named
    /// model. Requires at least one response token.
    fn score_sequence(&self, seq: &TokenSeq, tag: ModelTag) -> Result<ScoredLogprobs, PolicyError>;

    /// Full or truncated next-token distribution after `context`, as sparse
    /// (token, probability) pairs, if the backend can expose one. Used for
    /// predictive-entropy analysis; a truncated distribution biases entropy
    /// downward.
    fn next_token_distribution(&self, _context: &[u32]) -> Option<Vec<(u32, f64)>> {
        None
    }

    /// Renders token ids as display text.
    fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }

    /// Converts prompt text into backend token ids.
    fn encode(&self, text: &str) -> Result<Vec<u32>, PolicyError>;
}

/// splitmix64 finalizer; good avalanche for cheap stream derivation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives the RNG stream for one node from the run seed, so layer-parallel
/// generation is order-independent.
pub fn derive_stream(run_seed: u64, node_id: u64) -> u64 {
    splitmix64(run_seed ^ splitmix64(node_id.wrapping_add(0xa076_1d64_78bd_642f)))
}

/// Mixes two seeds into one; used by the harness to give each (prompt, seed)
/// pair an independent run seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(salt)))
}

/// FNV-1a over a string, for salting seeds with prompt ids.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

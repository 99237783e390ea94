//! Engine-to-model contract.
//!
//! A [`ModelSession`] answers two kinds of request for the currently selected
//! example: an attention vector over image tokens for an instruction, and
//! next-token logits for a visual variant, query and prefix. The in-process
//! toy model and the line-delimited wire client both implement it.

pub mod trace;
pub mod wire;

use std::time::Duration;

use thiserror::Error;

use crate::decoder::TokenId;
use crate::negative_sample::VisualInput;
use crate::selection::{AttentionVector, SelectionError};

pub use wire::{Message, RemoteSession, PROTOCOL_VERSION};

/// Open-ended instruction used for the first attention pass.
pub const GENERAL_INSTRUCTION: &str = "Describe the content of the image.";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionDims {
    pub n_tokens: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("could not connect to {addr}: {reason}")]
    ConnectFailure { addr: String, reason: String },
    #[error("peer speaks protocol version {got}, expected {expected}")]
    HandshakeMismatch { expected: u32, got: u32 },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("model reported an error: {0}")]
    Remote(String),
    #[error("{what} has {got} entries, session declared {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid attention reply: {0}")]
    InvalidAttention(#[from] SelectionError),
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("example {example} does not exist")]
    UnknownExample { example: u64 },
}

pub trait ModelSession {
    fn dims(&self) -> SessionDims;

    /// Points subsequent requests at another example (image + question).
    fn select_example(&mut self, example: u64) -> Result<(), SessionError>;

    fn attention(&mut self, instruction: &str) -> Result<AttentionVector, SessionError>;

    fn step(&mut self, visual: &VisualInput, query: &str, prefix: &[TokenId]) -> Result<Vec<f64>, SessionError>;
}

/// Attention request with the reply checked against the session dimensions.
pub fn fetch_attention(session: &mut dyn ModelSession, instruction: &str) -> Result<AttentionVector, SessionError> {
    let expected = session.dims().n_tokens;
    let att = session.attention(instruction)?;
    if att.len() != expected {
        return Err(SessionError::DimensionMismatch {
            what: "attention vector",
            expected,
            got: att.len(),
        });
    }
    Ok(att)
}

/// Step request with the reply checked against the session dimensions.
pub fn fetch_logits(
    session: &mut dyn ModelSession,
    visual: &VisualInput,
    query: &str,
    prefix: &[TokenId],
) -> Result<Vec<f64>, SessionError> {
    let expected = session.dims().vocab_size;
    let logits = session.step(visual, query, prefix)?;
    if logits.len() != expected {
        return Err(SessionError::DimensionMismatch {
            what: "logit vector",
            expected,
            got: logits.len(),
        });
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(SessionError::NonFiniteLogit(i));
    }
    Ok(logits)
}

/// Where a session comes from.
#[derive(Debug, Clone)]
pub enum Endpoint {
    InProcessToy(crate::toy::ToyConfig),
    External { addr: String, timeout: Duration },
}

impl Endpoint {
    pub fn external(addr: impl Into<String>) -> Self {
        Endpoint::External {
            addr: addr.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

pub fn open_session(endpoint: &Endpoint) -> Result<Box<dyn ModelSession + Send>, SessionError> {
    match endpoint {
        Endpoint::InProcessToy(config) => Ok(Box::new(crate::toy::ToySession::new(config.clone())?)),
        Endpoint::External { addr, timeout } => Ok(Box::new(RemoteSession::connect(addr, *timeout)?)),
    }
}

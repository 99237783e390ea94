//! Contrastive next-token distribution and the autoregressive loop around it.
//!
//! Each pass's logits are mapped through log-softmax, combined as
//! `(1 + alpha) * base - alpha * negative`, and renormalized with softmax.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::negative_sample::{build_mask, MaskPolicy, VisualInput};
use crate::protocol::{fetch_logits, ModelSession, SessionError};
use crate::selection::TokenSelection;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("logit vectors differ in length ({base} vs {negative})")]
    LengthMismatch { base: usize, negative: usize },
    #[error("logit vector needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("non-finite logit {value} at index {index}")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("distribution has no mass after reshaping")]
    DegenerateDistribution,
    #[error("session failed at step {step}: {source}")]
    Session {
        step: usize,
        #[source]
        source: SessionError,
    },
}

/// Logits from the original-image pass and the negative pass at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits {
    base: Vec<f64>,
    negative: Vec<f64>,
}

impl StepLogits {
    pub fn new(base: Vec<f64>, negative: Vec<f64>) -> Result<Self, DecodeError> {
        if base.len() != negative.len() {
            return Err(DecodeError::LengthMismatch {
                base: base.len(),
                negative: negative.len(),
            });
        }
        if base.len() < 2 {
            return Err(DecodeError::TooShort(base.len()));
        }
        check_finite(&base)?;
        check_finite(&negative)?;
        Ok(Self { base, negative })
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn negative(&self) -> &[f64] {
        &self.negative
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; lowest index wins exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Contrastive strength.
    pub alpha: f64,
    pub mode: DecodeMode,
    /// Only used in sample mode.
    pub temperature: f64,
    pub max_steps: usize,
    pub stop_tokens: BTreeSet<TokenId>,
    pub seed: u64,
    /// Optional filter: tokens whose base probability is below
    /// `cutoff * max_base_probability` get zero mass. Off by default.
    pub plausibility_cutoff: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_steps: 16,
            stop_tokens: BTreeSet::new(),
            seed: 42,
            plausibility_cutoff: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(DecodeError::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DecodeError::InvalidConfig(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if self.max_steps == 0 {
            return Err(DecodeError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if let Some(c) = self.plausibility_cutoff {
            if !(0.0..=1.0).contains(&c) {
                return Err(DecodeError::InvalidConfig(format!(
                    "plausibility cutoff must lie in [0, 1], got {c}"
                )));
            }
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Plain softmax of one pass, routed through the same log-softmax path as
/// the contrastive combination so that `alpha = 0` agrees bit for bit.
pub fn base_distribution(base: &[f64]) -> Result<ProbabilityVector, DecodeError> {
    if base.len() < 2 {
        return Err(DecodeError::TooShort(base.len()));
    }
    check_finite(base)?;
    Ok(ProbabilityVector(softmax(&log_softmax(base))))
}

pub fn contrastive_distribution(step: &StepLogits, alpha: f64) -> Result<ProbabilityVector, DecodeError> {
    contrastive_distribution_filtered(step, alpha, None)
}

pub fn contrastive_distribution_filtered(
    step: &StepLogits,
    alpha: f64,
    plausibility_cutoff: Option<f64>,
) -> Result<ProbabilityVector, DecodeError> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(DecodeError::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    let base = log_softmax(&step.base);
    let negative = log_softmax(&step.negative);
    let mut combined: Vec<f64> = base
        .iter()
        .zip(&negative)
        .map(|(b, n)| (1.0 + alpha) * b - alpha * n)
        .collect();

    if let Some(cutoff) = plausibility_cutoff {
        // log p_base >= log(cutoff) + max log p_base
        let max = base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = cutoff.ln() + max;
        for (c, b) in combined.iter_mut().zip(&base) {
            if *b < floor {
                *c = f64::NEG_INFINITY;
            }
        }
    }
    Ok(ProbabilityVector(softmax(&combined)))
}

pub fn pick_token(
    dist: &ProbabilityVector,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TokenId, DecodeError> {
    match config.mode {
        DecodeMode::Greedy => Ok(dist.argmax() as TokenId),
        DecodeMode::Sample => {
            let inv_t = 1.0 / config.temperature;
            let weights: Vec<f64> = dist
                .probs()
                .iter()
                .map(|&p| if p > 0.0 { p.powf(inv_t) } else { 0.0 })
                .collect();
            let index = WeightedIndex::new(&weights).map_err(|_| DecodeError::DegenerateDistribution)?;
            Ok(index.sample(rng) as TokenId)
        }
    }
}

/// Generator used by [`decode_sequence`] for a given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    StopToken,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
}

/// Autoregressive generation against one session. With `negative = None`
/// every step uses the base pass alone.
pub fn decode_sequence(
    session: &mut dyn ModelSession,
    query: &str,
    negative: Option<&VisualInput>,
    config: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let mut tokens: Vec<TokenId> = Vec::new();

    for step in 0..config.max_steps {
        let wrap = |source| DecodeError::Session { step, source };
        let base = fetch_logits(session, &VisualInput::Original, query, &tokens).map_err(wrap)?;
        let dist = match negative {
            Some(visual) => {
                let neg = fetch_logits(session, visual, query, &tokens).map_err(wrap)?;
                let step_logits = StepLogits::new(base, neg)?;
                contrastive_distribution_filtered(&step_logits, config.alpha, config.plausibility_cutoff)?
            }
            None => base_distribution(&base)?,
        };
        let token = pick_token(&dist, config, &mut rng)?;
        tokens.push(token);
        if config.stop_tokens.contains(&token) {
            return Ok(Decoded {
                tokens,
                stop: StopReason::StopToken,
            });
        }
    }
    Ok(Decoded {
        tokens,
        stop: StopReason::MaxSteps,
    })
}

/// Contrastive decoding against the mask that keeps `selection`.
pub fn decode_with_selection(
    session: &mut dyn ModelSession,
    query: &str,
    selection: &TokenSelection,
    policy: MaskPolicy,
    config: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    let visual = VisualInput::from(&build_mask(selection, policy));
    decode_sequence(session, query, Some(&visual), config)
}

fn check_finite(v: &[f64]) -> Result<(), DecodeError> {
    match v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        Some((index, &value)) => Err(DecodeError::NonFiniteLogit { index, value }),
        None => Ok(()),
    }
}

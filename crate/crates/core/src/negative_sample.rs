//! Negative-sample construction.
//!
//! The contrastive pass sees a degraded visual input. The default keeps only
//! the irrelevant tokens found by [`crate::selection`]; Gaussian-noise and
//! text-only variants exist for baseline comparisons.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selection::TokenSelection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NegativeSampleError {
    #[error("kept index {index} outside 0..{total}")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("noise standard deviation must be finite and > 0, got {0}")]
    InvalidNoise(f64),
}

/// How the model realizes the tokens that are not kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Masked tokens stay in the sequence with zeroed visual features.
    #[default]
    ZeroFill,
    /// Masked tokens are replaced by the model's mask placeholder.
    MaskToken,
    /// Masked tokens are removed from the sequence.
    Drop,
}

impl MaskPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPolicy::ZeroFill => "zero-fill",
            MaskPolicy::MaskToken => "mask-token",
            MaskPolicy::Drop => "drop",
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MaskPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-fill" => Ok(MaskPolicy::ZeroFill),
            "mask-token" => Ok(MaskPolicy::MaskToken),
            "drop" => Ok(MaskPolicy::Drop),
            other => Err(format!("unknown mask policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaskSpec {
    keep: Vec<usize>,
    total_tokens: usize,
    policy: MaskPolicy,
}

impl MaskSpec {
    pub fn new(mut keep: Vec<usize>, total_tokens: usize, policy: MaskPolicy) -> Result<Self, NegativeSampleError> {
        keep.sort_unstable();
        keep.dedup();
        if let Some(&index) = keep.iter().find(|&&i| i >= total_tokens) {
            return Err(NegativeSampleError::IndexOutOfRange {
                index,
                total: total_tokens,
            });
        }
        Ok(Self {
            keep,
            total_tokens,
            policy,
        })
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn policy(&self) -> MaskPolicy {
        self.policy
    }

    pub fn is_kept(&self, index: usize) -> bool {
        self.keep.binary_search(&index).is_ok()
    }

    /// Indices hidden by this mask, ascending.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.total_tokens).filter(|&i| !self.is_kept(i)).collect()
    }

    /// True when every token is kept, i.e. the mask leaves the image unchanged.
    pub fn is_identity(&self) -> bool {
        self.keep.len() == self.total_tokens
    }
}

/// Mask that retains exactly the selected tokens.
pub fn build_mask(selection: &TokenSelection, policy: MaskPolicy) -> MaskSpec {
    // TokenSelection already guarantees sorted, unique, in-range indices.
    MaskSpec {
        keep: selection.indices().to_vec(),
        total_tokens: selection.total_tokens(),
        policy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    IavaMask,
    GaussianNoise,
    TextOnly,
}

/// Choice of negative sample for a benchmark run. The IAVA mask is computed
/// per example from that example's attention, so only its policy is fixed here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NegativeStrategy {
    IavaMask { policy: MaskPolicy },
    GaussianNoise { sigma: f64 },
    TextOnly,
}

impl NegativeStrategy {
    pub fn gaussian_noise(sigma: f64) -> Result<Self, NegativeSampleError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(NegativeSampleError::InvalidNoise(sigma));
        }
        Ok(NegativeStrategy::GaussianNoise { sigma })
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            NegativeStrategy::IavaMask { .. } => StrategyKind::IavaMask,
            NegativeStrategy::GaussianNoise { .. } => StrategyKind::GaussianNoise,
            NegativeStrategy::TextOnly => StrategyKind::TextOnly,
        }
    }
}

impl Default for NegativeStrategy {
    fn default() -> Self {
        NegativeStrategy::IavaMask {
            policy: MaskPolicy::default(),
        }
    }
}

/// Visual input for one forward pass, as sent to the model side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "visual", rename_all = "kebab-case")]
pub enum VisualInput {
    Original,
    Mask { keep: Vec<usize>, policy: MaskPolicy },
    Noise { sigma: f64 },
    None,
}

impl From<&MaskSpec> for VisualInput {
    fn from(mask: &MaskSpec) -> Self {
        VisualInput::Mask {
            keep: mask.keep.clone(),
            policy: mask.policy,
        }
    }
}

/// One-line summary for logs and reports.
pub fn describe_strategy(strategy: &NegativeStrategy, mask: Option<&MaskSpec>) -> String {
    match (strategy, mask) {
        (NegativeStrategy::IavaMask { .. }, Some(m)) => format!(
            "iava-mask keep={}/{} policy={}",
            m.keep().len(),
            m.total_tokens(),
            m.policy()
        ),
        (NegativeStrategy::IavaMask { policy }, None) => format!("iava-mask policy={policy}"),
        (NegativeStrategy::GaussianNoise { sigma }, _) => format!("gaussian-noise sigma={sigma:?}"),
        (NegativeStrategy::TextOnly, _) => "text-only".to_string(),
    }
}

//! Irrelevant image-token selection.
//!
//! Two attention vectors over the same image tokens are compared: one taken
//! under an open-ended instruction, one under the actual query. A token is
//! irrelevant when it draws high attention under the open-ended instruction
//! but loses attention once the query is given.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("attention vector is empty")]
    EmptyVector,
    #[error("non-finite or negative attention score {value} at token {index}")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("attention vectors differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("rank cutoff {rank} outside 0..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("selected index {index} outside 0..{total}")]
    IndexOutOfRange { index: usize, total: usize },
}

/// Nonnegative attention mass over the image tokens under one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AttentionVector(Vec<f64>);

impl AttentionVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, SelectionError> {
        if scores.is_empty() {
            return Err(SelectionError::EmptyVector);
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(SelectionError::NonFiniteScore { index, value });
        }
        Ok(Self(scores))
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for AttentionVector {
    type Error = SelectionError;

    fn try_from(scores: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(scores)
    }
}

impl From<AttentionVector> for Vec<f64> {
    fn from(v: AttentionVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    pub mu: f64,
    /// Population standard deviation (divisor = token count).
    pub sigma: f64,
}

/// Signed attention change `att2 - att1`, one entry per token.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector(Vec<f64>);

impl DeltaVector {
    pub fn deltas(&self) -> &[f64] {
        &self.0
    }

    /// Deltas sorted ascending (most negative first).
    pub fn sorted_ascending(&self) -> Vec<f64> {
        let mut sorted = self.0.clone();
        sorted.sort_by(f64::total_cmp);
        sorted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Rank cutoff into the ascending-sorted delta vector (0-based).
    pub rank: usize,
    /// Multiplier on the standard deviation in the high-attention condition.
    pub lambda: f64,
}

impl SelectionParams {
    pub const fn new(rank: usize, lambda: f64) -> Self {
        Self { rank, lambda }
    }

    /// Settings used for a 576-token visual encoder.
    pub const DENSE_576: Self = Self::new(292, 0.0);
    /// Settings used for a 32-token query-former visual encoder.
    pub const COMPACT_32: Self = Self::new(16, -0.1);

    /// Default settings keyed by image-token count, when one is known.
    pub fn for_token_count(n_tokens: usize) -> Option<Self> {
        match n_tokens {
            576 => Some(Self::DENSE_576),
            32 => Some(Self::COMPACT_32),
            _ => None,
        }
    }

    pub fn validate(&self, n_tokens: usize) -> Result<(), SelectionError> {
        if n_tokens == 0 {
            return Err(SelectionError::EmptyVector);
        }
        if self.rank >= n_tokens {
            return Err(SelectionError::RankOutOfRange {
                rank: self.rank,
                max: n_tokens - 1,
            });
        }
        Ok(())
    }
}

/// Sorted, deduplicated set of image-token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSelection {
    indices: Vec<usize>,
    total_tokens: usize,
}

impl TokenSelection {
    pub fn new(mut indices: Vec<usize>, total_tokens: usize) -> Result<Self, SelectionError> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.iter().find(|&&i| i >= total_tokens) {
            return Err(SelectionError::IndexOutOfRange {
                index,
                total: total_tokens,
            });
        }
        Ok(Self { indices, total_tokens })
    }

    pub fn empty(total_tokens: usize) -> Self {
        Self {
            indices: Vec::new(),
            total_tokens,
        }
    }

    pub fn all(total_tokens: usize) -> Self {
        Self {
            indices: (0..total_tokens).collect(),
            total_tokens,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn is_subset_of(&self, other: &TokenSelection) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }
}

pub fn attention_stats(att: &AttentionVector) -> AttentionStats {
    let scores = att.scores();
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    // Rounding can push the mean a hair outside [min, max] on constant vectors.
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
        (lo.min(s), hi.max(s))
    });
    AttentionStats {
        mu: mu.clamp(lo, hi),
        sigma: var.sqrt(),
    }
}

pub fn delta_attention(att1: &AttentionVector, att2: &AttentionVector) -> Result<DeltaVector, SelectionError> {
    check_lengths(att1, att2)?;
    Ok(DeltaVector(
        att2.scores().iter().zip(att1.scores()).map(|(b, a)| b - a).collect(),
    ))
}

/// Tokens `j` with a strictly negative delta, a delta strictly below the
/// `rank`-th ascending delta, and general-instruction attention strictly above
/// `mu + lambda * sigma`.
pub fn select_irrelevant(
    att1: &AttentionVector,
    att2: &AttentionVector,
    params: SelectionParams,
) -> Result<TokenSelection, SelectionError> {
    check_lengths(att1, att2)?;
    params.validate(att1.len())?;

    let stats = attention_stats(att1);
    let delta = delta_attention(att1, att2)?;
    let threshold = delta.sorted_ascending()[params.rank];
    let floor = stats.mu + params.lambda * stats.sigma;

    let indices = delta
        .deltas()
        .iter()
        .zip(att1.scores())
        .enumerate()
        .filter(|(_, (&d, &a))| d < 0.0 && d < threshold && a > floor)
        .map(|(j, _)| j)
        .collect();

    Ok(TokenSelection {
        indices,
        total_tokens: att1.len(),
    })
}

fn check_lengths(a: &AttentionVector, b: &AttentionVector) -> Result<(), SelectionError> {
    if a.len() != b.len() {
        return Err(SelectionError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

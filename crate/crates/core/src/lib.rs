//! Instruction-aligned visual attention (IAVA) for vision-language decoding.
//!
//! The engine compares a model's attention over image tokens under an
//! open-ended instruction and under the actual question, keeps the tokens
//! that were over-attended but turn out irrelevant, and uses an image reduced
//! to those tokens as the negative pass of contrastive decoding.
//!
//! - [`selection`]: attention statistics and the irrelevant-token rule
//! - [`negative_sample`]: masks and alternative negative inputs
//! - [`decoder`]: contrastive next-token distribution and generation loop
//! - [`protocol`]: model sessions, wire protocol, trace files
//! - [`toy`]: deterministic synthetic model for desk-scale runs
//! - [`evaluation`]: POPE-style metrics, benchmark runs, rank sweeps

pub mod decoder;
pub mod evaluation;
pub mod negative_sample;
pub mod protocol;
pub mod selection;
pub mod toy;

pub use decoder::{contrastive_distribution, decode_sequence, DecodeConfig, DecodeMode, StepLogits, TokenId};
pub use evaluation::{pope_metrics, run_benchmark, sweep_i, Answer, BenchmarkSettings, EvalResult};
pub use negative_sample::{build_mask, MaskPolicy, MaskSpec, NegativeStrategy, VisualInput};
pub use protocol::{open_session, Endpoint, ModelSession, SessionError};
pub use selection::{
    attention_stats, delta_attention, select_irrelevant, AttentionVector, SelectionParams, TokenSelection,
};
pub use toy::{ToyConfig, ToyDataset, ToySession};

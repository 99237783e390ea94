//! POPE-style scoring, benchmark runs over a session, and the rank-cutoff sweep.

use std::fmt::Write as _;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{contrastive_distribution, decode_sequence, DecodeConfig, DecodeError, StepLogits, TokenId};
use crate::negative_sample::{build_mask, NegativeStrategy, VisualInput};
use crate::protocol::trace::TraceRecord;
use crate::protocol::{fetch_attention, ModelSession, SessionError, GENERAL_INSTRUCTION};
use crate::selection::{select_irrelevant, SelectionError, SelectionParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    /// Case-insensitive leading "yes"/"no" match.
    pub fn parse(text: &str) -> Option<Answer> {
        let t = text.trim_start().to_ascii_lowercase();
        if t.starts_with("yes") {
            Some(Answer::Yes)
        } else if t.starts_with("no") {
            Some(Answer::No)
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and golds ({golds}) differ in length")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("no examples to evaluate")]
    EmptyInput,
    #[error("invalid selection parameters: {0}")]
    InvalidParams(#[from] SelectionError),
    #[error("example {example}: {source}")]
    Session {
        example: u64,
        #[source]
        source: SessionError,
    },
    #[error("example {example}: {source}")]
    Decode {
        example: u64,
        #[source]
        source: DecodeError,
    },
    #[error("record `{id}`: {message}")]
    Trace { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Replies that were neither yes nor no; already counted as errors.
    pub unparsed: usize,
    /// Set when precision had no predicted positives and was reported as 0.
    pub precision_undefined: bool,
    /// Set when recall had no gold positives and was reported as 0.
    pub recall_undefined: bool,
}

impl EvalResult {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize, unparsed: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            unparsed,
            precision_undefined: tp + fp == 0,
            recall_undefined: tp + fn_ == 0,
        }
    }
}

/// Confusion-matrix metrics with "yes" as the positive class.
pub fn pope_metrics(predictions: &[Answer], golds: &[Answer]) -> Result<EvalResult, EvalError> {
    let preds: Vec<Option<Answer>> = predictions.iter().copied().map(Some).collect();
    pope_metrics_with_unparsed(&preds, golds)
}

/// As [`pope_metrics`], with `None` marking an unparseable reply. Those count
/// as wrong: a false negative on a gold "yes", a false positive on a gold "no".
pub fn pope_metrics_with_unparsed(predictions: &[Option<Answer>], golds: &[Answer]) -> Result<EvalResult, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (mut tp, mut fp, mut tn, mut fn_, mut unparsed) = (0, 0, 0, 0, 0);
    for (p, g) in predictions.iter().zip(golds) {
        match (p, g) {
            (Some(Answer::Yes), Answer::Yes) => tp += 1,
            (Some(Answer::Yes), Answer::No) => fp += 1,
            (Some(Answer::No), Answer::No) => tn += 1,
            (Some(Answer::No), Answer::Yes) => fn_ += 1,
            (None, Answer::Yes) => {
                unparsed += 1;
                fn_ += 1
            }
            (None, Answer::No) => {
                unparsed += 1;
                fp += 1
            }
        }
    }
    Ok(EvalResult::from_counts(tp, fp, tn, fn_, unparsed))
}

/// A question with its gold answer; the image is addressed by example index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub query: String,
    pub gold: Answer,
}

pub trait ExampleSource {
    fn example(&self, index: u64) -> Example;
}

/// Which vocabulary ids mean "yes" and "no".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerVocab {
    pub yes: TokenId,
    pub no: TokenId,
}

impl Default for AnswerVocab {
    fn default() -> Self {
        Self {
            yes: crate::toy::YES,
            no: crate::toy::NO,
        }
    }
}

impl AnswerVocab {
    pub fn answer(&self, token: TokenId) -> Option<Answer> {
        if token == self.yes {
            Some(Answer::Yes)
        } else if token == self.no {
            Some(Answer::No)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSettings {
    /// `None` is plain decoding with the original image only.
    pub strategy: Option<NegativeStrategy>,
    pub params: SelectionParams,
    pub decode: DecodeConfig,
    pub vocab: AnswerVocab,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        let mut decode = DecodeConfig::default();
        decode.stop_tokens.insert(crate::toy::EOS);
        Self {
            strategy: Some(NegativeStrategy::default()),
            params: SelectionParams::COMPACT_32,
            decode,
            vocab: AnswerVocab::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRun {
    pub result: EvalResult,
    /// Mean number of tokens kept in the negative sample (IAVA mask only).
    pub mean_kept: f64,
    pub predictions: Vec<Option<Answer>>,
}

pub fn run_benchmark(
    session: &mut dyn ModelSession,
    examples: &dyn ExampleSource,
    settings: &BenchmarkSettings,
    n_examples: u64,
) -> Result<BenchmarkRun, EvalError> {
    if n_examples == 0 {
        return Err(EvalError::EmptyInput);
    }
    settings
        .decode
        .validate()
        .map_err(|source| EvalError::Decode { example: 0, source })?;
    if matches!(settings.strategy, Some(NegativeStrategy::IavaMask { .. })) {
        settings.params.validate(session.dims().n_tokens)?;
    }

    let mut predictions = Vec::with_capacity(n_examples as usize);
    let mut golds = Vec::with_capacity(n_examples as usize);
    let mut kept_total = 0usize;

    for k in 0..n_examples {
        let sess_err = |source| EvalError::Session { example: k, source };
        session.select_example(k).map_err(sess_err)?;
        let example = examples.example(k);

        let negative = match settings.strategy {
            None => None,
            Some(NegativeStrategy::IavaMask { policy }) => {
                let att1 = fetch_attention(session, GENERAL_INSTRUCTION).map_err(sess_err)?;
                let att2 = fetch_attention(session, &example.query).map_err(sess_err)?;
                let selection = select_irrelevant(&att1, &att2, settings.params)?;
                kept_total += selection.len();
                Some(VisualInput::from(&build_mask(&selection, policy)))
            }
            Some(NegativeStrategy::GaussianNoise { sigma }) => Some(VisualInput::Noise { sigma }),
            Some(NegativeStrategy::TextOnly) => Some(VisualInput::None),
        };

        let mut decode = settings.decode.clone();
        decode.seed = decode.seed.wrapping_add(k);
        let decoded = decode_sequence(session, &example.query, negative.as_ref(), &decode)
            .map_err(|source| EvalError::Decode { example: k, source })?;
        let answer = decoded.tokens.first().and_then(|&t| settings.vocab.answer(t));
        debug!("example {k}: gold={:?} predicted={answer:?}", example.gold);
        predictions.push(answer);
        golds.push(example.gold);
    }

    let result = pope_metrics_with_unparsed(&predictions, &golds)?;
    Ok(BenchmarkRun {
        result,
        mean_kept: kept_total as f64 / n_examples as f64,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub i: usize,
    /// Accuracy on the benchmark.
    pub score: f64,
    pub result: EvalResult,
    pub mean_kept: f64,
}

/// One benchmark run per rank cutoff, all other settings held fixed.
pub fn sweep_i(
    session: &mut dyn ModelSession,
    examples: &dyn ExampleSource,
    i_values: &[usize],
    settings: &BenchmarkSettings,
    n_examples: u64,
) -> Result<Vec<SweepPoint>, EvalError> {
    if i_values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n_tokens = session.dims().n_tokens;
    for &i in i_values {
        SelectionParams::new(i, settings.params.lambda).validate(n_tokens)?;
    }
    i_values
        .iter()
        .map(|&i| {
            let mut s = settings.clone();
            s.params.rank = i;
            let run = run_benchmark(session, examples, &s, n_examples)?;
            Ok(SweepPoint {
                i,
                score: run.result.accuracy,
                result: run.result,
                mean_kept: run.mean_kept,
            })
        })
        .collect()
}

/// Single-step scoring of recorded traces: contrastive combination over the
/// candidate slice, argmax label parsed as yes/no.
pub fn evaluate_traces(records: &[TraceRecord], alpha: f64) -> Result<EvalResult, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut predictions = Vec::with_capacity(records.len());
    let mut golds = Vec::with_capacity(records.len());
    for r in records {
        let trace_err = |message: String| EvalError::Trace {
            id: r.id.clone(),
            message,
        };
        let gold = Answer::parse(&r.gold).ok_or_else(|| trace_err(format!("gold `{}` is not yes/no", r.gold)))?;
        let predicted = if r.candidates.len() == 1 {
            Answer::parse(&r.candidates[0].label)
        } else {
            let step = StepLogits::new(r.base_logits(), r.negative_logits()).map_err(|e| trace_err(e.to_string()))?;
            let dist = contrastive_distribution(&step, alpha).map_err(|e| trace_err(e.to_string()))?;
            Answer::parse(&r.candidates[dist.argmax()].label)
        };
        predictions.push(predicted);
        golds.push(gold);
    }
    pope_metrics_with_unparsed(&predictions, &golds)
}

/// Aligned-column table, one row per labelled result.
pub fn format_table(rows: &[(String, EvalResult)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>9}  {:>8}  {:>8}  {:>6}  {:>6}  {:>6}  {:>6}",
        "method", "accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>9.4}  {:>8.4}  {:>8.4}  {:>6}  {:>6}  {:>6}  {:>6}",
            label, r.accuracy, r.precision, r.recall, r.f1, r.tp, r.fp, r.tn, r.fn_
        );
    }
    out
}

pub fn format_sweep(points: &[SweepPoint]) -> String {
    let mut out = String::from("     i  accuracy        f1  mean_kept\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:>6}  {:>8.4}  {:>8.4}  {:>9.3}",
            p.i, p.score, p.result.f1, p.mean_kept
        );
    }
    out
}

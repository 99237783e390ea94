//! Python bindings for the iava engine.
//!
//! ```python
//! import iava
//! sel = iava.select_irrelevant(att1, att2, i=16, lam=-0.1)
//! probs = iava.contrastive_distribution(base, negative, alpha=1.0)
//! toy = iava.ToyModel(seed=42)
//! print(toy.simulate("iava").accuracy)
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use iava_core::decoder::{self, StepLogits};
use iava_core::evaluation::{self, Answer, BenchmarkSettings};
use iava_core::negative_sample::{MaskPolicy, NegativeStrategy, VisualInput};
use iava_core::protocol::{ModelSession, GENERAL_INSTRUCTION};
use iava_core::selection::{self, AttentionVector, SelectionParams};
use iava_core::toy::{ToyConfig, ToyDataset, ToySession};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn attention(scores: Vec<f64>) -> PyResult<AttentionVector> {
    AttentionVector::new(scores).map_err(value_err)
}

/// Mean and population standard deviation of an attention vector.
#[pyfunction]
fn attention_stats(scores: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = selection::attention_stats(&attention(scores)?);
    Ok((s.mu, s.sigma))
}

#[pyfunction]
fn delta_attention(att1: Vec<f64>, att2: Vec<f64>) -> PyResult<Vec<f64>> {
    let d = selection::delta_attention(&attention(att1)?, &attention(att2)?).map_err(value_err)?;
    Ok(d.deltas().to_vec())
}

/// Indices of irrelevant image tokens, ascending.
#[pyfunction]
#[pyo3(signature = (att1, att2, i, lam))]
fn select_irrelevant(att1: Vec<f64>, att2: Vec<f64>, i: usize, lam: f64) -> PyResult<Vec<usize>> {
    let sel = selection::select_irrelevant(&attention(att1)?, &attention(att2)?, SelectionParams::new(i, lam))
        .map_err(value_err)?;
    Ok(sel.indices().to_vec())
}

/// `(i, lambda)` used for a known image-token count, else `None`.
#[pyfunction]
fn default_params(n_tokens: usize) -> Option<(usize, f64)> {
    SelectionParams::for_token_count(n_tokens).map(|p| (p.rank, p.lambda))
}

#[pyfunction]
#[pyo3(signature = (base, negative, alpha=1.0))]
fn contrastive_distribution(base: Vec<f64>, negative: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let step = StepLogits::new(base, negative).map_err(value_err)?;
    Ok(decoder::contrastive_distribution(&step, alpha)
        .map_err(value_err)?
        .into_inner())
}

#[pyclass(name = "EvalResult", module = "iava", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyEvalResult {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    tn: usize,
    #[pyo3(name = "fn")]
    fn_: usize,
    unparsed: usize,
}

#[pymethods]
impl PyEvalResult {
    fn __repr__(&self) -> String {
        format!(
            "EvalResult(accuracy={:.4}, precision={:.4}, recall={:.4}, f1={:.4}, tp={}, fp={}, tn={}, fn={})",
            self.accuracy, self.precision, self.recall, self.f1, self.tp, self.fp, self.tn, self.fn_
        )
    }
}

impl From<evaluation::EvalResult> for PyEvalResult {
    fn from(r: evaluation::EvalResult) -> Self {
        Self {
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            tp: r.tp,
            fp: r.fp,
            tn: r.tn,
            fn_: r.fn_,
            unparsed: r.unparsed,
        }
    }
}

/// POPE-style metrics over "yes"/"no" strings; unparseable predictions count as wrong.
#[pyfunction]
fn pope_metrics(predictions: Vec<String>, golds: Vec<String>) -> PyResult<PyEvalResult> {
    let preds: Vec<Option<Answer>> = predictions.iter().map(|p| Answer::parse(p)).collect();
    let golds = golds
        .iter()
        .map(|g| Answer::parse(g).ok_or_else(|| value_err(format!("gold `{g}` is not yes/no"))))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(evaluation::pope_metrics_with_unparsed(&preds, &golds)
        .map_err(value_err)?
        .into())
}

fn parse_strategy(name: &str, noise_sigma: f64, policy: &str) -> PyResult<Option<NegativeStrategy>> {
    Ok(match name {
        "iava" => Some(NegativeStrategy::IavaMask {
            policy: policy.parse::<MaskPolicy>().map_err(value_err)?,
        }),
        "noise" => Some(NegativeStrategy::gaussian_noise(noise_sigma).map_err(value_err)?),
        "text" => Some(NegativeStrategy::TextOnly),
        "none" | "base" => None,
        other => return Err(value_err(format!("unknown strategy `{other}`"))),
    })
}

/// Deterministic synthetic vision-language model.
#[pyclass(name = "ToyModel", module = "iava")]
struct PyToyModel {
    config: ToyConfig,
    session: ToySession,
}

impl PyToyModel {
    fn settings(
        &self,
        strategy: &str,
        alpha: f64,
        i: Option<usize>,
        lam: Option<f64>,
        noise_sigma: f64,
        policy: &str,
    ) -> PyResult<BenchmarkSettings> {
        let defaults = SelectionParams::for_token_count(self.config.n_tokens);
        let rank = i
            .or(defaults.map(|d| d.rank))
            .ok_or_else(|| value_err("i is required for this token count"))?;
        let lambda = lam
            .or(defaults.map(|d| d.lambda))
            .ok_or_else(|| value_err("lam is required for this token count"))?;
        let mut settings = BenchmarkSettings {
            strategy: parse_strategy(strategy, noise_sigma, policy)?,
            params: SelectionParams::new(rank, lambda),
            ..BenchmarkSettings::default()
        };
        settings.decode.alpha = alpha;
        settings.decode.seed = self.config.seed;
        Ok(settings)
    }
}

#[pymethods]
impl PyToyModel {
    #[new]
    #[pyo3(signature = (seed=42, n_tokens=32, n_distractors=6))]
    fn new(seed: u64, n_tokens: usize, n_distractors: usize) -> PyResult<Self> {
        let config = ToyConfig {
            n_tokens,
            n_distractors,
            seed,
            ..ToyConfig::default()
        };
        config.validate().map_err(value_err)?;
        let session = ToySession::new(config.clone()).map_err(value_err)?;
        Ok(Self { config, session })
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.config.n_tokens
    }

    /// Gold answer ("yes"/"no") of one example.
    fn gold(&mut self, example: u64) -> PyResult<&'static str> {
        self.session.select_example(example).map_err(value_err)?;
        Ok(self.session.scene().gold().as_str())
    }

    /// Attention over image tokens; `general=True` uses the open-ended instruction.
    #[pyo3(signature = (example, general))]
    fn attention(&mut self, example: u64, general: bool) -> PyResult<Vec<f64>> {
        self.session.select_example(example).map_err(value_err)?;
        let instruction = if general {
            GENERAL_INSTRUCTION
        } else {
            iava_core::toy::TOY_QUERY
        };
        Ok(self.session.attention(instruction).map_err(value_err)?.into_inner())
    }

    /// First-step logits over (yes, no, eos); `keep=None` is the original image.
    #[pyo3(signature = (example, keep=None))]
    fn answer_logits(&mut self, example: u64, keep: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
        self.session.select_example(example).map_err(value_err)?;
        let visual = match keep {
            None => VisualInput::Original,
            Some(keep) => VisualInput::Mask {
                keep,
                policy: MaskPolicy::ZeroFill,
            },
        };
        self.session
            .step(&visual, iava_core::toy::TOY_QUERY, &[])
            .map_err(value_err)
    }

    #[pyo3(signature = (strategy="iava", n=1000, alpha=1.0, i=None, lam=None, noise_sigma=1.0, policy="zero-fill"))]
    #[allow(clippy::too_many_arguments)]
    fn simulate(
        &mut self,
        strategy: &str,
        n: u64,
        alpha: f64,
        i: Option<usize>,
        lam: Option<f64>,
        noise_sigma: f64,
        policy: &str,
    ) -> PyResult<PyEvalResult> {
        let settings = self.settings(strategy, alpha, i, lam, noise_sigma, policy)?;
        let dataset = ToyDataset::new(self.config.clone());
        let run = evaluation::run_benchmark(&mut self.session, &dataset, &settings, n)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(run.result.into())
    }

    /// `(i, accuracy)` per rank cutoff.
    #[pyo3(signature = (i_values, n=1000, alpha=1.0, lam=None))]
    fn sweep(&mut self, i_values: Vec<usize>, n: u64, alpha: f64, lam: Option<f64>) -> PyResult<Vec<(usize, f64)>> {
        let settings = self.settings("iava", alpha, Some(0), lam, 1.0, "zero-fill")?;
        let dataset = ToyDataset::new(self.config.clone());
        let points = evaluation::sweep_i(&mut self.session, &dataset, &i_values, &settings, n)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(points.into_iter().map(|p| (p.i, p.score)).collect())
    }
}

#[pymodule]
pub fn iava(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GENERAL_INSTRUCTION", GENERAL_INSTRUCTION)?;
    m.add_function(wrap_pyfunction!(attention_stats, m)?)?;
    m.add_function(wrap_pyfunction!(delta_attention, m)?)?;
    m.add_function(wrap_pyfunction!(select_irrelevant, m)?)?;
    m.add_function(wrap_pyfunction!(default_params, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(pope_metrics, m)?)?;
    m.add_class::<PyEvalResult>()?;
    m.add_class::<PyToyModel>()?;
    Ok(())
}

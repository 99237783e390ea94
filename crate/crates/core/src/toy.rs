//! Deterministic synthetic vision-language model.
//!
//! A scene is a row of image tokens, each with a saliency, a relevance to the
//! (single, fixed) question and an evidence sign. A handful of salient
//! distractors attract attention under an open-ended instruction and push the
//! answer toward "yes" regardless of the truth, which is the failure mode the
//! contrastive negative sample is meant to cancel.
//!
//! Vocabulary is `{yes, no, eos}`. The first step answers, the second emits
//! `eos`.

use std::net::TcpListener;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{softmax, TokenId};
use crate::evaluation::{Answer, Example, ExampleSource};
use crate::negative_sample::{MaskPolicy, VisualInput};
use crate::protocol::{wire, ModelSession, SessionDims, SessionError, GENERAL_INSTRUCTION};
use crate::selection::AttentionVector;

pub const YES: TokenId = 0;
pub const NO: TokenId = 1;
pub const EOS: TokenId = 2;
pub const VOCAB: [&str; 3] = ["yes", "no", "eos"];

/// The question every toy scene is asked.
pub const TOY_QUERY: &str = "Is the target object present in the image?";

const FIRST_STEP_EOS_LOGIT: f64 = -20.0;
const LATER_STEP_EOS_LOGIT: f64 = 20.0;
/// Saliency of the placeholder that replaces masked tokens under `mask-token`.
const MASK_TOKEN_SALIENCY: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyConfigError {
    #[error("rho must lie strictly between 0 and 1, got {0}")]
    Rho(f64),
    #[error("need n_distractors < n_tokens, got {n_distractors} >= {n_tokens}")]
    Distractors { n_distractors: usize, n_tokens: usize },
    #[error("gain `{0}` must be finite and >= 0")]
    Gain(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_tokens: usize,
    pub n_distractors: usize,
    /// Saliency gain.
    pub a: f64,
    /// Relevance gain.
    pub b: f64,
    /// Fraction of saliency that survives once a query is given.
    pub rho: f64,
    /// Hallucination prior strength of distractors.
    pub h: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_tokens: 32,
            n_distractors: 6,
            a: 6.0,
            b: 8.0,
            rho: 0.25,
            h: 2.0,
            seed: 42,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyConfigError> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(ToyConfigError::Rho(self.rho));
        }
        if self.n_distractors >= self.n_tokens {
            return Err(ToyConfigError::Distractors {
                n_distractors: self.n_distractors,
                n_tokens: self.n_tokens,
            });
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("h", self.h)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ToyConfigError::Gain(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Distractor,
    Answer,
    Background,
    /// Replaced by a mask realization; carries no evidence.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneToken {
    pub saliency: f64,
    pub relevance: f64,
    /// +1 signals presence, -1 absence, 0 neutral.
    pub evidence: i8,
    pub role: TokenRole,
}

impl SceneToken {
    fn blank(saliency: f64) -> Self {
        Self {
            saliency,
            relevance: 0.0,
            evidence: 0,
            role: TokenRole::Masked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    tokens: Vec<SceneToken>,
    gold: Answer,
    noise_seed: u64,
}

impl Scene {
    /// Gold is derived: yes iff some token has relevance >= 0.5 and positive evidence.
    pub fn new(tokens: Vec<SceneToken>, noise_seed: u64) -> Self {
        let gold = if tokens.iter().any(|t| t.relevance >= 0.5 && t.evidence > 0) {
            Answer::Yes
        } else {
            Answer::No
        };
        Self {
            tokens,
            gold,
            noise_seed,
        }
    }

    pub fn tokens(&self) -> &[SceneToken] {
        &self.tokens
    }

    pub fn gold(&self) -> Answer {
        self.gold
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn indices_with_role(&self, role: TokenRole) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].role == role)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstructionKind {
    General,
    Query,
}

pub fn generate_scene(config: &ToyConfig, rng: &mut impl Rng) -> Scene {
    generate_scene_with_gold(config, rng, None)
}

pub fn generate_scene_with_gold(config: &ToyConfig, rng: &mut impl Rng, gold: Option<Answer>) -> Scene {
    let gold = gold.unwrap_or_else(|| if rng.random_bool(0.5) { Answer::Yes } else { Answer::No });
    let free = config.n_tokens - config.n_distractors;
    let n_answer = match gold {
        Answer::Yes => rng.random_range(1..=3usize).min(free),
        Answer::No => 0,
    };

    let mut tokens = Vec::with_capacity(config.n_tokens);
    for _ in 0..config.n_distractors {
        tokens.push(SceneToken {
            saliency: rng.random_range(0.8..=1.0),
            relevance: 0.0,
            evidence: 1,
            role: TokenRole::Distractor,
        });
    }
    for _ in 0..n_answer {
        tokens.push(SceneToken {
            saliency: rng.random_range(0.4..=0.8),
            relevance: rng.random_range(0.7..=1.0),
            evidence: 1,
            role: TokenRole::Answer,
        });
    }
    while tokens.len() < config.n_tokens {
        tokens.push(SceneToken {
            saliency: rng.random_range(0.0..=0.3),
            relevance: rng.random_range(0.0..=0.3),
            evidence: 0,
            role: TokenRole::Background,
        });
    }
    tokens.shuffle(rng);
    let noise_seed = rng.random();
    Scene::new(tokens, noise_seed)
}

/// Scene for one example index; each index draws from its own stream of the
/// seeded generator, so scenes can be produced in any order.
pub fn scene_for_example(config: &ToyConfig, example: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(example);
    generate_scene(config, &mut rng)
}

fn attention_logits(config: &ToyConfig, tokens: &[SceneToken], kind: InstructionKind) -> Vec<f64> {
    tokens
        .iter()
        .map(|t| match kind {
            InstructionKind::General => config.a * t.saliency,
            InstructionKind::Query => config.a * config.rho * t.saliency + config.b * t.relevance,
        })
        .collect()
}

pub fn toy_attention(config: &ToyConfig, scene: &Scene, kind: InstructionKind) -> AttentionVector {
    let att = softmax(&attention_logits(config, scene.tokens(), kind));
    AttentionVector::new(att).expect("softmax output is finite and nonnegative")
}

/// Applies a visual variant to the scene's tokens.
pub fn realize(scene: &Scene, visual: &VisualInput) -> Result<Vec<SceneToken>, SessionError> {
    match visual {
        VisualInput::Original => Ok(scene.tokens.clone()),
        VisualInput::None => Ok(Vec::new()),
        VisualInput::Mask { keep, policy } => {
            if let Some(&bad) = keep.iter().find(|&&k| k >= scene.len()) {
                return Err(SessionError::Protocol(format!(
                    "mask keeps token {bad}, scene has {}",
                    scene.len()
                )));
            }
            let kept = |i: usize| keep.contains(&i);
            Ok(match policy {
                MaskPolicy::Drop => keep.iter().map(|&k| scene.tokens[k]).collect(),
                MaskPolicy::ZeroFill | MaskPolicy::MaskToken => {
                    let fill = if *policy == MaskPolicy::ZeroFill {
                        0.0
                    } else {
                        MASK_TOKEN_SALIENCY
                    };
                    (0..scene.len())
                        .map(|i| {
                            if kept(i) {
                                scene.tokens[i]
                            } else {
                                SceneToken::blank(fill)
                            }
                        })
                        .collect()
                }
            })
        }
        VisualInput::Noise { sigma } => {
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| SessionError::Protocol(format!("bad noise sigma {sigma}: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed ^ sigma.to_bits());
            Ok(scene
                .tokens
                .iter()
                .map(|t| SceneToken {
                    saliency: (t.saliency + normal.sample(&mut rng)).clamp(0.0, 1.0),
                    relevance: (t.relevance + normal.sample(&mut rng)).clamp(0.0, 1.0),
                    ..*t
                })
                .collect())
        }
    }
}

/// `logit(yes) - logit(no)` for a set of visible tokens: query attention
/// renormalized over what is visible, weighted by evidence plus the distractor
/// bias.
pub fn answer_margin(config: &ToyConfig, visible: &[SceneToken]) -> f64 {
    if visible.is_empty() {
        return 0.0;
    }
    let att = softmax(&attention_logits(config, visible, InstructionKind::Query));
    visible
        .iter()
        .zip(att)
        .map(|(t, w)| {
            let evidence = f64::from(t.evidence) * (1.0 + config.b * t.relevance);
            let bias = if t.role == TokenRole::Distractor { config.h } else { 0.0 };
            w * (evidence + bias)
        })
        .sum()
}

pub fn toy_step(
    config: &ToyConfig,
    scene: &Scene,
    visual: &VisualInput,
    prefix: &[TokenId],
) -> Result<Vec<f64>, SessionError> {
    if !prefix.is_empty() {
        return Ok(vec![0.0, 0.0, LATER_STEP_EOS_LOGIT]);
    }
    let margin = answer_margin(config, &realize(scene, visual)?);
    Ok(vec![margin / 2.0, -margin / 2.0, FIRST_STEP_EOS_LOGIT])
}

/// In-process toy model.
#[derive(Debug, Clone)]
pub struct ToySession {
    config: ToyConfig,
    scene: Scene,
    example: Option<u64>,
}

impl ToySession {
    pub fn new(config: ToyConfig) -> Result<Self, SessionError> {
        config
            .validate()
            .map_err(|e| SessionError::Protocol(format!("invalid toy config: {e}")))?;
        let scene = scene_for_example(&config, 0);
        Ok(Self {
            config,
            scene,
            example: Some(0),
        })
    }

    /// Session pinned to a hand-built scene; `select_example` replaces it.
    pub fn from_scene(config: ToyConfig, scene: Scene) -> Self {
        Self {
            config,
            scene,
            example: None,
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }
}

impl ModelSession for ToySession {
    fn dims(&self) -> SessionDims {
        SessionDims {
            n_tokens: self.scene.len(),
            vocab_size: VOCAB.len(),
        }
    }

    fn select_example(&mut self, example: u64) -> Result<(), SessionError> {
        if self.example != Some(example) {
            self.scene = scene_for_example(&self.config, example);
            self.example = Some(example);
        }
        Ok(())
    }

    fn attention(&mut self, instruction: &str) -> Result<AttentionVector, SessionError> {
        let kind = if instruction == GENERAL_INSTRUCTION {
            InstructionKind::General
        } else {
            InstructionKind::Query
        };
        Ok(toy_attention(&self.config, &self.scene, kind))
    }

    fn step(&mut self, visual: &VisualInput, _query: &str, prefix: &[TokenId]) -> Result<Vec<f64>, SessionError> {
        toy_step(&self.config, &self.scene, visual, prefix)
    }
}

/// Questions and gold answers for the toy benchmark.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    config: ToyConfig,
}

impl ToyDataset {
    pub fn new(config: ToyConfig) -> Self {
        Self { config }
    }
}

impl ExampleSource for ToyDataset {
    fn example(&self, index: u64) -> Example {
        Example {
            query: TOY_QUERY.to_string(),
            gold: scene_for_example(&self.config, index).gold(),
        }
    }
}

/// Serves the toy model over the wire protocol until the listener fails.
pub fn serve_toy(listener: TcpListener, config: ToyConfig) -> std::io::Result<()> {
    config
        .validate()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    wire::serve(listener, move || {
        ToySession::new(config.clone()).expect("config validated above")
    })
}

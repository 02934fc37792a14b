//! Regular and visual-contrastive decoding.
//!
//! One VCD step takes the logits of the original view and of the auxiliary
//! view for the same history, keeps the plausible head of the original
//! distribution (APC), contrasts the two logit vectors on that head and picks
//! a token greedily or by seeded sampling. Both streams are then fed the
//! chosen token.

mod sampler;

pub use sampler::TokenSampler;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{LogitProvider, ProviderError, ViewHandle};
use crate::tensors::{softmax, LogitVector, TensorError, TokenDistribution, TokenId};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decoding config: {0}")]
    Config(String),
    #[error("logit vectors differ in size: original {original}, auxiliary {auxiliary}")]
    SizeMismatch { original: usize, auxiliary: usize },
    #[error("step {step}: {source}")]
    Provider {
        step: usize,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot write trace: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Sample => "sample",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample),
            other => Err(format!("unknown decode mode {other:?} (greedy|sample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    /// Contrast strength, `>= 0`.
    pub alpha: f64,
    /// Plausibility ratio in `(0, 1]`.
    pub beta: f64,
    pub mode: DecodeMode,
    /// Divides the final logits before the softmax in sample mode.
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            seed: 0,
            max_tokens: 16,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(DecodeError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(DecodeError::Config(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DecodeError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(DecodeError::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything computed for one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStepTrace {
    pub step: usize,
    pub original_logits: LogitVector,
    /// `None` for regular decoding.
    pub auxiliary_logits: Option<LogitVector>,
    pub head_set: Vec<TokenId>,
    pub contrastive_probs: TokenDistribution,
    pub chosen: TokenId,
}

/// Generated tokens (including a final end-of-sequence token, if reached)
/// and one trace per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<DecodeStepTrace>,
    pub stopped_on_eos: bool,
}

impl Transcript {
    /// One JSON object per step, newline-terminated.
    pub fn write_trace_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `(1 + alpha) * orig - alpha * aux`, element-wise.
pub fn contrastive_logits(orig: &LogitVector, aux: &LogitVector, alpha: f64) -> Result<LogitVector> {
    check_sizes(orig, aux)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(DecodeError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let out = orig
        .scores()
        .iter()
        .zip(aux.scores())
        .map(|(o, a)| (1.0 + alpha) * o - alpha * a)
        .collect();
    Ok(LogitVector::new(out)?)
}

/// Tokens whose probability is at least `beta` times the largest one, in id order.
pub fn apc_head_set(probs: &TokenDistribution, beta: f64) -> Result<Vec<TokenId>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(DecodeError::Config(format!("beta must be in (0, 1], got {beta}")));
    }
    let cut = beta * probs.max();
    Ok(probs
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= cut)
        .map(|(i, _)| i as TokenId)
        .collect())
}

fn check_sizes(orig: &LogitVector, aux: &LogitVector) -> Result<()> {
    if orig.vocab_size() != aux.vocab_size() {
        return Err(DecodeError::SizeMismatch {
            original: orig.vocab_size(),
            auxiliary: aux.vocab_size(),
        });
    }
    Ok(())
}

/// Lowest id among the highest scores of `candidates`.
fn argmax_over(scores: &[f64], candidates: &[TokenId]) -> TokenId {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if scores[c as usize] > scores[best as usize] {
            best = c;
        }
    }
    best
}

/// Softmax of `scores / temperature` restricted to `head`; zero elsewhere.
fn head_distribution(scores: &[f64], head: &[TokenId], temperature: f64) -> Result<TokenDistribution> {
    let live: Vec<f64> = head.iter().map(|&i| scores[i as usize] / temperature).collect();
    let mut probs = vec![0.0; scores.len()];
    for (&i, p) in head.iter().zip(softmax(&live)) {
        probs[i as usize] = p;
    }
    Ok(TokenDistribution::new(probs)?)
}

fn choose(
    scores: &[f64],
    head: &[TokenId],
    cfg: &DecodingConfig,
    sampler: &mut TokenSampler,
) -> Result<(TokenDistribution, TokenId)> {
    let temperature = match cfg.mode {
        DecodeMode::Greedy => 1.0,
        DecodeMode::Sample => cfg.temperature,
    };
    let dist = head_distribution(scores, head, temperature)?;
    let chosen = match cfg.mode {
        DecodeMode::Greedy => argmax_over(scores, head),
        DecodeMode::Sample => sampler.sample(dist.probs()),
    };
    Ok((dist, chosen))
}

/// One contrastive step. The returned trace has `step == 0`; sequence
/// decoding fills in the index.
pub fn vcd_step(
    orig: &LogitVector,
    aux: &LogitVector,
    cfg: &DecodingConfig,
    sampler: &mut TokenSampler,
) -> Result<DecodeStepTrace> {
    cfg.validate()?;
    check_sizes(orig, aux)?;
    let head = apc_head_set(&orig.softmax(), cfg.beta)?;
    let contrast = contrastive_logits(orig, aux, cfg.alpha)?;
    let (contrastive_probs, chosen) = choose(contrast.scores(), &head, cfg, sampler)?;
    Ok(DecodeStepTrace {
        step: 0,
        original_logits: orig.clone(),
        auxiliary_logits: Some(aux.clone()),
        head_set: head,
        contrastive_probs,
        chosen,
    })
}

/// One plain step: softmax over the whole vocabulary.
pub fn regular_step(
    orig: &LogitVector,
    cfg: &DecodingConfig,
    sampler: &mut TokenSampler,
) -> Result<DecodeStepTrace> {
    cfg.validate()?;
    let all: Vec<TokenId> = (0..orig.vocab_size() as TokenId).collect();
    let (contrastive_probs, chosen) = choose(orig.scores(), &all, cfg, sampler)?;
    Ok(DecodeStepTrace {
        step: 0,
        original_logits: orig.clone(),
        auxiliary_logits: None,
        head_set: all,
        contrastive_probs,
        chosen,
    })
}

fn fetch(
    provider: &mut dyn LogitProvider,
    view: ViewHandle,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Result<LogitVector> {
    let step = prefix.len();
    let logits = provider
        .next_logits(view, prompt, prefix)
        .map_err(|source| DecodeError::Provider { step, source })?;
    let vocab_size = provider.info().vocab_size();
    if logits.vocab_size() != vocab_size {
        return Err(DecodeError::Provider {
            step,
            source: ProviderError::Protocol(format!(
                "{} logits for a vocabulary of {vocab_size}",
                logits.vocab_size()
            )),
        });
    }
    Ok(logits)
}

fn run(
    provider: &mut dyn LogitProvider,
    cfg: &DecodingConfig,
    mut step_fn: impl FnMut(&mut dyn LogitProvider, &[TokenId], &mut TokenSampler) -> Result<DecodeStepTrace>,
) -> Result<Transcript> {
    cfg.validate()?;
    let eos = provider.info().eos_token;
    let mut sampler = TokenSampler::new(cfg.seed);
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    while tokens.len() < cfg.max_tokens {
        let mut trace = step_fn(provider, &tokens, &mut sampler)?;
        trace.step = tokens.len();
        tokens.push(trace.chosen);
        steps.push(trace);
        if tokens.last() == Some(&eos) {
            return Ok(Transcript {
                tokens,
                steps,
                stopped_on_eos: true,
            });
        }
    }
    Ok(Transcript {
        tokens,
        steps,
        stopped_on_eos: false,
    })
}

/// Contrastive decoding over `(original, auxiliary)` views. Both logit
/// streams see the same history: the tokens chosen so far.
pub fn decode_sequence(
    provider: &mut dyn LogitProvider,
    prompt: &[TokenId],
    views: (ViewHandle, ViewHandle),
    cfg: &DecodingConfig,
) -> Result<Transcript> {
    run(provider, cfg, |p, prefix, sampler| {
        let orig = fetch(p, views.0, prompt, prefix)?;
        let aux = fetch(p, views.1, prompt, prefix)?;
        vcd_step(&orig, &aux, cfg, sampler)
    })
}

/// Single-stream baseline over one view.
pub fn regular_decode(
    provider: &mut dyn LogitProvider,
    prompt: &[TokenId],
    view: ViewHandle,
    cfg: &DecodingConfig,
) -> Result<Transcript> {
    run(provider, cfg, |p, prefix, sampler| {
        let orig = fetch(p, view, prompt, prefix)?;
        regular_step(&orig, cfg, sampler)
    })
}

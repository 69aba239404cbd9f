//! Temperature sampling from conditional language models.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::corpus::{BOS, EOS, UNK};
use crate::math;
use crate::model::{Family, Model, ModelError};
use crate::rng::{self, Rng};

/// Below this temperature sampling becomes argmax decoding.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LatentChoice {
    Fixed(usize),
    /// Draw `c` from the model's latent factor for the chosen label.
    Marginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub label: usize,
    pub latent: LatentChoice,
    pub temperature: f64,
    /// Includes BOS and EOS.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            label: 0,
            latent: LatentChoice::Marginal,
            temperature: 0.6,
            max_len: 82,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerationError {
    Config(&'static str),
    Model(ModelError),
}

impl From<ModelError> for GenerationError {
    fn from(e: ModelError) -> Self {
        GenerationError::Model(e)
    }
}

impl fmt::Display for GenerationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerationError::Config(m) => write!(f, "invalid sample spec: {m}"),
            GenerationError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub latent: usize,
    /// Starts with BOS; ends with EOS unless the length limit was hit.
    pub ids: Vec<usize>,
}

/// `p_i ∝ exp(logit_i / τ)` with `masked` ids given zero probability.
pub fn tempered_probs(logits: &[f64], temperature: f64, masked: &[usize]) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, l)| if masked.contains(&i) { f64::NEG_INFINITY } else { l / temperature })
        .collect();
    math::log_softmax(&scaled).into_iter().map(math::exp).collect()
}

/// Draws one index from tempered logits, or takes the argmax when
/// `temperature <= GREEDY_TEMPERATURE` (masked ids excluded either way).
pub fn sample_from_logits(logits: &[f64], temperature: f64, masked: &[usize], rng: &mut Rng) -> usize {
    if temperature <= GREEDY_TEMPERATURE {
        let allowed: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &l)| if masked.contains(&i) { f64::NEG_INFINITY } else { l })
            .collect();
        return math::argmax(&allowed);
    }
    draw(&tempered_probs(logits, temperature, masked), rng)
}

/// Inverse-CDF draw from a probability vector.
pub fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One ancestral sample with `(y, c)` held fixed.
pub fn sample(model: &Model, spec: &SampleSpec) -> Result<Sample, GenerationError> {
    sample_with(model, spec, &mut rng::stream(spec.seed, rng::streams::SAMPLE))
}

/// `n` samples, the `i`-th drawn from its own stream derived from `(seed, i)`.
pub fn sample_many(model: &Model, spec: &SampleSpec, n: usize) -> Result<Vec<Sample>, GenerationError> {
    (0..n)
        .map(|i| sample_with(model, spec, &mut rng::substream(spec.seed, rng::streams::SAMPLE, i as u64)))
        .collect()
}

fn sample_with(model: &Model, spec: &SampleSpec, r: &mut Rng) -> Result<Sample, GenerationError> {
    let cfg = &model.config;
    if !(spec.temperature > 0.0) {
        return Err(GenerationError::Config("temperature must be positive"));
    }
    if spec.max_len < 2 {
        return Err(GenerationError::Config("max_len must be at least 2"));
    }
    if cfg.family == Family::Discriminative {
        return Err(ModelError::Mismatch("sampling needs a generative model").into());
    }
    if spec.label >= cfg.num_labels {
        return Err(GenerationError::Config("label out of range"));
    }
    let latent = match spec.latent {
        LatentChoice::Fixed(c) if c < cfg.latent_values() => c,
        LatentChoice::Fixed(_) => return Err(GenerationError::Config("latent value out of range")),
        LatentChoice::Marginal => {
            let lp = model.log_latent_factor(spec.label)?;
            draw(&lp.into_iter().map(math::exp).collect::<Vec<_>>(), r)
        }
    };
    let shift = model.condition_shift(spec.label, latent)?;
    let (mut h, mut c) = model.initial_state();
    let mut ids = vec![BOS];
    while ids.len() < spec.max_len {
        let (h2, c2) = model.lstm_step(*ids.last().expect("non-empty"), &h, &c);
        h = h2;
        c = c2;
        let mut logits = model.base_logits(&h)?;
        for (l, s) in logits.iter_mut().zip(&shift) {
            *l += s;
        }
        let next = sample_from_logits(&logits, spec.temperature, &[BOS, UNK], r);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(Sample {
        label: spec.label,
        latent,
        ids,
    })
}

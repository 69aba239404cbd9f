//! A known auxiliary-structure text process for end-to-end checks.
//!
//! `y` is uniform, `c` comes from a fixed prior, and each token is drawn from
//! `softmax(base + label[y] + latent[c] + tilt[prev])` over the content words.
//! The length is `min_len` plus a geometric number of extra tokens, capped at
//! `max_len`, independent of `(y, c)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::corpus::RawDocument;
use crate::generation::draw;
use crate::math;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    pub num_labels: usize,
    pub num_latent: usize,
    /// Content words; reserved tokens come on top.
    pub vocab_size: usize,
    /// Background logits are `-zipf * ln(rank + 1)`.
    pub zipf: f64,
    /// Words boosted by each label, and the boost.
    pub label_words: usize,
    pub label_strength: f64,
    pub latent_words: usize,
    pub latent_strength: f64,
    /// Successors boosted after each word, and the boost.
    pub bigram_fanout: usize,
    pub bigram_strength: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of stopping after each token past `min_len`.
    pub stop_prob: f64,
    /// Latent prior; `None` means `p(c) ∝ num_latent − c`.
    pub latent_prior: Option<Vec<f64>>,
    /// Draw label words from the latent words, so label evidence is
    /// confounded with the latent value.
    pub label_words_from_latent: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_labels: 4,
            num_latent: 3,
            vocab_size: 200,
            zipf: 0.7,
            label_words: 12,
            label_strength: 1.8,
            latent_words: 40,
            latent_strength: 3.0,
            bigram_fanout: 2,
            bigram_strength: 1.0,
            min_len: 8,
            max_len: 40,
            stop_prob: 0.08,
            latent_prior: None,
            label_words_from_latent: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.num_labels == 0 || self.num_latent == 0 || self.vocab_size == 0 {
            return Err("label, latent and vocabulary counts must be at least 1");
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err("need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.stop_prob) {
            return Err("stop_prob must lie in [0, 1]");
        }
        if self.label_words > self.vocab_size || self.latent_words > self.vocab_size || self.bigram_fanout > self.vocab_size {
            return Err("boosted word counts exceed the vocabulary");
        }
        if let Some(p) = &self.latent_prior {
            let s: f64 = p.iter().sum();
            if p.len() != self.num_latent || p.iter().any(|x| !(*x > 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err("latent_prior must be a positive distribution over num_latent values");
            }
        }
        Ok(())
    }
}

/// Sampled parameters of one process instance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthProcess {
    pub config: SynthConfig,
    pub words: Vec<String>,
    pub latent_prior: Vec<f64>,
    pub base: Vec<f64>,
    /// `[num_labels][vocab]`.
    pub label_logits: Vec<Vec<f64>>,
    /// `[num_latent][vocab]`.
    pub latent_logits: Vec<Vec<f64>>,
    /// `(prev, next)` pairs receiving `bigram_strength`.
    pub bigrams: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDoc {
    pub label: usize,
    pub latent: usize,
    /// Word indices into `SynthProcess::words`.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BayesAccuracy {
    pub value: f64,
    /// Zero for exact enumeration.
    pub std_error: f64,
    pub exact: bool,
}

impl SynthProcess {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self, &'static str> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::streams::SYNTH);
        let v = config.vocab_size;
        let words = (0..v).map(|i| format!("w{i:03}")).collect();
        let latent_prior = match &config.latent_prior {
            Some(p) => p.clone(),
            None => {
                let c = config.num_latent;
                let z = (c * (c + 1) / 2) as f64;
                (0..c).map(|i| (c - i) as f64 / z).collect()
            }
        };
        let base = (0..v).map(|i| -config.zipf * math::ln(i as f64 + 1.0)).collect();
        let boosts = |n: usize, k: usize, s: f64, pool: &[usize], r: &mut Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let mut row = vec![0.0; v];
                    for i in sample_indices(r, pool.len(), k.min(pool.len())) {
                        row[pool[i]] = s;
                    }
                    row
                })
                .collect()
        };
        let all: Vec<usize> = (0..v).collect();
        let latent_logits = boosts(config.num_latent, config.latent_words, config.latent_strength, &all, &mut r);
        let label_pool: Vec<usize> = if config.label_words_from_latent {
            (0..v).filter(|&w| latent_logits.iter().any(|row| row[w] != 0.0)).collect()
        } else {
            all
        };
        let label_logits = boosts(config.num_labels, config.label_words, config.label_strength, &label_pool, &mut r);
        let mut bigrams = Vec::new();
        for prev in 0..v {
            let mut next: Vec<usize> = sample_indices(&mut r, v, config.bigram_fanout).into_vec();
            next.sort_unstable();
            bigrams.extend(next.into_iter().map(|n| (prev, n)));
        }
        Ok(SynthProcess {
            config,
            words,
            latent_prior,
            base,
            label_logits,
            latent_logits,
            bigrams,
        })
    }

    /// Precomputes `log p(next | prev, y, c)` for fast sampling and scoring.
    pub fn compile(&self) -> CompiledProcess {
        let cfg = &self.config;
        let (v, ny, nc) = (cfg.vocab_size, cfg.num_labels, cfg.num_latent);
        let mut tilt = vec![vec![0.0; v]; v + 1];
        for &(p, n) in &self.bigrams {
            tilt[p][n] += cfg.bigram_strength;
        }
        let mut table = Vec::with_capacity((v + 1) * ny * nc * v);
        for t in &tilt {
            for y in 0..ny {
                for c in 0..nc {
                    let logits: Vec<f64> = (0..v)
                        .map(|w| self.base[w] + self.label_logits[y][w] + self.latent_logits[c][w] + t[w])
                        .collect();
                    table.extend(math::log_softmax(&logits));
                }
            }
        }
        CompiledProcess {
            v,
            ny,
            nc,
            log_prior_c: self.latent_prior.iter().map(|p| math::ln(*p)).collect(),
            log_prior_y: -math::ln(ny as f64),
            table,
            min_len: cfg.min_len,
            max_len: cfg.max_len,
            stop_prob: cfg.stop_prob,
        }
    }

    pub fn to_raw(&self, doc: &SynthDoc) -> RawDocument {
        let mut text = String::new();
        for (i, &t) in doc.tokens.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            text.push_str(&self.words[t]);
        }
        RawDocument {
            label: doc.label,
            text,
        }
    }
}

/// Token-level log probabilities of a [`SynthProcess`], with the empty
/// context (first token) stored as `prev = vocab_size`.
#[derive(Debug, Clone)]
pub struct CompiledProcess {
    v: usize,
    ny: usize,
    nc: usize,
    log_prior_c: Vec<f64>,
    log_prior_y: f64,
    table: Vec<f64>,
    min_len: usize,
    max_len: usize,
    stop_prob: f64,
}

impl CompiledProcess {
    fn row(&self, prev: Option<usize>, y: usize, c: usize) -> &[f64] {
        let p = prev.unwrap_or(self.v);
        let start = ((p * self.ny + y) * self.nc + c) * self.v;
        &self.table[start..start + self.v]
    }

    /// `log p(next | prev, y, c)`.
    pub fn token_log_prob(&self, prev: Option<usize>, next: usize, y: usize, c: usize) -> f64 {
        self.row(prev, y, c)[next]
    }

    /// `log p(tokens | y, c)`, excluding the length factor.
    pub fn text_log_prob(&self, tokens: &[usize], y: usize, c: usize) -> f64 {
        let mut prev = None;
        let mut total = 0.0;
        for &t in tokens {
            total += self.token_log_prob(prev, t, y, c);
            prev = Some(t);
        }
        total
    }

    /// `log p(len)`; `-inf` outside `[min_len, max_len]`.
    pub fn length_log_prob(&self, len: usize) -> f64 {
        if len < self.min_len || len > self.max_len {
            return f64::NEG_INFINITY;
        }
        let extra = (len - self.min_len) as f64;
        let keep = math::ln(1.0 - self.stop_prob) * extra;
        if len == self.max_len {
            keep
        } else {
            keep + math::ln(self.stop_prob)
        }
    }

    /// `log p(x, y)` summed over `c`, including the length factor.
    pub fn log_joint_label(&self, tokens: &[usize], y: usize) -> f64 {
        let parts: Vec<f64> = (0..self.nc)
            .map(|c| self.log_prior_c[c] + self.text_log_prob(tokens, y, c))
            .collect();
        self.log_prior_y + math::log_sum_exp(&parts) + self.length_log_prob(tokens.len())
    }

    /// `p(y | x)` under the true process.
    pub fn label_posterior(&self, tokens: &[usize]) -> Vec<f64> {
        let j: Vec<f64> = (0..self.ny).map(|y| self.log_joint_label(tokens, y)).collect();
        math::log_softmax(&j).into_iter().map(math::exp).collect()
    }

    pub fn sample(&self, r: &mut Rng) -> SynthDoc {
        let label = r.gen_range(0..self.ny);
        let prior: Vec<f64> = self.log_prior_c.iter().map(|l| math::exp(*l)).collect();
        let latent = draw(&prior, r);
        let mut tokens = Vec::new();
        let mut prev = None;
        loop {
            let probs: Vec<f64> = self.row(prev, label, latent).iter().map(|l| math::exp(*l)).collect();
            let t = draw(&probs, r);
            tokens.push(t);
            prev = Some(t);
            if tokens.len() >= self.max_len || (tokens.len() >= self.min_len && r.gen::<f64>() < self.stop_prob) {
                break;
            }
        }
        SynthDoc { label, latent, tokens }
    }

    /// `n` documents from the stream `(seed, split)`.
    pub fn sample_split(&self, n: usize, seed: u64, split: u64) -> Vec<SynthDoc> {
        let mut r = rng::substream(seed, rng::streams::SYNTH, split);
        (0..n).map(|_| self.sample(&mut r)).collect()
    }

    /// Number of token sequences the exact computation would visit.
    pub fn sequence_count(&self) -> f64 {
        (self.min_len..=self.max_len).map(|l| libm::pow(self.v as f64, l as f64)).sum()
    }

    /// `Σ_x max_y p(x, y)` by enumerating every sequence, or `None` when
    /// there are more than `limit` of them.
    pub fn exact_bayes_accuracy(&self, limit: f64) -> Option<f64> {
        if self.sequence_count() > limit {
            return None;
        }
        let mut total = 0.0;
        let mut tokens = Vec::with_capacity(self.max_len);
        // Per-(y, c) prefix log probability, including both priors.
        let start: Vec<f64> = (0..self.ny * self.nc)
            .map(|k| self.log_prior_y + self.log_prior_c[k % self.nc])
            .collect();
        self.enumerate(&mut tokens, &start, &mut total);
        Some(total)
    }

    fn enumerate(&self, tokens: &mut Vec<usize>, prefix: &[f64], total: &mut f64) {
        let len = tokens.len();
        if len >= self.min_len {
            let best = (0..self.ny)
                .map(|y| math::log_sum_exp(&prefix[y * self.nc..(y + 1) * self.nc]))
                .fold(f64::NEG_INFINITY, f64::max);
            *total += math::exp(best + self.length_log_prob(len));
        }
        if len == self.max_len {
            return;
        }
        let prev = tokens.last().copied();
        let mut next = vec![0.0; prefix.len()];
        for w in 0..self.v {
            for y in 0..self.ny {
                for c in 0..self.nc {
                    let k = y * self.nc + c;
                    next[k] = prefix[k] + self.token_log_prob(prev, w, y, c);
                }
            }
            tokens.push(w);
            self.enumerate(tokens, &next, total);
            tokens.pop();
        }
    }

    /// Monte Carlo estimate of `E_x[max_y p(y|x)]` from `n` fresh samples.
    pub fn mc_bayes_accuracy(&self, n: usize, seed: u64) -> BayesAccuracy {
        let mut r = rng::substream(seed, rng::streams::SYNTH, u64::MAX);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let d = self.sample(&mut r);
            let m = self.label_posterior(&d.tokens).into_iter().fold(0.0, f64::max);
            s += m;
            s2 += m * m;
        }
        let nf = n as f64;
        let mean = s / nf;
        let var = (s2 / nf - mean * mean).max(0.0);
        BayesAccuracy {
            value: mean,
            std_error: math::sqrt(var / nf),
            exact: false,
        }
    }

    /// Exact when at most `limit` sequences exist, Monte Carlo otherwise.
    pub fn bayes_accuracy(&self, limit: f64, mc_samples: usize, seed: u64) -> BayesAccuracy {
        match self.exact_bayes_accuracy(limit) {
            Some(value) => BayesAccuracy {
                value,
                std_error: 0.0,
                exact: true,
            },
            None => self.mc_bayes_accuracy(mc_samples, seed),
        }
    }
}

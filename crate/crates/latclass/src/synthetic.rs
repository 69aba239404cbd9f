//! Synthetic datasets with a known generating process.

use std::fs;
use std::path::Path;

use latclass_core::corpus::RawDocument;
use latclass_core::synth::{BayesAccuracy, SynthConfig, SynthProcess};
use serde::{Deserialize, Serialize};

use crate::data::{save_csv, DataError, RawDataset};
use crate::runspec::SyntheticSpec;

/// Largest number of documents enumerated for an exact Bayes accuracy.
pub const EXACT_LIMIT: f64 = 2.0e6;
/// Monte Carlo sample size when enumeration is too large.
pub const MC_SAMPLES: usize = 5000;

const TRAIN_SPLIT: u64 = 0;
const TEST_SPLIT: u64 = 1;

/// Everything needed to regenerate or score a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub process: SynthProcess,
    pub bayes_accuracy: BayesAccuracy,
    pub chance_accuracy: f64,
}

impl Sidecar {
    /// `(acc - chance) / (bayes - chance)`.
    pub fn gap_fraction(&self, acc: f64) -> f64 {
        (acc - self.chance_accuracy) / (self.bayes_accuracy.value - self.chance_accuracy)
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<(RawDataset, Sidecar), &'static str> {
    let process = SynthProcess::new(spec.process.clone(), spec.seed)?;
    let compiled = process.compile();
    let raw = |n, split| -> Vec<RawDocument> {
        compiled
            .sample_split(n, spec.seed, split)
            .iter()
            .map(|d| process.to_raw(d))
            .collect()
    };
    let data = RawDataset {
        name: "synthetic".into(),
        train: raw(spec.n_train, TRAIN_SPLIT),
        test: raw(spec.n_test, TEST_SPLIT),
    };
    let bayes_accuracy = compiled.bayes_accuracy(EXACT_LIMIT, MC_SAMPLES, spec.seed);
    let sidecar = Sidecar {
        n_train: spec.n_train,
        n_test: spec.n_test,
        seed: spec.seed,
        chance_accuracy: 1.0 / process.config.num_labels as f64,
        process,
        bayes_accuracy,
    };
    Ok((data, sidecar))
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic process: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `train.csv`, `test.csv` and `process.json` to `dir`. Boosted word
/// counts are capped at the vocabulary size.
pub fn gen_synthetic(
    num_labels: usize,
    num_latent: usize,
    vocab_size: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    dir: &Path,
) -> Result<Sidecar, SynthError> {
    let defaults = SynthConfig::default();
    let spec = SyntheticSpec {
        process: SynthConfig {
            num_labels,
            num_latent,
            vocab_size,
            label_words: defaults.label_words.min(vocab_size),
            latent_words: defaults.latent_words.min(vocab_size),
            ..defaults
        },
        n_train,
        n_test,
        seed,
    };
    write_synthetic(&spec, dir)
}

pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Sidecar, SynthError> {
    let (data, sidecar) = synthetic_dataset(spec).map_err(SynthError::Config)?;
    fs::create_dir_all(dir)?;
    save_csv(&dir.join("train.csv"), &data.train)?;
    save_csv(&dir.join("test.csv"), &data.test)?;
    fs::write(dir.join("process.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar)
}

pub fn read_sidecar(dir: &Path) -> Result<Sidecar, SynthError> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("process.json"))?)?)
}

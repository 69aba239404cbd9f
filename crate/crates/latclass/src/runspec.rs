//! Experiment configuration: JSON documents mirroring [`RunSpec`], with CLI
//! overrides applied on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use latclass_core::synth::SynthConfig;
use latclass_core::{Family, Method, ModelConfig, PredictionRule, Structure, TrainSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError::Invalid(msg.into()))
}

/// Training-set size per class; `None` keeps the whole pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "GridToken", into = "GridToken")]
pub struct GridSize(pub Option<usize>);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GridToken {
    Count(usize),
    Word(String),
}

impl TryFrom<GridToken> for GridSize {
    type Error = String;

    fn try_from(t: GridToken) -> Result<Self, String> {
        match t {
            GridToken::Count(0) => Err("grid sizes must be positive".into()),
            GridToken::Count(n) => Ok(GridSize(Some(n))),
            GridToken::Word(w) => w.parse(),
        }
    }
}

impl From<GridSize> for GridToken {
    fn from(g: GridSize) -> Self {
        match g.0 {
            Some(n) => GridToken::Count(n),
            None => GridToken::Word("all".into()),
        }
    }
}

impl FromStr for GridSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(GridSize(None));
        }
        let n = match s.to_ascii_lowercase().strip_suffix('k') {
            Some(k) => k.parse::<usize>().map(|k| k * 1000),
            None => s.parse::<usize>(),
        }
        .map_err(|_| format!("bad grid size `{s}`"))?;
        if n == 0 {
            return Err("grid sizes must be positive".into());
        }
        Ok(GridSize(Some(n)))
    }
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(n) => write!(f, "{n}"),
            None => f.write_str("all"),
        }
    }
}

pub const DESK_GRID: [GridSize; 4] = [
    GridSize(Some(5)),
    GridSize(Some(20)),
    GridSize(Some(100)),
    GridSize(Some(1000)),
];

pub const FULL_GRID: [GridSize; 8] = [
    GridSize(Some(5)),
    GridSize(Some(20)),
    GridSize(Some(100)),
    GridSize(Some(1000)),
    GridSize(Some(2000)),
    GridSize(Some(5000)),
    GridSize(Some(10000)),
    GridSize(None),
];

/// Parameters of a generated dataset: `synthetic:<key=value,...>`, where keys
/// are [`SynthConfig`] fields or `n_train`, `n_test`, `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub process: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            process: SynthConfig::default(),
            n_train: 3000,
            n_test: 1000,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    /// Parses the comma-separated `key=value` list after `synthetic:`.
    pub fn parse_params(params: &str) -> Result<Self, SpecError> {
        let mut obj = serde_json::to_value(SyntheticSpec::default())?;
        let map = obj.as_object_mut().expect("struct serializes to an object");
        for kv in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let Some((k, v)) = kv.split_once('=') else {
                return invalid(format!("expected key=value, found `{kv}`"));
            };
            let k = k.trim();
            if !map.contains_key(k) {
                return invalid(format!("unknown synthetic parameter `{k}`"));
            }
            let v = v.trim();
            let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.into()));
            map.insert(k.to_string(), value);
        }
        let spec: SyntheticSpec = serde_json::from_value(obj)?;
        spec.process.validate().map_err(|m| SpecError::Invalid(m.into()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Directory holding `train.csv` and `test.csv`.
    Dir(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn parse(s: &str) -> Result<Self, SpecError> {
        match s.strip_prefix("synthetic") {
            Some("") => Ok(DatasetSource::Synthetic(SyntheticSpec::default())),
            Some(rest) => match rest.strip_prefix(':') {
                Some(params) => Ok(DatasetSource::Synthetic(SyntheticSpec::parse_params(params)?)),
                None => Ok(DatasetSource::Dir(PathBuf::from(s))),
            },
            None => Ok(DatasetSource::Dir(PathBuf::from(s))),
        }
    }
}

/// One series of a sweep. `num_labels` and `vocab_size` in `config` are
/// filled in per leg from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub config: ModelConfig,
    /// Overrides the run's training method.
    #[serde(default)]
    pub method: Option<Method>,
}

impl ModelSpec {
    pub fn new(name: &str, config: ModelConfig) -> Self {
        ModelSpec {
            name: name.into(),
            config,
            method: None,
        }
    }

    /// Named configurations with the default dimensions (100-wide words,
    /// states and label embeddings; 10 latent values of width 10).
    pub fn preset(name: &str) -> Option<Self> {
        let base = ModelConfig::default();
        let latent = |structure| ModelConfig {
            family: Family::Latent,
            structure,
            ..base.clone()
        };
        let config = match name {
            "disc" => ModelConfig {
                family: Family::Discriminative,
                ..base.clone()
            },
            "gen" => ModelConfig {
                family: Family::Generative,
                ..base.clone()
            },
            "lat" => latent(Structure::Auxiliary),
            "lat-joint" => latent(Structure::Joint),
            "lat-middle" => latent(Structure::Middle),
            "lat-hier" => latent(Structure::Hierarchical),
            "gen-pc" => ModelConfig {
                family: Family::Generative,
                d_label: 110,
                ..base.clone()
            },
            "lat-pc" => ModelConfig {
                d_label: 100,
                d_latent: 10,
                num_latent: 10,
                ..latent(Structure::Auxiliary)
            },
            _ => return None,
        };
        Some(ModelSpec::new(name, config))
    }

    pub const PRESETS: [&'static str; 8] = [
        "disc",
        "gen",
        "lat",
        "lat-joint",
        "lat-middle",
        "lat-hier",
        "gen-pc",
        "lat-pc",
    ];
}

fn default_models() -> Vec<ModelSpec> {
    ["disc", "gen", "lat"]
        .iter()
        .map(|n| ModelSpec::preset(n).expect("built-in preset"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    /// Directory path or `synthetic:<params>`.
    pub dataset: String,
    pub models: Vec<ModelSpec>,
    pub train: TrainSpec,
    pub grid: Vec<GridSize>,
    /// Rules reported per leg; empty means each family's default.
    pub rules: Vec<PredictionRule>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub dev_size: usize,
    pub min_count: usize,
    /// Whether the CSV files start with a header row.
    pub has_header: bool,
    pub workers: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            dataset: "synthetic".into(),
            models: default_models(),
            train: TrainSpec::default(),
            grid: DESK_GRID.to_vec(),
            rules: Vec::new(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            dev_size: 2000,
            min_count: 1,
            has_header: false,
            workers: 1,
        }
    }
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn source(&self) -> Result<DatasetSource, SpecError> {
        DatasetSource::parse(&self.dataset)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.seeds.is_empty() {
            return invalid("seeds must be non-empty");
        }
        if self.models.is_empty() {
            return invalid("at least one model is required");
        }
        if self.grid.is_empty() {
            return invalid("the subsample grid must be non-empty");
        }
        // `None` (all) sorts after every count, matching its meaning.
        let increasing = self.grid.windows(2).all(|w| match (w[0].0, w[1].0) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            (None, _) => false,
        });
        if !increasing {
            return invalid("grid values must be strictly increasing");
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return invalid("model names must be unique");
        }
        for m in &self.models {
            if m.method == Some(Method::Em) && m.config.family != Family::Latent {
                return invalid(format!("model `{}`: EM needs a latent model", m.name));
            }
        }
        for r in &self.rules {
            if !self.models.iter().any(|m| r.compatible(m.config.family)) {
                return invalid(format!("rule {r} applies to none of the models"));
            }
        }
        self.train.validate().map_err(|e| SpecError::Invalid(e.to_string()))?;
        self.source()?;
        Ok(())
    }

    /// Rules to report for a family: the requested ones that apply, or the
    /// family default.
    pub fn rules_for(&self, family: Family) -> Vec<PredictionRule> {
        let rules: Vec<PredictionRule> = self.rules.iter().copied().filter(|r| r.compatible(family)).collect();
        if rules.is_empty() {
            vec![PredictionRule::default_for(family)]
        } else {
            rules
        }
    }
}

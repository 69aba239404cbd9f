//! Command-line interface; `main` parses [`Cli`] and calls [`run`].

use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use latclass_core::corpus::EncodedDocument;
use latclass_core::generation::{sample_many, LatentChoice, SampleSpec};
use latclass_core::inference::predict_labels;
use latclass_core::model::count_params;
use latclass_core::{Family, Method, PredictionRule};

use crate::checkpoint::Checkpoint;
use crate::data::RawDataset;
use crate::harness::{
    compare_em_direct, compare_rules, compare_structures, leg_rows, load_dataset, run_sweep, train_leg, Leg,
};
use crate::metrics;
use crate::runspec::{GridSize, ModelSpec, RunSpec, SyntheticSpec, FULL_GRID};
use crate::synthetic::write_synthetic;

#[derive(Debug, Parser)]
#[command(name = "latclass", version, about = "Latent-variable generative text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model at one training size and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Model name from the run spec or a preset; defaults to the first model.
        #[arg(long)]
        model: Option<String>,
        /// Training examples per class (`all` for the whole pool).
        #[arg(long, default_value = "100")]
        n_per_class: GridSize,
    },
    /// Accuracy of a checkpoint on a dataset's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_rule)]
        rule: Option<PredictionRule>,
    },
    /// Data-efficiency sweep over models, training sizes and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// All four latent structures at one training size.
    Structures {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "100")]
        n_per_class: GridSize,
    },
    /// Paired direct and EM training at one training size.
    EmVsDirect {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "100")]
        n_per_class: GridSize,
    },
    /// Agreement of the three latent prediction rules on one checkpoint per seed.
    Rules {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "100")]
        n_per_class: GridSize,
    },
    /// Sample documents from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0-based label.
        #[arg(long)]
        label: usize,
        /// Latent value, or `marginal` to draw it from the model.
        #[arg(long, default_value = "marginal")]
        latent: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        /// Token limit including the boundary markers.
        #[arg(long, default_value_t = 82)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts of the run spec's models.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_003)]
        vocab_size: usize,
        #[arg(long, default_value_t = 4)]
        num_labels: usize,
    },
    /// Write a synthetic dataset with its process sidecar.
    Synth {
        /// Output directory for train.csv, test.csv and process.json.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated `key=value` process parameters.
        #[arg(long, default_value = "")]
        params: String,
    },
}

/// Flags shared by the experiment commands; they override `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the run spec's list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory with train.csv/test.csv, or `synthetic:<key=value,...>`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated model presets.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    /// Comma-separated training sizes per class.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<GridSize>>,
    /// Use the full size grid up to the whole pool.
    #[arg(long)]
    pub full_grid: bool,
    #[arg(long, value_delimiter = ',', value_parser = parse_rule)]
    pub rules: Option<Vec<PredictionRule>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// The CSV files start with a header row.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MethodArg {
    Direct,
    Em,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Direct => Method::Direct,
            MethodArg::Em => Method::Em,
        }
    }
}

fn parse_rule(s: &str) -> Result<PredictionRule, String> {
    PredictionRule::parse(s).ok_or_else(|| format!("unknown rule `{s}`"))
}

impl Common {
    /// The run spec from `--config` (or the default) with flags applied.
    pub fn spec(&self) -> Result<RunSpec> {
        let mut spec = match &self.config {
            Some(p) => RunSpec::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunSpec::default(),
        };
        if let Some(d) = &self.dataset {
            spec.dataset = d.clone();
        }
        if let Some(o) = &self.out {
            spec.out_dir = o.clone();
        }
        if let Some(names) = &self.models {
            spec.models = names
                .iter()
                .map(|n| ModelSpec::preset(n).with_context(|| format!("unknown model preset `{n}`")))
                .collect::<Result<_>>()?;
        }
        if self.full_grid {
            spec.grid = FULL_GRID.to_vec();
        }
        if let Some(g) = &self.grid {
            spec.grid = g.clone();
        }
        if let Some(r) = &self.rules {
            spec.rules = r.clone();
        }
        if let Some(s) = &self.seeds {
            spec.seeds = s.clone();
        }
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        if let Some(w) = self.workers {
            spec.workers = w;
        }
        if let Some(m) = self.method {
            spec.train.method = m.into();
        }
        if let Some(lr) = self.lr {
            spec.train.lr = lr;
        }
        if let Some(e) = self.max_epochs {
            spec.train.max_epochs = e;
        }
        if let Some(p) = self.patience {
            spec.train.patience = p;
        }
        if let Some(b) = self.batch_size {
            spec.train.batch_size = b;
        }
        if let Some(d) = self.dev_size {
            spec.dev_size = d;
        }
        if let Some(m) = self.min_count {
            spec.min_count = m;
        }
        if self.header {
            spec.has_header = true;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn find_model(spec: &RunSpec, name: Option<&str>) -> Result<ModelSpec> {
    match name {
        None => Ok(spec.models[0].clone()),
        Some(n) => spec
            .models
            .iter()
            .find(|m| m.name == n)
            .cloned()
            .or_else(|| ModelSpec::preset(n))
            .with_context(|| format!("no model named `{n}` in the run spec or presets")),
    }
}

fn encode_with(ck: &Checkpoint, data: &RawDataset) -> Vec<EncodedDocument> {
    let n = ck.model.config.num_labels;
    let docs: Vec<EncodedDocument> = data
        .test
        .iter()
        .filter(|d| d.label < n)
        .map(|d| EncodedDocument::encode(d, &ck.vocab))
        .collect();
    if docs.len() < data.test.len() {
        log::warn!("skipped {} test documents with labels the model does not know", data.test.len() - docs.len());
    }
    docs
}

/// Parses `--latent`: a non-negative integer or `marginal`.
pub fn parse_latent(s: &str) -> Result<LatentChoice> {
    if s.eq_ignore_ascii_case("marginal") {
        return Ok(LatentChoice::Marginal);
    }
    s.parse()
        .map(LatentChoice::Fixed)
        .with_context(|| format!("--latent must be an integer or `marginal`, got `{s}`"))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            model,
            n_per_class,
        } => {
            let spec = common.spec()?;
            let data = load_dataset(&spec)?;
            let leg = Leg {
                model: find_model(&spec, model.as_deref())?,
                n_per_class,
                seed: spec.seeds[0],
            };
            let run = train_leg(&data.raw, &spec, &leg)?;
            for r in &run.outcome.reports {
                writeln!(
                    out,
                    "epoch {:>3}  train_nll {:>10.4}  dev_acc {:.4}  {:>6.1}s",
                    r.epoch, r.train_nll, r.dev_acc, r.wall_seconds
                )?;
            }
            std::fs::create_dir_all(&spec.out_dir)?;
            let ck_path = spec.out_dir.join(format!("{}.ckpt", leg.model.name));
            Checkpoint {
                model: run.outcome.model.clone(),
                vocab: run.prepared.vocab.clone(),
            }
            .save(&ck_path)?;
            let metrics_path = spec.out_dir.join(crate::harness::METRICS_FILE);
            for row in leg_rows(&spec, &leg, &run)? {
                metrics::append(&metrics_path, &row)?;
                writeln!(
                    out,
                    "{} {}: best epoch {:?}, dev {:?}, test {:?}",
                    row.model, row.rule, row.epoch_best, row.dev_acc, row.test_acc
                )?;
            }
            writeln!(out, "checkpoint: {}", ck_path.display())?;
        }
        Command::Eval {
            common,
            checkpoint,
            rule,
        } => {
            let spec = common.spec()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&spec)?;
            let docs = encode_with(&ck, &data.raw);
            let rule = rule.unwrap_or_else(|| PredictionRule::default_for(ck.model.config.family));
            let pred = predict_labels(&ck.model, &docs, rule).map_err(|e| anyhow!("{e}"))?;
            let acc = latclass_core::inference::accuracy(&pred, &docs);
            writeln!(out, "{} test accuracy ({rule}): {acc:.4} on {} documents", spec.dataset, docs.len())?;
        }
        Command::Sweep { common } => {
            let spec = common.spec()?;
            let report = run_sweep(&spec)?;
            let rows = metrics::load(&report.metrics_path)?;
            writeln!(out, "{:<16} {:>6} {:>10} {:>8} {:>8} {:>6}", "model", "n", "mean dev", "min", "max", "seeds")?;
            for ((model, n), s) in metrics::dev_summary(&rows) {
                let n = GridSize(n).to_string();
                writeln!(
                    out,
                    "{model:<16} {n:>6} {:>10.2} {:>8.2} {:>8.2} {:>6}",
                    100.0 * s.mean,
                    100.0 * s.min,
                    100.0 * s.max,
                    s.count
                )?;
            }
            let failed = report.rows.iter().filter(|r| !r.note.is_empty()).count();
            writeln!(
                out,
                "{} new rows ({failed} with notes), {} legs skipped; metrics {}, plot {}",
                report.rows.len(),
                report.skipped,
                report.metrics_path.display(),
                report.plot_path.display()
            )?;
        }
        Command::Structures { common, n_per_class } => {
            let spec = common.spec()?;
            let data = load_dataset(&spec)?;
            write!(out, "{}", compare_structures(&data.raw, &spec, n_per_class)?)?;
        }
        Command::EmVsDirect { common, n_per_class } => {
            let spec = common.spec()?;
            let data = load_dataset(&spec)?;
            write!(out, "{}", compare_em_direct(&data.raw, &spec, n_per_class)?)?;
        }
        Command::Rules { common, n_per_class } => {
            let spec = common.spec()?;
            let data = load_dataset(&spec)?;
            write!(out, "{}", compare_rules(&data.raw, &spec, n_per_class)?.pooled)?;
        }
        Command::Generate {
            checkpoint,
            label,
            latent,
            count,
            temperature,
            max_len,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let spec = SampleSpec {
                label,
                latent: parse_latent(&latent)?,
                temperature,
                max_len,
                seed,
            };
            let samples = sample_many(&ck.model, &spec, count).map_err(|e| anyhow!("{e}"))?;
            for s in samples {
                writeln!(out, "y={}\tc={}\t{}", s.label, s.latent, ck.vocab.decode(&s.ids))?;
            }
        }
        Command::Params {
            common,
            vocab_size,
            num_labels,
        } => {
            let spec = common.spec()?;
            writeln!(out, "{:<16} {:<15} {:<13} {:>9} {:>12}", "model", "family", "structure", "out width", "params")?;
            for m in &spec.models {
                let cfg = latclass_core::ModelConfig {
                    vocab_size,
                    num_labels,
                    ..m.config.clone()
                };
                let structure = if cfg.family == Family::Latent { cfg.structure.name() } else { "-" };
                writeln!(
                    out,
                    "{:<16} {:<15} {:<13} {:>9} {:>12}",
                    m.name,
                    cfg.family.name(),
                    structure,
                    cfg.softmax_input_dim(),
                    count_params(&cfg).map_err(|e| anyhow!("{e}"))?
                )?;
            }
        }
        Command::Synth { out: dir, params } => {
            let spec = SyntheticSpec::parse_params(&params)?;
            let sidecar = write_synthetic(&spec, &dir)?;
            let b = sidecar.bayes_accuracy;
            writeln!(
                out,
                "wrote {} train and {} test documents to {}; Bayes accuracy {:.4}{} (chance {:.4})",
                spec.n_train,
                spec.n_test,
                dir.display(),
                b.value,
                if b.exact { " exact".to_string() } else { format!(" ± {:.4}", b.std_error) },
                sidecar.chance_accuracy
            )?;
        }
    }
    Ok(())
}

//! Training legs, resumable sweeps and the comparison experiments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use latclass_core::corpus::EncodedDocument;
use latclass_core::inference::{predict_many, InferenceError};
use latclass_core::model::count_params;
use latclass_core::train::{train, Clock, TrainError, TrainOutcome};
use latclass_core::{Family, Method, Model, ModelConfig, ModelError, PredictionRule, Structure};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{prepare, DataError, PrepareOptions, Prepared, RawDataset};
use crate::metrics::{self, MetricsRow};
use crate::plot::{LinePlot, Series};
use crate::runspec::{DatasetSource, GridSize, ModelSpec, RunSpec, SpecError};
use crate::synthetic::{synthetic_dataset, Sidecar};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid synthetic process: {0}")]
    Synthetic(&'static str),
    #[error("{0}")]
    Model(ModelError),
    #[error("{0}")]
    Train(TrainError),
    #[error("{0}")]
    Inference(InferenceError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Model(e)
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        HarnessError::Train(e)
    }
}

impl From<InferenceError> for HarnessError {
    fn from(e: InferenceError) -> Self {
        HarnessError::Inference(e)
    }
}

/// Seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// A dataset in memory, with the generating process when it is synthetic.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub raw: RawDataset,
    pub sidecar: Option<Sidecar>,
}

pub fn load_dataset(spec: &RunSpec) -> Result<LoadedData, HarnessError> {
    match spec.source()? {
        DatasetSource::Dir(dir) => Ok(LoadedData {
            raw: RawDataset::load_dir(&dir, spec.has_header)?,
            sidecar: None,
        }),
        DatasetSource::Synthetic(s) => {
            let (raw, sidecar) = synthetic_dataset(&s).map_err(HarnessError::Synthetic)?;
            Ok(LoadedData {
                raw,
                sidecar: Some(sidecar),
            })
        }
    }
}

/// One `(model, n_per_class, seed)` cell of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Leg {
    pub model: ModelSpec,
    pub n_per_class: GridSize,
    pub seed: u64,
}

impl Leg {
    pub fn method(&self, spec: &RunSpec) -> Method {
        self.model.method.unwrap_or(spec.train.method)
    }
}

#[derive(Serialize)]
struct LegKey<'a> {
    dataset: &'a str,
    model: &'a ModelSpec,
    train: latclass_core::TrainSpec,
    n_per_class: GridSize,
    dev_size: usize,
    min_count: usize,
    has_header: bool,
    rules: Vec<PredictionRule>,
}

/// Content hash of everything that determines a leg's results.
pub fn leg_hash(spec: &RunSpec, leg: &Leg) -> String {
    let key = LegKey {
        dataset: &spec.dataset,
        model: &leg.model,
        train: latclass_core::TrainSpec {
            seed: leg.seed,
            method: leg.method(spec),
            ..spec.train.clone()
        },
        n_per_class: leg.n_per_class,
        dev_size: spec.dev_size,
        min_count: spec.min_count,
        has_header: spec.has_header,
        rules: spec.rules_for(leg.model.config.family),
    };
    let json = serde_json::to_vec(&key).expect("leg key serializes");
    hex::encode(&Sha256::digest(json)[..16])
}

/// A trained leg.
#[derive(Debug, Clone)]
pub struct LegRun {
    pub prepared: Prepared,
    pub config: ModelConfig,
    pub method: Method,
    pub outcome: TrainOutcome,
    pub wall_seconds: f64,
}

/// Subsamples, builds the vocabulary, and trains one leg.
pub fn train_leg(data: &RawDataset, spec: &RunSpec, leg: &Leg) -> Result<LegRun, HarnessError> {
    let clock = WallClock::new();
    let prepared = prepare(
        data,
        PrepareOptions {
            n_per_class: leg.n_per_class.0,
            dev_size: spec.dev_size,
            min_count: spec.min_count,
            seed: leg.seed,
            smooth_prior: leg.model.config.prior_smoothing,
        },
    )?;
    let config = ModelConfig {
        num_labels: prepared.split.num_labels,
        vocab_size: prepared.vocab.len(),
        ..leg.model.config.clone()
    };
    let model = Model::new(config.clone(), prepared.label_prior.clone(), leg.seed)?;
    let method = leg.method(spec);
    let train_spec = latclass_core::TrainSpec {
        seed: leg.seed,
        method,
        ..spec.train.clone()
    };
    let outcome = train(model, &prepared.split.train, &prepared.split.dev, &train_spec, &clock)?;
    log::info!(
        "{} n={} seed={}: best epoch {:?} of {}, {:?}",
        leg.model.name,
        leg.n_per_class,
        leg.seed,
        outcome.best_epoch,
        outcome.reports.len(),
        outcome.stop
    );
    Ok(LegRun {
        prepared,
        config,
        method,
        outcome,
        wall_seconds: clock.seconds(),
    })
}

/// Label predictions of `model` on `docs`, one vector per rule.
pub fn predictions(
    model: &Model,
    docs: &[EncodedDocument],
    rules: &[PredictionRule],
) -> Result<Vec<Vec<usize>>, HarnessError> {
    let mut out = vec![Vec::with_capacity(docs.len()); rules.len()];
    for d in docs {
        for (k, p) in predict_many(model, &d.ids, rules)?.into_iter().enumerate() {
            out[k].push(p.label);
        }
    }
    Ok(out)
}

fn accuracy_of(pred: &[usize], docs: &[EncodedDocument]) -> Option<f64> {
    if docs.is_empty() {
        return None;
    }
    Some(latclass_core::inference::accuracy(pred, docs))
}

fn base_row(spec: &RunSpec, leg: &Leg, rule: PredictionRule) -> MetricsRow {
    let cfg = &leg.model.config;
    let latent = cfg.family == Family::Latent;
    MetricsRow {
        dataset: spec.dataset.clone(),
        model: leg.model.name.clone(),
        family: cfg.family,
        structure: latent.then_some(cfg.structure),
        num_latent: if latent { cfg.num_latent } else { 0 },
        n_per_class: leg.n_per_class.0,
        seed: leg.seed,
        method: leg.method(spec),
        rule,
        epoch_best: None,
        dev_acc: None,
        test_acc: None,
        train_nll: None,
        wall_seconds: 0.0,
        param_count: 0,
        leg_hash: leg_hash(spec, leg),
        note: String::new(),
    }
}

/// One row per reported rule for a trained leg.
pub fn leg_rows(spec: &RunSpec, leg: &Leg, run: &LegRun) -> Result<Vec<MetricsRow>, HarnessError> {
    let rules = spec.rules_for(leg.model.config.family);
    let model = &run.outcome.model;
    let split = &run.prepared.split;
    let dev = predictions(model, &split.dev, &rules)?;
    let test = predictions(model, &split.test, &rules)?;
    let best = run.outcome.best_report();
    let param_count = count_params(&run.config)?;
    Ok(rules
        .iter()
        .enumerate()
        .map(|(k, &rule)| MetricsRow {
            epoch_best: run.outcome.best_epoch,
            dev_acc: accuracy_of(&dev[k], &split.dev),
            test_acc: accuracy_of(&test[k], &split.test),
            train_nll: best.map(|r| r.train_nll),
            wall_seconds: run.wall_seconds,
            param_count,
            note: match &run.outcome.stop {
                latclass_core::train::StopReason::Diverged { epoch, detail } => {
                    format!("diverged at epoch {epoch}: {detail}")
                }
                _ => String::new(),
            },
            ..base_row(spec, leg, rule)
        })
        .collect())
}

/// Trains and evaluates a leg; failures become rows carrying the error.
pub fn run_leg(data: &RawDataset, spec: &RunSpec, leg: &Leg) -> Vec<MetricsRow> {
    match train_leg(data, spec, leg).and_then(|run| leg_rows(spec, leg, &run)) {
        Ok(rows) => rows,
        Err(e) => {
            log::error!("{} n={} seed={}: {e}", leg.model.name, leg.n_per_class, leg.seed);
            spec.rules_for(leg.model.config.family)
                .into_iter()
                .map(|rule| MetricsRow {
                    note: format!("error: {e}"),
                    ..base_row(spec, leg, rule)
                })
                .collect()
        }
    }
}

/// Every leg of a sweep in model, size, seed order.
pub fn sweep_legs(spec: &RunSpec) -> Vec<Leg> {
    let mut legs = Vec::new();
    for model in &spec.models {
        for &n in &spec.grid {
            for &seed in &spec.seeds {
                legs.push(Leg {
                    model: model.clone(),
                    n_per_class: n,
                    seed,
                });
            }
        }
    }
    legs
}

/// Runs `legs` on `spec.workers` threads, handing each leg's rows to `sink`
/// on the calling thread as legs finish.
pub fn run_legs(
    data: &RawDataset,
    spec: &RunSpec,
    legs: &[Leg],
    mut sink: impl FnMut(usize, Vec<MetricsRow>) -> Result<(), HarnessError>,
) -> Result<(), HarnessError> {
    let workers = spec.workers.clamp(1, legs.len().max(1));
    if workers == 1 {
        for (i, leg) in legs.iter().enumerate() {
            sink(i, run_leg(data, spec, leg))?;
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= legs.len() || tx.send((i, run_leg(data, spec, &legs[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, rows) in rx {
            sink(i, rows)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Rows written by this invocation.
    pub rows: Vec<MetricsRow>,
    /// Legs skipped because the metrics file already had them.
    pub skipped: usize,
    pub metrics_path: PathBuf,
    pub plot_path: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const PLOT_FILE: &str = "accuracy.svg";

/// Runs every pending leg of the sweep, appending rows to
/// `<out>/metrics.csv`, then redraws `<out>/accuracy.svg`. Legs whose hash
/// already has an error-free row are skipped.
pub fn run_sweep(spec: &RunSpec) -> Result<SweepReport, HarnessError> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    let metrics_path = spec.out_dir.join(METRICS_FILE);
    let done: HashSet<String> = metrics::load(&metrics_path)?
        .into_iter()
        .filter(|r| r.note.is_empty())
        .map(|r| r.leg_hash)
        .collect();
    let all = sweep_legs(spec);
    let pending: Vec<Leg> = all.iter().filter(|l| !done.contains(&leg_hash(spec, l))).cloned().collect();
    let skipped = all.len() - pending.len();
    if skipped > 0 {
        log::info!("skipping {skipped} completed legs");
    }
    let data = if pending.is_empty() {
        None
    } else {
        Some(load_dataset(spec)?)
    };
    let mut rows = Vec::new();
    if let Some(data) = &data {
        run_legs(&data.raw, spec, &pending, |_, leg_rows| {
            for r in &leg_rows {
                metrics::append(&metrics_path, r)?;
            }
            rows.extend(leg_rows);
            Ok(())
        })?;
    }
    let plot_path = spec.out_dir.join(PLOT_FILE);
    let all_rows = metrics::load(&metrics_path)?;
    fs::write(&plot_path, accuracy_plot(&all_rows).to_svg())?;
    Ok(SweepReport {
        rows,
        skipped,
        metrics_path,
        plot_path,
    })
}

/// Mean dev accuracy against training size per class, one series per model
/// (and rule, when a model reports several). Whole-pool legs are not drawn.
pub fn accuracy_plot(rows: &[MetricsRow]) -> LinePlot {
    let mut rules_per_model: BTreeMap<&str, HashSet<PredictionRule>> = BTreeMap::new();
    for r in rows {
        rules_per_model.entry(&r.model).or_default().insert(r.rule);
    }
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let (Some(n), Some(acc)) = (r.n_per_class, r.dev_acc) else {
            continue;
        };
        let name = if rules_per_model[r.model.as_str()].len() > 1 {
            format!("{} ({})", r.model, r.rule)
        } else {
            r.model.clone()
        };
        groups.entry((name, n)).or_default().push(acc);
    }
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((name, n), accs) in groups {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        series.entry(name).or_default().push((n as f64, mean));
    }
    LinePlot {
        title: "Dev accuracy by training size".into(),
        x_label: "training examples per class".into(),
        y_label: "mean dev accuracy".into(),
        log_x: true,
        series: series.into_iter().map(|(name, points)| Series { name, points }).collect(),
    }
}

fn first_latent(spec: &RunSpec) -> Result<&ModelSpec, HarnessError> {
    spec.models
        .iter()
        .find(|m| m.config.family == Family::Latent)
        .ok_or_else(|| HarnessError::Invalid("this comparison needs a latent model in the run spec".into()))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn save_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    metrics::write_rows(fs::File::create(path)?, rows, true)?;
    Ok(())
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_else(|| "-".into())
}

#[derive(Debug, Clone)]
pub struct StructureReport {
    pub rows: Vec<MetricsRow>,
    /// Mean dev accuracy per structure in [`Structure::ALL`] order.
    pub means: Vec<(Structure, Option<f64>)>,
    /// Mean dev accuracy of Hierarchical minus Middle.
    pub hier_minus_middle: Option<f64>,
}

/// Trains the first latent model of `spec` under all four structures at one
/// training size; rows go to `<out>/structures.csv`.
pub fn compare_structures(data: &RawDataset, spec: &RunSpec, n: GridSize) -> Result<StructureReport, HarnessError> {
    let base = first_latent(spec)?;
    let mut legs = Vec::new();
    for &seed in &spec.seeds {
        for s in Structure::ALL {
            let mut model = base.clone();
            model.name = s.name().into();
            model.config.structure = s;
            legs.push(Leg {
                model,
                n_per_class: n,
                seed,
            });
        }
    }
    let mut rows = collect_rows(data, spec, &legs)?;
    rows.retain(|r| r.rule == PredictionRule::default_for(Family::Latent));
    let means: Vec<(Structure, Option<f64>)> = Structure::ALL
        .iter()
        .map(|&s| (s, mean(rows.iter().filter(|r| r.structure == Some(s)).filter_map(|r| r.dev_acc))))
        .collect();
    let get = |s| means.iter().find(|m| m.0 == s).and_then(|m| m.1);
    let hier_minus_middle = get(Structure::Hierarchical).zip(get(Structure::Middle)).map(|(h, m)| h - m);
    save_rows(&spec.out_dir.join("structures.csv"), &rows)?;
    Ok(StructureReport {
        rows,
        means,
        hier_minus_middle,
    })
}

fn collect_rows(data: &RawDataset, spec: &RunSpec, legs: &[Leg]) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut slots: Vec<Vec<MetricsRow>> = vec![Vec::new(); legs.len()];
    run_legs(data, spec, legs, |i, rows| {
        slots[i] = rows;
        Ok(())
    })?;
    Ok(slots.into_iter().flatten().collect())
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>6} {:>8}", "structure", "seed", "dev acc")?;
        for r in &self.rows {
            let s = r.structure.map(|s| s.name()).unwrap_or("-");
            writeln!(f, "{:<14} {:>6} {:>8}", s, r.seed, fmt_acc(r.dev_acc))?;
        }
        for (s, m) in &self.means {
            writeln!(f, "{:<21} {:>8}", format!("mean {}", s.name()), fmt_acc(*m))?;
        }
        match self.hier_minus_middle {
            Some(d) => writeln!(f, "delta hierarchical - middle: {:+.2} points", 100.0 * d),
            None => writeln!(f, "delta hierarchical - middle: unavailable"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmDirectPair {
    pub seed: u64,
    pub direct: MetricsRow,
    pub em: MetricsRow,
    /// Epochs run before stopping, `(direct, em)`.
    pub epochs: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct EmDirectReport {
    pub pairs: Vec<EmDirectPair>,
    pub mean_direct: Option<f64>,
    pub mean_em: Option<f64>,
}

/// Paired Direct and EM runs of the first latent model per seed; rows go to
/// `<out>/em_vs_direct.csv`.
pub fn compare_em_direct(data: &RawDataset, spec: &RunSpec, n: GridSize) -> Result<EmDirectReport, HarnessError> {
    let base = first_latent(spec)?;
    let mut pairs = Vec::new();
    for &seed in &spec.seeds {
        let mut runs = Vec::new();
        for method in [Method::Direct, Method::Em] {
            let mut model = base.clone();
            model.name = format!("{}-{}", base.name, method.name());
            model.method = Some(method);
            let leg = Leg {
                model,
                n_per_class: n,
                seed,
            };
            let run = train_leg(data, spec, &leg)?;
            let row = leg_rows(spec, &leg, &run)?.remove(0);
            runs.push((row, run.outcome.reports.len()));
        }
        let (em, em_epochs) = runs.pop().expect("two runs");
        let (direct, direct_epochs) = runs.pop().expect("two runs");
        pairs.push(EmDirectPair {
            seed,
            direct,
            em,
            epochs: (direct_epochs, em_epochs),
        });
    }
    let rows: Vec<MetricsRow> = pairs.iter().flat_map(|p| [p.direct.clone(), p.em.clone()]).collect();
    save_rows(&spec.out_dir.join("em_vs_direct.csv"), &rows)?;
    Ok(EmDirectReport {
        mean_direct: mean(pairs.iter().filter_map(|p| p.direct.dev_acc)),
        mean_em: mean(pairs.iter().filter_map(|p| p.em.dev_acc)),
        pairs,
    })
}

impl fmt::Display for EmDirectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>12} {:>12}", "seed", "direct", "em")?;
        for p in &self.pairs {
            writeln!(
                f,
                "{:>6} {:>7} ({:>3}) {:>7} ({:>3})",
                p.seed,
                fmt_acc(p.direct.dev_acc),
                p.epochs.0,
                fmt_acc(p.em.dev_acc),
                p.epochs.1
            )?;
        }
        writeln!(f, "{:>6} {:>12} {:>12}", "mean", fmt_acc(self.mean_direct), fmt_acc(self.mean_em))
    }
}

/// Accuracy of each rule and pairwise agreement rates on one document set.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleAgreement {
    pub rules: Vec<PredictionRule>,
    pub accuracy: Vec<f64>,
    /// `agreement[i][j]`: fraction of documents where rules `i` and `j` agree.
    pub agreement: Vec<Vec<f64>>,
    pub documents: usize,
}

pub fn rule_agreement(model: &Model, docs: &[EncodedDocument]) -> Result<RuleAgreement, HarnessError> {
    let rules = PredictionRule::LATENT.to_vec();
    let preds = predictions(model, docs, &rules)?;
    Ok(agreement_of(rules, &preds, docs))
}

fn agreement_of(rules: Vec<PredictionRule>, preds: &[Vec<usize>], docs: &[EncodedDocument]) -> RuleAgreement {
    let n = docs.len().max(1) as f64;
    let k = rules.len();
    let agreement = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| preds[i].iter().zip(&preds[j]).filter(|(a, b)| a == b).count() as f64 / n)
                .collect()
        })
        .collect();
    RuleAgreement {
        accuracy: preds.iter().map(|p| latclass_core::inference::accuracy(p, docs)).collect(),
        rules,
        agreement,
        documents: docs.len(),
    }
}

#[derive(Debug, Clone)]
pub struct RulesReport {
    pub rows: Vec<MetricsRow>,
    /// Pooled over the dev sets of all seeds.
    pub pooled: RuleAgreement,
}

/// Trains the first latent model once per seed and applies all three rules
/// to the same checkpoint; rows go to `<out>/rules.csv`.
pub fn compare_rules(data: &RawDataset, spec: &RunSpec, n: GridSize) -> Result<RulesReport, HarnessError> {
    let base = first_latent(spec)?;
    let rule_spec = RunSpec {
        rules: PredictionRule::LATENT.to_vec(),
        ..spec.clone()
    };
    let mut rows = Vec::new();
    let mut pooled_docs = Vec::new();
    let mut pooled_preds = vec![Vec::new(); PredictionRule::LATENT.len()];
    for &seed in &spec.seeds {
        let leg = Leg {
            model: base.clone(),
            n_per_class: n,
            seed,
        };
        let run = train_leg(data, &rule_spec, &leg)?;
        rows.extend(leg_rows(&rule_spec, &leg, &run)?);
        let dev = &run.prepared.split.dev;
        for (k, p) in predictions(&run.outcome.model, dev, &PredictionRule::LATENT)?.into_iter().enumerate() {
            pooled_preds[k].extend(p);
        }
        pooled_docs.extend(dev.iter().cloned());
    }
    save_rows(&spec.out_dir.join("rules.csv"), &rows)?;
    Ok(RulesReport {
        rows,
        pooled: agreement_of(PredictionRule::LATENT.to_vec(), &pooled_preds, &pooled_docs),
    })
}

impl fmt::Display for RuleAgreement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<24}", "agreement (%)")?;
        for r in &self.rules {
            write!(f, " {:>22}", r.name())?;
        }
        writeln!(f)?;
        for (i, r) in self.rules.iter().enumerate() {
            write!(f, "{:<24}", r.name())?;
            for a in &self.agreement[i] {
                write!(f, " {:>22.2}", 100.0 * a)?;
            }
            writeln!(f)?;
        }
        for (r, a) in self.rules.iter().zip(&self.accuracy) {
            writeln!(f, "accuracy {:<24} {:.2}", r.name(), 100.0 * a)?;
        }
        writeln!(f, "documents: {}", self.documents)
    }
}

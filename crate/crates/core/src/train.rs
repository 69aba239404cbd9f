//! Direct marginal-likelihood training and mini-batch EM, with early stopping
//! on dev accuracy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::corpus::EncodedDocument;
use crate::inference::{evaluate_accuracy, InferenceError, PredictionRule};
use crate::math;
use crate::model::{log_joint_nodes, objective, Family, Model, ModelError, Objective};
use crate::optim::{adam_step, AdamState, OptimError};
use crate::rng;
use crate::tape::{Gradients, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    Direct,
    Em,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Em => "em",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainSpec {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Adam steps per E-step.
    pub m_step_iters: usize,
    /// Rule used for dev accuracy; the family default when `None`.
    pub rule: Option<PredictionRule>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            method: Method::Direct,
            lr: 0.001,
            batch_size: 32,
            max_epochs: 150,
            patience: 5,
            seed: 0,
            clip_norm: Some(5.0),
            m_step_iters: 1,
            rule: None,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.m_step_iters == 0 {
            return Err(TrainError::Config("batch_size, patience and m_step_iters must be at least 1"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(TrainError::Config("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Config(&'static str),
    Model(ModelError),
    Inference(InferenceError),
    Optim(OptimError),
    /// The objective of a minibatch was NaN or infinite.
    NonFiniteObjective,
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<InferenceError> for TrainError {
    fn from(e: InferenceError) -> Self {
        TrainError::Inference(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "invalid train spec: {m}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Inference(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::NonFiniteObjective => f.write_str("training objective became non-finite"),
        }
    }
}

/// Seconds since an arbitrary origin; injected because `core` has no clock.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean negative training objective in nats per example, measured before
    /// each minibatch update.
    pub train_nll: f64,
    pub dev_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// Training hit a non-finite objective or gradient during `epoch`.
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev-accuracy epoch (the initial model if no
    /// epoch completed).
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn best_report(&self) -> Option<&EpochReport> {
        self.best_epoch.map(|e| &self.reports[e - 1])
    }
}

/// Posteriors `p(c|x, y)` and log marginals for each labelled document, with
/// parameters frozen.
pub fn e_step(model: &Model, batch: &[&EncodedDocument]) -> Result<(Vec<Vec<f64>>, Vec<f64>), TrainError> {
    if model.config.family != Family::Latent {
        return Err(ModelError::Mismatch("EM needs a latent model").into());
    }
    let mut posts = Vec::with_capacity(batch.len());
    let mut marg = Vec::with_capacity(batch.len());
    for d in batch {
        let r = model.log_marginal(&d.ids, d.label)?;
        posts.push(posterior(&r.components));
        marg.push(r.log_marginal);
    }
    Ok((posts, marg))
}

/// `exp(ℓ_c − log Σ exp ℓ)`.
pub fn posterior(log_joints: &[f64]) -> Vec<f64> {
    math::log_softmax(log_joints).into_iter().map(math::exp).collect()
}

/// Gradient of the mean loss (negated objective) over `batch` and the mean
/// objective value. `weights[i]` switches example `i` to the expected
/// complete-data objective.
pub fn batch_gradient(
    model: &Model,
    batch: &[&EncodedDocument],
    weights: Option<&[Vec<f64>]>,
) -> Result<(Gradients, f64), TrainError> {
    let mut grads = Gradients::zeros(&model.params);
    let mut total = 0.0;
    let scale = -1.0 / batch.len() as f64;
    for (i, d) in batch.iter().enumerate() {
        let obj = match weights {
            Some(w) => Objective::Expected(&w[i]),
            None => Objective::Likelihood,
        };
        let mut tape = Tape::new(&model.params);
        let root = objective(&mut tape, model, &d.ids, d.label, obj)?;
        total += tape.scalar(root);
        grads.add_scaled(&tape.backward(root), scale);
    }
    Ok((grads, total / batch.len() as f64))
}

fn apply(model: &mut Model, mut grads: Gradients, adam: &mut AdamState, spec: &TrainSpec) -> Result<(), TrainError> {
    if let Some(c) = spec.clip_norm {
        grads.clip_global_norm(c);
    }
    adam_step(&mut model.params, &grads, adam)?;
    Ok(())
}

/// One Adam step on the mean minibatch likelihood objective. Returns the
/// mean objective before the update.
pub fn direct_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&EncodedDocument],
    spec: &TrainSpec,
) -> Result<f64, TrainError> {
    let (grads, obj) = batch_gradient(model, batch, None)?;
    if !obj.is_finite() {
        return Err(TrainError::NonFiniteObjective);
    }
    apply(model, grads, adam, spec)?;
    Ok(obj)
}

/// `spec.m_step_iters` Adam steps on `Σ_c posterior_c log p(x, y, c)` with the
/// posteriors held fixed. Returns the expected objective before the first step.
pub fn m_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&EncodedDocument],
    posteriors: &[Vec<f64>],
    spec: &TrainSpec,
) -> Result<f64, TrainError> {
    let mut first = None;
    for _ in 0..spec.m_step_iters {
        let (grads, obj) = batch_gradient(model, batch, Some(posteriors))?;
        if !obj.is_finite() {
            return Err(TrainError::NonFiniteObjective);
        }
        first.get_or_insert(obj);
        apply(model, grads, adam, spec)?;
    }
    Ok(first.unwrap_or(f64::NAN))
}

/// E-step then M-step on one minibatch. Returns the mean log marginal before
/// the update.
pub fn em_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&EncodedDocument],
    spec: &TrainSpec,
) -> Result<f64, TrainError> {
    let (posts, marg) = e_step(model, batch)?;
    let obj = marg.iter().sum::<f64>() / batch.len() as f64;
    if !obj.is_finite() {
        return Err(TrainError::NonFiniteObjective);
    }
    m_step(model, adam, batch, &posts, spec)?;
    Ok(obj)
}

/// Visiting order for `epoch` (0-based), reseeded from the run seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, rng::streams::SHUFFLE, epoch as u64));
    order
}

/// Trains with `spec.method`, keeping the parameters of the best dev epoch.
pub fn train(
    model: Model,
    train: &[EncodedDocument],
    dev: &[EncodedDocument],
    spec: &TrainSpec,
    clock: &dyn Clock,
) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    let family = model.config.family;
    if spec.method == Method::Em && family != Family::Latent {
        return Err(ModelError::Mismatch("EM needs a latent model").into());
    }
    let rule = spec.rule.unwrap_or_else(|| PredictionRule::default_for(family));
    if !rule.compatible(family) {
        return Err(InferenceError::Incompatible { rule, family }.into());
    }
    if spec.max_epochs > 0 && (train.is_empty() || dev.is_empty()) {
        return Err(TrainError::Config("training needs non-empty train and dev sets"));
    }
    let mut model = model;
    let mut adam = AdamState::new(&model.params, spec.lr);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut reports = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=spec.max_epochs {
        let start = clock.seconds();
        let order = epoch_order(train.len(), spec.seed, epoch - 1);
        let mut total = 0.0;
        let mut failure = None;
        for chunk in order.chunks(spec.batch_size) {
            let batch: Vec<&EncodedDocument> = chunk.iter().map(|&i| &train[i]).collect();
            let step = match spec.method {
                Method::Direct => direct_step(&mut model, &mut adam, &batch, spec),
                Method::Em => em_step(&mut model, &mut adam, &batch, spec),
            };
            match step {
                Ok(obj) => total += obj * batch.len() as f64,
                Err(e @ (TrainError::NonFiniteObjective | TrainError::Optim(_))) => {
                    failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = failure {
            stop = StopReason::Diverged {
                epoch,
                detail: format!("{e}"),
            };
            break;
        }
        let dev_acc = evaluate_accuracy(&model, dev, rule)?;
        reports.push(EpochReport {
            epoch,
            train_nll: -total / train.len() as f64,
            dev_acc,
            wall_seconds: clock.seconds() - start,
        });
        if dev_acc > best_acc {
            best_acc = dev_acc;
            best_epoch = Some(epoch);
            best = model.clone();
        } else if epoch - best_epoch.unwrap_or(0) >= spec.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        reports,
        best_epoch,
        stop,
    })
}

/// [`train`] with `Method::Direct`.
pub fn train_direct(
    model: Model,
    train_set: &[EncodedDocument],
    dev: &[EncodedDocument],
    spec: &TrainSpec,
    clock: &dyn Clock,
) -> Result<TrainOutcome, TrainError> {
    let spec = TrainSpec {
        method: Method::Direct,
        ..spec.clone()
    };
    train(model, train_set, dev, &spec, clock)
}

/// [`train`] with `Method::Em`.
pub fn train_em(
    model: Model,
    train_set: &[EncodedDocument],
    dev: &[EncodedDocument],
    spec: &TrainSpec,
    clock: &dyn Clock,
) -> Result<TrainOutcome, TrainError> {
    let spec = TrainSpec {
        method: Method::Em,
        ..spec.clone()
    };
    train(model, train_set, dev, &spec, clock)
}

/// Posterior-weighted sum of per-component gradients,
/// `Σ_c p(c|x, y) ∇ log p(x, y, c)`, for one document.
pub fn posterior_weighted_gradient(model: &Model, ids: &[usize], y: usize) -> Result<Gradients, TrainError> {
    let mut tape = Tape::new(&model.params);
    let parts = log_joint_nodes(&mut tape, model, ids, y)?;
    let values: Vec<f64> = parts.iter().map(|&n| tape.scalar(n)).collect();
    let post = posterior(&values);
    let mut g = Gradients::zeros(&model.params);
    for (&n, &w) in parts.iter().zip(&post) {
        g.add_scaled(&tape.backward(n), w);
    }
    Ok(g)
}

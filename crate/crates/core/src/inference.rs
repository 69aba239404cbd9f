//! Label prediction rules.

use alloc::vec::Vec;
use core::fmt;

use crate::corpus::EncodedDocument;
use crate::math;
use crate::model::{Family, Model, ModelError, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PredictionRule {
    /// `argmax_y log Σ_c p(x, y, c)`.
    MarginalizePrior,
    /// `argmax_y log Σ_c p(x|·) p(c|x, y) p(y|·)`: the latent factor replaced by
    /// the posterior.
    MarginalizePosterior,
    /// `argmax_y max_c log p(x, y, c)`.
    MaxLatent,
    /// `argmax_y log p(y|x)`.
    DiscriminativeArgmax,
    /// `argmax_y log p(x|y) + log p(y)`.
    GenerativeArgmax,
}

impl PredictionRule {
    pub const ALL: [PredictionRule; 5] = [
        PredictionRule::MarginalizePrior,
        PredictionRule::MarginalizePosterior,
        PredictionRule::MaxLatent,
        PredictionRule::DiscriminativeArgmax,
        PredictionRule::GenerativeArgmax,
    ];

    pub const LATENT: [PredictionRule; 3] = [
        PredictionRule::MarginalizePrior,
        PredictionRule::MarginalizePosterior,
        PredictionRule::MaxLatent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictionRule::MarginalizePrior => "marginalize_prior",
            PredictionRule::MarginalizePosterior => "marginalize_posterior",
            PredictionRule::MaxLatent => "max_latent",
            PredictionRule::DiscriminativeArgmax => "discriminative_argmax",
            PredictionRule::GenerativeArgmax => "generative_argmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// The rule used when none is requested.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Discriminative => PredictionRule::DiscriminativeArgmax,
            Family::Generative => PredictionRule::GenerativeArgmax,
            Family::Latent => PredictionRule::MarginalizePrior,
        }
    }

    /// Marginalizing over a single implicit latent value is the generative
    /// rule, so `MarginalizePrior` is also accepted for generative models.
    pub fn compatible(self, family: Family) -> bool {
        match self {
            PredictionRule::DiscriminativeArgmax => family == Family::Discriminative,
            PredictionRule::GenerativeArgmax => family == Family::Generative,
            PredictionRule::MarginalizePrior => family != Family::Discriminative,
            PredictionRule::MarginalizePosterior | PredictionRule::MaxLatent => family == Family::Latent,
        }
    }
}

impl fmt::Display for PredictionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceError {
    Incompatible { rule: PredictionRule, family: Family },
    EmptySplit,
    Model(ModelError),
}

impl From<ModelError> for InferenceError {
    fn from(e: ModelError) -> Self {
        InferenceError::Model(e)
    }
}

impl fmt::Display for InferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceError::Incompatible { rule, family } => {
                write!(f, "rule {rule} cannot be used with a {family} model")
            }
            InferenceError::EmptySplit => f.write_str("cannot evaluate on an empty split"),
            InferenceError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Per-label log-space scores; `label` attains the maximum.
    pub scores: Vec<f64>,
}

impl Prediction {
    fn from_scores(scores: Vec<f64>) -> Self {
        Prediction {
            label: math::argmax(&scores),
            scores,
        }
    }
}

/// Per-label scores of a generative rule over a precomputed table.
pub fn table_scores(table: &ScoreTable, rule: PredictionRule) -> Vec<f64> {
    (0..table.num_labels)
        .map(|y| {
            let joints = table.joints(y);
            match rule {
                PredictionRule::MaxLatent => joints.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PredictionRule::MarginalizePosterior => {
                    let z = math::log_sum_exp(&joints);
                    let terms: Vec<f64> = (0..table.num_latent)
                        .map(|c| table.text(y, c) + (joints[c] - z) + table.label(y, c))
                        .collect();
                    math::log_sum_exp(&terms)
                }
                _ => math::log_sum_exp(&joints),
            }
        })
        .collect()
}

/// Applies `rule` to a precomputed table.
pub fn predict_table(table: &ScoreTable, rule: PredictionRule) -> Prediction {
    Prediction::from_scores(table_scores(table, rule))
}

pub fn predict(model: &Model, ids: &[usize], rule: PredictionRule) -> Result<Prediction, InferenceError> {
    let family = model.config.family;
    if !rule.compatible(family) {
        return Err(InferenceError::Incompatible { rule, family });
    }
    if family == Family::Discriminative {
        return Ok(Prediction::from_scores(model.disc_log_probs(ids)?));
    }
    Ok(predict_table(&model.score_table(ids)?, rule))
}

/// Predictions under several rules, sharing one score table per document.
pub fn predict_many(model: &Model, ids: &[usize], rules: &[PredictionRule]) -> Result<Vec<Prediction>, InferenceError> {
    let family = model.config.family;
    if let Some(&rule) = rules.iter().find(|r| !r.compatible(family)) {
        return Err(InferenceError::Incompatible { rule, family });
    }
    if family == Family::Discriminative {
        let p = Prediction::from_scores(model.disc_log_probs(ids)?);
        return Ok(rules.iter().map(|_| p.clone()).collect());
    }
    let table = model.score_table(ids)?;
    Ok(rules.iter().map(|&r| predict_table(&table, r)).collect())
}

/// Predicted labels for every document.
pub fn predict_labels(model: &Model, docs: &[EncodedDocument], rule: PredictionRule) -> Result<Vec<usize>, InferenceError> {
    docs.iter().map(|d| predict(model, &d.ids, rule).map(|p| p.label)).collect()
}

/// Fraction of documents whose predicted label equals the gold label.
pub fn evaluate_accuracy(model: &Model, docs: &[EncodedDocument], rule: PredictionRule) -> Result<f64, InferenceError> {
    if docs.is_empty() {
        return Err(InferenceError::EmptySplit);
    }
    let labels = predict_labels(model, docs, rule)?;
    Ok(accuracy(&labels, docs))
}

pub fn accuracy(predicted: &[usize], docs: &[EncodedDocument]) -> f64 {
    let hits = predicted.iter().zip(docs).filter(|(p, d)| **p == d.label).count();
    hits as f64 / docs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Structure};
    use alloc::vec;

    fn latent_model(num_latent: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            family: Family::Latent,
            structure: Structure::Auxiliary,
            d_word: 4,
            d_hidden: 4,
            d_label: 3,
            d_latent: 2,
            num_latent,
            num_labels: 3,
            vocab_size: 9,
            init_scale: 0.5,
            ..ModelConfig::default()
        };
        Model::new(cfg, vec![1.0 / 3.0; 3], seed).unwrap()
    }

    #[test]
    fn single_latent_rules_coincide() {
        let m = latent_model(1, 3);
        let ps = predict_many(&m, &[1, 5, 6, 2], &PredictionRule::LATENT).unwrap();
        for p in &ps[1..] {
            assert_eq!(p.label, ps[0].label);
            for (a, b) in p.scores.iter().zip(&ps[0].scores) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn peaked_component_decides_every_rule() {
        // Label 2 owns one component 14 nats above everything else.
        let joints = vec![-30.0, -31.0, -29.5, -30.2, -29.9, -30.7, -30.1, -15.5, -30.3];
        let t = ScoreTable::from_joints(3, 3, joints);
        for r in PredictionRule::LATENT {
            assert_eq!(predict_table(&t, r).label, 2, "{r}");
        }
    }

    #[test]
    fn shift_leaves_labels_unchanged() {
        let m = latent_model(3, 8);
        let t = m.score_table(&[1, 4, 7, 8, 2]).unwrap();
        let s = t.shifted(123.25);
        for r in PredictionRule::LATENT {
            assert_eq!(predict_table(&t, r).label, predict_table(&s, r).label);
        }
    }

    #[test]
    fn ties_go_to_label_zero() {
        let mut m = latent_model(3, 1);
        for name in ["out.w", "out.b", "prior.w", "prior.b"] {
            m.fill(name, 0.0).unwrap();
        }
        let p = predict(&m, &[1, 3, 2], PredictionRule::MarginalizePrior).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.scores.iter().all(|s| *s == p.scores[0]));
    }

    #[test]
    fn scores_finite_and_label_is_max() {
        let m = latent_model(3, 5);
        for r in PredictionRule::LATENT {
            let p = predict(&m, &[1, 6, 3, 2], r).unwrap();
            assert!(p.scores.iter().all(|s| s.is_finite()));
            assert!(p.scores.iter().all(|s| *s <= p.scores[p.label]));
        }
    }

    #[test]
    fn incompatible_rule_rejected() {
        let m = latent_model(2, 5);
        assert!(matches!(
            predict(&m, &[1, 2], PredictionRule::DiscriminativeArgmax),
            Err(InferenceError::Incompatible { .. })
        ));
        assert_eq!(evaluate_accuracy(&m, &[], PredictionRule::MaxLatent), Err(InferenceError::EmptySplit));
    }

    #[test]
    fn accuracy_ignores_order() {
        let m = latent_model(2, 5);
        let mut docs: Vec<EncodedDocument> = (0..12)
            .map(|i| EncodedDocument {
                ids: vec![1, 3 + i % 6, 3 + (i * 5) % 6, 2],
                label: i % 3,
            })
            .collect();
        let a = evaluate_accuracy(&m, &docs, PredictionRule::MarginalizePrior).unwrap();
        docs.reverse();
        let b = evaluate_accuracy(&m, &docs, PredictionRule::MarginalizePrior).unwrap();
        assert_eq!(a, b);
        let labels = predict_labels(&m, &docs, PredictionRule::MarginalizePrior).unwrap();
        let gold: Vec<EncodedDocument> = docs
            .iter()
            .zip(&labels)
            .map(|(d, &l)| EncodedDocument { ids: d.ids.clone(), label: l })
            .collect();
        assert_eq!(evaluate_accuracy(&m, &gold, PredictionRule::MarginalizePrior).unwrap(), 1.0);
    }
}

//! Differentiable scoring on a [`Tape`].

use alloc::vec::Vec;

use super::{Family, Model, ModelError, Structure};
use crate::math;
use crate::tape::{NodeId, Tape};
use crate::tensor::ParamId;

/// What a training example contributes to the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective<'a> {
    /// `log p(y|x)` (discriminative), `log p(x, y)` (generative) or
    /// `log Σ_c p(x, y, c)` (latent).
    Likelihood,
    /// `Σ_c w_c log p(x, y, c)` with constant weights, the EM M-step target.
    Expected(&'a [f64]),
}

struct Nodes {
    embed: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
}

fn lstm_nodes(tape: &mut Tape<'_>, model: &Model) -> Nodes {
    let h = model.handles();
    Nodes {
        embed: tape.param(h.embed),
        wx: tape.param(h.lstm_wx),
        wh: tape.param(h.lstm_wh),
        b: tape.param(h.lstm_b),
    }
}

fn need(p: Option<ParamId>, what: &'static str) -> Result<ParamId, ModelError> {
    p.ok_or(ModelError::Mismatch(what))
}

/// Hidden states after reading each of `inputs`, stacked as `[n, d_h]`.
fn hidden_matrix(tape: &mut Tape<'_>, model: &Model, inputs: &[usize]) -> Result<NodeId, ModelError> {
    let n = lstm_nodes(tape, model);
    let dh = model.config.d_hidden;
    let mut h = tape.zeros(1, dh);
    let mut c = tape.zeros(1, dh);
    let mut hs = Vec::with_capacity(inputs.len());
    for &id in inputs {
        let x = tape.gather(n.embed, &[id]);
        let (h2, c2) = tape.lstm_cell(x, h, c, n.wx, n.wh, n.b)?;
        h = h2;
        c = c2;
        hs.push(h);
    }
    Ok(tape.stack_rows(&hs)?)
}

fn check_doc(ids: &[usize]) -> Result<(), ModelError> {
    if ids.len() < 2 {
        return Err(ModelError::DocumentTooShort(ids.len()));
    }
    Ok(())
}

/// Teacher-forced text scorer: shared `h_t · W_h + b` logits plus one
/// condition-dependent shift per call.
struct LmScorer {
    base: NodeId,
    out_w: NodeId,
    d_hidden: usize,
}

impl LmScorer {
    fn new(tape: &mut Tape<'_>, model: &Model, ids: &[usize]) -> Result<Self, ModelError> {
        check_doc(ids)?;
        let h = model.handles();
        let out_w = tape.param(need(h.out_w, "text model needs an output layer")?);
        let out_b = tape.param(need(h.out_b, "text model needs an output layer")?);
        let hm = hidden_matrix(tape, model, &ids[..ids.len() - 1])?;
        let base = tape.affine_rows(hm, out_w, 0, Some(out_b))?;
        Ok(LmScorer {
            base,
            out_w,
            d_hidden: model.config.d_hidden,
        })
    }

    /// `Σ_t log p(ids[t+1] | ids[..=t], conditions)`.
    fn score(&self, tape: &mut Tape<'_>, ids: &[usize], conditions: &[NodeId]) -> Result<NodeId, ModelError> {
        let logits = if conditions.is_empty() {
            self.base
        } else {
            let cond = tape.concat(conditions)?;
            let shift = tape.affine_rows(cond, self.out_w, self.d_hidden, None)?;
            tape.add_row(self.base, shift)?
        };
        let lp = tape.log_softmax(logits);
        Ok(tape.pick_sum(lp, &ids[1..]))
    }
}

/// `log p(x | conditions)` where `conditions` are row-vector nodes whose
/// concatenation fills the non-hidden part of the softmax input. BOS is
/// never predicted; EOS is.
pub fn conditional_lm_log_prob(
    tape: &mut Tape<'_>,
    model: &Model,
    ids: &[usize],
    conditions: &[NodeId],
) -> Result<NodeId, ModelError> {
    let scorer = LmScorer::new(tape, model, ids)?;
    let width: usize = conditions.iter().map(|&c| tape.shape(c).1).sum();
    if model.config.d_hidden + width != model.config.softmax_input_dim() {
        return Err(ModelError::Mismatch("condition width does not match the output layer"));
    }
    scorer.score(tape, ids, conditions)
}

/// `log p(y | x)` for every label as a `[1, |Y|]` node.
pub fn disc_log_probs(tape: &mut Tape<'_>, model: &Model, ids: &[usize]) -> Result<NodeId, ModelError> {
    if model.config.family != Family::Discriminative {
        return Err(ModelError::Mismatch("disc_log_probs needs a discriminative model"));
    }
    if ids.is_empty() {
        return Err(ModelError::DocumentTooShort(0));
    }
    let h = model.handles();
    let hm = hidden_matrix(tape, model, ids)?;
    let pooled = tape.mean_rows(hm);
    let w = tape.param(need(h.cls_w, "classifier head")?);
    let b = tape.param(need(h.cls_b, "classifier head")?);
    let logits = tape.affine(pooled, w, Some(b))?;
    Ok(tape.log_softmax(logits))
}

/// `ℓ_c = log p(x, y, c)` for every latent value (a single `log p(x, y)` for
/// the generative family), as scalar nodes.
pub fn log_joint_nodes(
    tape: &mut Tape<'_>,
    model: &Model,
    ids: &[usize],
    y: usize,
) -> Result<Vec<NodeId>, ModelError> {
    let cfg = &model.config;
    if y >= cfg.num_labels {
        return Err(ModelError::Config("label out of range"));
    }
    let h = model.handles();
    let log_py = math::ln(model.label_prior()[y]);
    let scorer = LmScorer::new(tape, model, ids)?;
    let v_y = match h.label_embed {
        Some(p) => {
            let table = tape.param(p);
            Some(tape.row(table, y))
        }
        None => None,
    };
    match cfg.family {
        Family::Discriminative => Err(ModelError::Mismatch("log joints need a generative model")),
        Family::Generative => {
            let v_y = v_y.expect("generative models embed labels");
            let lm = scorer.score(tape, ids, &[v_y])?;
            Ok(alloc::vec![tape.add_const(lm, log_py)])
        }
        Family::Latent => {
            let s = cfg.structure;
            let latent_table = tape.param(need(h.latent_embed, "latent embedding")?);
            let log_latent = if s.has_latent_prior() {
                let w = tape.param(need(h.prior_w, "latent prior")?);
                let b = tape.param(need(h.prior_b, "latent prior")?);
                let dots = tape.row_dot(w, latent_table)?;
                let logits = tape.add(dots, b)?;
                tape.log_softmax(logits)
            } else {
                let w = tape.param(need(h.latent_head_w, "p(c|y) head")?);
                let b = tape.param(need(h.latent_head_b, "p(c|y) head")?);
                let logits = tape.affine(v_y.expect("p(c|y) reads v_y"), w, Some(b))?;
                tape.log_softmax(logits)
            };
            let log_label = if s == Structure::Joint {
                let w = tape.param(need(h.label_head_w, "p(y|c) head")?);
                let b = tape.param(need(h.label_head_b, "p(y|c) head")?);
                let logits = tape.affine(latent_table, w, Some(b))?;
                Some(tape.log_softmax(logits))
            } else {
                None
            };
            let mut out = Vec::with_capacity(cfg.num_latent);
            for c in 0..cfg.num_latent {
                let v_c = tape.row(latent_table, c);
                let lm = if s.text_sees_label() {
                    scorer.score(tape, ids, &[v_y.expect("text sees y"), v_c])?
                } else {
                    scorer.score(tape, ids, &[v_c])?
                };
                let pc = tape.pick(log_latent, c);
                let mut l = tape.add(lm, pc)?;
                l = match log_label {
                    Some(table) => {
                        let row = tape.row(table, c);
                        let py = tape.pick(row, y);
                        tape.add(l, py)?
                    }
                    None => tape.add_const(l, log_py),
                };
                out.push(l);
            }
            Ok(out)
        }
    }
}

/// Scalar training objective (to be maximized) for one labelled document.
pub fn objective(
    tape: &mut Tape<'_>,
    model: &Model,
    ids: &[usize],
    y: usize,
    obj: Objective<'_>,
) -> Result<NodeId, ModelError> {
    if model.config.family == Family::Discriminative {
        if let Objective::Expected(_) = obj {
            return Err(ModelError::Mismatch("expected complete-data objective needs a generative model"));
        }
        let lp = disc_log_probs(tape, model, ids)?;
        return Ok(tape.pick(lp, y));
    }
    let parts = log_joint_nodes(tape, model, ids, y)?;
    let v = tape.concat(&parts)?;
    match obj {
        Objective::Likelihood => Ok(tape.log_sum_exp(v)),
        Objective::Expected(w) => Ok(tape.weighted_sum(v, w)?),
    }
}

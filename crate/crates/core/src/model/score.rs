//! Forward-only scoring in plain `f64`, used for inference and sampling.
//!
//! Mirrors the tape graph in `graph.rs` without recording anything.

use alloc::vec;
use alloc::vec::Vec;

use super::{Family, Model, ModelError, Structure};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct LogJointResult {
    /// `ℓ_c = log p(x, y, c)` per latent value; length 1 for the generative family.
    pub components: Vec<f64>,
    /// `log Σ_c exp(ℓ_c)`.
    pub log_marginal: f64,
}

impl LogJointResult {
    pub fn from_components(components: Vec<f64>) -> Self {
        let log_marginal = math::log_sum_exp(&components);
        LogJointResult {
            components,
            log_marginal,
        }
    }
}

/// Factorized log joints for every `(y, c)` of one document.
///
/// `joint(y, c) = text(y, c) + latent(y, c) + label(y, c)` where `text` is the
/// conditional language model term, `latent` the log of the factor that
/// generates `c` (`p(c)` or `p(c|y)`), and `label` the log of the factor that
/// generates `y` (`p(y)` or `p(y|c)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub num_labels: usize,
    pub num_latent: usize,
    text: Vec<f64>,
    latent: Vec<f64>,
    label: Vec<f64>,
}

impl ScoreTable {
    /// Builds a table from row-major `[y][c]` arrays.
    pub fn new(num_labels: usize, num_latent: usize, text: Vec<f64>, latent: Vec<f64>, label: Vec<f64>) -> Self {
        let n = num_labels * num_latent;
        assert!(text.len() == n && latent.len() == n && label.len() == n, "score table size");
        ScoreTable {
            num_labels,
            num_latent,
            text,
            latent,
            label,
        }
    }

    /// Table whose joints are `joints[y][c]`, with the latent factor folded in
    /// as a uniform `p(c)` and no separate label factor.
    pub fn from_joints(num_labels: usize, num_latent: usize, joints: Vec<f64>) -> Self {
        let lc = -math::ln(num_latent as f64);
        let text = joints.iter().map(|j| j - lc).collect();
        let n = joints.len();
        ScoreTable::new(num_labels, num_latent, text, vec![lc; n], vec![0.0; n])
    }

    fn at(&self, y: usize, c: usize) -> usize {
        y * self.num_latent + c
    }

    pub fn text(&self, y: usize, c: usize) -> f64 {
        self.text[self.at(y, c)]
    }

    pub fn latent(&self, y: usize, c: usize) -> f64 {
        self.latent[self.at(y, c)]
    }

    pub fn label(&self, y: usize, c: usize) -> f64 {
        self.label[self.at(y, c)]
    }

    pub fn joint(&self, y: usize, c: usize) -> f64 {
        let i = self.at(y, c);
        self.text[i] + self.latent[i] + self.label[i]
    }

    pub fn joints(&self, y: usize) -> Vec<f64> {
        (0..self.num_latent).map(|c| self.joint(y, c)).collect()
    }

    /// Adds `k` to every joint (through the label factor).
    pub fn shifted(&self, k: f64) -> Self {
        let mut t = self.clone();
        t.label.iter_mut().for_each(|x| *x += k);
        t
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `x · w[rows, :] + b` for a row-major weight matrix with `cols` columns.
fn affine_row(x: &[f64], w: &[f64], cols: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; cols],
    };
    for (k, &a) in x.iter().enumerate() {
        if a != 0.0 {
            axpy(a, &w[k * cols..(k + 1) * cols], &mut out);
        }
    }
    out
}

impl Model {
    /// One LSTM step from token `input` and state `(h, c)`.
    pub fn lstm_step(&self, input: usize, h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.handles();
        let dh = self.config.d_hidden;
        let g4 = 4 * dh;
        let x = self.param(hd.embed).row(input);
        let mut gates = self.param(hd.lstm_b).data().to_vec();
        let wx = self.param(hd.lstm_wx).data();
        let wh = self.param(hd.lstm_wh).data();
        for (k, &a) in x.iter().enumerate() {
            if a != 0.0 {
                axpy(a, &wx[k * g4..(k + 1) * g4], &mut gates);
            }
        }
        for (k, &a) in h.iter().enumerate() {
            if a != 0.0 {
                axpy(a, &wh[k * g4..(k + 1) * g4], &mut gates);
            }
        }
        let mut h2 = vec![0.0; dh];
        let mut c2 = vec![0.0; dh];
        for j in 0..dh {
            let i = math::sigmoid(gates[j]);
            let f = math::sigmoid(gates[dh + j]);
            let g = math::tanh(gates[2 * dh + j]);
            let o = math::sigmoid(gates[3 * dh + j]);
            c2[j] = f * c[j] + i * g;
            h2[j] = o * math::tanh(c2[j]);
        }
        (h2, c2)
    }

    /// Zero LSTM state.
    pub fn initial_state(&self) -> (Vec<f64>, Vec<f64>) {
        let dh = self.config.d_hidden;
        (vec![0.0; dh], vec![0.0; dh])
    }

    /// Hidden state after reading each input token.
    pub fn hidden_states(&self, inputs: &[usize]) -> Vec<Vec<f64>> {
        let (mut h, mut c) = self.initial_state();
        let mut out = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (h2, c2) = self.lstm_step(id, &h, &c);
            h = h2;
            c = c2;
            out.push(h.clone());
        }
        out
    }

    /// `h · W_h + b`: output logits before any label/latent shift.
    pub fn base_logits(&self, h: &[f64]) -> Result<Vec<f64>, ModelError> {
        let hd = self.handles();
        let w = self.param(hd.out_w.ok_or(ModelError::Mismatch("no output layer"))?);
        let b = self.param(hd.out_b.ok_or(ModelError::Mismatch("no output layer"))?);
        Ok(affine_row(h, &w.data()[..h.len() * w.cols()], w.cols(), Some(b.data())))
    }

    /// Logit shift `[v_y; v_c] · W_cond` for the conditions the text model sees.
    pub fn condition_shift(&self, y: usize, c: usize) -> Result<Vec<f64>, ModelError> {
        let hd = self.handles();
        let cfg = &self.config;
        let w = self.param(hd.out_w.ok_or(ModelError::Mismatch("no output layer"))?);
        let cols = w.cols();
        let mut cond = Vec::new();
        if cfg.text_sees_label() {
            cond.extend_from_slice(self.param(hd.label_embed.expect("label embedding")).row(y));
        }
        if cfg.text_sees_latent() {
            cond.extend_from_slice(self.param(hd.latent_embed.expect("latent embedding")).row(c));
        }
        let start = cfg.d_hidden * cols;
        Ok(affine_row(&cond, &w.data()[start..], cols, None))
    }

    /// `log p(next | h, y, c)` over the whole vocabulary.
    pub fn next_token_log_probs(&self, h: &[f64], y: usize, c: usize) -> Result<Vec<f64>, ModelError> {
        let mut logits = self.base_logits(h)?;
        for (l, s) in logits.iter_mut().zip(self.condition_shift(y, c)?) {
            *l += s;
        }
        Ok(math::log_softmax(&logits))
    }

    /// Log of the factor generating `c`, for every `c`: `log p(c)` or `log p(c|y)`.
    pub fn log_latent_factor(&self, y: usize) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.config;
        if !cfg.is_latent() {
            return Ok(vec![0.0]);
        }
        let hd = self.handles();
        let table = self.param(hd.latent_embed.expect("latent embedding"));
        let logits = if cfg.structure.has_latent_prior() {
            let w = self.param(hd.prior_w.expect("prior"));
            let b = self.param(hd.prior_b.expect("prior")).data();
            (0..cfg.num_latent)
                .map(|c| {
                    let d: f64 = w.row(c).iter().zip(table.row(c)).map(|(a, b)| a * b).sum();
                    d + b[c]
                })
                .collect::<Vec<_>>()
        } else {
            let w = self.param(hd.latent_head_w.expect("p(c|y) head"));
            let b = self.param(hd.latent_head_b.expect("p(c|y) head"));
            let v_y = self.param(hd.label_embed.expect("label embedding")).row(y);
            affine_row(v_y, w.data(), w.cols(), Some(b.data()))
        };
        Ok(math::log_softmax(&logits))
    }

    /// Log of the factor generating `y`: `log p(y)`, or `log p(y|c)` for the
    /// joint structure. Returned for every `c`.
    pub fn log_label_factor(&self, y: usize) -> Result<Vec<f64>, ModelError> {
        let cfg = &self.config;
        let nc = cfg.latent_values();
        if cfg.is_latent() && cfg.structure == Structure::Joint {
            let hd = self.handles();
            let table = self.param(hd.latent_embed.expect("latent embedding"));
            let w = self.param(hd.label_head_w.expect("p(y|c) head"));
            let b = self.param(hd.label_head_b.expect("p(y|c) head"));
            Ok((0..nc)
                .map(|c| math::log_softmax(&affine_row(table.row(c), w.data(), w.cols(), Some(b.data())))[y])
                .collect())
        } else {
            Ok(vec![math::ln(self.label_prior()[y]); nc])
        }
    }

    /// Factorized log joints for every `(y, c)`.
    pub fn score_table(&self, ids: &[usize]) -> Result<ScoreTable, ModelError> {
        let cfg = &self.config;
        if cfg.family == Family::Discriminative {
            return Err(ModelError::Mismatch("score tables need a generative model"));
        }
        if ids.len() < 2 {
            return Err(ModelError::DocumentTooShort(ids.len()));
        }
        let (ny, nc) = (cfg.num_labels, cfg.latent_values());
        let targets = &ids[1..];
        let hs = self.hidden_states(&ids[..ids.len() - 1]);
        // exp(base - max) per step, so each conditioned normalizer is a dot product.
        let mut base_max = Vec::with_capacity(hs.len());
        let mut base_exp = Vec::with_capacity(hs.len());
        let mut base_target = 0.0;
        for (h, &t) in hs.iter().zip(targets) {
            let b = self.base_logits(h)?;
            base_target += b[t];
            let m = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            base_exp.push(b.iter().map(|x| math::exp(x - m)).collect::<Vec<_>>());
            base_max.push(m);
        }
        let text_of = |y: usize, c: usize| -> Result<f64, ModelError> {
            let s = self.condition_shift(y, c)?;
            let sm = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let se: Vec<f64> = s.iter().map(|x| math::exp(x - sm)).collect();
            let mut total = base_target;
            for ((be, &bm), &t) in base_exp.iter().zip(&base_max).zip(targets) {
                let z: f64 = be.iter().zip(&se).map(|(a, b)| a * b).sum();
                let lse = if z > 0.0 && z.is_finite() {
                    bm + sm + math::ln(z)
                } else {
                    let row: Vec<f64> = be.iter().zip(&s).map(|(a, b)| math::ln(*a) + bm + b).collect();
                    math::log_sum_exp(&row)
                };
                total += s[t] - lse;
            }
            Ok(total)
        };
        let mut text = vec![0.0; ny * nc];
        let mut latent = vec![0.0; ny * nc];
        let mut label = vec![0.0; ny * nc];
        for y in 0..ny {
            let lat = self.log_latent_factor(y)?;
            let lab = self.log_label_factor(y)?;
            for c in 0..nc {
                let i = y * nc + c;
                text[i] = if y > 0 && !cfg.text_sees_label() {
                    text[c]
                } else {
                    text_of(y, c)?
                };
                latent[i] = lat[c];
                label[i] = lab[c];
            }
        }
        Ok(ScoreTable::new(ny, nc, text, latent, label))
    }

    /// `ℓ_c` for every latent value and their log-sum-exp.
    pub fn log_marginal(&self, ids: &[usize], y: usize) -> Result<LogJointResult, ModelError> {
        if y >= self.config.num_labels {
            return Err(ModelError::Config("label out of range"));
        }
        let t = self.score_table(ids)?;
        Ok(LogJointResult::from_components(t.joints(y)))
    }

    /// `log p(y | x)` for the discriminative family.
    pub fn disc_log_probs(&self, ids: &[usize]) -> Result<Vec<f64>, ModelError> {
        if self.config.family != Family::Discriminative {
            return Err(ModelError::Mismatch("disc_log_probs needs a discriminative model"));
        }
        if ids.is_empty() {
            return Err(ModelError::DocumentTooShort(0));
        }
        let hs = self.hidden_states(ids);
        let dh = self.config.d_hidden;
        let mut pooled = vec![0.0; dh];
        for h in &hs {
            axpy(1.0, h, &mut pooled);
        }
        let inv = 1.0 / hs.len() as f64;
        pooled.iter_mut().for_each(|x| *x *= inv);
        let hd = self.handles();
        let w = self.param(hd.cls_w.expect("classifier head"));
        let b = self.param(hd.cls_b.expect("classifier head"));
        Ok(math::log_softmax(&affine_row(&pooled, w.data(), w.cols(), Some(b.data()))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_joint_nodes, ModelConfig};
    use crate::tape::Tape;

    fn cfg(family: Family, structure: Structure) -> ModelConfig {
        ModelConfig {
            family,
            structure,
            d_word: 4,
            d_hidden: 5,
            d_label: 3,
            d_latent: 2,
            num_latent: 3,
            num_labels: 3,
            vocab_size: 8,
            init_scale: 0.5,
            ..ModelConfig::default()
        }
    }

    const DOC: [usize; 5] = [1, 4, 7, 3, 2];

    #[test]
    fn plain_path_matches_tape() {
        let mut cases = vec![cfg(Family::Generative, Structure::Auxiliary)];
        cases.extend(Structure::ALL.iter().map(|&s| cfg(Family::Latent, s)));
        for c in cases {
            let m = Model::new(c.clone(), vec![0.2, 0.3, 0.5], 11).unwrap();
            let table = m.score_table(&DOC).unwrap();
            for y in 0..3 {
                let mut tape = Tape::new(&m.params);
                let nodes = log_joint_nodes(&mut tape, &m, &DOC, y).unwrap();
                for (k, n) in nodes.iter().enumerate() {
                    let d = (tape.scalar(*n) - table.joint(y, k)).abs();
                    assert!(d <= 1e-12, "{} {} y={y} c={k}: {d}", c.family, c.structure);
                }
            }
        }
    }

    #[test]
    fn disc_plain_matches_tape() {
        let m = Model::new(cfg(Family::Discriminative, Structure::Auxiliary), vec![1.0 / 3.0; 3], 2).unwrap();
        let plain = m.disc_log_probs(&DOC).unwrap();
        let mut tape = Tape::new(&m.params);
        let n = crate::model::disc_log_probs(&mut tape, &m, &DOC).unwrap();
        for (a, b) in plain.iter().zip(tape.value(n)) {
            assert!((a - b).abs() <= 1e-12);
        }
        let total: f64 = plain.iter().map(|x| math::exp(*x)).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = Model::new(cfg(Family::Discriminative, Structure::Auxiliary), vec![1.0 / 3.0; 3], 2).unwrap();
        m.fill("cls.w", 0.0).unwrap();
        m.fill("cls.b", 0.0).unwrap();
        for lp in m.disc_log_probs(&DOC).unwrap() {
            assert!((lp + math::ln(3.0)).abs() <= 1e-15);
        }
    }

    #[test]
    fn pooling_is_order_free() {
        let m = Model::new(cfg(Family::Discriminative, Structure::Auxiliary), vec![1.0 / 3.0; 3], 2).unwrap();
        let hs = m.hidden_states(&DOC);
        let mean = |order: &[usize]| {
            let mut p = vec![0.0; 5];
            for &i in order {
                axpy(1.0 / hs.len() as f64, &hs[i], &mut p);
            }
            p
        };
        let a = mean(&[0, 1, 2, 3, 4]);
        let b = mean(&[3, 0, 4, 2, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_params_closed_form() {
        let c = cfg(Family::Latent, Structure::Auxiliary);
        let mut m = Model::new(c, vec![0.2, 0.3, 0.5], 4).unwrap();
        let names: Vec<alloc::string::String> = m.params.iter().map(|(_, n, _)| n.into()).collect();
        for n in names {
            m.fill(&n, 0.0).unwrap();
        }
        let r = m.log_marginal(&DOC, 2).unwrap();
        let expect = 4.0 * math::ln(1.0 / 8.0) + math::ln(1.0 / 3.0) + math::ln(0.5);
        for l in &r.components {
            assert!((l - expect).abs() <= 1e-12);
        }
        assert!((r.log_marginal - (expect + math::ln(3.0))).abs() <= 1e-12);
    }

    #[test]
    fn marginal_bounds() {
        let m = Model::new(cfg(Family::Latent, Structure::Joint), vec![0.2, 0.3, 0.5], 9).unwrap();
        for y in 0..3 {
            let r = m.log_marginal(&DOC, y).unwrap();
            let mx = r.components.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(r.log_marginal >= mx && r.log_marginal <= mx + math::ln(3.0));
        }
    }

    #[test]
    fn auxiliary_and_hierarchical_coincide_under_uniform_latent_factors() {
        let aux = Model::new(cfg(Family::Latent, Structure::Auxiliary), vec![0.2, 0.3, 0.5], 6).unwrap();
        let mut hier = Model::new(cfg(Family::Latent, Structure::Hierarchical), vec![0.2, 0.3, 0.5], 6).unwrap();
        let mut aux = aux;
        aux.fill("prior.w", 0.0).unwrap();
        aux.fill("prior.b", 0.0).unwrap();
        hier.fill("latent_head.w", 0.0).unwrap();
        hier.fill("latent_head.b", 0.0).unwrap();
        let (a, h) = (aux.score_table(&DOC).unwrap(), hier.score_table(&DOC).unwrap());
        for y in 0..3 {
            for c in 0..3 {
                assert!((a.joint(y, c) - h.joint(y, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn short_documents_rejected() {
        let m = Model::new(cfg(Family::Latent, Structure::Middle), vec![0.2, 0.3, 0.5], 6).unwrap();
        assert_eq!(m.score_table(&[1]), Err(ModelError::DocumentTooShort(1)));
    }
}

//! Naive reference scorer written directly against the parameter arrays.
//! It shares no code with the library's scoring paths.
#![allow(dead_code)]

use latclass_core::corpus::BOS;
use latclass_core::{Family, Model, ModelConfig, Structure};

fn data<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    let id = m.params.find(name).unwrap_or_else(|| panic!("missing {name}"));
    m.params.get(id).data()
}

fn row<'a>(m: &'a Model, name: &str, r: usize, width: usize) -> &'a [f64] {
    &data(m, name)[r * width..(r + 1) * width]
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    logits[k] - mx - z.ln()
}

/// `x · W + b` with `W` stored row-major as `[x.len(), cols]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b[j]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[i * cols + j];
            }
            s
        })
        .collect()
}

fn step(m: &Model, tok: usize, h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cfg = &m.config;
    let dh = cfg.d_hidden;
    let x = row(m, "embed", tok, cfg.d_word);
    let gx = affine(x, data(m, "lstm.w_x"), Some(data(m, "lstm.b")), 4 * dh);
    let gh = affine(h, data(m, "lstm.w_h"), None, 4 * dh);
    let g: Vec<f64> = gx.iter().zip(&gh).map(|(a, b)| a + b).collect();
    let mut h2 = vec![0.0; dh];
    let mut c2 = vec![0.0; dh];
    for j in 0..dh {
        c2[j] = sig(g[dh + j]) * c[j] + sig(g[j]) * g[2 * dh + j].tanh();
        h2[j] = sig(g[3 * dh + j]) * c2[j].tanh();
    }
    (h2, c2)
}

fn next_logits(m: &Model, h: &[f64], y: usize, c: usize) -> Vec<f64> {
    let cfg = &m.config;
    let mut input = h.to_vec();
    if cfg.text_sees_label() {
        input.extend_from_slice(row(m, "label_embed", y, cfg.d_label));
    }
    if cfg.is_latent() {
        input.extend_from_slice(row(m, "latent_embed", c, cfg.d_latent));
    }
    affine(&input, data(m, "out.w"), Some(data(m, "out.b")), cfg.vocab_size)
}

/// `log p(tokens | y, c)` where `tokens` are the ids after BOS.
pub fn text_log_prob(m: &Model, tokens: &[usize], y: usize, c: usize) -> f64 {
    let dh = m.config.d_hidden;
    let (mut h, mut cell) = (vec![0.0; dh], vec![0.0; dh]);
    let mut prev = BOS;
    let mut total = 0.0;
    for &t in tokens {
        let (h2, c2) = step(m, prev, &h, &cell);
        h = h2;
        cell = c2;
        total += log_softmax_at(&next_logits(m, &h, y, c), t);
        prev = t;
    }
    total
}

/// `log p(c)` or `log p(c | y)`; zero for non-latent models.
pub fn latent_log_prob(m: &Model, y: usize, c: usize) -> f64 {
    let cfg = &m.config;
    if !cfg.is_latent() {
        return 0.0;
    }
    let (nc, d2, d1) = (cfg.num_latent, cfg.d_latent, cfg.d_label);
    let logits: Vec<f64> = match cfg.structure {
        Structure::Auxiliary | Structure::Joint => (0..nc)
            .map(|k| {
                let w = row(m, "prior.w", k, d2);
                let v = row(m, "latent_embed", k, d2);
                w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + data(m, "prior.b")[k]
            })
            .collect(),
        Structure::Middle | Structure::Hierarchical => affine(
            row(m, "label_embed", y, d1),
            data(m, "latent_head.w"),
            Some(data(m, "latent_head.b")),
            nc,
        ),
    };
    log_softmax_at(&logits, c)
}

/// `log p(y)` or `log p(y | c)`.
pub fn label_log_prob(m: &Model, y: usize, c: usize) -> f64 {
    let cfg = &m.config;
    if cfg.is_latent() && cfg.structure == Structure::Joint {
        let logits = affine(
            row(m, "latent_embed", c, cfg.d_latent),
            data(m, "label_head.w"),
            Some(data(m, "label_head.b")),
            cfg.num_labels,
        );
        log_softmax_at(&logits, y)
    } else {
        m.label_prior()[y].ln()
    }
}

/// `log p(x, y, c)` for a full id sequence starting with BOS.
pub fn log_joint(m: &Model, ids: &[usize], y: usize, c: usize) -> f64 {
    text_log_prob(m, &ids[1..], y, c) + latent_log_prob(m, y, c) + label_log_prob(m, y, c)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Small config with the given family and structure.
pub fn tiny(family: Family, structure: Structure, vocab_size: usize, num_labels: usize, num_latent: usize) -> ModelConfig {
    ModelConfig {
        family,
        structure,
        d_word: 3,
        d_hidden: 4,
        d_label: 3,
        d_latent: 2,
        num_latent,
        num_labels,
        vocab_size,
        init_scale: 0.5,
        ..ModelConfig::default()
    }
}

/// Generative plus the four latent structures.
pub fn generative_configs(vocab_size: usize, num_labels: usize, num_latent: usize) -> Vec<ModelConfig> {
    let mut v = vec![tiny(Family::Generative, Structure::Auxiliary, vocab_size, num_labels, num_latent)];
    for s in Structure::ALL {
        v.push(tiny(Family::Latent, s, vocab_size, num_labels, num_latent));
    }
    v
}

/// All sequences of length `len` over `alphabet`.
pub fn sequences(alphabet: &[usize], len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                alphabet.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

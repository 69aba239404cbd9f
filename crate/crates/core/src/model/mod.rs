//! Discriminative, generative and latent-variable generative classifiers.
//!
//! All families share one word embedding table and one single-layer LSTM.
//! Generative families score text with a conditional language model whose
//! softmax input is `[h_t; v_y; v_c]` (label and latent parts present only
//! when the structure conditions the text on them). The output layer is
//! stored as `out.w: [d_in, |V|]` so the logits for step `t` are
//! `[h_t; v_y; v_c] · out.w + out.b`.

mod config;
mod graph;
mod score;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use config::{count_params, Family, ModelConfig, ModelError, Structure};
pub use graph::{conditional_lm_log_prob, disc_log_probs, log_joint_nodes, objective, Objective};
pub use score::{LogJointResult, ScoreTable};

use crate::rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Parameter handles for one model; absent entries are unused by the family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handles {
    pub embed: ParamId,
    pub lstm_wx: ParamId,
    pub lstm_wh: ParamId,
    pub lstm_b: ParamId,
    pub cls_w: Option<ParamId>,
    pub cls_b: Option<ParamId>,
    pub label_embed: Option<ParamId>,
    pub latent_embed: Option<ParamId>,
    pub out_w: Option<ParamId>,
    pub out_b: Option<ParamId>,
    pub prior_w: Option<ParamId>,
    pub prior_b: Option<ParamId>,
    pub label_head_w: Option<ParamId>,
    pub label_head_b: Option<ParamId>,
    pub latent_head_w: Option<ParamId>,
    pub latent_head_b: Option<ParamId>,
}

/// Names and shapes of every learnable array for `cfg`, in allocation order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (v, dw, dh) = (cfg.vocab_size, cfg.d_word, cfg.d_hidden);
    let (y, d1, d2, c) = (cfg.num_labels, cfg.d_label, cfg.d_latent, cfg.num_latent);
    let mut l = vec![
        ("embed", vec![v, dw]),
        ("lstm.w_x", vec![dw, 4 * dh]),
        ("lstm.w_h", vec![dh, 4 * dh]),
        ("lstm.b", vec![4 * dh]),
    ];
    if cfg.family == Family::Discriminative {
        l.push(("cls.w", vec![dh, y]));
        l.push(("cls.b", vec![y]));
        return l;
    }
    if cfg.uses_label_embedding() {
        l.push(("label_embed", vec![y, d1]));
    }
    if cfg.is_latent() {
        l.push(("latent_embed", vec![c, d2]));
    }
    l.push(("out.w", vec![cfg.softmax_input_dim(), v]));
    l.push(("out.b", vec![v]));
    if cfg.is_latent() {
        if cfg.structure.has_latent_prior() {
            l.push(("prior.w", vec![c, d2]));
            l.push(("prior.b", vec![c]));
        }
        match cfg.structure {
            Structure::Joint => {
                l.push(("label_head.w", vec![d2, y]));
                l.push(("label_head.b", vec![y]));
            }
            Structure::Middle | Structure::Hierarchical => {
                l.push(("latent_head.w", vec![d1, c]));
                l.push(("latent_head.b", vec![c]));
            }
            Structure::Auxiliary => {}
        }
    }
    l
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    handles: Handles,
    label_prior: Vec<f64>,
}

impl Model {
    /// Fresh model with uniform `[-init_scale, init_scale]` parameters and the
    /// forget-gate bias set to `forget_bias`.
    pub fn new(config: ModelConfig, label_prior: Vec<f64>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::streams::INIT);
        let mut params = ParamStore::new();
        for (name, shape) in param_layout(&config) {
            let mut t = Tensor::uniform(&shape, config.init_scale, &mut r);
            if name == "lstm.b" {
                let dh = config.d_hidden;
                t.data_mut()[dh..2 * dh].iter_mut().for_each(|x| *x = config.forget_bias);
            }
            params.add(name, t);
        }
        Self::from_parts(config, params, label_prior)
    }

    /// Reassembles a model from stored parts, checking every name and shape.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        label_prior: Vec<f64>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if label_prior.len() != config.num_labels {
            return Err(ModelError::Config("label prior length differs from num_labels"));
        }
        let sum: f64 = label_prior.iter().sum();
        if label_prior.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::Config("label prior must be a probability vector"));
        }
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(ModelError::Config("parameter set does not match the config"));
        }
        for (name, shape) in &layout {
            match params.find(name) {
                Some(id) if params.get(id).shape() == shape.as_slice() => {}
                _ => return Err(ModelError::MissingParam(String::from(*name))),
            }
        }
        let f = |n: &str| params.find(n);
        let req = |n: &str| f(n).expect("checked above");
        let handles = Handles {
            embed: req("embed"),
            lstm_wx: req("lstm.w_x"),
            lstm_wh: req("lstm.w_h"),
            lstm_b: req("lstm.b"),
            cls_w: f("cls.w"),
            cls_b: f("cls.b"),
            label_embed: f("label_embed"),
            latent_embed: f("latent_embed"),
            out_w: f("out.w"),
            out_b: f("out.b"),
            prior_w: f("prior.w"),
            prior_b: f("prior.b"),
            label_head_w: f("label_head.w"),
            label_head_b: f("label_head.b"),
            latent_head_w: f("latent_head.w"),
            latent_head_b: f("latent_head.b"),
        };
        Ok(Model {
            config,
            params,
            handles,
            label_prior,
        })
    }

    pub fn handles(&self) -> &Handles {
        &self.handles
    }

    /// The fixed `p(y)`; never trained.
    pub fn label_prior(&self) -> &[f64] {
        &self.label_prior
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.params.get_mut(id)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.params.find(name)?;
        Some(self.params.get_mut(id))
    }

    /// Sets every scalar of the named parameter to `value`.
    pub fn fill(&mut self, name: &str, value: f64) -> Result<(), ModelError> {
        let t = self
            .param_by_name_mut(name)
            .ok_or_else(|| ModelError::MissingParam(String::from(name)))?;
        t.data_mut().iter_mut().for_each(|x| *x = value);
        Ok(())
    }

    /// Auxiliary latent model with `num_latent` values whose log joints equal
    /// those of the generative model `gen`: text-model parameters are copied,
    /// the latent rows of the output layer, the latent embeddings and the
    /// prior are zero.
    pub fn latent_from_generative(gen: &Model, d_latent: usize, num_latent: usize) -> Result<Model, ModelError> {
        if gen.config.family != Family::Generative {
            return Err(ModelError::Mismatch("expected a generative model"));
        }
        let cfg = ModelConfig {
            family: Family::Latent,
            structure: Structure::Auxiliary,
            d_latent,
            num_latent,
            ..gen.config.clone()
        };
        let mut m = Model::new(cfg, gen.label_prior.clone(), 0)?;
        for name in ["embed", "lstm.w_x", "lstm.w_h", "lstm.b", "label_embed", "out.b"] {
            let src = gen.params.get(gen.params.find(name).expect("generative layout"));
            m.param_by_name_mut(name)
                .expect("latent layout")
                .data_mut()
                .copy_from_slice(src.data());
        }
        let g_out = gen.params.get(gen.handles.out_w.expect("generative layout")).data();
        let out = m.param_by_name_mut("out.w").expect("latent layout").data_mut();
        out.iter_mut().for_each(|x| *x = 0.0);
        out[..g_out.len()].copy_from_slice(g_out);
        for name in ["latent_embed", "prior.w", "prior.b"] {
            m.fill(name, 0.0)?;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(family: Family, structure: Structure) -> ModelConfig {
        ModelConfig {
            family,
            structure,
            d_word: 4,
            d_hidden: 5,
            d_label: 3,
            d_latent: 2,
            num_latent: 3,
            num_labels: 4,
            vocab_size: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn count_matches_allocation() {
        for fam in [Family::Discriminative, Family::Generative] {
            let c = cfg(fam, Structure::Auxiliary);
            let m = Model::new(c.clone(), vec![0.25; 4], 1).unwrap();
            assert_eq!(m.num_params(), count_params(&c).unwrap());
        }
        for s in Structure::ALL {
            let c = cfg(Family::Latent, s);
            let m = Model::new(c.clone(), vec![0.25; 4], 1).unwrap();
            assert_eq!(m.num_params(), count_params(&c).unwrap(), "{s}");
        }
    }

    #[test]
    fn pc_configs_share_output_width() {
        let gen_pc = ModelConfig {
            family: Family::Generative,
            d_label: 110,
            vocab_size: 1000,
            ..ModelConfig::default()
        };
        let lat_pc = ModelConfig {
            family: Family::Latent,
            structure: Structure::Auxiliary,
            d_label: 100,
            num_latent: 10,
            d_latent: 10,
            vocab_size: 1000,
            ..ModelConfig::default()
        };
        assert_eq!(gen_pc.softmax_input_dim(), 210);
        assert_eq!(lat_pc.softmax_input_dim(), 210);
    }

    #[test]
    fn single_latent_count_increment() {
        let gen = cfg(Family::Generative, Structure::Auxiliary);
        let lat = ModelConfig {
            family: Family::Latent,
            num_latent: 1,
            ..gen.clone()
        };
        let d2 = lat.d_latent;
        let extra = count_params(&lat).unwrap() - count_params(&gen).unwrap();
        assert_eq!(extra, d2 + (d2 + 1) + d2 * lat.vocab_size);
        let zero = ModelConfig { num_latent: 0, ..lat };
        assert!(count_params(&zero).is_err());
    }

    #[test]
    fn forget_bias_initialized() {
        let c = cfg(Family::Generative, Structure::Auxiliary);
        let m = Model::new(c, vec![0.25; 4], 3).unwrap();
        let b = m.param(m.handles().lstm_b).data();
        assert!(b[5..10].iter().all(|&x| x == 1.0));
        assert!(b[..5].iter().all(|&x| x.abs() <= 0.1));
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let c = cfg(Family::Latent, Structure::Joint);
        let m = Model::new(c.clone(), vec![0.25; 4], 3).unwrap();
        let other = cfg(Family::Latent, Structure::Middle);
        assert!(Model::from_parts(other, m.params.clone(), vec![0.25; 4]).is_err());
        assert!(Model::from_parts(c, m.params.clone(), vec![0.5; 4]).is_err());
    }
}

use core::fmt;

use crate::tensor::ShapeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Family {
    Discriminative,
    Generative,
    Latent,
}

/// Where the latent variable `c` sits relative to the label `y` and text `x`.
///
/// * `Auxiliary`: `p(x|c,y) p(c) p(y)`
/// * `Joint`: `p(x|c) p(y|c) p(c)`
/// * `Middle`: `p(x|c) p(c|y) p(y)`
/// * `Hierarchical`: `p(x|c,y) p(c|y) p(y)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Structure {
    Auxiliary,
    Joint,
    Middle,
    Hierarchical,
}

impl Structure {
    pub const ALL: [Structure; 4] = [
        Structure::Auxiliary,
        Structure::Joint,
        Structure::Middle,
        Structure::Hierarchical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Auxiliary => "auxiliary",
            Structure::Joint => "joint",
            Structure::Middle => "middle",
            Structure::Hierarchical => "hierarchical",
        }
    }

    /// Whether the text model conditions on the label.
    pub fn text_sees_label(self) -> bool {
        matches!(self, Structure::Auxiliary | Structure::Hierarchical)
    }

    /// `c` has an unconditional prior `p(c) ∝ exp(w_c·v_c + b_c)`.
    pub fn has_latent_prior(self) -> bool {
        matches!(self, Structure::Auxiliary | Structure::Joint)
    }

    /// `c` is drawn from `p(c|y)`.
    pub fn latent_given_label(self) -> bool {
        matches!(self, Structure::Middle | Structure::Hierarchical)
    }
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Discriminative => "discriminative",
            Family::Generative => "generative",
            Family::Latent => "latent",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub family: Family,
    /// Only read when `family` is `Latent`.
    pub structure: Structure,
    pub d_word: usize,
    pub d_hidden: usize,
    /// Label embedding width.
    pub d_label: usize,
    /// Latent embedding width.
    pub d_latent: usize,
    pub num_latent: usize,
    pub num_labels: usize,
    /// Includes the three reserved ids.
    pub vocab_size: usize,
    /// Parameters start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub forget_bias: f64,
    /// Add-one smoothing of the empirical label prior.
    pub prior_smoothing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Latent,
            structure: Structure::Auxiliary,
            d_word: 100,
            d_hidden: 100,
            d_label: 100,
            d_latent: 10,
            num_latent: 10,
            num_labels: 2,
            vocab_size: 3,
            init_scale: 0.1,
            forget_bias: 1.0,
            prior_smoothing: false,
        }
    }
}

impl ModelConfig {
    pub fn is_latent(&self) -> bool {
        self.family == Family::Latent
    }

    /// Does the text model condition on `y`?
    pub fn text_sees_label(&self) -> bool {
        match self.family {
            Family::Discriminative => false,
            Family::Generative => true,
            Family::Latent => self.structure.text_sees_label(),
        }
    }

    /// Does the text model condition on `c`?
    pub fn text_sees_latent(&self) -> bool {
        self.family == Family::Latent
    }

    pub fn uses_label_embedding(&self) -> bool {
        match self.family {
            Family::Discriminative => false,
            Family::Generative => true,
            Family::Latent => self.structure != Structure::Joint,
        }
    }

    /// Width of the output-softmax input `[h; v_y; v_c]`.
    pub fn softmax_input_dim(&self) -> usize {
        let mut d = self.d_hidden;
        if self.text_sees_label() {
            d += self.d_label;
        }
        if self.text_sees_latent() {
            d += self.d_latent;
        }
        d
    }

    /// Number of latent values a score table spans (1 for non-latent families).
    pub fn latent_values(&self) -> usize {
        if self.is_latent() {
            self.num_latent
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &'static str| Err(ModelError::Config(m));
        if self.vocab_size < crate::corpus::NUM_RESERVED {
            return fail("vocab_size must include the three reserved ids");
        }
        if self.num_labels == 0 {
            return fail("num_labels must be at least 1");
        }
        if self.d_word == 0 || self.d_hidden == 0 {
            return fail("d_word and d_hidden must be positive");
        }
        if self.uses_label_embedding() && self.d_label == 0 {
            return fail("d_label must be positive");
        }
        if self.is_latent() {
            if self.num_latent == 0 {
                return fail("latent models need at least one latent value");
            }
            if self.d_latent == 0 {
                return fail("d_latent must be positive");
            }
        }
        if !(self.init_scale >= 0.0) {
            return fail("init_scale must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(&'static str),
    Shape(ShapeError),
    /// The operation needs a different model family or structure.
    Mismatch(&'static str),
    DocumentTooShort(usize),
    MissingParam(alloc::string::String),
}

impl From<ShapeError> for ModelError {
    fn from(e: ShapeError) -> Self {
        ModelError::Shape(e)
    }
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(m) => write!(f, "invalid model config: {m}"),
            ModelError::Shape(e) => write!(f, "{e}"),
            ModelError::Mismatch(m) => write!(f, "family/structure mismatch: {m}"),
            ModelError::DocumentTooShort(n) => {
                write!(f, "document of length {n} is too short (need BOS and EOS)")
            }
            ModelError::MissingParam(n) => write!(f, "missing or misshapen parameter `{n}`"),
        }
    }
}

/// Closed-form count of learnable scalars; the fixed label prior is excluded.
pub fn count_params(cfg: &ModelConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let (v, dw, dh) = (cfg.vocab_size, cfg.d_word, cfg.d_hidden);
    let (y, d1, d2, c) = (cfg.num_labels, cfg.d_label, cfg.d_latent, cfg.num_latent);
    let mut n = v * dw + 4 * dh * (dw + dh) + 4 * dh;
    match cfg.family {
        Family::Discriminative => n += dh * y + y,
        Family::Generative => n += y * d1 + (dh + d1) * v + v,
        Family::Latent => {
            n += cfg.softmax_input_dim() * v + v + c * d2;
            if cfg.uses_label_embedding() {
                n += y * d1;
            }
            if cfg.structure.has_latent_prior() {
                n += c * d2 + c;
            }
            match cfg.structure {
                Structure::Joint => n += d2 * y + y,
                Structure::Middle | Structure::Hierarchical => n += d1 * c + c,
                Structure::Auxiliary => {}
            }
        }
    }
    Ok(n)
}

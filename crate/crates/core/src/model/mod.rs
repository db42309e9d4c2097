//! The encoder-decoder: a transformer text encoder, attention over region
//! features, multimodal fusion, and a decoder whose blocks attend to the
//! generated prefix, the text context and the fused context in turn.
//!
//! Parameter names by ablation (each set contains the previous one):
//!
//! - `T`: `embed.token`, `enc.{l}.*`, `dec.{l}.{self,ln_self,cross,ln_cross,ffn,ln_ffn}.*`, `out.*`
//! - `TV`: adds `fuse.*` and `dec.{l}.{mm,ln_mm}.*`; the visual vector is the
//!   pooled global feature.
//! - `TVA`: adds `visual.proj`; attention over features pooled on a 2×2 grid.
//! - `TVAR`: adds `visual.box`; attention over individual regions, with box
//!   geometry embedded into each region feature.

mod attention;
mod layers;

pub use attention::{multi_head_attention, position_wise_ffn, scaled_dot_attention, visual_attention, Attention};
pub use layers::{decode, encode_inputs, encode_text, fuse_multimodal, generate_greedy, visual_attend, EncoderOutput, VisualOutput};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, ParamGrads, ParameterStore, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("input of {len} tokens exceeds max_text_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("no region features for image `{0}`")]
    MissingRegions(String),
    #[error("region features have width {got}, model expects {expected}")]
    RegionWidth { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    T,
    TV,
    TVA,
    TVAR,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::T, Ablation::TV, Ablation::TVA, Ablation::TVAR];

    pub fn uses_visual(self) -> bool {
        self != Ablation::T
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::T => "T",
            Ablation::TV => "TV",
            Ablation::TVA => "TVA",
            Ablation::TVAR => "TVAR",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown ablation `{s}` (expected T, TV, TVA or TVAR)"))
    }
}

fn default_d_model() -> usize {
    128
}
fn default_n_heads() -> usize {
    8
}
fn default_layers() -> usize {
    6
}
fn default_d_ffn() -> usize {
    512
}
fn default_d_visual() -> usize {
    2048
}
fn default_dropout() -> f32 {
    0.5
}
fn default_max_text_len() -> usize {
    512
}
fn default_max_gen_len() -> usize {
    30
}
fn default_ablation() -> Ablation {
    Ablation::TVAR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_layers")]
    pub n_layers_enc: usize,
    #[serde(default = "default_layers")]
    pub n_layers_dec: usize,
    #[serde(default = "default_d_ffn")]
    pub d_ffn_hidden: usize,
    #[serde(default = "default_d_visual")]
    pub d_visual: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
    /// Zero in a run configuration means "size of the built vocabulary".
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_max_text_len")]
    pub max_text_len: usize,
    #[serde(default = "default_max_gen_len")]
    pub max_gen_len: usize,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            n_layers_enc: default_layers(),
            n_layers_dec: default_layers(),
            d_ffn_hidden: default_d_ffn(),
            d_visual: default_d_visual(),
            dropout: default_dropout(),
            vocab_size,
            max_text_len: default_max_text_len(),
            max_gen_len: default_max_gen_len(),
            ablation: default_ablation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_ffn_hidden", self.d_ffn_hidden),
            ("d_visual", self.d_visual),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("max_gen_len", self.max_gen_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::data::UNK_ID {
            return Err(ModelError::InvalidConfig(
                "vocab_size must exceed the four reserved ids".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Shapes of every parameter the configuration needs, by name.
pub fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (d, f, v, dv) = (cfg.d_model, cfg.d_ffn_hidden, cfg.vocab_size, cfg.d_visual);
    let mut s = BTreeMap::new();
    let mut add = |name: String, shape: Vec<usize>| {
        s.insert(name, shape);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}.{w}"), vec![d, d]);
        }
    };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
        add(format!("{p}.gain"), vec![d]);
        add(format!("{p}.bias"), vec![d]);
    };
    let ffn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
        add(format!("{p}.w1"), vec![d, f]);
        add(format!("{p}.b1"), vec![f]);
        add(format!("{p}.w2"), vec![f, d]);
        add(format!("{p}.b2"), vec![d]);
    };
    add("embed.token".into(), vec![v, d]);
    add("out.w".into(), vec![d, v]);
    add("out.b".into(), vec![v]);
    for l in 0..cfg.n_layers_enc {
        attn(&mut add, &format!("enc.{l}.self"));
        norm(&mut add, &format!("enc.{l}.ln_self"));
        ffn(&mut add, &format!("enc.{l}.ffn"));
        norm(&mut add, &format!("enc.{l}.ln_ffn"));
    }
    for l in 0..cfg.n_layers_dec {
        attn(&mut add, &format!("dec.{l}.self"));
        norm(&mut add, &format!("dec.{l}.ln_self"));
        attn(&mut add, &format!("dec.{l}.cross"));
        norm(&mut add, &format!("dec.{l}.ln_cross"));
        if cfg.ablation.uses_visual() {
            attn(&mut add, &format!("dec.{l}.mm"));
            norm(&mut add, &format!("dec.{l}.ln_mm"));
        }
        ffn(&mut add, &format!("dec.{l}.ffn"));
        norm(&mut add, &format!("dec.{l}.ln_ffn"));
    }
    if cfg.ablation.uses_visual() {
        add("fuse.w".into(), vec![d + dv, d]);
        add("fuse.b".into(), vec![d]);
    }
    if cfg.ablation >= Ablation::TVA {
        add("visual.proj".into(), vec![dv, dv]);
    }
    if cfg.ablation == Ablation::TVAR {
        add("visual.box".into(), vec![4, dv]);
    }
    s
}

fn init_values(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let len: usize = shape.iter().product();
    let normal = |std: f32, rng: &mut ChaCha8Rng| -> Vec<f32> {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        (0..len).map(|_| dist.sample(rng)).collect()
    };
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match (name, leaf) {
        ("embed.token", _) => normal(1.0, rng),
        ("out.w", _) => normal(0.02, rng),
        ("visual.proj", _) => Tensor::identity(shape[0]).into_data(),
        ("visual.box", _) => normal(0.02, rng),
        (_, "gain") => vec![1.0; len],
        (_, "bias" | "b" | "b1" | "b2") => vec![0.0; len],
        _ => {
            let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
            normal((2.0 / (fan_in + fan_out) as f32).sqrt(), rng)
        }
    }
}

/// Configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`. Weight
    /// matrices are Glorot-normal, the output projection N(0, 0.02) so the
    /// initial distribution over tokens is close to uniform.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        for (name, shape) in parameter_shapes(&config) {
            let data = init_values(&name, &shape, &mut rng);
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Model { config, params })
    }

    /// Checks that `params` holds exactly the parameters `config` needs.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let shapes = parameter_shapes(&config);
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !shapes.contains_key(*n)) {
            return Err(ModelError::InvalidConfig(format!(
                "parameter `{extra}` is not used by ablation {}",
                config.ablation
            )));
        }
        Ok(Model { config, params })
    }
}

/// A forward pass in progress: the tape, every parameter bound as a leaf,
/// and the dropout generator (absent at inference).
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub config: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Binds every parameter of `model` onto `tape`. Dropout is active only
    /// when `rng` is given.
    pub fn new(tape: &'a mut Tape, model: &'a Model, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect();
        Ctx {
            tape,
            config: &model.config,
            vars,
            rng,
        }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => Ok(self.tape.dropout(x, self.config.dropout, rng)?),
            None => Ok(x),
        }
    }

    /// Gradients of every bound parameter; zeros where no path reaches one.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, self.tape.value(v).len())))
            .collect()
    }
}

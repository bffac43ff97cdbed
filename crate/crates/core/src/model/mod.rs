//! A small decoder-only transformer.
//!
//! Pre-RMSNorm blocks with multi-head causal attention (rotary positions)
//! and a GELU MLP, followed by a final norm and an untied output head.
//! Every linear weight is stored `d_out × d_in` except the head, which is
//! `d_model × vocab`.

mod cache;
pub(crate) mod qzr1;
pub(crate) mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{MatrixF, NumericsError};

pub use cache::{truncate_cache, KvCache, TrafficSnapshot, WeightTraffic};
pub use qzr1::{
    decode_weights, encode_weights, load_weights, save_weights, QZR1_MAGIC, QZR1_VERSION,
};
pub use transformer::{LinearSlot, Proj};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("context overflow: {needed} positions requested, max_seq_len is {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("{0}")]
    Range(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if fields.iter().any(|(_, v)| *v > u32::MAX as usize) {
            return Err(ModelError::Config("dimension does not fit in u32".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one transformer block.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 2 * d * self.d_ff
    }

    /// Weights in every linear projection, including the output head.
    pub fn linear_param_count(&self) -> usize {
        let d = self.d_model;
        self.n_layers * (4 * d * d + 2 * d * self.d_ff) + d * self.vocab_size
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.n_layers * self.layer_param_count() + d + d * self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Vec<f32>,
    pub wq: MatrixF,
    pub wk: MatrixF,
    pub wv: MatrixF,
    pub wo: MatrixF,
    pub norm2: Vec<f32>,
    pub w_up: MatrixF,
    pub w_down: MatrixF,
}

impl LayerWeights {
    pub fn proj(&self, p: Proj) -> &MatrixF {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
            Proj::Up => &self.w_up,
            Proj::Down => &self.w_down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab × d_model`.
    pub token_embedding: MatrixF,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `d_model × vocab`.
    pub head: MatrixF,
}

impl ModelWeights {
    /// Checks every tensor shape against the config and rejects non-finite
    /// parameters.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let check = |name: &str, m: &MatrixF, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(ModelError::Shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(ModelError::Shape(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        let check_vec = |name: &str, g: &[f32]| -> Result<()> {
            if g.len() != d || g.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::Shape(format!(
                    "{name} must hold {d} finite gains"
                )));
            }
            Ok(())
        };
        check("token_embedding", &self.token_embedding, v, d)?;
        if self.layers.len() != c.n_layers {
            return Err(ModelError::Shape(format!(
                "{} layers for n_layers = {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for l in &self.layers {
            check_vec("norm1", &l.norm1)?;
            for (name, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                check(name, m, d, d)?;
            }
            check_vec("norm2", &l.norm2)?;
            check("w_up", &l.w_up, f, d)?;
            check("w_down", &l.w_down, d, f)?;
        }
        check_vec("final_norm", &self.final_norm)?;
        check("head", &self.head, d, v)
    }

    /// The weight behind `slot` in `d_out × d_in` orientation. The head is
    /// transposed into that orientation, hence the owned return.
    pub fn linear_weight(&self, slot: LinearSlot) -> std::borrow::Cow<'_, MatrixF> {
        match slot {
            LinearSlot::Layer { layer, proj } => {
                std::borrow::Cow::Borrowed(self.layers[layer].proj(proj))
            }
            LinearSlot::Head => std::borrow::Cow::Owned(self.head.transpose()),
        }
    }
}

/// Random weights from a seeded ChaCha stream. Linear weights and the head
/// are `N(0, 1/d_in)`, embeddings `N(0, 1)`, norm gains one.
pub fn generate_synthetic_weights(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |rows: usize, cols: usize, scale: f32| -> MatrixF {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        MatrixF::from_vec(rows, cols, data).expect("sized above")
    };
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let sd = 1.0 / (d as f32).sqrt();
    let sf = 1.0 / (f as f32).sqrt();

    let token_embedding = normal(v, d, 1.0);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            norm1: vec![1.0; d],
            wq: normal(d, d, sd),
            wk: normal(d, d, sd),
            wv: normal(d, d, sd),
            wo: normal(d, d, sd),
            norm2: vec![1.0; d],
            w_up: normal(f, d, sd),
            w_down: normal(d, f, sf),
        })
        .collect();
    let head = normal(d, v, sd);
    Ok(ModelWeights {
        config,
        token_embedding,
        layers,
        final_norm: vec![1.0; d],
        head,
    })
}

/// Keeps the first `round(retain_fraction · n_layers)` blocks (at least one).
pub fn drop_layers(w: &ModelWeights, retain_fraction: f64) -> Result<ModelWeights> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(ModelError::Range(format!(
            "retain_fraction {retain_fraction} is outside (0, 1]"
        )));
    }
    let keep = ((retain_fraction * w.config.n_layers as f64).round() as usize).max(1);
    let mut out = w.clone();
    out.layers.truncate(keep);
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Logits for each submitted position, `tokens × vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBlock(MatrixF);

impl LogitsBlock {
    pub(crate) fn new(m: MatrixF) -> Self {
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn as_matrix(&self) -> &MatrixF {
        &self.0
    }
}

/// Anything that can run the transformer over a token block: the
/// full-precision weights or the quantized model.
pub trait ForwardModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Runs `tokens` on top of `cache`, extending it by `tokens.len()`.
    fn forward(&self, tokens: &[u32], cache: &mut KvCache) -> Result<LogitsBlock>;

    /// Bytes per linear weight element this model reads on each pass.
    fn bytes_per_linear_weight(&self) -> u64;

    fn new_cache(&self) -> KvCache {
        KvCache::new(self.config())
    }

    /// Linear-weight bytes touched by one forward pass.
    fn linear_bytes_per_pass(&self) -> u64 {
        self.config().linear_param_count() as u64 * self.bytes_per_linear_weight()
    }
}

impl ForwardModel for ModelWeights {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, tokens: &[u32], cache: &mut KvCache) -> Result<LogitsBlock> {
        forward(self, tokens, cache)
    }

    fn bytes_per_linear_weight(&self) -> u64 {
        4
    }
}

/// Full-precision forward pass.
pub fn forward(w: &ModelWeights, tokens: &[u32], cache: &mut KvCache) -> Result<LogitsBlock> {
    transformer::run(w, tokens, cache, None)
}

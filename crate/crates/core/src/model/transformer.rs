//! The forward pass, written once over a [`Backbone`] so the f32 and the
//! W8A8 models share every non-linear step bit for bit.
//!
//! Each output row depends only on its own input row, the cached keys and
//! values, and its position. Feeding tokens one at a time or as a block
//! therefore yields identical logits.

use super::{KvCache, LogitsBlock, ModelConfig, ModelError, ModelWeights, Result, WeightTraffic};
use crate::numerics::{dot, gemm_f, gemm_f_nt, MatrixF};

const NORM_EPS: f32 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Up, Proj::Down];

    fn offset(self) -> usize {
        self as usize
    }
}

/// Identifies one linear projection of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinearSlot {
    Layer { layer: usize, proj: Proj },
    Head,
}

impl LinearSlot {
    /// All slots in storage order: per layer Q, K, V, O, Up, Down, then the head.
    pub fn all(n_layers: usize) -> impl Iterator<Item = LinearSlot> {
        (0..n_layers)
            .flat_map(|layer| {
                Proj::ALL
                    .into_iter()
                    .map(move |proj| LinearSlot::Layer { layer, proj })
            })
            .chain(std::iter::once(LinearSlot::Head))
    }

    pub fn index(self, n_layers: usize) -> usize {
        match self {
            LinearSlot::Layer { layer, proj } => layer * Proj::ALL.len() + proj.offset(),
            LinearSlot::Head => n_layers * Proj::ALL.len(),
        }
    }
}

pub(crate) type Observer<'a> = &'a mut dyn FnMut(LinearSlot, &MatrixF);

/// What a forward pass needs from a weight container.
pub(crate) trait Backbone {
    fn config(&self) -> &ModelConfig;
    fn embedding_row(&self, token: usize) -> &[f32];
    fn norm1(&self, layer: usize) -> &[f32];
    fn norm2(&self, layer: usize) -> &[f32];
    fn final_norm(&self) -> &[f32];
    /// `x` is token-major (`tokens × d_in`); returns `tokens × d_out`.
    fn linear(&self, slot: LinearSlot, x: &MatrixF, traffic: &WeightTraffic) -> Result<MatrixF>;
}

impl Backbone for ModelWeights {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embedding_row(&self, token: usize) -> &[f32] {
        self.token_embedding.row(token)
    }

    fn norm1(&self, layer: usize) -> &[f32] {
        &self.layers[layer].norm1
    }

    fn norm2(&self, layer: usize) -> &[f32] {
        &self.layers[layer].norm2
    }

    fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    fn linear(&self, slot: LinearSlot, x: &MatrixF, traffic: &WeightTraffic) -> Result<MatrixF> {
        let out = match slot {
            LinearSlot::Layer { layer, proj } => {
                let w = self.layers[layer].proj(proj);
                traffic.record_f32(w.data().len());
                gemm_f_nt(x, w)?
            }
            LinearSlot::Head => {
                traffic.record_f32(self.head.data().len());
                gemm_f(x, &self.head)?
            }
        };
        Ok(out)
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[u32], cache: &KvCache) -> Result<()> {
    cache.check_compatible(config)?;
    let needed = cache.len() + tokens.len();
    if needed > config.max_seq_len {
        return Err(ModelError::ContextOverflow {
            needed,
            max: config.max_seq_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn run<B: Backbone>(
    model: &B,
    tokens: &[u32],
    cache: &mut KvCache,
    mut observer: Option<Observer<'_>>,
) -> Result<LogitsBlock> {
    let cfg = *model.config();
    check_tokens(&cfg, tokens, cache)?;
    let d = cfg.d_model;
    let n = tokens.len();
    let start = cache.len();

    let mut h = MatrixF::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        h.row_mut(t)
            .copy_from_slice(model.embedding_row(tok as usize));
    }

    // Counted locally while the cache is borrowed mutably, then merged.
    let traffic = WeightTraffic::default();
    let mut linear = |slot: LinearSlot, x: &MatrixF| -> Result<MatrixF> {
        if let Some(obs) = observer.as_mut() {
            obs(slot, x);
        }
        model.linear(slot, x, &traffic)
    };

    for layer in 0..cfg.n_layers {
        let slot = |proj| LinearSlot::Layer { layer, proj };
        let a = rms_norm(&h, model.norm1(layer));
        let mut q = linear(slot(Proj::Q), &a)?;
        let mut k = linear(slot(Proj::K), &a)?;
        let v = linear(slot(Proj::V), &a)?;
        apply_rope(&mut q, start, cfg.n_heads);
        apply_rope(&mut k, start, cfg.n_heads);
        cache.push(layer, k.data(), v.data());

        let attn = attention(&q, cache, layer, start, cfg.n_heads);
        let o = linear(slot(Proj::O), &attn)?;
        add_in_place(&mut h, &o);

        let m = rms_norm(&h, model.norm2(layer));
        let mut u = linear(slot(Proj::Up), &m)?;
        u.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        let down = linear(slot(Proj::Down), &u)?;
        add_in_place(&mut h, &down);
    }
    cache.set_len(start + n);

    let hf = rms_norm(&h, model.final_norm());
    let logits = linear(LinearSlot::Head, &hf)?;

    cache.traffic().add(traffic.snapshot());

    Ok(LogitsBlock::new(logits))
}

fn rms_norm(x: &MatrixF, gain: &[f32]) -> MatrixF {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mut ss = 0.0f32;
        for v in row.iter() {
            ss += v * v;
        }
        let inv = 1.0 / (ss / d + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_in_place(h: &mut MatrixF, delta: &MatrixF) {
    for (a, b) in h.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}

/// Rotates consecutive pairs within each head by `pos · base^(-2i/head_dim)`.
/// An odd trailing dimension is left unrotated.
fn apply_rope(x: &mut MatrixF, start: usize, n_heads: usize) {
    let head_dim = x.cols() / n_heads;
    let pairs = head_dim / 2;
    for t in 0..x.rows() {
        let pos = (start + t) as f64;
        let row = x.row_mut(t);
        for i in 0..pairs {
            let theta = pos * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (theta.sin() as f32, theta.cos() as f32);
            for h in 0..n_heads {
                let j = h * head_dim + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
}

/// Causal multi-head attention for the rows of `q`, which sit at absolute
/// positions `start..start + q.rows()`; keys and values come from the cache.
fn attention(q: &MatrixF, cache: &KvCache, layer: usize, start: usize, n_heads: usize) -> MatrixF {
    let d = q.cols();
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let (keys, values) = cache.layer(layer);
    let mut out = MatrixF::zeros(q.rows(), d);
    let mut scores = Vec::new();
    for t in 0..q.rows() {
        let visible = start + t + 1;
        for h in 0..n_heads {
            let lo = h * head_dim;
            let qh = &q.row(t)[lo..lo + head_dim];
            scores.clear();
            scores.extend((0..visible).map(|s| {
                let kh = &keys[s * d + lo..s * d + lo + head_dim];
                dot(qh, kh) * scale
            }));
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                total += *sc;
            }
            let dst = &mut out.row_mut(t)[lo..lo + head_dim];
            for (s, p) in scores.iter().enumerate() {
                let w = p / total;
                let vh = &values[s * d + lo..s * d + lo + head_dim];
                for (o, v) in dst.iter_mut().zip(vh) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

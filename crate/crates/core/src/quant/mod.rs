//! W8A8 post-training quantization with activation smoothing.
//!
//! Offline, calibration records the per-input-channel maximum of `|X_j|` at
//! every linear layer. Smoothing factors
//! `s_j = max|X_j|^α / max|W_j|^(1-α)` move range from activations into the
//! weights: the stored weight is `Q(W · diag(s)⁻¹)` with one step per
//! output channel. Online, each token's activation row is scaled by `s`
//! and quantized with its own step in one pass, multiplied in `i8 → i32`,
//! and rescaled by `Δ_w · Δ_x`.

mod qzq1;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::transformer::{self, Backbone};
use crate::model::{
    ForwardModel, KvCache, LinearSlot, LogitsBlock, ModelConfig, ModelError, ModelWeights, Proj,
    WeightTraffic,
};
use crate::numerics::{
    compute_step_size, dequantize, gemm_i8_nt, quantize_symmetric, quantize_value, Granularity,
    MatrixF, MatrixI8, NumericsError, StepSize,
};

pub use qzq1::{
    decode_quantized, encode_quantized, load_quantized, save_quantized, QZQ1_MAGIC, QZQ1_VERSION,
};

pub const DEFAULT_SMOOTHING_ALPHA: f32 = 0.5;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{0}")]
    Range(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Running per-input-channel `max |X_j|` for every linear layer, indexed by
/// [`LinearSlot::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub n_layers: usize,
    pub channel_max: Vec<Vec<f32>>,
    pub sample_count: usize,
}

impl CalibrationStats {
    pub fn empty(config: &ModelConfig) -> Self {
        let channel_max = LinearSlot::all(config.n_layers)
            .map(|slot| vec![0.0; input_width(config, slot)])
            .collect();
        Self {
            n_layers: config.n_layers,
            channel_max,
            sample_count: 0,
        }
    }

    pub fn slot(&self, slot: LinearSlot) -> &[f32] {
        &self.channel_max[slot.index(self.n_layers)]
    }

    /// Runs one full-precision forward over `tokens` and folds the observed
    /// activation maxima in.
    pub fn ingest(&mut self, w: &ModelWeights, tokens: &[u32]) -> Result<()> {
        if self.channel_max.len() != LinearSlot::all(w.config.n_layers).count() {
            return Err(QuantError::Shape(
                "stats built for a different model".into(),
            ));
        }
        let n_layers = self.n_layers;
        let maxima = &mut self.channel_max;
        let mut observe = |slot: LinearSlot, x: &MatrixF| {
            let dst = &mut maxima[slot.index(n_layers)];
            for (m, v) in dst.iter_mut().zip(x.col_abs_max()) {
                *m = m.max(v);
            }
        };
        let mut cache = KvCache::new(&w.config);
        transformer::run(w, tokens, &mut cache, Some(&mut observe))?;
        self.sample_count += 1;
        Ok(())
    }

    /// Elementwise maximum of two sets of statistics.
    pub fn merge(&self, other: &CalibrationStats) -> Result<CalibrationStats> {
        if self.n_layers != other.n_layers
            || self
                .channel_max
                .iter()
                .zip(&other.channel_max)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(QuantError::Shape(
                "cannot merge stats of different models".into(),
            ));
        }
        let channel_max = self
            .channel_max
            .iter()
            .zip(&other.channel_max)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.max(*y)).collect())
            .collect();
        Ok(CalibrationStats {
            n_layers: self.n_layers,
            channel_max,
            sample_count: self.sample_count + other.sample_count,
        })
    }
}

fn input_width(config: &ModelConfig, slot: LinearSlot) -> usize {
    match slot {
        LinearSlot::Layer {
            proj: Proj::Down, ..
        } => config.d_ff,
        _ => config.d_model,
    }
}

pub fn calibrate<S: AsRef<[u32]>>(w: &ModelWeights, corpus: &[S]) -> Result<CalibrationStats> {
    if corpus.is_empty() {
        return Err(QuantError::Input("calibration corpus is empty".into()));
    }
    let mut stats = CalibrationStats::empty(&w.config);
    for seq in corpus {
        stats.ingest(w, seq.as_ref())?;
    }
    Ok(stats)
}

/// Per-input-channel smoothing factors for every linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingFactors {
    pub alpha: f32,
    pub n_layers: usize,
    pub factors: Vec<Vec<f32>>,
}

impl SmoothingFactors {
    /// All-ones factors: plain per-channel W8A8 without migration.
    pub fn identity(config: &ModelConfig) -> Self {
        let factors = LinearSlot::all(config.n_layers)
            .map(|slot| vec![1.0; input_width(config, slot)])
            .collect();
        Self {
            alpha: 0.0,
            n_layers: config.n_layers,
            factors,
        }
    }

    pub fn slot(&self, slot: LinearSlot) -> &[f32] {
        &self.factors[slot.index(self.n_layers)]
    }
}

/// `s_j = a^α / w^(1-α)`; one when either maximum is zero.
pub fn smoothing_factor(act_max: f32, weight_max: f32, alpha: f32) -> f32 {
    if act_max <= 0.0 || weight_max <= 0.0 {
        return 1.0;
    }
    let a = alpha as f64;
    let s = (act_max as f64).powf(a) / (weight_max as f64).powf(1.0 - a);
    let s = s as f32;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

pub fn compute_smoothing(
    stats: &CalibrationStats,
    w: &ModelWeights,
    alpha: f32,
) -> Result<SmoothingFactors> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QuantError::Range(format!(
            "alpha {alpha} is outside [0, 1]"
        )));
    }
    if stats.n_layers != w.config.n_layers {
        return Err(QuantError::Shape(
            "stats and weights disagree on n_layers".into(),
        ));
    }
    let mut factors = Vec::with_capacity(stats.channel_max.len());
    for slot in LinearSlot::all(w.config.n_layers) {
        let weight_max = w.linear_weight(slot).col_abs_max();
        let act_max = stats.slot(slot);
        if act_max.len() != weight_max.len() {
            return Err(QuantError::Shape(format!("{slot:?}: stats width mismatch")));
        }
        factors.push(
            act_max
                .iter()
                .zip(&weight_max)
                .map(|(&a, &m)| smoothing_factor(a, m, alpha))
                .collect(),
        );
    }
    Ok(SmoothingFactors {
        alpha,
        n_layers: w.config.n_layers,
        factors,
    })
}

/// A linear layer stored as `Q(W · diag(s)⁻¹)` with per-output-channel steps.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    /// `d_out × d_in`.
    pub weights_i8: MatrixI8,
    /// One step per output channel.
    pub delta_w: Vec<StepSize>,
    /// One factor per input channel.
    pub smoothing: Vec<f32>,
}

impl QuantizedLinear {
    /// Smooths and quantizes a `d_out × d_in` weight.
    pub fn from_weight(w: &MatrixF, smoothing: &[f32]) -> Result<Self> {
        if smoothing.len() != w.cols() {
            return Err(QuantError::Shape(format!(
                "{} smoothing factors for {} input channels",
                smoothing.len(),
                w.cols()
            )));
        }
        if let Some(bad) = smoothing.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(QuantError::Invariant(format!(
                "smoothing factor {bad} is not positive"
            )));
        }
        let mut smoothed = w.clone();
        for r in 0..w.rows() {
            for (v, s) in smoothed.row_mut(r).iter_mut().zip(smoothing) {
                *v /= s;
            }
        }
        let delta_w = compute_step_size(&smoothed, Granularity::PerRow);
        let weights_i8 = quantize_symmetric(&smoothed, &delta_w, Granularity::PerRow)?;
        Ok(Self {
            weights_i8,
            delta_w,
            smoothing: smoothing.to_vec(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights_i8.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weights_i8.rows()
    }

    /// Token-major `x` (`tokens × d_in`) to `tokens × d_out`.
    pub fn forward(&self, x: &MatrixF, traffic: &WeightTraffic) -> Result<MatrixF> {
        let (xq, delta_x) = quantize_activations(x, &self.smoothing)?;
        traffic.record_i8(self.weights_i8.data().len());
        let acc = gemm_i8_nt(&xq, &self.weights_i8)?;
        Ok(dequantize(&acc, &delta_x, &self.delta_w)?)
    }
}

/// Scales each activation row by `s` and quantizes it with a per-row
/// (per-token) step, without materializing the scaled rows.
pub fn quantize_activations(x: &MatrixF, s: &[f32]) -> Result<(MatrixI8, Vec<StepSize>)> {
    if x.cols() != s.len() {
        return Err(QuantError::Shape(format!(
            "{} activation channels, {} smoothing factors",
            x.cols(),
            s.len()
        )));
    }
    let mut codes = Vec::with_capacity(x.data().len());
    let mut steps = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let abs_max = row
            .iter()
            .zip(s)
            .fold(0.0f32, |m, (v, sj)| m.max((v * sj).abs()));
        let step = StepSize::from_abs_max(abs_max);
        codes.extend(
            row.iter()
                .zip(s)
                .map(|(v, sj)| quantize_value(v * sj, step)),
        );
        steps.push(step);
    }
    Ok((MatrixI8::from_vec(x.rows(), x.cols(), codes)?, steps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub norm1: Vec<f32>,
    pub wq: QuantizedLinear,
    pub wk: QuantizedLinear,
    pub wv: QuantizedLinear,
    pub wo: QuantizedLinear,
    pub norm2: Vec<f32>,
    pub w_up: QuantizedLinear,
    pub w_down: QuantizedLinear,
}

impl QuantizedLayer {
    pub fn proj(&self, p: Proj) -> &QuantizedLinear {
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

/// The W8A8 verifier. Embeddings and norm gains stay `f32`; every linear
/// projection, the output head included, is a [`QuantizedLinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub token_embedding: MatrixF,
    pub layers: Vec<QuantizedLayer>,
    pub final_norm: Vec<f32>,
    /// `vocab × d_model`.
    pub head: QuantizedLinear,
    pub smoothing_alpha: f32,
}

impl QuantizedModel {
    pub fn linear(&self, slot: LinearSlot) -> &QuantizedLinear {
        match slot {
            LinearSlot::Layer { layer, proj } => self.layers[layer].proj(proj),
            LinearSlot::Head => &self.head,
        }
    }

    /// Bytes of stored int8 linear weights.
    pub fn linear_payload_bytes(&self) -> usize {
        LinearSlot::all(self.config.n_layers)
            .map(|s| self.linear(s).weights_i8.data().len())
            .sum()
    }
}

pub fn smooth_and_quantize(w: &ModelWeights, s: &SmoothingFactors) -> Result<QuantizedModel> {
    w.validate()?;
    if s.n_layers != w.config.n_layers {
        return Err(QuantError::Shape(
            "smoothing factors for a different model".into(),
        ));
    }
    let q = |slot: LinearSlot| QuantizedLinear::from_weight(&w.linear_weight(slot), s.slot(slot));
    let layers = w
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            let slot = |proj| LinearSlot::Layer { layer, proj };
            Ok(QuantizedLayer {
                norm1: l.norm1.clone(),
                wq: q(slot(Proj::Q))?,
                wk: q(slot(Proj::K))?,
                wv: q(slot(Proj::V))?,
                wo: q(slot(Proj::O))?,
                norm2: l.norm2.clone(),
                w_up: q(slot(Proj::Up))?,
                w_down: q(slot(Proj::Down))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        config: w.config,
        token_embedding: w.token_embedding.clone(),
        layers,
        final_norm: w.final_norm.clone(),
        head: q(LinearSlot::Head)?,
        smoothing_alpha: s.alpha,
    })
}

/// Calibrates on `corpus`, computes smoothing with `alpha` and quantizes.
pub fn quantize_model<S: AsRef<[u32]>>(
    w: &ModelWeights,
    corpus: &[S],
    alpha: f32,
) -> Result<QuantizedModel> {
    let stats = calibrate(w, corpus)?;
    let s = compute_smoothing(&stats, w, alpha)?;
    smooth_and_quantize(w, &s)
}

impl Backbone for QuantizedModel {
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

    fn linear(
        &self,
        slot: LinearSlot,
        x: &MatrixF,
        traffic: &WeightTraffic,
    ) -> crate::model::Result<MatrixF> {
        self.linear(slot).forward(x, traffic).map_err(|e| match e {
            QuantError::Numerics(n) => ModelError::Numerics(n),
            QuantError::Model(m) => m,
            other => ModelError::Shape(other.to_string()),
        })
    }
}

/// W8A8 forward pass; structure and non-linear math identical to
/// [`crate::model::forward`].
pub fn quantized_forward(
    qm: &QuantizedModel,
    tokens: &[u32],
    cache: &mut KvCache,
) -> crate::model::Result<LogitsBlock> {
    transformer::run(qm, tokens, cache, None)
}

impl ForwardModel for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, tokens: &[u32], cache: &mut KvCache) -> crate::model::Result<LogitsBlock> {
        quantized_forward(self, tokens, cache)
    }

    fn bytes_per_linear_weight(&self) -> u64 {
        1
    }
}

//! Dense matrix types and the scalar kernels everything else is built on.
//!
//! Matrices are row-major and own their storage. Floating point GEMM
//! accumulates in `f32`; the integer GEMM accumulates `i8 × i8` products
//! exactly in `i32`. Quantization is symmetric over `[-127, 127]` with
//! round-half-away-from-zero.

use std::sync::atomic::{AtomicU8, Ordering};

use rayon::prelude::*;
use thiserror::Error;

/// Largest inner dimension for which `127 * 127 * k` still fits in `i32`.
pub const MAX_I8_INNER_DIM: usize = 130_000;

/// Largest magnitude of a quantized code.
pub const QMAX: f32 = 127.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("inner dimension {0} exceeds the i32 accumulation bound {MAX_I8_INNER_DIM}")]
    Capacity(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Reduction strategy used by the GEMM kernels.
///
/// Both modes are reproducible run to run. `Deterministic` sums every
/// output element strictly left to right on one thread; `Fast` splits the
/// reduction over four partial accumulators and spreads rows over the
/// rayon pool, so its results differ from `Deterministic` in the last bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Deterministic,
    Fast,
}

static KERNEL_MODE: AtomicU8 = AtomicU8::new(0);

pub fn kernel_mode() -> KernelMode {
    match KERNEL_MODE.load(Ordering::Relaxed) {
        0 => KernelMode::Deterministic,
        _ => KernelMode::Fast,
    }
}

/// Sets the process-wide kernel mode. The default is `Deterministic`.
pub fn set_kernel_mode(mode: KernelMode) {
    let v = match mode {
        KernelMode::Deterministic => 0,
        KernelMode::Fast => 1,
    };
    KERNEL_MODE.store(v, Ordering::Relaxed);
}

// Work (in multiply-adds) below which the fast kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

macro_rules! matrix_type {
    ($name:ident, $elem:ty) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            rows: usize,
            cols: usize,
            data: Vec<$elem>,
        }

        impl $name {
            pub fn zeros(rows: usize, cols: usize) -> Self {
                Self {
                    rows,
                    cols,
                    data: vec![<$elem>::default(); rows * cols],
                }
            }

            pub fn from_vec(rows: usize, cols: usize, data: Vec<$elem>) -> Result<Self> {
                if data.len() != rows * cols {
                    return Err(NumericsError::Shape(format!(
                        "{} elements for a {rows}x{cols} matrix",
                        data.len()
                    )));
                }
                Ok(Self { rows, cols, data })
            }

            pub fn from_rows(rows: &[Vec<$elem>]) -> Result<Self> {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(NumericsError::Shape("ragged rows".into()));
                }
                Ok(Self {
                    rows: rows.len(),
                    cols,
                    data: rows.concat(),
                })
            }

            #[inline]
            pub fn rows(&self) -> usize {
                self.rows
            }

            #[inline]
            pub fn cols(&self) -> usize {
                self.cols
            }

            #[inline]
            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn into_data(self) -> Vec<$elem> {
                self.data
            }

            #[inline]
            pub fn get(&self, r: usize, c: usize) -> $elem {
                self.data[r * self.cols + c]
            }

            #[inline]
            pub fn row(&self, r: usize) -> &[$elem] {
                &self.data[r * self.cols..(r + 1) * self.cols]
            }

            pub fn transpose(&self) -> Self {
                let mut out = Vec::with_capacity(self.data.len());
                for c in 0..self.cols {
                    for r in 0..self.rows {
                        out.push(self.data[r * self.cols + c]);
                    }
                }
                Self {
                    rows: self.cols,
                    cols: self.rows,
                    data: out,
                }
            }
        }
    };
}

matrix_type!(MatrixF, f32);
matrix_type!(MatrixI8, i8);
matrix_type!(MatrixI32, i32);

impl MatrixF {
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute value per column.
    pub fn col_abs_max(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.cols];
        for r in 0..self.rows {
            for (m, v) in out.iter_mut().zip(self.row(r)) {
                *m = m.max(v.abs());
            }
        }
        out
    }
}

/// Quantization step `Δ`; always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct StepSize(f32);

impl StepSize {
    pub fn new(value: f32) -> Option<Self> {
        (value > 0.0 && value.is_finite()).then_some(Self(value))
    }

    /// Step for a group whose largest magnitude is `abs_max`; an all-zero
    /// group gets `1/127` so every code stays zero.
    pub fn from_abs_max(abs_max: f32) -> Self {
        if abs_max > 0.0 && abs_max.is_finite() {
            Self(abs_max / QMAX)
        } else {
            Self(1.0 / QMAX)
        }
    }

    #[inline]
    pub fn get(self) -> f32 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerRow,
    PerColumn,
}

impl Granularity {
    fn group_count(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
            Granularity::PerColumn => cols,
        }
    }

    #[inline]
    fn group_of(self, r: usize, c: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerRow => r,
            Granularity::PerColumn => c,
        }
    }
}

/// Dot product in the active kernel mode.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    match kernel_mode() {
        KernelMode::Deterministic => dot_ordered(a, b),
        KernelMode::Fast => dot_lanes(a, b),
    }
}

#[inline]
fn dot_ordered(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for i in chunks * 4..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| i32::from(x) * i32::from(y))
        .sum()
}

fn fill_rows<T, F>(out: &mut [T], cols: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if cols == 0 {
        return;
    }
    if kernel_mode() == KernelMode::Fast && work >= PAR_THRESHOLD {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// `C = A · B` in `f32`.
///
/// Each output row is built as a running sum of scaled rows of `B`, so
/// every element is reduced over the inner index strictly left to right.
pub fn gemm_f(a: &MatrixF, b: &MatrixF) -> Result<MatrixF> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape(format!(
            "gemm {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = MatrixF::zeros(a.rows, b.cols);
    let work = a.rows * b.cols * a.cols;
    fill_rows(&mut out.data, b.cols, work, |i, row| {
        for (j, &aij) in a.row(i).iter().enumerate() {
            for (c, bjk) in row.iter_mut().zip(b.row(j)) {
                *c += aij * bjk;
            }
        }
    });
    Ok(out)
}

/// `C = A · Bᵀ` in `f32`; both operands are read along contiguous rows.
pub fn gemm_f_nt(a: &MatrixF, b: &MatrixF) -> Result<MatrixF> {
    if a.cols != b.cols {
        return Err(NumericsError::Shape(format!(
            "gemm {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = MatrixF::zeros(a.rows, b.rows);
    let work = a.rows * b.rows * a.cols;
    fill_rows(&mut out.data, b.rows, work, |i, row| {
        let ar = a.row(i);
        for (k, c) in row.iter_mut().enumerate() {
            *c = dot(ar, b.row(k));
        }
    });
    Ok(out)
}

fn check_i8_dims(inner_a: usize, inner_b: usize, what: &str) -> Result<()> {
    if inner_a != inner_b {
        return Err(NumericsError::Shape(format!(
            "{what}: inner dimensions {inner_a} and {inner_b}"
        )));
    }
    if inner_a > MAX_I8_INNER_DIM {
        return Err(NumericsError::Capacity(inner_a));
    }
    Ok(())
}

/// `C = A · B` with exact `i32` accumulation.
pub fn gemm_i8(a: &MatrixI8, b: &MatrixI8) -> Result<MatrixI32> {
    check_i8_dims(a.cols, b.rows, "gemm_i8")?;
    gemm_i8_nt(a, &b.transpose())
}

/// `C = A · Bᵀ` with exact `i32` accumulation.
pub fn gemm_i8_nt(a: &MatrixI8, b: &MatrixI8) -> Result<MatrixI32> {
    check_i8_dims(a.cols, b.cols, "gemm_i8_nt")?;
    let mut out = MatrixI32::zeros(a.rows, b.rows);
    let work = a.rows * b.rows * a.cols;
    fill_rows(&mut out.data, b.rows, work, |i, row| {
        let ar = a.row(i);
        for (k, c) in row.iter_mut().enumerate() {
            *c = dot_i8(ar, b.row(k));
        }
    });
    Ok(out)
}

/// Per-group step sizes `max|v| / 127`.
pub fn compute_step_size(m: &MatrixF, granularity: Granularity) -> Vec<StepSize> {
    let mut maxima = vec![0.0f32; granularity.group_count(m.rows, m.cols)];
    for r in 0..m.rows {
        for (c, v) in m.row(r).iter().enumerate() {
            let g = &mut maxima[granularity.group_of(r, c)];
            *g = g.max(v.abs());
        }
    }
    maxima.into_iter().map(StepSize::from_abs_max).collect()
}

/// `clamp(round_half_away(v / Δ), -127, 127)`.
#[inline]
pub fn quantize_value(v: f32, step: StepSize) -> i8 {
    // f32::round rounds half away from zero.
    (v / step.0).round().clamp(-QMAX, QMAX) as i8
}

pub fn quantize_symmetric(
    m: &MatrixF,
    steps: &[StepSize],
    granularity: Granularity,
) -> Result<MatrixI8> {
    let expected = granularity.group_count(m.rows, m.cols);
    if steps.len() != expected {
        return Err(NumericsError::Shape(format!(
            "{} step sizes for {expected} groups",
            steps.len()
        )));
    }
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        for (c, &v) in m.row(r).iter().enumerate() {
            data.push(quantize_value(v, steps[granularity.group_of(r, c)]));
        }
    }
    Ok(MatrixI8 {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// `Y[i][k] = C[i][k] · (row_steps[i] · col_steps[k])`.
///
/// For a weight-by-activation product the rows carry `Δ_w` (output
/// channels) and the columns `Δ_x` (tokens); the token-major orientation
/// used by the model simply swaps the two lists.
pub fn dequantize(
    c: &MatrixI32,
    row_steps: &[StepSize],
    col_steps: &[StepSize],
) -> Result<MatrixF> {
    if row_steps.len() != c.rows || col_steps.len() != c.cols {
        return Err(NumericsError::Shape(format!(
            "{}x{} scales for a {}x{} accumulator",
            row_steps.len(),
            col_steps.len(),
            c.rows,
            c.cols
        )));
    }
    let mut data = Vec::with_capacity(c.data.len());
    for (i, rs) in row_steps.iter().enumerate() {
        for (v, cs) in c.row(i).iter().zip(col_steps) {
            data.push(*v as f32 * (rs.0 * cs.0));
        }
    }
    Ok(MatrixF {
        rows: c.rows,
        cols: c.cols,
        data,
    })
}

/// A probability vector over the vocabulary, held in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Normalizes `weights` to sum to one. Returns `None` for an empty
    /// vector, a negative or non-finite entry, or zero total mass.
    pub fn from_weights(weights: Vec<f64>) -> Option<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return None;
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Some(Self { probs })
    }

    pub fn one_hot(index: usize, size: usize) -> Self {
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self { probs }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Inverse-CDF draw with a uniform `u ∈ [0, 1)`. Rounding slack at the
    /// top of the CDF falls to the last index with non-zero mass.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`, or the argmax one-hot at `T == 0`.
pub fn softmax_temperature(logits: &[f32], temperature: f32) -> Result<Distribution> {
    if logits.is_empty() {
        return Err(NumericsError::Shape("empty logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(NumericsError::NonFinite("logits"));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(NumericsError::NonFinite("temperature"));
    }
    if temperature == 0.0 {
        return Ok(Distribution::one_hot(argmax(logits), logits.len()));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let t = temperature as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / t).exp())
        .collect();
    // The max element contributes exp(0) = 1, so the total is never zero.
    Ok(Distribution::from_weights(weights).expect("softmax weights are positive"))
}

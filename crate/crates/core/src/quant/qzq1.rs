//! QZQ1: quantized weight file.
//!
//! ```text
//! "QZQ1" | version u32 = 1 | vocab | d_model | n_layers | n_heads | d_ff | max_seq   (u32 LE)
//! smoothing_alpha f32
//! embedding (f32, vocab × d_model)
//! per layer: norm1 | Q | K | V | O | norm2 | Up | Down
//! final norm | Head
//! ```
//! This is the QZR1 layout with every linear tensor replaced by a quantized
//! record `s (f32 × d_in) | Δ_w (f32 × d_out) | codes (i8, d_out × d_in)`.
//! The head record is stored in `vocab × d_model` orientation.

use std::path::Path;

use super::{QuantError, QuantizedLayer, QuantizedLinear, QuantizedModel, Result};
use crate::binio::{Reader, Writer};
use crate::model::qzr1::{io_error, read_header, read_matrix, write_config};
use crate::model::ModelError;
use crate::numerics::{MatrixI8, StepSize};

pub const QZQ1_MAGIC: [u8; 4] = *b"QZQ1";
pub const QZQ1_VERSION: u32 = 1;

fn write_linear(w: &mut Writer, q: &QuantizedLinear) {
    w.f32s(&q.smoothing);
    for d in &q.delta_w {
        w.f32(d.get());
    }
    w.i8s(q.weights_i8.data());
}

fn read_linear(r: &mut Reader<'_>, d_out: usize, d_in: usize) -> Result<QuantizedLinear> {
    let trunc = |_| QuantError::Model(ModelError::Truncated);
    let smoothing = r.f32s(d_in).map_err(trunc)?;
    if smoothing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(QuantError::Invariant(
            "non-positive smoothing factor".into(),
        ));
    }
    let delta_w = r
        .f32s(d_out)
        .map_err(trunc)?
        .into_iter()
        .map(|d| StepSize::new(d).ok_or_else(|| QuantError::Invariant(format!("step size {d}"))))
        .collect::<Result<Vec<_>>>()?;
    let n = d_out
        .checked_mul(d_in)
        .ok_or(QuantError::Model(ModelError::Truncated))?;
    let codes = r.i8s(n).map_err(trunc)?;
    if codes.contains(&i8::MIN) {
        return Err(QuantError::Invariant(
            "code -128 outside the symmetric range".into(),
        ));
    }
    Ok(QuantizedLinear {
        weights_i8: MatrixI8::from_vec(d_out, d_in, codes)?,
        delta_w,
        smoothing,
    })
}

pub fn encode_quantized(qm: &QuantizedModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&QZQ1_MAGIC);
    w.u32(QZQ1_VERSION);
    write_config(&mut w, &qm.config);
    w.f32(qm.smoothing_alpha);
    w.f32s(qm.token_embedding.data());
    for l in &qm.layers {
        w.f32s(&l.norm1);
        for q in [&l.wq, &l.wk, &l.wv, &l.wo] {
            write_linear(&mut w, q);
        }
        w.f32s(&l.norm2);
        write_linear(&mut w, &l.w_up);
        write_linear(&mut w, &l.w_down);
    }
    w.f32s(&qm.final_norm);
    write_linear(&mut w, &qm.head);
    w.finish()
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(bytes);
    let config = read_header(&mut r, QZQ1_MAGIC, QZQ1_VERSION)?;
    let trunc = |_| QuantError::Model(ModelError::Truncated);
    let smoothing_alpha = r.f32().map_err(trunc)?;
    if !(0.0..=1.0).contains(&smoothing_alpha) {
        return Err(QuantError::Range(format!(
            "smoothing alpha {smoothing_alpha}"
        )));
    }
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let token_embedding = read_matrix(&mut r, v, d)?;
    let mut layers = Vec::with_capacity(config.n_layers.min(1024));
    for _ in 0..config.n_layers {
        layers.push(QuantizedLayer {
            norm1: r.f32s(d).map_err(trunc)?,
            wq: read_linear(&mut r, d, d)?,
            wk: read_linear(&mut r, d, d)?,
            wv: read_linear(&mut r, d, d)?,
            wo: read_linear(&mut r, d, d)?,
            norm2: r.f32s(d).map_err(trunc)?,
            w_up: read_linear(&mut r, f, d)?,
            w_down: read_linear(&mut r, d, f)?,
        });
    }
    let final_norm = r.f32s(d).map_err(trunc)?;
    let head = read_linear(&mut r, v, d)?;
    if r.remaining() != 0 {
        return Err(QuantError::Shape(format!(
            "{} trailing bytes after the head",
            r.remaining()
        )));
    }
    let all_finite = token_embedding.is_finite()
        && final_norm.iter().all(|x| x.is_finite())
        && layers
            .iter()
            .all(|l| l.norm1.iter().chain(&l.norm2).all(|x| x.is_finite()));
    if !all_finite {
        return Err(QuantError::Invariant("non-finite f32 parameter".into()));
    }
    Ok(QuantizedModel {
        config,
        token_embedding,
        layers,
        final_norm,
        head,
        smoothing_alpha,
    })
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_quantized(qm)).map_err(|e| QuantError::Model(io_error(path, e)))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| QuantError::Model(io_error(path, e)))?;
    decode_quantized(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic_weights, ModelConfig};
    use crate::quant::quantize_model;

    fn model() -> QuantizedModel {
        let config = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 32,
        };
        let w = generate_synthetic_weights(config, 9).unwrap();
        quantize_model(&w, &[vec![1u32, 2, 3, 4, 5, 6]], 0.5).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let qm = model();
        let bytes = encode_quantized(&qm);
        assert_eq!(decode_quantized(&bytes).unwrap(), qm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qzq1");
        save_quantized(&qm, &path).unwrap();
        assert_eq!(load_quantized(&path).unwrap(), qm);
    }

    #[test]
    fn byte_accounting() {
        let qm = model();
        let c = qm.config;
        let linear = c.linear_param_count();
        // s and Δ_w for each linear layer.
        let side: usize = crate::model::LinearSlot::all(c.n_layers)
            .map(|s| qm.linear(s).d_in() + qm.linear(s).d_out())
            .sum();
        let nonlinear = c.vocab_size * c.d_model + c.n_layers * 2 * c.d_model + c.d_model;
        let expected = 32 + 4 + linear + 4 * (side + nonlinear);
        assert_eq!(encode_quantized(&qm).len(), expected);
    }

    #[test]
    fn load_errors() {
        let good = encode_quantized(&model());
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"QZR1");
        assert!(matches!(
            decode_quantized(&bad),
            Err(QuantError::Model(ModelError::BadMagic(_)))
        ));
        assert!(matches!(
            decode_quantized(&good[..good.len() - 1]),
            Err(QuantError::Model(ModelError::Truncated))
        ));
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_quantized(&bad),
            Err(QuantError::Model(ModelError::Version(7)))
        ));
        // Last byte is a head code; -128 is outside the symmetric range.
        let mut bad = good;
        *bad.last_mut().unwrap() = 0x80;
        assert!(matches!(
            decode_quantized(&bad),
            Err(QuantError::Invariant(_))
        ));
    }
}

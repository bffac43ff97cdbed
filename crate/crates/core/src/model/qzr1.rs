//! QZR1: full-precision weight file.
//!
//! ```text
//! "QZR1" | version u32 = 1 | vocab | d_model | n_layers | n_heads | d_ff | max_seq   (u32 LE)
//! embedding (vocab × d_model)
//! per layer: norm1 | Wq | Wk | Wv | Wo | norm2 | W_up | W_down
//! final norm | head (d_model × vocab)
//! ```
//! Every tensor is raw little-endian `f32`, row-major. Nothing may follow
//! the head.

use std::path::Path;

use super::{LayerWeights, ModelConfig, ModelError, ModelWeights, Result};
use crate::binio::{Eof, Reader, Writer};
use crate::numerics::MatrixF;

pub const QZR1_MAGIC: [u8; 4] = *b"QZR1";
pub const QZR1_VERSION: u32 = 1;

impl From<Eof> for ModelError {
    fn from(_: Eof) -> Self {
        ModelError::Truncated
    }
}

pub(crate) fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq_len,
    ] {
        w.u32(v as u32);
    }
}

/// Reads the magic, version and config shared by QZR1 and QZQ1 headers.
pub(crate) fn read_header(r: &mut Reader<'_>, magic: [u8; 4], version: u32) -> Result<ModelConfig> {
    let m = r.take(4)?;
    let m = [m[0], m[1], m[2], m[3]];
    if m != magic {
        return Err(ModelError::BadMagic(m));
    }
    let v = r.u32()?;
    if v != version {
        return Err(ModelError::Version(v));
    }
    let mut f = [0usize; 6];
    for x in f.iter_mut() {
        *x = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: f[0],
        d_model: f[1],
        n_layers: f[2],
        n_heads: f[3],
        d_ff: f[4],
        max_seq_len: f[5],
    };
    config
        .validate()
        .map_err(|e| ModelError::Shape(format!("header: {e}")))?;
    Ok(config)
}

pub(crate) fn read_matrix(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<MatrixF> {
    let n = rows.checked_mul(cols).ok_or(ModelError::Truncated)?;
    Ok(MatrixF::from_vec(rows, cols, r.f32s(n)?)?)
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_weights(w: &ModelWeights) -> Vec<u8> {
    let mut out = Writer::new();
    out.bytes(&QZR1_MAGIC);
    out.u32(QZR1_VERSION);
    write_config(&mut out, &w.config);
    out.f32s(w.token_embedding.data());
    for l in &w.layers {
        out.f32s(&l.norm1);
        for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
            out.f32s(m.data());
        }
        out.f32s(&l.norm2);
        out.f32s(l.w_up.data());
        out.f32s(l.w_down.data());
    }
    out.f32s(&w.final_norm);
    out.f32s(w.head.data());
    out.finish()
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader::new(bytes);
    let config = read_header(&mut r, QZR1_MAGIC, QZR1_VERSION)?;
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let token_embedding = read_matrix(&mut r, v, d)?;
    let mut layers = Vec::with_capacity(config.n_layers.min(1024));
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            norm1: r.f32s(d)?,
            wq: read_matrix(&mut r, d, d)?,
            wk: read_matrix(&mut r, d, d)?,
            wv: read_matrix(&mut r, d, d)?,
            wo: read_matrix(&mut r, d, d)?,
            norm2: r.f32s(d)?,
            w_up: read_matrix(&mut r, f, d)?,
            w_down: read_matrix(&mut r, d, f)?,
        });
    }
    let final_norm = r.f32s(d)?;
    let head = read_matrix(&mut r, d, v)?;
    if r.remaining() != 0 {
        return Err(ModelError::Shape(format!(
            "{} trailing bytes after the head",
            r.remaining()
        )));
    }
    let w = ModelWeights {
        config,
        token_embedding,
        layers,
        final_norm,
        head,
    };
    w.validate()?;
    Ok(w)
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(w)).map_err(|e| io_error(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic_weights;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 32,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let w = generate_synthetic_weights(config(), 11).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(bytes.len(), 32 + 4 * config().param_count());
        assert_eq!(decode_weights(&bytes).unwrap(), w);
    }

    #[test]
    fn file_roundtrip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.qzr1"), dir.path().join("b.qzr1"));
        save_weights(&generate_synthetic_weights(config(), 5).unwrap(), &a).unwrap();
        save_weights(&generate_synthetic_weights(config(), 5).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(
            load_weights(&a).unwrap(),
            generate_synthetic_weights(config(), 5).unwrap()
        );
    }

    #[test]
    fn distinct_load_errors() {
        let good = encode_weights(&generate_synthetic_weights(config(), 1).unwrap());

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"QZQ1");
        assert!(matches!(decode_weights(&bad), Err(ModelError::BadMagic(m)) if &m == b"QZQ1"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_weights(&bad), Err(ModelError::Version(2))));

        let cut = &good[..good.len() / 2 + 3];
        assert!(matches!(decode_weights(cut), Err(ModelError::Truncated)));
        assert!(matches!(
            decode_weights(&good[..10]),
            Err(ModelError::Truncated)
        ));

        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_weights(&bad), Err(ModelError::Shape(_))));

        // n_heads = 3 does not divide d_model = 8.
        let mut bad = good.clone();
        bad[20..24].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_weights(&bad), Err(ModelError::Shape(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_weights("/nonexistent/model.qzr1").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.qzr1"));
    }
}

use std::sync::atomic::{AtomicU64, Ordering};

use super::{ModelConfig, ModelError, Result};

/// Counts linear-weight bytes read by forward passes, split by precision.
#[derive(Debug, Default)]
pub struct WeightTraffic {
    f32_linear_bytes: AtomicU64,
    i8_linear_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficSnapshot {
    pub f32_linear_bytes: u64,
    pub i8_linear_bytes: u64,
}

impl TrafficSnapshot {
    pub fn total(&self) -> u64 {
        self.f32_linear_bytes + self.i8_linear_bytes
    }

    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        TrafficSnapshot {
            f32_linear_bytes: self.f32_linear_bytes - earlier.f32_linear_bytes,
            i8_linear_bytes: self.i8_linear_bytes - earlier.i8_linear_bytes,
        }
    }
}

impl WeightTraffic {
    pub fn record_f32(&self, elements: usize) {
        self.f32_linear_bytes
            .fetch_add(4 * elements as u64, Ordering::Relaxed);
    }

    pub fn record_i8(&self, elements: usize) {
        self.i8_linear_bytes
            .fetch_add(elements as u64, Ordering::Relaxed);
    }

    pub fn add(&self, s: TrafficSnapshot) {
        self.f32_linear_bytes
            .fetch_add(s.f32_linear_bytes, Ordering::Relaxed);
        self.i8_linear_bytes
            .fetch_add(s.i8_linear_bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot {
            f32_linear_bytes: self.f32_linear_bytes.load(Ordering::Relaxed),
            i8_linear_bytes: self.i8_linear_bytes.load(Ordering::Relaxed),
        }
    }
}

impl Clone for WeightTraffic {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        Self {
            f32_linear_bytes: AtomicU64::new(s.f32_linear_bytes),
            i8_linear_bytes: AtomicU64::new(s.i8_linear_bytes),
        }
    }
}

/// Per-layer post-rotary keys and values for positions `[0, len)`.
///
/// The cache also carries the weight-traffic counter of the stream that
/// owns it; truncation rolls back positions, never the counter.
#[derive(Debug, Clone)]
pub struct KvCache {
    d_model: usize,
    max_seq_len: usize,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    traffic: WeightTraffic,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            max_seq_len: config.max_seq_len,
            len: 0,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            traffic: WeightTraffic::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn traffic(&self) -> &WeightTraffic {
        &self.traffic
    }

    /// Rolls the cache back to its first `new_len` positions.
    pub fn truncate(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.len {
            return Err(ModelError::Range(format!(
                "cannot truncate a cache of length {} to {new_len}",
                self.len
            )));
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(new_len * self.d_model);
            v.truncate(new_len * self.d_model);
        }
        self.len = new_len;
        Ok(())
    }

    pub(crate) fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.keys.len() != config.n_layers
            || self.d_model != config.d_model
            || self.max_seq_len != config.max_seq_len
        {
            return Err(ModelError::Shape(
                "cache was built for a different model config".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub(crate) fn set_len(&mut self, len: usize) {
        self.len = len;
    }
}

/// Free-function form of [`KvCache::truncate`].
pub fn truncate_cache(mut cache: KvCache, new_len: usize) -> Result<KvCache> {
    cache.truncate(new_len)?;
    Ok(cache)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Source of the uniform `r ∼ U[0, 1)` draws consumed by acceptance tests
/// and token sampling.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

/// Seeded counter-based generator (ChaCha12). Each seed owns 2⁶⁴
/// independent streams; [`SamplingRng::split`] selects one.
#[derive(Debug, Clone)]
pub struct SamplingRng {
    inner: ChaCha12Rng,
    seed: u64,
}

impl SamplingRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha12Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// A fresh generator on stream `stream` of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            inner,
            seed: self.seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl UniformSource for SamplingRng {
    fn next_uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

/// Replays a fixed list of uniforms; panics when exhausted.
#[derive(Debug, Clone)]
pub struct FixedUniforms {
    values: Vec<f64>,
    next: usize,
}

impl FixedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }
}

impl UniformSource for FixedUniforms {
    fn next_uniform(&mut self) -> f64 {
        let v = self.values[self.next];
        self.next += 1;
        v
    }
}

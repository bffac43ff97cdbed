use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Autoregressive decoding on the f32 model.
    Vanilla,
    /// Prompt-lookup drafting, f32 verifier.
    NgramBf,
    /// Prompt-lookup drafting, W8A8 verifier.
    Quasar,
    /// Layer-dropped copy of the model as a greedy drafter, f32 verifier.
    PrunedDrafter,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::NgramBf => "ngram-bf",
            Method::Quasar => "quasar",
            Method::PrunedDrafter => "pruned-drafter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_temperatures() -> Vec<f32> {
    vec![0.0]
}

fn default_gammas() -> Vec<usize> {
    vec![5]
}

fn default_k_ranges() -> Vec<(usize, usize)> {
    vec![(1, 4)]
}

/// The benchmark grid. Relative paths are resolved against the directory of
/// the config file by [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub weights_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized_weights_path: Option<PathBuf>,
    pub corpus_path: PathBuf,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f32>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<usize>,
    /// `(k_min, k_max)` pairs, written as `[[1, 4], [2, 3]]`.
    #[serde(default = "default_k_ranges")]
    pub k_ranges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retain_fractions: Vec<f64>,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Use only the first N prompts of the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompts: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&raw).map_err(|source| BenchError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.weights_path);
        resolve(&mut self.corpus_path);
        if let Some(q) = self.quantized_weights_path.as_mut() {
            resolve(q);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(BenchError::Config(msg));
        if self.methods.is_empty() {
            return fail("no methods configured".into());
        }
        if self.methods.contains(&Method::Quasar) && self.quantized_weights_path.is_none() {
            return fail("method quasar requires quantized_weights_path".into());
        }
        if self.methods.contains(&Method::PrunedDrafter) && self.retain_fractions.is_empty() {
            return fail("method pruned-drafter requires retain_fractions".into());
        }
        if let Some(r) = self
            .retain_fractions
            .iter()
            .find(|r| !(**r > 0.0 && **r <= 1.0))
        {
            return fail(format!("retain fraction {r} is outside (0, 1]"));
        }
        if self.temperatures.is_empty()
            || self
                .temperatures
                .iter()
                .any(|t| !(*t >= 0.0 && t.is_finite()))
        {
            return fail("temperatures must be a non-empty list of finite values >= 0".into());
        }
        if self.gammas.is_empty() || self.gammas.contains(&0) {
            return fail("gammas must be a non-empty list of values >= 1".into());
        }
        if self.k_ranges.is_empty() || self.k_ranges.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return fail("k_ranges must be non-empty pairs with 1 <= k_min <= k_max".into());
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be at least 1".into());
        }
        if self.max_prompts == Some(0) {
            return fail("max_prompts must be at least 1".into());
        }
        Ok(())
    }
}

use qverify_core::drafter::DrafterConfig;
use qverify_core::model::{drop_layers, load_weights, ModelWeights};
use qverify_core::perfmodel::{annotate, fit_from_metrics};
use qverify_core::quant::{load_quantized, QuantizedModel};
use qverify_core::specdec::{
    speculative_generate, speculative_generate_with, vanilla_generate, DecodeMetrics,
    ModelDraftSource, SamplingConfig,
};
use rayon::prelude::*;

use crate::config::{Method, RunConfig};
use crate::corpus::{ingest_corpus, Prompt};
use crate::report::{CellKey, RunRecord, RunReport, RunSummary, SCHEMA_VERSION};
use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    /// When false, every timing field is zeroed and speedups use the
    /// bandwidth-bound model, so reports are byte-for-byte reproducible.
    pub timings: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            timings: true,
        }
    }
}

pub struct Models {
    pub full: ModelWeights,
    pub quantized: Option<QuantizedModel>,
    /// `(retain_fraction, layer-dropped model)`.
    pub pruned: Vec<(f64, ModelWeights)>,
}

impl Models {
    pub fn new(
        full: ModelWeights,
        quantized: Option<QuantizedModel>,
        retain_fractions: &[f64],
    ) -> Result<Self> {
        if let Some(q) = &quantized {
            if q.config != full.config {
                return Err(BenchError::Config(
                    "quantized weights were built from a different model config".into(),
                ));
            }
        }
        let pruned = retain_fractions
            .iter()
            .map(|&r| Ok((r, drop_layers(&full, r)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            full,
            quantized,
            pruned,
        })
    }

    fn pruned(&self, retain: f64) -> &ModelWeights {
        &self
            .pruned
            .iter()
            .find(|(r, _)| *r == retain)
            .expect("pruned model prepared for every configured fraction")
            .1
    }
}

pub fn load_models(cfg: &RunConfig) -> Result<Models> {
    let full = load_weights(&cfg.weights_path)?;
    let quantized = if cfg.methods.contains(&Method::Quasar) {
        let path = cfg.quantized_weights_path.as_ref().ok_or_else(|| {
            BenchError::Config("method quasar requires quantized_weights_path".into())
        })?;
        Some(load_quantized(path)?)
    } else {
        None
    };
    let retain = if cfg.methods.contains(&Method::PrunedDrafter) {
        &cfg.retain_fractions[..]
    } else {
        &[]
    };
    Models::new(full, quantized, retain)
}

/// Sampling seed of the prompt at `index`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

pub fn run_matrix(cfg: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let mut prompts = ingest_corpus(&cfg.corpus_path)?;
    if let Some(n) = cfg.max_prompts {
        prompts.truncate(n);
    }
    let models = load_models(cfg)?;
    run_matrix_with(cfg, &prompts, &models, opts)
}

fn cells(cfg: &RunConfig) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &temperature in &cfg.temperatures {
        for &method in &cfg.methods {
            match method {
                Method::Vanilla => out.push(CellKey::vanilla(temperature)),
                Method::NgramBf | Method::Quasar => {
                    for &(k_min, k_max) in &cfg.k_ranges {
                        for &gamma in &cfg.gammas {
                            out.push(CellKey {
                                method,
                                gamma: Some(gamma),
                                k_min: Some(k_min),
                                k_max: Some(k_max),
                                ..CellKey::vanilla(temperature)
                            });
                        }
                    }
                }
                Method::PrunedDrafter => {
                    for &retain in &cfg.retain_fractions {
                        for &gamma in &cfg.gammas {
                            out.push(CellKey {
                                method,
                                gamma: Some(gamma),
                                retain_fraction: Some(retain),
                                ..CellKey::vanilla(temperature)
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn run_one(
    models: &Models,
    cell: &CellKey,
    prompt: &[u32],
    max_new: usize,
    seed: u64,
) -> Result<DecodeMetrics> {
    let sampling = SamplingConfig {
        temperature: cell.temperature,
        seed,
    };
    let drafter = || -> Result<DrafterConfig> {
        let (k_min, k_max, gamma) = (
            cell.k_min.unwrap_or(1),
            cell.k_max.unwrap_or(1),
            cell.gamma.unwrap_or(1),
        );
        DrafterConfig::new(k_min, k_max, gamma).map_err(|e| BenchError::Config(e.to_string()))
    };
    let metrics = match cell.method {
        Method::Vanilla => vanilla_generate(&models.full, prompt, max_new, &sampling)?.1,
        Method::NgramBf => {
            speculative_generate(&models.full, &drafter()?, prompt, max_new, &sampling)?.1
        }
        Method::Quasar => {
            let q = models.quantized.as_ref().ok_or_else(|| {
                BenchError::Config("method quasar requires quantized weights".into())
            })?;
            speculative_generate(q, &drafter()?, prompt, max_new, &sampling)?.1
        }
        Method::PrunedDrafter => {
            let small = models.pruned(cell.retain_fraction.expect("pruned cells carry a fraction"));
            let mut source = ModelDraftSource::new(small, cell.gamma.unwrap_or(1));
            speculative_generate_with(&models.full, &mut source, prompt, max_new, &sampling)?
                .metrics
        }
    };
    Ok(metrics)
}

fn tokens_per_byte(m: &DecodeMetrics) -> f64 {
    m.total_tokens as f64 / m.weight_bytes_loaded as f64
}

fn speedup(cell: &DecodeMetrics, base: &DecodeMetrics, timings: bool) -> f64 {
    if timings && cell.tokens_per_second > 0.0 && base.tokens_per_second > 0.0 {
        cell.tokens_per_second / base.tokens_per_second
    } else {
        tokens_per_byte(cell) / tokens_per_byte(base)
    }
}

fn notes(timings: bool) -> Vec<String> {
    let speedup = if timings {
        "speedup: tokens_per_second relative to the vanilla run of the same prompt and temperature"
    } else {
        "speedup: timings disabled; tokens per linear-weight byte relative to vanilla (bandwidth-bound model)"
    };
    vec![
        "weight_bytes_loaded counts linear-layer weights (attention, MLP, output head) read by the verifier \
         during decoding; KV-cache, activation and embedding traffic and the prefill pass are not counted"
            .into(),
        speedup.into(),
        "micro: counts and times summed over prompts; macro: unweighted mean of per-prompt values".into(),
        "perf: bandwidth fitted to the measured per-step verify time with t_compute = 0 and acceptance (L - 1) / gamma"
            .into(),
    ]
}

/// Runs the grid on already loaded prompts and models.
///
/// Jobs execute on a pool of `opts.jobs` threads, but results are assembled
/// in grid order, so only timing fields depend on the thread count.
pub fn run_matrix_with(
    cfg: &RunConfig,
    prompts: &[Prompt],
    models: &Models,
    opts: &RunOptions,
) -> Result<RunReport> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(BenchError::Config("corpus has no prompts".into()));
    }
    let max_seq = models.full.config.max_seq_len;
    if let Some((i, p)) = prompts
        .iter()
        .enumerate()
        .find(|(_, p)| p.tokens.len() + cfg.max_new_tokens > max_seq)
    {
        return Err(BenchError::Config(format!(
            "prompt {i} has {} tokens; with max_new_tokens {} it exceeds max_seq_len {max_seq}",
            p.tokens.len(),
            cfg.max_new_tokens
        )));
    }

    let cells = cells(cfg);
    let spec_cells: Vec<&CellKey> = cells
        .iter()
        .filter(|c| c.method != Method::Vanilla)
        .collect();
    let baselines: Vec<CellKey> = cfg
        .temperatures
        .iter()
        .map(|&t| CellKey::vanilla(t))
        .collect();
    let jobs: Vec<(&CellKey, usize)> = baselines
        .iter()
        .chain(spec_cells.iter().copied())
        .flat_map(|c| (0..prompts.len()).map(move |i| (c, i)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<DecodeMetrics>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, i)| {
                let m = run_one(
                    models,
                    cell,
                    &prompts[i].tokens,
                    cfg.max_new_tokens,
                    derive_seed(cfg.seed, i),
                )?;
                Ok(if opts.timings { m } else { m.without_timings() })
            })
            .collect()
    });
    let results: Vec<DecodeMetrics> = results.into_iter().collect::<Result<_>>()?;

    let n = prompts.len();
    let baseline_of = |temperature: f32| -> &[DecodeMetrics] {
        let t = cfg
            .temperatures
            .iter()
            .position(|&x| x == temperature)
            .expect("configured temperature");
        &results[t * n..(t + 1) * n]
    };
    let spec_offset = baselines.len() * n;
    let mut next_spec = 0;
    let mut records = Vec::with_capacity(cells.len() * n);
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in &cells {
        let base = baseline_of(cell.temperature);
        let metrics = if cell.method == Method::Vanilla {
            base
        } else {
            let start = spec_offset + next_spec * n;
            next_spec += 1;
            &results[start..start + n]
        };
        let speedups: Vec<f64> = metrics
            .iter()
            .zip(base)
            .map(|(m, b)| speedup(m, b, opts.timings))
            .collect();
        for (i, (m, &s)) in metrics.iter().zip(&speedups).enumerate() {
            records.push(RunRecord {
                cell: cell.clone(),
                prompt_index: i,
                seed: derive_seed(cfg.seed, i),
                metrics: m.clone(),
                speedup: s,
            });
        }
        summaries.push(summarize(
            cell,
            metrics,
            base,
            &speedups,
            models,
            opts.timings,
        ));
    }

    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        timings: opts.timings,
        notes: notes(opts.timings),
        records,
        summaries,
    })
}

fn summarize(
    cell: &CellKey,
    metrics: &[DecodeMetrics],
    base: &[DecodeMetrics],
    speedups: &[f64],
    models: &Models,
    timings: bool,
) -> RunSummary {
    let merge = |ms: &[DecodeMetrics]| ms.iter().skip(1).fold(ms[0].clone(), |acc, m| acc.merge(m));
    let mut micro = merge(metrics);
    let mut micro_base = merge(base);
    if !timings {
        micro = micro.without_timings();
        micro_base = micro_base.without_timings();
    }
    let n = metrics.len() as f64;
    let mean = |f: fn(&DecodeMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    let bytes_per_weight = if cell.method == Method::Quasar {
        1.0
    } else {
        4.0
    };
    let param_count = models.full.config.linear_param_count() as f64;
    let perf = fit_from_metrics(
        &micro,
        param_count,
        bytes_per_weight,
        cell.gamma.unwrap_or(0) as u32,
    )
    .and_then(|p| annotate(&micro, p).ok());
    RunSummary {
        cell: cell.clone(),
        prompts: metrics.len(),
        micro_speedup: speedup(&micro, &micro_base, timings),
        macro_mean_acceptance_length: mean(|m| m.mean_acceptance_length),
        macro_acceptance_rate: mean(|m| m.acceptance_rate),
        macro_speedup: speedups.iter().sum::<f64>() / n,
        bandwidth_bound_speedup: tokens_per_byte(&micro) / tokens_per_byte(&micro_base),
        perf,
        micro,
    }
}

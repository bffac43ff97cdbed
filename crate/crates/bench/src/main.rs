use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qverify_bench::{
    derive_seed, emit_report, ingest_corpus, run_matrix, tokenizer, BenchError, ReportFormat,
    RunConfig, RunOptions, RunReport,
};
use qverify_core::drafter::DrafterConfig;
use qverify_core::model::{
    generate_synthetic_weights, load_weights, save_weights, ForwardModel, ModelConfig, QZR1_MAGIC,
};
use qverify_core::numerics::{set_kernel_mode, KernelMode};
use qverify_core::perfmodel::{speedup_ratio, throughput, verify_latency, PerfParams};
use qverify_core::quant::{load_quantized, quantize_model, save_quantized, QZQ1_MAGIC};
use qverify_core::specdec::{speculative_generate, vanilla_generate, SamplingConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "qverify",
    version,
    about = "Speculative decoding with a W8A8 verifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic weights for a model config (JSON) as QZR1.
    GenWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate activation ranges on a corpus and write a QZQ1 model.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate continuations for every line of a prompt file (JSONL out).
    Generate {
        /// QZR1 or QZQ1 file; the format is detected from its magic bytes.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, value_enum, default_value_t = GenMethod::Ngram)]
        method: GenMethod,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, default_value_t = 5)]
        gamma: usize,
        #[arg(long, default_value_t = 1)]
        k_min: usize,
        #[arg(long, default_value_t = 4)]
        k_max: usize,
        #[arg(long, default_value_t = 128)]
        max_new_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_timings: bool,
    },
    /// Run a benchmark grid and write the report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Worker threads; 1 gives the stable ordering used in tests.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        no_timings: bool,
    },
    /// Evaluate the bandwidth latency/throughput model on a params file.
    PerfModel {
        #[arg(long)]
        params: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenMethod {
    Vanilla,
    Ngram,
    Quasar,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let mode = match std::env::var("QUASAR_DETERMINISTIC").as_deref() {
        Ok("1") => KernelMode::Deterministic,
        _ => KernelMode::Fast,
    };
    set_kernel_mode(mode);
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenWeights { config, seed, out } => {
            let cfg: ModelConfig = read_json(&config)?;
            let w = generate_synthetic_weights(cfg, seed)?;
            save_weights(&w, &out)?;
            eprintln!("wrote {} ({} parameters)", out.display(), cfg.param_count());
        }
        Command::Calibrate {
            model,
            corpus,
            alpha,
            out,
        } => {
            let w = load_weights(&model)?;
            let window = w.config.max_seq_len;
            let sequences: Vec<Vec<u32>> = ingest_corpus(&corpus)?
                .iter()
                .flat_map(|p| {
                    p.tokens
                        .chunks(window)
                        .map(<[u32]>::to_vec)
                        .collect::<Vec<_>>()
                })
                .collect();
            let q = quantize_model(&w, &sequences, alpha)?;
            save_quantized(&q, &out)?;
            eprintln!(
                "wrote {} (calibrated on {} sequences)",
                out.display(),
                sequences.len()
            );
        }
        Command::Generate {
            model,
            prompt_file,
            method,
            temperature,
            gamma,
            k_min,
            k_max,
            max_new_tokens,
            seed,
            no_timings,
        } => {
            let verifier = load_any_model(&model)?;
            if matches!(method, GenMethod::Quasar) && verifier.bytes_per_linear_weight() != 1 {
                return Err("method quasar needs a quantized (QZQ1) model".into());
            }
            let drafter = DrafterConfig::new(k_min, k_max, gamma)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (i, prompt) in ingest_corpus(&prompt_file)?.iter().enumerate() {
                let sampling = SamplingConfig {
                    temperature,
                    seed: derive_seed(seed, i),
                };
                let (tokens, metrics) = match method {
                    GenMethod::Vanilla => vanilla_generate(
                        verifier.as_ref(),
                        &prompt.tokens,
                        max_new_tokens,
                        &sampling,
                    )?,
                    GenMethod::Ngram | GenMethod::Quasar => speculative_generate(
                        verifier.as_ref(),
                        &drafter,
                        &prompt.tokens,
                        max_new_tokens,
                        &sampling,
                    )?,
                };
                let metrics = if no_timings {
                    metrics.without_timings()
                } else {
                    metrics
                };
                let line = serde_json::json!({
                    "prompt_index": i,
                    "seed": sampling.seed,
                    "text": tokenizer::decode(&tokens),
                    "tokens": tokens,
                    "metrics": metrics,
                });
                writeln!(out, "{line}")?;
            }
        }
        Command::Bench {
            config,
            out,
            format,
            jobs,
            no_timings,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_matrix(
                &cfg,
                &RunOptions {
                    jobs,
                    timings: !no_timings,
                },
            )?;
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            };
            emit_report(&report, format, &out)?;
            print_summary(&report);
        }
        Command::PerfModel { params } => {
            let spec: PerfSpec = read_json(&params)?;
            let (candidate, baseline) = match spec {
                PerfSpec::Pair {
                    candidate,
                    baseline,
                } => (candidate, baseline),
                PerfSpec::Single(p) => (
                    p,
                    PerfParams::vanilla(
                        p.param_count,
                        p.bytes_per_weight,
                        p.bandwidth_bytes_per_s,
                        p.t_compute_s,
                    ),
                ),
            };
            let result = PerfResult {
                t_verify_s: verify_latency(&candidate)?,
                throughput_tokens_per_s: throughput(&candidate)?,
                baseline_t_verify_s: verify_latency(&baseline)?,
                baseline_throughput_tokens_per_s: throughput(&baseline)?,
                speedup: speedup_ratio(&candidate, &baseline)?,
            };
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
    }
    Ok(())
}

/// A bare params object is compared against vanilla decoding on the same
/// hardware and weight format.
#[derive(Deserialize)]
#[serde(untagged)]
enum PerfSpec {
    Pair {
        candidate: PerfParams,
        baseline: PerfParams,
    },
    Single(PerfParams),
}

#[derive(Serialize)]
struct PerfResult {
    t_verify_s: f64,
    throughput_tokens_per_s: f64,
    baseline_t_verify_s: f64,
    baseline_throughput_tokens_per_s: f64,
    speedup: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let raw = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(
        serde_json::from_str(&raw).map_err(|source| BenchError::Json {
            path: path.to_path_buf(),
            source,
        })?,
    )
}

fn load_any_model(path: &Path) -> CliResult<Box<dyn ForwardModel>> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if magic == QZR1_MAGIC {
        Ok(Box::new(load_weights(path)?))
    } else if magic == QZQ1_MAGIC {
        Ok(Box::new(load_quantized(path)?))
    } else {
        Err(format!("{}: not a QZR1 or QZQ1 file", path.display()).into())
    }
}

fn print_summary(report: &RunReport) {
    eprintln!(
        "{:<22} {:>5} {:>5} {:>7} {:>8} {:>8} {:>9} {:>9}",
        "method", "T", "gamma", "K", "L", "alpha", "speedup", "macro"
    );
    for s in &report.summaries {
        let k = match (s.cell.k_min, s.cell.k_max) {
            (Some(a), Some(b)) => format!("{a}-{b}"),
            _ => "-".into(),
        };
        eprintln!(
            "{:<22} {:>5} {:>5} {:>7} {:>8.3} {:>8.3} {:>9.3} {:>9.3}",
            s.cell.label(),
            s.cell.temperature,
            s.cell.gamma.map_or("-".into(), |g| g.to_string()),
            k,
            s.micro.mean_acceptance_length,
            s.micro.acceptance_rate,
            s.micro_speedup,
            s.macro_speedup
        );
    }
}

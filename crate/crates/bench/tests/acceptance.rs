//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! failure status if any criterion fails.
//!
//!     cargo test -p qverify-bench --test acceptance

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use qverify_bench::{
    emit_report, ingest_corpus, run_matrix_with, CellKey, Method, Models, Prompt, ReportFormat,
    RunConfig, RunOptions, RunReport, CSV_HEADER,
};
use qverify_core::drafter::DrafterConfig;
use qverify_core::model::{
    generate_synthetic_weights, ForwardModel, LinearSlot, ModelConfig, ModelWeights,
};
use qverify_core::numerics::{Distribution, MatrixF};
use qverify_core::perfmodel::{speedup_ratio, verify_latency, PerfParams};
use qverify_core::quant::{
    quantize_activations, quantize_model, smoothing_factor, QuantizedLinear, QuantizedModel,
};
use qverify_core::specdec::{
    sample_verification, speculative_generate, step_output_distribution, vanilla_generate,
    SamplingConfig, SamplingRng,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: qverify_bench::tokenizer::VOCAB_SIZE,
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_ff: 256,
        max_seq_len: 256,
    }
}

/// The tiny model shared by the decoding criteria, and its W8A8 version
/// calibrated on the repetitive corpus.
struct Fixture {
    full: ModelWeights,
    quantized: QuantizedModel,
    repetitive: Vec<Prompt>,
    distinct: Vec<Prompt>,
}

impl Fixture {
    fn new() -> Self {
        let repetitive = ingest_corpus(&data("repetitive.txt")).expect("repetitive corpus");
        let distinct = ingest_corpus(&data("distinct.txt")).expect("distinct corpus");
        let full = generate_synthetic_weights(model_config(), 1).unwrap();
        let calib: Vec<&[u32]> = repetitive.iter().map(|p| p.tokens.as_slice()).collect();
        let quantized = quantize_model(&full, &calib, 0.5).unwrap();
        Self {
            full,
            quantized,
            repetitive,
            distinct,
        }
    }

    fn models(&self, retain: &[f64]) -> Models {
        Models::new(self.full.clone(), Some(self.quantized.clone()), retain).unwrap()
    }
}

fn grid_config(
    methods: Vec<Method>,
    gammas: Vec<usize>,
    k_ranges: Vec<(usize, usize)>,
    retain: Vec<f64>,
) -> RunConfig {
    RunConfig {
        methods,
        weights_path: "m.qzr1".into(),
        quantized_weights_path: Some("m.qzq1".into()),
        corpus_path: data("repetitive.txt"),
        temperatures: vec![0.0],
        gammas,
        k_ranges,
        retain_fractions: retain,
        max_new_tokens: 64,
        seed: 7,
        max_prompts: None,
    }
}

fn cell_l(report: &RunReport, pred: impl Fn(&CellKey) -> bool) -> Result<f64, String> {
    report
        .summaries
        .iter()
        .find(|s| pred(&s.cell))
        .map(|s| s.micro.mean_acceptance_length)
        .ok_or_else(|| "cell missing from report".to_string())
}

// ---- 1 -------------------------------------------------------------------

fn random_dist(rng: &mut ChaCha8Rng, vocab: usize) -> Distribution {
    if rng.random_bool(0.25) {
        return Distribution::one_hot(rng.random_range(0..vocab), vocab);
    }
    loop {
        let w: Vec<f64> = (0..vocab)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    rng.random_range(0.001..1.0)
                }
            })
            .collect();
        if let Some(d) = Distribution::from_weights(w) {
            return d;
        }
    }
}

/// Position-wise marginals of the step output, with each emitted prefix
/// completed by the target distributions of the remaining positions.
fn completed_marginals(out: &BTreeMap<Vec<u32>, f64>, p: &[Distribution]) -> Vec<Vec<f64>> {
    let mut marginals: Vec<Vec<f64>> = p.iter().map(|d| vec![0.0; d.len()]).collect();
    for (seq, &mass) in out {
        for (i, &t) in seq.iter().enumerate() {
            marginals[i][t as usize] += mass;
        }
        for i in seq.len()..p.len() {
            for (m, pt) in marginals[i].iter_mut().zip(p[i].probs()) {
                *m += mass * pt;
            }
        }
    }
    marginals
}

fn losslessness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let vocab = rng.random_range(1..=8);
        let gamma = rng.random_range(0..=3);
        let p: Vec<Distribution> = (0..=gamma).map(|_| random_dist(&mut rng, vocab)).collect();
        let q: Vec<Distribution> = (0..gamma).map(|_| random_dist(&mut rng, vocab)).collect();
        let out = step_output_distribution(&p, &q).map_err(|e| format!("case {case}: {e}"))?;
        for (m, d) in completed_marginals(&out, &p).iter().zip(&p) {
            for (a, b) in m.iter().zip(d.probs()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst < 1e-12 {
        Ok(format!("1000 cases, max deviation {worst:.2e}"))
    } else {
        Err(format!("max deviation {worst:.2e} >= 1e-12"))
    }
}

// ---- 2 -------------------------------------------------------------------

fn greedy_equivalence(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let drafter = DrafterConfig::new(1, 4, 5).unwrap();
    let greedy = SamplingConfig::greedy(0);
    let prompts: Vec<&Prompt> = fx.repetitive.iter().chain(&fx.distinct).collect();
    if prompts.len() < 100 {
        return Err(format!("only {} prompts", prompts.len()));
    }
    for (name, verifier) in [
        ("f32", &fx.full as &dyn ForwardModel),
        ("w8a8", &fx.quantized),
    ] {
        for (i, p) in prompts.iter().enumerate() {
            let (spec, m) = speculative_generate(verifier, &drafter, &p.tokens, 64, &greedy)
                .map_err(|e| e.to_string())?;
            let (vanilla, _) =
                vanilla_generate(verifier, &p.tokens, 64, &greedy).map_err(|e| e.to_string())?;
            if spec != vanilla || m.total_tokens != 64 {
                return Err(format!("{name} verifier diverges on prompt {i}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs < 60.0 {
        Ok(format!(
            "{} prompts x 64 tokens on both verifiers in {secs:.1}s",
            prompts.len()
        ))
    } else {
        Err(format!("outputs equal but took {secs:.1}s"))
    }
}

// ---- 3 -------------------------------------------------------------------

fn monte_carlo() -> Outcome {
    let d = |v: &[f64]| Distribution::from_weights(v.to_vec()).unwrap();
    let p = vec![
        d(&[0.1, 0.4, 0.3, 0.2]),
        d(&[0.25, 0.25, 0.4, 0.1]),
        d(&[0.6, 0.1, 0.1, 0.2]),
    ];
    let q = vec![d(&[0.5, 0.2, 0.1, 0.2]), d(&[0.1, 0.1, 0.7, 0.1])];
    let exact = step_output_distribution(&p, &q).map_err(|e| e.to_string())?;
    let n = 100_000u64;
    let mut rng = SamplingRng::new(2024);
    let mut counts: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    for _ in 0..n {
        let o = sample_verification(&p, &q, &mut rng).map_err(|e| e.to_string())?;
        *counts.entry(o.emitted).or_insert(0) += 1;
    }
    if let Some(k) = counts.keys().find(|k| !exact.contains_key(*k)) {
        return Err(format!("sampled {k:?}, which has zero exact probability"));
    }
    let mut worst = 0.0f64;
    for (seq, &prob) in &exact {
        let c = counts.get(seq).copied().unwrap_or(0) as f64;
        let mean = n as f64 * prob;
        let sigma = (n as f64 * prob * (1.0 - prob)).sqrt();
        let z = if sigma > 0.0 {
            (c - mean).abs() / sigma
        } else {
            (c - mean).abs()
        };
        worst = worst.max(z);
    }
    if worst <= 3.0 {
        Ok(format!("{} outcomes, worst |z| = {worst:.2}", exact.len()))
    } else {
        Err(format!("worst |z| = {worst:.2} > 3"))
    }
}

// ---- 4 -------------------------------------------------------------------

struct Layer {
    w: MatrixF,
    x: MatrixF,
    s: Vec<f32>,
}

fn random_layer(rng: &mut ChaCha8Rng) -> Layer {
    let d_in = rng.random_range(1..48);
    let d_out = rng.random_range(1..24);
    let tokens = rng.random_range(1..12);
    let w: Vec<f32> = (0..d_out * d_in)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let outlier: Vec<f32> = (0..d_in)
        .map(|_| {
            if rng.random_bool(0.1) {
                rng.random_range(10.0..100.0)
            } else {
                1.0
            }
        })
        .collect();
    let x: Vec<f32> = (0..tokens * d_in)
        .map(|i| rng.random_range(-1.0f32..1.0) * outlier[i % d_in])
        .collect();
    let w = MatrixF::from_vec(d_out, d_in, w).unwrap();
    let x = MatrixF::from_vec(tokens, d_in, x).unwrap();
    let alpha = rng.random_range(0.0..=1.0);
    let s = x
        .col_abs_max()
        .iter()
        .zip(w.col_abs_max())
        .map(|(&a, m)| smoothing_factor(a, m, alpha))
        .collect();
    Layer { w, x, s }
}

fn quantization_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_identity = 0.0f64;
    for _ in 0..100 {
        let Layer { w, x, s } = random_layer(&mut rng);
        for t in 0..x.rows() {
            for o in 0..w.rows() {
                let (mut plain, mut smoothed) = (0.0f64, 0.0f64);
                for j in 0..w.cols() {
                    let (wv, xv, sv) = (w.get(o, j) as f64, x.get(t, j) as f64, s[j] as f64);
                    plain += wv * xv;
                    smoothed += (wv / sv) * (xv * sv);
                }
                worst_identity = worst_identity.max((plain - smoothed).abs());
            }
        }
    }
    if worst_identity >= 1e-12 {
        return Err(format!("smoothing identity off by {worst_identity:.2e}"));
    }

    let mut worst_ratio = 0.0f64;
    for layer in 0..1000 {
        let Layer { w, x, s } = random_layer(&mut rng);
        let q = QuantizedLinear::from_weight(&w, &s).map_err(|e| e.to_string())?;
        let y_q = q
            .forward(&x, &Default::default())
            .map_err(|e| e.to_string())?;
        let (_, delta_x) = quantize_activations(&x, &s).map_err(|e| e.to_string())?;
        for k in 0..x.rows() {
            let xs: Vec<f64> = (0..w.cols()).map(|j| (x.get(k, j) * s[j]) as f64).collect();
            for i in 0..w.rows() {
                let ws: Vec<f64> = (0..w.cols()).map(|j| (w.get(i, j) / s[j]) as f64).collect();
                let y: f64 = ws.iter().zip(&xs).map(|(a, b)| a * b).sum();
                let dw = q.delta_w[i].get() as f64;
                let dx = delta_x[k].get() as f64;
                let bound = dw / 2.0 * xs.iter().map(|v| v.abs()).sum::<f64>()
                    + dx / 2.0 * ws.iter().map(|v| v.abs()).sum::<f64>()
                    + w.cols() as f64 * dw * dx / 4.0;
                let err = (y_q.get(k, i) as f64 - y).abs();
                if err > bound {
                    return Err(format!(
                        "layer {layer}: error {err:.3e} exceeds bound {bound:.3e}"
                    ));
                }
                worst_ratio = worst_ratio.max(err / bound);
            }
        }
    }
    Ok(format!(
        "identity max deviation {worst_identity:.2e} over 100 layers; int8 error <= bound on 1000 layers (worst {:.0}% of bound)",
        worst_ratio * 100.0
    ))
}

// ---- 5 -------------------------------------------------------------------

fn byte_traffic(fx: &Fixture) -> Outcome {
    for slot in LinearSlot::all(fx.full.config.n_layers) {
        let f32_bytes = fx.full.linear_weight(slot).data().len() * 4;
        let i8_bytes = fx.quantized.linear(slot).weights_i8.data().len();
        if 4 * i8_bytes != f32_bytes {
            return Err(format!(
                "{slot:?}: {i8_bytes} int8 bytes vs {f32_bytes} f32 bytes"
            ));
        }
    }
    let tokens = &fx.repetitive[0].tokens;
    let mut per_pass = [0u64; 2];
    for (i, m) in [&fx.full as &dyn ForwardModel, &fx.quantized]
        .into_iter()
        .enumerate()
    {
        let mut cache = m.new_cache();
        m.forward(&tokens[..tokens.len() - 1], &mut cache)
            .map_err(|e| e.to_string())?;
        let before = cache.traffic().snapshot();
        m.forward(&tokens[tokens.len() - 1..], &mut cache)
            .map_err(|e| e.to_string())?;
        per_pass[i] = cache.traffic().snapshot().since(&before).total();
    }
    if per_pass[0] != 4 * per_pass[1] {
        return Err(format!(
            "per pass: f32 {} bytes, w8a8 {} bytes",
            per_pass[0], per_pass[1]
        ));
    }

    let cfg = grid_config(
        vec![Method::NgramBf, Method::Quasar],
        vec![5],
        vec![(1, 4)],
        vec![],
    );
    let prompts = &fx.repetitive[..8];
    let report = run_matrix_with(
        &cfg,
        prompts,
        &fx.models(&[]),
        &RunOptions {
            jobs: 1,
            timings: false,
        },
    )
    .map_err(|e| e.to_string())?;
    for (a, b) in report
        .records
        .iter()
        .filter(|r| r.cell.method == Method::NgramBf)
        .zip(
            report
                .records
                .iter()
                .filter(|r| r.cell.method == Method::Quasar),
        )
    {
        if a.metrics.bytes_per_step() != 4.0 * b.metrics.bytes_per_step() {
            return Err(format!(
                "prompt {}: bytes per step differ from 4:1",
                a.prompt_index
            ));
        }
    }

    let p = PerfParams {
        param_count: fx.full.config.linear_param_count() as f64,
        bytes_per_weight: 2.0,
        bandwidth_bytes_per_s: 50e9,
        t_compute_s: 0.0,
        t_draft_s: 0.0,
        gamma: 0,
        acceptance_rate: 0.0,
    };
    let half = verify_latency(&PerfParams {
        bytes_per_weight: 1.0,
        ..p
    })
    .map_err(|e| e.to_string())?
        / verify_latency(&p).map_err(|e| e.to_string())?;
    let identity = speedup_ratio(&p, &p).map_err(|e| e.to_string())?;
    if half != 0.5 || identity != 1.0 {
        return Err(format!("latency ratio {half}, identity speedup {identity}"));
    }
    Ok(format!(
        "{} B vs {} B per pass, 4:1 per slot and per decode step; model latency ratio {half}",
        per_pass[0], per_pass[1]
    ))
}

// ---- 6 and 8 -------------------------------------------------------------

const GRID_GAMMAS: [usize; 7] = [1, 2, 3, 4, 5, 6, 8];
const GRID_K: [(usize, usize); 4] = [(1, 4), (1, 2), (2, 4), (3, 4)];

fn sensitivity_grid(fx: &Fixture) -> Result<RunReport, String> {
    let cfg = grid_config(
        vec![Method::Vanilla, Method::NgramBf, Method::Quasar],
        GRID_GAMMAS.to_vec(),
        GRID_K.to_vec(),
        vec![],
    );
    run_matrix_with(
        &cfg,
        &fx.repetitive,
        &fx.models(&[]),
        &RunOptions {
            jobs: 1,
            timings: true,
        },
    )
    .map_err(|e| e.to_string())
}

fn acceptance_length(grid: &RunReport) -> Outcome {
    let at = |m: Method| {
        cell_l(grid, |c| {
            c.method == m && c.gamma == Some(5) && c.k_min == Some(1) && c.k_max == Some(4)
        })
    };
    let ngram = at(Method::NgramBf)?;
    let quasar = at(Method::Quasar)?;
    let msg = format!(
        "L ngram-bf {ngram:.3}, quasar {quasar:.3}, |diff| {:.3}",
        (quasar - ngram).abs()
    );
    if ngram > 1.2 && quasar > 1.2 && (quasar - ngram).abs() < 0.15 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn grid_shape(grid: &RunReport) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv = dir.path().join("grid.csv");
    emit_report(grid, ReportFormat::Csv, &csv).map_err(|e| e.to_string())?;
    let rows = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?;
    if rows.lines().next() != Some(CSV_HEADER) {
        return Err("CSV header mismatch".into());
    }
    let mut wall_clock = 0;
    for method in [Method::NgramBf, Method::Quasar] {
        for (lo, hi) in GRID_K {
            let cells: Vec<_> = GRID_GAMMAS
                .iter()
                .map(|&g| {
                    grid.summaries
                        .iter()
                        .find(|s| {
                            s.cell.method == method
                                && s.cell.gamma == Some(g)
                                && s.cell.k_min == Some(lo)
                                && s.cell.k_max == Some(hi)
                        })
                        .ok_or_else(|| format!("{method} K=({lo},{hi}) gamma={g} missing"))
                })
                .collect::<Result<_, _>>()?;
            for pair in cells.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                if b.micro.mean_acceptance_length < a.micro.mean_acceptance_length {
                    return Err(format!(
                        "{method} K=({lo},{hi}): L drops from {:.3} at gamma={:?} to {:.3} at gamma={:?}",
                        a.micro.mean_acceptance_length, a.cell.gamma, b.micro.mean_acceptance_length, b.cell.gamma
                    ));
                }
                if b.micro.tokens_per_second < a.micro.tokens_per_second {
                    wall_clock += 1;
                }
            }
        }
    }
    Ok(format!(
        "{} cells, L non-decreasing in gamma for every K; {} wall-clock dips (not asserted)",
        grid.summaries.len(),
        wall_clock
    ))
}

// ---- 7 -------------------------------------------------------------------

fn pruning_trend(fx: &Fixture) -> Outcome {
    let retain = vec![1.0, 0.75, 0.5];
    let cfg = grid_config(
        vec![Method::PrunedDrafter],
        vec![5],
        vec![(1, 4)],
        retain.clone(),
    );
    let report = run_matrix_with(
        &cfg,
        &fx.repetitive,
        &fx.models(&retain),
        &RunOptions {
            jobs: 1,
            timings: false,
        },
    )
    .map_err(|e| e.to_string())?;
    let ls: Vec<f64> = retain
        .iter()
        .map(|&r| cell_l(&report, |c| c.retain_fraction == Some(r)))
        .collect::<Result<_, _>>()?;
    let msg = format!(
        "L at retain 1.0/0.75/0.5: {:.3}/{:.3}/{:.3}",
        ls[0], ls[1], ls[2]
    );
    if ls.windows(2).all(|w| w[1] <= w[0]) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- 9 -------------------------------------------------------------------

fn qverify(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qverify"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "qverify {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let corpus = data("repetitive.txt");
    let corpus = corpus.to_str().unwrap();
    std::fs::write(
        d.join("model.json"),
        r#"{"vocab_size": 258, "d_model": 32, "n_layers": 2, "n_heads": 4, "d_ff": 64, "max_seq_len": 160}"#,
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        d.join("bench.json"),
        format!(
            r#"{{"methods": ["vanilla", "ngram-bf", "quasar", "pruned-drafter"], "weights_path": "m.qzr1",
                "quantized_weights_path": "m.qzq1", "corpus_path": "{corpus}", "temperatures": [0.0, 0.8],
                "gammas": [2, 5], "retain_fractions": [0.5], "max_new_tokens": 24, "seed": 11, "max_prompts": 10}}"#
        ),
    )
    .map_err(|e| e.to_string())?;
    qverify(
        &[
            "gen-weights",
            "--config",
            "model.json",
            "--seed",
            "3",
            "--out",
            "m.qzr1",
        ],
        d,
    )?;
    qverify(
        &[
            "calibrate",
            "--model",
            "m.qzr1",
            "--corpus",
            corpus,
            "--out",
            "m.qzq1",
        ],
        d,
    )?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        for fmt in ["json", "csv"] {
            let out = format!("r{run}.{fmt}");
            qverify(
                &[
                    "bench",
                    "--config",
                    "bench.json",
                    "--out",
                    &out,
                    "--format",
                    fmt,
                    "--jobs",
                    "1",
                    "--no-timings",
                ],
                d,
            )?;
            outputs.push(std::fs::read(d.join(&out)).map_err(|e| e.to_string())?);
        }
    }
    if outputs[0] == outputs[2] && outputs[1] == outputs[3] {
        Ok(format!(
            "JSON ({} B) and CSV ({} B) identical across two runs",
            outputs[0].len(),
            outputs[1].len()
        ))
    } else {
        Err("reports differ between runs".into())
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| match outcome {
        Ok(msg) => println!("PASS criterion {n} ({name}): {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL criterion {n} ({name}): {msg}");
        }
    };

    report(1, "losslessness", losslessness());
    let fx = Fixture::new();
    report(2, "greedy equivalence", greedy_equivalence(&fx));
    report(3, "monte carlo", monte_carlo());
    report(
        4,
        "smoothing identity and int8 bound",
        quantization_bounds(),
    );
    report(5, "byte traffic", byte_traffic(&fx));
    match sensitivity_grid(&fx) {
        Ok(grid) => {
            report(6, "acceptance length", acceptance_length(&grid));
            report(7, "pruning trend", pruning_trend(&fx));
            report(8, "sensitivity grid", grid_shape(&grid));
        }
        Err(e) => {
            report(6, "acceptance length", Err(e.clone()));
            report(7, "pruning trend", pruning_trend(&fx));
            report(8, "sensitivity grid", Err(e));
        }
    }
    report(9, "determinism", determinism());

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

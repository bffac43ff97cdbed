//! Memory-bandwidth model of verification latency and speculative throughput.
//!
//! `T_verify = M · bytes / BW + t_compute` counts weight bytes only, with no
//! KV-cache or activation traffic, and is independent of `γ` because the
//! drafts are verified in one pass. Throughput is
//! `S = (γ·α + 1) / (t_draft + T_verify)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specdec::DecodeMetrics;

#[derive(Debug, Error, PartialEq)]
pub enum PerfError {
    #[error("invalid parameter {name}: {value}")]
    Param { name: &'static str, value: f64 },
    #[error("total step latency is zero")]
    ZeroLatency,
}

pub type Result<T> = std::result::Result<T, PerfError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    pub param_count: f64,
    pub bytes_per_weight: f64,
    pub bandwidth_bytes_per_s: f64,
    pub t_compute_s: f64,
    pub t_draft_s: f64,
    pub gamma: u32,
    pub acceptance_rate: f64,
}

impl PerfParams {
    /// Plain autoregressive decoding: no drafts, no drafting cost.
    pub fn vanilla(
        param_count: f64,
        bytes_per_weight: f64,
        bandwidth_bytes_per_s: f64,
        t_compute_s: f64,
    ) -> Self {
        Self {
            param_count,
            bytes_per_weight,
            bandwidth_bytes_per_s,
            t_compute_s,
            t_draft_s: 0.0,
            gamma: 0,
            acceptance_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("param_count", self.param_count),
            ("bytes_per_weight", self.bytes_per_weight),
            ("bandwidth_bytes_per_s", self.bandwidth_bytes_per_s),
        ];
        for (name, value) in positive {
            // Infinite bandwidth is allowed as the compute-only limit.
            if value.is_nan() || value <= 0.0 || (value.is_infinite() && name != "bandwidth_bytes_per_s") {
                return Err(PerfError::Param { name, value });
            }
        }
        for (name, value) in [
            ("t_compute_s", self.t_compute_s),
            ("t_draft_s", self.t_draft_s),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(PerfError::Param { name, value });
            }
        }
        if !(0.0..=1.0).contains(&self.acceptance_rate) {
            return Err(PerfError::Param {
                name: "acceptance_rate",
                value: self.acceptance_rate,
            });
        }
        Ok(())
    }
}

pub fn verify_latency(p: &PerfParams) -> Result<f64> {
    p.validate()?;
    Ok(p.param_count * p.bytes_per_weight / p.bandwidth_bytes_per_s + p.t_compute_s)
}

/// Tokens per second, `(γ·α + 1) / (t_draft + T_verify)`.
pub fn throughput(p: &PerfParams) -> Result<f64> {
    let latency = p.t_draft_s + verify_latency(p)?;
    if latency == 0.0 {
        return Err(PerfError::ZeroLatency);
    }
    Ok((p.gamma as f64 * p.acceptance_rate + 1.0) / latency)
}

pub fn speedup_ratio(candidate: &PerfParams, baseline: &PerfParams) -> Result<f64> {
    Ok(throughput(candidate)? / throughput(baseline)?)
}

/// Model prediction next to what a run measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfAnnotation {
    pub params: PerfParams,
    pub predicted_verify_latency_s: f64,
    pub predicted_tokens_per_second: f64,
    pub measured_tokens_per_second: f64,
}

/// Fits per-step latencies from a run's timings.
///
/// The bandwidth is whatever makes the memory term account for the measured
/// verify time, so the fitted `t_compute_s` is zero. The acceptance rate is
/// the effective per-slot value `(L − 1) / γ`, since proposals shorter than
/// `γ` make the raw accepted/proposed ratio overstate the gain. Returns
/// `None` for a run without steps or without timings.
pub fn fit_from_metrics(
    m: &DecodeMetrics,
    param_count: f64,
    bytes_per_weight: f64,
    gamma: u32,
) -> Option<PerfParams> {
    if m.steps == 0 || m.verify_time_s <= 0.0 {
        return None;
    }
    let steps = m.steps as f64;
    let t_verify = (m.verify_time_s + m.other_time_s) / steps;
    let l = m.total_tokens as f64 / steps;
    let acceptance_rate = if gamma == 0 {
        0.0
    } else {
        ((l - 1.0) / gamma as f64).clamp(0.0, 1.0)
    };
    let p = PerfParams {
        param_count,
        bytes_per_weight,
        bandwidth_bytes_per_s: param_count * bytes_per_weight / t_verify,
        t_compute_s: 0.0,
        t_draft_s: m.draft_time_s / steps,
        gamma,
        acceptance_rate,
    };
    p.validate().ok().map(|_| p)
}

pub fn annotate(m: &DecodeMetrics, params: PerfParams) -> Result<PerfAnnotation> {
    Ok(PerfAnnotation {
        params,
        predicted_verify_latency_s: verify_latency(&params)?,
        predicted_tokens_per_second: throughput(&params)?,
        measured_tokens_per_second: m.tokens_per_second,
    })
}

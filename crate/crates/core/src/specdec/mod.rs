//! Speculative decoding: draft, verify in one parallel pass, accept by
//! rejection sampling, resample from the residual on rejection, and emit a
//! bonus token when every draft survives.
//!
//! Acceptance of draft `x̃_i` uses `r < min(1, p_i(x̃_i) / q_i(x̃_i))` with a
//! fresh uniform `r` per draft. The first rejection emits a corrective token
//! from `norm(max(0, p_i − q_i))` and ends the step. At temperature zero the
//! rule collapses to "accept iff the draft is the argmax" and the corrective
//! or bonus token is the argmax; no randomness is consumed.

mod engine;
mod oracle;
mod rng;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drafter::{DraftProposal, DrafterError};
use crate::model::ModelError;
use crate::numerics::{Distribution, NumericsError};

pub use engine::{
    speculative_generate, speculative_generate_with, vanilla_generate, DecodeMetrics, DraftSource,
    GenerationTrace, ModelDraftSource, NgramDraftSource,
};
pub use oracle::{
    sample_verification, step_output_distribution, MAX_ORACLE_GAMMA, MAX_ORACLE_VOCAB,
};
pub use rng::{FixedUniforms, SamplingRng, UniformSource};

#[derive(Debug, Error)]
pub enum SpecDecError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("residual distribution has no mass (p == q)")]
    DegenerateResidual,
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Drafter(#[from] DrafterError),
}

pub type Result<T> = std::result::Result<T, SpecDecError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f32,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn greedy(seed: u64) -> Self {
        Self {
            temperature: 0.0,
            seed,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SpecDecError::Input(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationOutcome {
    pub n_accepted: usize,
    /// Accepted draft prefix followed by the corrective or bonus token.
    pub emitted: Vec<u32>,
    /// Index of the first rejected draft, if any.
    pub rejection_index: Option<usize>,
    pub corrective_token: Option<u32>,
    pub bonus_token: Option<u32>,
}

impl VerificationOutcome {
    fn rejected(mut accepted: Vec<u32>, index: usize, token: u32) -> Self {
        let n_accepted = accepted.len();
        accepted.push(token);
        Self {
            n_accepted,
            emitted: accepted,
            rejection_index: Some(index),
            corrective_token: Some(token),
            bonus_token: None,
        }
    }

    fn completed(mut accepted: Vec<u32>, bonus: u32) -> Self {
        let n_accepted = accepted.len();
        accepted.push(bonus);
        Self {
            n_accepted,
            emitted: accepted,
            rejection_index: None,
            corrective_token: None,
            bonus_token: Some(bonus),
        }
    }
}

/// `norm(max(0, p − q))`.
pub fn residual_distribution(p: &Distribution, q: &Distribution) -> Result<Distribution> {
    if p.len() != q.len() {
        return Err(SpecDecError::Shape(format!(
            "p has {} entries, q has {}",
            p.len(),
            q.len()
        )));
    }
    let weights = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    Distribution::from_weights(weights).ok_or(SpecDecError::DegenerateResidual)
}

/// Verifies a prompt-lookup proposal, whose draft distribution is one-hot.
///
/// `p_list` must hold one distribution per drafted token plus one for the
/// position after the last draft, already tempered.
pub fn verify_and_accept(
    p_list: &[Distribution],
    proposal: &DraftProposal,
    sampling: &SamplingConfig,
    rng: &mut impl UniformSource,
) -> Result<VerificationOutcome> {
    verify_drafts(p_list, &proposal.tokens, None, sampling.is_greedy(), rng)
}

/// Verification with explicit draft distributions; `None` means one-hot
/// at each drafted token.
pub fn verify_drafts(
    p_list: &[Distribution],
    drafts: &[u32],
    q_list: Option<&[Distribution]>,
    greedy: bool,
    rng: &mut impl UniformSource,
) -> Result<VerificationOutcome> {
    if p_list.len() != drafts.len() + 1 {
        return Err(SpecDecError::Shape(format!(
            "{} target distributions for {} drafts",
            p_list.len(),
            drafts.len()
        )));
    }
    if let Some(q) = q_list {
        if q.len() != drafts.len() {
            return Err(SpecDecError::Shape(format!(
                "{} draft distributions for {} drafts",
                q.len(),
                drafts.len()
            )));
        }
    }
    let vocab = p_list[0].len();
    if p_list.iter().any(|p| p.len() != vocab)
        || q_list.is_some_and(|q| q.iter().any(|d| d.len() != vocab))
    {
        return Err(SpecDecError::Shape(
            "distributions over different vocabularies".into(),
        ));
    }
    if let Some(&t) = drafts.iter().find(|&&t| t as usize >= vocab) {
        return Err(SpecDecError::Shape(format!(
            "draft token {t} outside vocabulary of {vocab}"
        )));
    }

    let mut accepted = Vec::with_capacity(drafts.len());
    for (i, (&draft, p)) in drafts.iter().zip(p_list).enumerate() {
        let x = draft as usize;
        if greedy {
            let best = p.argmax();
            if best == x {
                accepted.push(draft);
                continue;
            }
            return Ok(VerificationOutcome::rejected(accepted, i, best as u32));
        }
        let q_x = q_list.map_or(1.0, |q| q[i].prob(x));
        let ratio = if q_x > 0.0 {
            (p.prob(x) / q_x).min(1.0)
        } else {
            0.0
        };
        let r = rng.next_uniform();
        if r < ratio {
            accepted.push(draft);
            continue;
        }
        let residual = match q_list {
            Some(q) => residual_distribution(p, &q[i])?,
            None => residual_distribution(p, &Distribution::one_hot(x, vocab))?,
        };
        let token = residual.sample_with(rng.next_uniform()) as u32;
        return Ok(VerificationOutcome::rejected(accepted, i, token));
    }

    let last = &p_list[drafts.len()];
    let bonus = if greedy {
        last.argmax()
    } else {
        last.sample_with(rng.next_uniform())
    };
    Ok(VerificationOutcome::completed(accepted, bonus as u32))
}

//! Prompt-lookup drafting.
//!
//! For `k` from `k_max` down to `k_min`, the last `k` tokens of the context
//! are searched for earlier in the context. The most recent occurrence that
//! ends before the suffix begins wins, and up to `γ` tokens that followed it
//! become the draft. The implied draft distribution is a point mass on each
//! drafted token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Distribution;

#[derive(Debug, Error, PartialEq)]
pub enum DrafterError {
    #[error("invalid drafter config: {0}")]
    Config(String),
    #[error("draft position {position} out of range for {len} drafted tokens")]
    Position { position: usize, len: usize },
    #[error("draft token {token} out of range for vocabulary of {vocab}")]
    Vocab { token: u32, vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrafterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub gamma: usize,
}

impl Default for DrafterConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 4,
            gamma: 5,
        }
    }
}

impl DrafterConfig {
    pub fn new(k_min: usize, k_max: usize, gamma: usize) -> Result<Self, DrafterError> {
        let cfg = Self {
            k_min,
            k_max,
            gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DrafterError> {
        if self.k_min == 0 || self.gamma == 0 {
            return Err(DrafterError::Config(
                "k_min and gamma must be at least 1".into(),
            ));
        }
        if self.k_min > self.k_max {
            return Err(DrafterError::Config(format!(
                "k_min {} exceeds k_max {}",
                self.k_min, self.k_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DraftProposal {
    pub tokens: Vec<u32>,
    /// Length of the matched suffix; 0 when nothing matched.
    pub match_len: usize,
    /// Start of the matched occurrence in the context.
    pub match_pos: usize,
}

impl DraftProposal {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn propose(context: &[u32], cfg: &DrafterConfig) -> DraftProposal {
    let n = context.len();
    if cfg.gamma == 0 || cfg.k_min == 0 {
        return DraftProposal::empty();
    }
    for k in (cfg.k_min..=cfg.k_max).rev() {
        // The occurrence must end before the suffix starts: p + k <= n - k.
        if 2 * k > n {
            continue;
        }
        let suffix_start = n - k;
        let suffix = &context[suffix_start..];
        let found = (0..=suffix_start - k)
            .rev()
            .find(|&p| &context[p..p + k] == suffix);
        if let Some(p) = found {
            let from = p + k;
            let to = (from + cfg.gamma).min(n);
            return DraftProposal {
                tokens: context[from..to].to_vec(),
                match_len: k,
                match_pos: p,
            };
        }
    }
    DraftProposal::empty()
}

/// Point mass on the drafted token at `position`.
pub fn draft_distribution(
    proposal: &DraftProposal,
    position: usize,
    vocab_size: usize,
) -> Result<Distribution, DrafterError> {
    let token = *proposal
        .tokens
        .get(position)
        .ok_or(DrafterError::Position {
            position,
            len: proposal.tokens.len(),
        })?;
    if token as usize >= vocab_size {
        return Err(DrafterError::Vocab {
            token,
            vocab: vocab_size,
        });
    }
    Ok(Distribution::one_hot(token as usize, vocab_size))
}

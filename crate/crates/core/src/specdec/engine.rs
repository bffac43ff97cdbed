//! Generation loops and their metrics.
//!
//! Both loops keep the same cache invariant: the verifier's KV cache holds
//! every context token except the last, which is fed at the start of the
//! next step. A speculative step feeds `[last, x̃_1..x̃_k]` in one pass and
//! rolls the cache back to the accepted frontier afterwards.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    verify_and_accept, Result, SamplingConfig, SamplingRng, SpecDecError, UniformSource,
    VerificationOutcome,
};
use crate::drafter::{propose, DraftProposal, DrafterConfig};
use crate::model::{ForwardModel, KvCache, LogitsBlock, ModelError, TrafficSnapshot};
use crate::numerics::{softmax_temperature, Distribution};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    /// Verifier forward passes during decoding (prefill excluded).
    pub steps: u64,
    pub total_tokens: u64,
    pub proposed_tokens: u64,
    pub accepted_tokens: u64,
    /// Mean tokens emitted per verifier pass, `L`.
    pub mean_acceptance_length: f64,
    /// Accepted drafts over proposed drafts.
    pub acceptance_rate: f64,
    pub draft_time_s: f64,
    pub verify_time_s: f64,
    pub other_time_s: f64,
    /// Linear-weight bytes read by the verifier during decoding.
    pub weight_bytes_loaded: u64,
    pub tokens_per_second: f64,
}

impl DecodeMetrics {
    fn finish(&mut self, elapsed_s: f64) {
        self.mean_acceptance_length = if self.steps == 0 {
            0.0
        } else {
            self.total_tokens as f64 / self.steps as f64
        };
        self.acceptance_rate = if self.proposed_tokens == 0 {
            0.0
        } else {
            self.accepted_tokens as f64 / self.proposed_tokens as f64
        };
        self.other_time_s = (elapsed_s - self.draft_time_s - self.verify_time_s).max(0.0);
        self.tokens_per_second = self.rate();
    }

    fn rate(&self) -> f64 {
        let total = self.total_time_s();
        if total > 0.0 {
            self.total_tokens as f64 / total
        } else {
            0.0
        }
    }

    pub fn total_time_s(&self) -> f64 {
        self.draft_time_s + self.verify_time_s + self.other_time_s
    }

    /// Sums counts and times, then recomputes the ratios (micro average).
    pub fn merge(&self, other: &DecodeMetrics) -> DecodeMetrics {
        let mut m = DecodeMetrics {
            steps: self.steps + other.steps,
            total_tokens: self.total_tokens + other.total_tokens,
            proposed_tokens: self.proposed_tokens + other.proposed_tokens,
            accepted_tokens: self.accepted_tokens + other.accepted_tokens,
            draft_time_s: self.draft_time_s + other.draft_time_s,
            verify_time_s: self.verify_time_s + other.verify_time_s,
            weight_bytes_loaded: self.weight_bytes_loaded + other.weight_bytes_loaded,
            ..Default::default()
        };
        let elapsed = m.draft_time_s + m.verify_time_s + self.other_time_s + other.other_time_s;
        m.finish(elapsed);
        m
    }

    /// Zeroes every wall-clock field so reports compare byte for byte.
    pub fn without_timings(&self) -> DecodeMetrics {
        DecodeMetrics {
            draft_time_s: 0.0,
            verify_time_s: 0.0,
            other_time_s: 0.0,
            tokens_per_second: 0.0,
            ..self.clone()
        }
    }

    pub fn bytes_per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.weight_bytes_loaded as f64 / self.steps as f64
        }
    }
}

/// Proposes draft tokens for the next step.
pub trait DraftSource {
    /// At most `max_tokens` drafts continuing `context`.
    fn propose(&mut self, context: &[u32], max_tokens: usize) -> Result<DraftProposal>;
}

/// Prompt-lookup drafting.
#[derive(Debug, Clone)]
pub struct NgramDraftSource {
    pub config: DrafterConfig,
}

impl NgramDraftSource {
    pub fn new(config: DrafterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl DraftSource for NgramDraftSource {
    fn propose(&mut self, context: &[u32], max_tokens: usize) -> Result<DraftProposal> {
        let mut p = propose(context, &self.config);
        p.tokens.truncate(max_tokens);
        Ok(p)
    }
}

/// Greedy drafting with a (typically smaller) model; one-hot `q`.
pub struct ModelDraftSource<'a> {
    model: &'a dyn ForwardModel,
    gamma: usize,
    cache: KvCache,
    cached: Vec<u32>,
}

impl<'a> ModelDraftSource<'a> {
    pub fn new(model: &'a dyn ForwardModel, gamma: usize) -> Self {
        Self {
            model,
            gamma,
            cache: model.new_cache(),
            cached: Vec::new(),
        }
    }

    fn feed(&mut self, tokens: &[u32]) -> Result<LogitsBlock> {
        let logits = self.model.forward(tokens, &mut self.cache)?;
        self.cached.extend_from_slice(tokens);
        Ok(logits)
    }
}

impl DraftSource for ModelDraftSource<'_> {
    fn propose(&mut self, context: &[u32], max_tokens: usize) -> Result<DraftProposal> {
        let n = self.gamma.min(max_tokens);
        let Some((&last, head)) = context.split_last() else {
            return Ok(DraftProposal::empty());
        };
        if n == 0 {
            return Ok(DraftProposal::empty());
        }
        // Roll back to the longest prefix shared with the context, then
        // catch up on whatever the verifier accepted since the last call.
        let common = self
            .cached
            .iter()
            .zip(head)
            .take_while(|(a, b)| a == b)
            .count();
        self.cache.truncate(common)?;
        self.cached.truncate(common);
        if common < head.len() {
            self.feed(&head[common..])?;
        }
        let mut tokens = Vec::with_capacity(n);
        let mut next = last;
        for _ in 0..n {
            let logits = self.feed(&[next])?;
            next = argmax_row(logits.row(0));
            tokens.push(next);
        }
        Ok(DraftProposal {
            tokens,
            match_len: 0,
            match_pos: 0,
        })
    }
}

fn argmax_row(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Tokens, metrics and the per-step verification record of one run.
#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub tokens: Vec<u32>,
    pub metrics: DecodeMetrics,
    pub outcomes: Vec<VerificationOutcome>,
    /// Verifier cache length after each step; always one less than the
    /// context, whose last token opens the next pass.
    pub cache_lens: Vec<usize>,
}

struct Session {
    cache: KvCache,
    context: Vec<u32>,
    start: Instant,
    traffic0: TrafficSnapshot,
    prompt_len: usize,
}

fn start_session(
    verifier: &dyn ForwardModel,
    prompt: &[u32],
    max_new_tokens: usize,
) -> Result<Session> {
    let cfg = verifier.config();
    if prompt.is_empty() {
        return Err(SpecDecError::Input("prompt is empty".into()));
    }
    let needed = prompt.len() + max_new_tokens;
    if needed > cfg.max_seq_len {
        return Err(SpecDecError::Model(ModelError::ContextOverflow {
            needed,
            max: cfg.max_seq_len,
        }));
    }
    let start = Instant::now();
    let mut cache = verifier.new_cache();
    let (_, head) = prompt.split_last().expect("non-empty");
    if head.is_empty() {
        // Validate the single token up front; the first step would anyway.
        crate::model::transformer::check_tokens(cfg, prompt, &cache)?;
    } else {
        verifier.forward(head, &mut cache)?;
    }
    let traffic0 = cache.traffic().snapshot();
    Ok(Session {
        cache,
        context: prompt.to_vec(),
        start,
        traffic0,
        prompt_len: prompt.len(),
    })
}

fn tempered(logits: &LogitsBlock, temperature: f32) -> Result<Vec<Distribution>> {
    (0..logits.len())
        .map(|i| Ok(softmax_temperature(logits.row(i), temperature)?))
        .collect()
}

/// Speculative decoding with any [`DraftSource`].
pub fn speculative_generate_with(
    verifier: &dyn ForwardModel,
    drafter: &mut dyn DraftSource,
    prompt: &[u32],
    max_new_tokens: usize,
    sampling: &SamplingConfig,
) -> Result<GenerationTrace> {
    sampling.validate()?;
    let mut s = start_session(verifier, prompt, max_new_tokens)?;
    let mut rng = SamplingRng::new(sampling.seed);
    let mut metrics = DecodeMetrics::default();
    let mut outcomes = Vec::new();
    let mut cache_lens = Vec::new();

    while s.context.len() - s.prompt_len < max_new_tokens {
        let remaining = max_new_tokens - (s.context.len() - s.prompt_len);

        let t = Instant::now();
        let mut proposal = drafter.propose(&s.context, remaining - 1)?;
        proposal.tokens.truncate(remaining - 1);
        metrics.draft_time_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let frontier = s.cache.len();
        let mut input = Vec::with_capacity(proposal.len() + 1);
        input.push(*s.context.last().expect("non-empty"));
        input.extend_from_slice(&proposal.tokens);
        let logits = verifier.forward(&input, &mut s.cache)?;
        let p_list = tempered(&logits, sampling.temperature)?;
        let outcome = verify_and_accept(&p_list, &proposal, sampling, &mut rng)?;
        s.cache.truncate(frontier + 1 + outcome.n_accepted)?;
        metrics.verify_time_s += t.elapsed().as_secs_f64();

        let take = outcome.emitted.len().min(remaining);
        s.context.extend_from_slice(&outcome.emitted[..take]);
        metrics.steps += 1;
        metrics.total_tokens += take as u64;
        metrics.proposed_tokens += proposal.len() as u64;
        metrics.accepted_tokens += outcome.n_accepted as u64;
        outcomes.push(outcome);
        cache_lens.push(s.cache.len());
    }

    metrics.weight_bytes_loaded = s.cache.traffic().snapshot().since(&s.traffic0).total();
    metrics.finish(s.start.elapsed().as_secs_f64());
    Ok(GenerationTrace {
        tokens: s.context.split_off(s.prompt_len),
        metrics,
        outcomes,
        cache_lens,
    })
}

/// Speculative decoding with prompt-lookup drafting.
pub fn speculative_generate(
    verifier: &dyn ForwardModel,
    drafter: &DrafterConfig,
    prompt: &[u32],
    max_new_tokens: usize,
    sampling: &SamplingConfig,
) -> Result<(Vec<u32>, DecodeMetrics)> {
    let mut source = NgramDraftSource::new(*drafter)?;
    let trace = speculative_generate_with(verifier, &mut source, prompt, max_new_tokens, sampling)?;
    Ok((trace.tokens, trace.metrics))
}

/// Plain autoregressive decoding: one verifier pass per token.
pub fn vanilla_generate(
    verifier: &dyn ForwardModel,
    prompt: &[u32],
    max_new_tokens: usize,
    sampling: &SamplingConfig,
) -> Result<(Vec<u32>, DecodeMetrics)> {
    sampling.validate()?;
    let mut s = start_session(verifier, prompt, max_new_tokens)?;
    let mut rng = SamplingRng::new(sampling.seed);
    let mut metrics = DecodeMetrics::default();

    for _ in 0..max_new_tokens {
        let t = Instant::now();
        let last = *s.context.last().expect("non-empty");
        let logits = verifier.forward(&[last], &mut s.cache)?;
        let p = softmax_temperature(logits.row(0), sampling.temperature)?;
        let token = if sampling.is_greedy() {
            p.argmax()
        } else {
            p.sample_with(rng.next_uniform())
        };
        metrics.verify_time_s += t.elapsed().as_secs_f64();
        s.context.push(token as u32);
        metrics.steps += 1;
        metrics.total_tokens += 1;
    }

    metrics.weight_bytes_loaded = s.cache.traffic().snapshot().since(&s.traffic0).total();
    metrics.finish(s.start.elapsed().as_secs_f64());
    Ok((s.context.split_off(s.prompt_len), metrics))
}

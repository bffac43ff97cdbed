//! Exact distribution of one speculative step, by enumeration.
//!
//! Drafts are drawn from `q_1..q_γ` and verified against `p_1..p_{γ+1}`;
//! the uniform `r` is integrated out analytically, so every emitted
//! sequence gets its exact probability. Only small problems are accepted.

use std::collections::BTreeMap;

use super::{
    residual_distribution, verify_drafts, Result, SpecDecError, UniformSource, VerificationOutcome,
};
use crate::numerics::Distribution;

pub const MAX_ORACLE_VOCAB: usize = 16;
pub const MAX_ORACLE_GAMMA: usize = 3;

pub fn step_output_distribution(
    p_list: &[Distribution],
    q_list: &[Distribution],
) -> Result<BTreeMap<Vec<u32>, f64>> {
    let gamma = q_list.len();
    if p_list.len() != gamma + 1 {
        return Err(SpecDecError::Shape(format!(
            "{} target distributions for {gamma} draft distributions",
            p_list.len()
        )));
    }
    let vocab = p_list[0].len();
    if p_list.iter().chain(q_list).any(|d| d.len() != vocab) {
        return Err(SpecDecError::Shape(
            "distributions over different vocabularies".into(),
        ));
    }
    if vocab > MAX_ORACLE_VOCAB || gamma > MAX_ORACLE_GAMMA {
        return Err(SpecDecError::Capacity(format!(
            "oracle supports vocab <= {MAX_ORACLE_VOCAB} and gamma <= {MAX_ORACLE_GAMMA}, got {vocab} and {gamma}"
        )));
    }
    let mut out = BTreeMap::new();
    let mut prefix = Vec::with_capacity(gamma + 1);
    expand(p_list, q_list, 0, 1.0, &mut prefix, &mut out)?;
    Ok(out)
}

fn expand(
    p_list: &[Distribution],
    q_list: &[Distribution],
    i: usize,
    mass: f64,
    prefix: &mut Vec<u32>,
    out: &mut BTreeMap<Vec<u32>, f64>,
) -> Result<()> {
    let p = &p_list[i];
    if i == q_list.len() {
        for (t, &pt) in p.probs().iter().enumerate() {
            if pt > 0.0 {
                prefix.push(t as u32);
                *out.entry(prefix.clone()).or_insert(0.0) += mass * pt;
                prefix.pop();
            }
        }
        return Ok(());
    }
    let q = &q_list[i];
    let mut reject_mass = 0.0;
    for (d, &qd) in q.probs().iter().enumerate() {
        if qd == 0.0 {
            continue;
        }
        let accept = (p.prob(d) / qd).min(1.0);
        reject_mass += qd * (1.0 - accept);
        if accept > 0.0 {
            prefix.push(d as u32);
            expand(p_list, q_list, i + 1, mass * qd * accept, prefix, out)?;
            prefix.pop();
        }
    }
    if reject_mass > 0.0 {
        let residual = residual_distribution(p, q)?;
        for (t, &rt) in residual.probs().iter().enumerate() {
            if rt > 0.0 {
                prefix.push(t as u32);
                *out.entry(prefix.clone()).or_insert(0.0) += mass * reject_mass * rt;
                prefix.pop();
            }
        }
    }
    Ok(())
}

/// One sampled speculative step: drafts drawn from `q_list`, then verified.
pub fn sample_verification(
    p_list: &[Distribution],
    q_list: &[Distribution],
    rng: &mut impl UniformSource,
) -> Result<VerificationOutcome> {
    let drafts: Vec<u32> = q_list
        .iter()
        .map(|q| q.sample_with(rng.next_uniform()) as u32)
        .collect();
    verify_drafts(p_list, &drafts, Some(q_list), false, rng)
}

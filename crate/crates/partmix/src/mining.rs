//! Entropy-based mining of reliable positives and negatives.
//!
//! Each candidate is scored by |H(C_p(anchor)) − H(C_p(candidate))| over the
//! part classifier's identity distribution. Small gaps mark reliable
//! positives, large gaps reliable negatives; ties break on pool position so
//! selection is a pure function of its inputs.

use serde::Serialize;

use crate::augment::{MixRole, MixedSample};
use crate::encoder::{AffineParams, PartDescriptorSet};
use crate::error::{Error, Result};
use crate::numerics::{shannon_entropy, softmax_in_place};

/// A scored candidate.
#[derive(Debug, Clone)]
pub struct EntropyRecord {
    pub candidate: MixedSample,
    pub entropy_gap: f64,
    pub pool_position: usize,
}

/// Selected banks: at most U′ positives and Q′ negatives.
#[derive(Debug, Clone, Default)]
pub struct MinedBanks {
    pub positives: Vec<EntropyRecord>,
    pub negatives: Vec<EntropyRecord>,
}

impl MinedBanks {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Debug line for `--dump-mixes`.
#[derive(Debug, Serialize)]
pub struct MiningDump<'a> {
    pub anchor: usize,
    pub role: MixRole,
    pub route: crate::augment::MixRoute,
    pub donor_index: usize,
    pub replaced_slots: &'a [(usize, usize)],
    pub entropy_gap: f64,
}

fn part_entropy(classifier: &AffineParams, concat: &[f64]) -> Result<f64> {
    let mut logits = classifier.forward(concat)?;
    softmax_in_place(&mut logits)?;
    shannon_entropy(&logits)
}

/// |H(C_p(anchor)) − H(C_p(candidate))| on concatenated part vectors.
pub fn entropy_gap(
    anchor: &PartDescriptorSet,
    candidate: &MixedSample,
    part_classifier: &AffineParams,
) -> Result<f64> {
    let ha = part_entropy(part_classifier, &anchor.concat())?;
    let hc = part_entropy(part_classifier, &candidate.parts.concat())?;
    Ok((ha - hc).abs())
}

/// Scores a pool in order, assigning dense pool positions.
pub fn score_pool(
    anchor: &PartDescriptorSet,
    pool: Vec<MixedSample>,
    part_classifier: &AffineParams,
) -> Result<Vec<EntropyRecord>> {
    let ha = part_entropy(part_classifier, &anchor.concat())?;
    pool.into_iter()
        .enumerate()
        .map(|(pool_position, candidate)| {
            let hc = part_entropy(part_classifier, &candidate.parts.concat())?;
            Ok(EntropyRecord { candidate, entropy_gap: (ha - hc).abs(), pool_position })
        })
        .collect()
}

/// Selects from already-scored pools: positives by ascending gap, negatives
/// by descending gap, ties by ascending pool position.
pub fn mine_scored(
    mut pos: Vec<EntropyRecord>,
    mut neg: Vec<EntropyRecord>,
    u_prime: usize,
    q_prime: usize,
) -> MinedBanks {
    pos.sort_by(|a, b| {
        a.entropy_gap
            .partial_cmp(&b.entropy_gap)
            .expect("finite gaps")
            .then(a.pool_position.cmp(&b.pool_position))
    });
    neg.sort_by(|a, b| {
        b.entropy_gap
            .partial_cmp(&a.entropy_gap)
            .expect("finite gaps")
            .then(a.pool_position.cmp(&b.pool_position))
    });
    pos.truncate(u_prime);
    neg.truncate(q_prime);
    MinedBanks { positives: pos, negatives: neg }
}

/// Scores and selects in one call.
pub fn mine(
    anchor: &PartDescriptorSet,
    pos_pool: Vec<MixedSample>,
    neg_pool: Vec<MixedSample>,
    u_prime: usize,
    q_prime: usize,
    part_classifier: &AffineParams,
) -> Result<MinedBanks> {
    if u_prime < 1 || q_prime < 1 {
        return Err(Error::Domain(format!(
            "mining quotas must be at least 1, got U'={u_prime}, Q'={q_prime}"
        )));
    }
    let pos = score_pool(anchor, pos_pool, part_classifier)?;
    let neg = score_pool(anchor, neg_pool, part_classifier)?;
    Ok(mine_scored(pos, neg, u_prime, q_prime))
}

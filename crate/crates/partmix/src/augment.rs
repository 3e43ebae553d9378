//! Part mixing and sample synthesis.
//!
//! The mix operator swaps single part-descriptor slots between an anchor and
//! a donor; the global descriptor is never touched. Positives replace
//! matching slots using a same-identity donor; negatives either cross slots
//! (k ≠ h) within the same identity or match slots across different
//! identities. Each construction runs over an inter-modality route and an
//! intra-modality route, producing two independent samples.
//!
//! Also here: the image/feature-space baseline mixers (MixUp, Manifold
//! MixUp, CutMix) used by comparison runs.

use rand::Rng;
use serde::Serialize;

use crate::data::{Modality, PersonImage};
use crate::encoder::PartDescriptorSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{sample_without_replacement, SeedTree};

/// One descriptor set collected into a per-modality bank.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub parts: PartDescriptorSet,
    pub identity: usize,
    pub modality: Modality,
    pub entry_index: usize,
}

/// All part-descriptor sets of one modality within a mini-batch.
#[derive(Debug, Clone)]
pub struct DescriptorBank {
    modality: Modality,
    entries: Vec<BankEntry>,
}

impl DescriptorBank {
    pub fn new(modality: Modality) -> Self {
        DescriptorBank { modality, entries: Vec::new() }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Appends an entry; indices stay dense and unique.
    pub fn push(&mut self, parts: PartDescriptorSet, identity: usize) -> usize {
        let entry_index = self.entries.len();
        self.entries.push(BankEntry { parts, identity, modality: self.modality, entry_index });
        entry_index
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &BankEntry {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which bank the donor came from, relative to the anchor's modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MixRoute {
    Inter,
    Intra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MixRole {
    Positive,
    Negative,
}

/// A synthesized descriptor set with full provenance.
///
/// `replaced_slots` holds (recipient slot u, donor slot h) pairs, 0-based.
/// Positives always have u = h with a same-identity donor; negatives have
/// u ≠ h for same-identity donors and u = h for different-identity donors.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub parts: PartDescriptorSet,
    pub anchor_index: usize,
    pub donor_index: usize,
    pub donor_modality: Modality,
    pub donor_identity: usize,
    pub replaced_slots: Vec<(usize, usize)>,
    pub route: MixRoute,
    pub role: MixRole,
}

/// Mixing configuration: B slots per sample and pool caps before mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixSpec {
    /// Number of replaced slots per sample (B).
    pub num_mixed: usize,
    /// Positive pool cap before mining (U).
    pub pos_pool_cap: usize,
    /// Negative pool cap before mining (Q).
    pub neg_pool_cap: usize,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec { num_mixed: 2, pos_pool_cap: 16, neg_pool_cap: 64 }
    }
}

/// Copies donor slot `h` into recipient slot `u`; every other slot is the
/// recipient's, and the global descriptor is not part of the operation.
pub fn part_mix(
    recipient: &PartDescriptorSet,
    u: usize,
    donor: &PartDescriptorSet,
    h: usize,
) -> Result<PartDescriptorSet> {
    let m = recipient.num_parts();
    if u >= m || h >= donor.num_parts() {
        return Err(Error::SlotOutOfRange { index: u.max(h), num_parts: m });
    }
    let mut out = recipient.clone();
    out.set_part(u, donor.part(h).to_vec());
    Ok(out)
}

fn apply_slots(
    anchor: &PartDescriptorSet,
    donor: &PartDescriptorSet,
    slots: &[(usize, usize)],
) -> Result<PartDescriptorSet> {
    let mut out = anchor.clone();
    for &(u, h) in slots {
        out = part_mix(&out, u, donor, h)?;
    }
    Ok(out)
}

fn partner_indices(bank: &DescriptorBank, identity: usize, same: bool, skip: Option<usize>) -> Vec<usize> {
    bank.entries()
        .iter()
        .filter(|e| (e.identity == identity) == same && Some(e.entry_index) != skip)
        .map(|e| e.entry_index)
        .collect()
}

fn cap_pool<R: Rng>(pool: Vec<MixedSample>, cap: usize, rng: &mut R) -> Vec<MixedSample> {
    if pool.len() <= cap {
        return pool;
    }
    let mut keep = sample_without_replacement(rng, pool.len(), cap);
    keep.sort_unstable();
    let mut picked = Vec::with_capacity(cap);
    let mut iter = keep.into_iter().peekable();
    for (i, sample) in pool.into_iter().enumerate() {
        if iter.peek() == Some(&i) {
            picked.push(sample);
            iter.next();
        }
    }
    picked
}

/// Matched-slot positives from same-identity donors, one inter- and one
/// intra-modality sample per partner, pool capped at U by seeded sampling.
pub fn gen_positive(
    anchor: &BankEntry,
    banks: &[DescriptorBank; 2],
    spec: &MixSpec,
    seed: u64,
) -> Result<Vec<MixedSample>> {
    gen_positive_routed(anchor, banks, spec, &[MixRoute::Inter, MixRoute::Intra], seed)
}

/// Positives restricted to the given routes (ablation hook).
pub fn gen_positive_routed(
    anchor: &BankEntry,
    banks: &[DescriptorBank; 2],
    spec: &MixSpec,
    routes: &[MixRoute],
    seed: u64,
) -> Result<Vec<MixedSample>> {
    let m = anchor.parts.num_parts();
    if spec.num_mixed > m {
        return Err(Error::Domain(format!(
            "cannot mix {} of {} part slots",
            spec.num_mixed, m
        )));
    }
    let mut rng = SeedTree::new(seed).child("gen_positive").rng();
    let mut pool = Vec::new();
    for &route in routes {
        let (bank, skip) = match route {
            MixRoute::Inter => (&banks[anchor.modality.other().index()], None),
            MixRoute::Intra => (&banks[anchor.modality.index()], Some(anchor.entry_index)),
        };
        for j in partner_indices(bank, anchor.identity, true, skip) {
            let donor = bank.entry(j);
            let slots: Vec<(usize, usize)> =
                sample_without_replacement(&mut rng, m, spec.num_mixed)
                    .into_iter()
                    .map(|k| (k, k))
                    .collect();
            let parts = apply_slots(&anchor.parts, &donor.parts, &slots)?;
            pool.push(MixedSample {
                parts,
                anchor_index: anchor.entry_index,
                donor_index: j,
                donor_modality: donor.modality,
                donor_identity: donor.identity,
                replaced_slots: slots,
                route,
                role: MixRole::Positive,
            });
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool { anchor: anchor.entry_index });
    }
    Ok(cap_pool(pool, spec.pos_pool_cap, &mut rng))
}

/// Crossed-slot same-identity and matched-slot different-identity negatives
/// over both routes, pool capped at Q by seeded sampling.
pub fn gen_negative(
    anchor: &BankEntry,
    banks: &[DescriptorBank; 2],
    spec: &MixSpec,
    seed: u64,
) -> Result<Vec<MixedSample>> {
    gen_negative_routed(anchor, banks, spec, &[MixRoute::Inter, MixRoute::Intra], seed)
}

/// Draws B (k, h) pairs with distinct k's, distinct h's, and k ≠ h in every
/// pair. Returns None when no valid assignment exists (B ≥ 1 with M = 1).
fn crossed_slots<R: Rng>(rng: &mut R, m: usize, b: usize) -> Option<Vec<(usize, usize)>> {
    if b == 0 {
        return Some(Vec::new());
    }
    if m < 2 {
        return None;
    }
    for _ in 0..1000 {
        let ks = sample_without_replacement(rng, m, b);
        let hs = sample_without_replacement(rng, m, b);
        if ks.iter().zip(&hs).all(|(k, h)| k != h) {
            return Some(ks.into_iter().zip(hs).collect());
        }
    }
    None
}

/// Negatives restricted to the given routes (ablation hook).
pub fn gen_negative_routed(
    anchor: &BankEntry,
    banks: &[DescriptorBank; 2],
    spec: &MixSpec,
    routes: &[MixRoute],
    seed: u64,
) -> Result<Vec<MixedSample>> {
    let m = anchor.parts.num_parts();
    if spec.num_mixed > m {
        return Err(Error::Domain(format!(
            "cannot mix {} of {} part slots",
            spec.num_mixed, m
        )));
    }
    let mut rng = SeedTree::new(seed).child("gen_negative").rng();
    let mut pool = Vec::new();
    // Same-identity branch first (crossed slots), then different-identity
    // (matched slots); inter route before intra inside each branch.
    for same_identity in [true, false] {
        for &route in routes {
            let (bank, skip) = match route {
                MixRoute::Inter => (&banks[anchor.modality.other().index()], None),
                MixRoute::Intra => (&banks[anchor.modality.index()], Some(anchor.entry_index)),
            };
            for j in partner_indices(bank, anchor.identity, same_identity, skip) {
                let donor = bank.entry(j);
                let slots = if same_identity {
                    match crossed_slots(&mut rng, m, spec.num_mixed) {
                        Some(s) => s,
                        None => continue,
                    }
                } else {
                    sample_without_replacement(&mut rng, m, spec.num_mixed)
                        .into_iter()
                        .map(|k| (k, k))
                        .collect()
                };
                let parts = apply_slots(&anchor.parts, &donor.parts, &slots)?;
                pool.push(MixedSample {
                    parts,
                    anchor_index: anchor.entry_index,
                    donor_index: j,
                    donor_modality: donor.modality,
                    donor_identity: donor.identity,
                    replaced_slots: slots,
                    route,
                    role: MixRole::Negative,
                });
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool { anchor: anchor.entry_index });
    }
    Ok(cap_pool(pool, spec.neg_pool_cap, &mut rng))
}

// ---------------------------------------------------------------------------
// Baseline mixers.
// ---------------------------------------------------------------------------

/// Where Manifold MixUp interpolates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MixLayer {
    Input,
    PostEmbed,
}

/// A linearly mixed tensor with its soft identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTensor {
    pub values: Tensor,
    pub label_weights: [(usize, f64); 2],
}

fn lerp_tensors(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0,1]")));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// x̃ = λx¹ + (1−λ)x², ỹ = λy¹ + (1−λ)y².
pub fn mixup(x1: &PersonImage, x2: &PersonImage, lambda: f64) -> Result<MixedTensor> {
    Ok(MixedTensor {
        values: lerp_tensors(&x1.pixels, &x2.pixels, lambda)?,
        label_weights: [(x1.identity, lambda), (x2.identity, 1.0 - lambda)],
    })
}

/// Linear interpolation at the chosen layer. With [`MixLayer::Input`] this
/// is exactly `mixup`; with [`MixLayer::PostEmbed`] the caller passes the
/// two feature maps.
pub fn manifold_mixup(
    h1: &Tensor,
    y1: usize,
    h2: &Tensor,
    y2: usize,
    lambda: f64,
    _layer: MixLayer,
) -> Result<MixedTensor> {
    Ok(MixedTensor {
        values: lerp_tensors(h1, h2, lambda)?,
        label_weights: [(y1, lambda), (y2, 1.0 - lambda)],
    })
}

/// A sampled cut rectangle. `width_px`/`height_px` are the quantized
/// unclipped dimensions; [left, right) × [top, bottom) is the clipped
/// region that takes pixels from x².
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl CutBox {
    pub fn clipped_area(&self) -> usize {
        (self.right - self.left) * (self.bottom - self.top)
    }

    pub fn unclipped_area(&self) -> usize {
        self.width_px * self.height_px
    }
}

/// Samples b_x ~ U(0,W), b_y ~ U(0,H), b_w = W√(1−λ), b_h = H√(1−λ),
/// then quantizes and clips. λ = 0 is pinned to the full-image box.
pub fn sample_cut_box<R: Rng>(height: usize, width: usize, lambda: f64, rng: &mut R) -> CutBox {
    let center_x = rng.gen_range(0.0..width as f64);
    let center_y = rng.gen_range(0.0..height as f64);
    if lambda == 0.0 {
        return CutBox {
            center_x,
            center_y,
            width_px: width,
            height_px: height,
            left: 0,
            top: 0,
            right: width,
            bottom: height,
        };
    }
    let bw = width as f64 * (1.0 - lambda).sqrt();
    let bh = height as f64 * (1.0 - lambda).sqrt();
    let width_px = bw.round() as usize;
    let height_px = bh.round() as usize;
    let clampf = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    let left = clampf(center_x - bw / 2.0, width);
    let right = clampf(center_x + bw / 2.0, width);
    let top = clampf(center_y - bh / 2.0, height);
    let bottom = clampf(center_y + bh / 2.0, height);
    CutBox { center_x, center_y, width_px, height_px, left, top, right, bottom }
}

/// Rectangular 0/1 cut: pixels inside the box come from x², the rest from
/// x¹; the label weight is recomputed from the clipped box area.
pub fn cutmix(
    x1: &PersonImage,
    x2: &PersonImage,
    lambda: f64,
    seed: u64,
) -> Result<(MixedTensor, CutBox)> {
    if x1.pixels.shape() != x2.pixels.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x1.pixels.shape()),
            got: format!("{:?}", x2.pixels.shape()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0,1]")));
    }
    let shape = x1.pixels.shape().to_vec();
    let (height, width, channels) = (shape[0], shape[1], shape[2]);
    let mut rng = SeedTree::new(seed).child("cutmix").rng();
    let boxx = sample_cut_box(height, width, lambda, &mut rng);
    let mut data = x1.pixels.data().to_vec();
    for h in boxx.top..boxx.bottom {
        for w in boxx.left..boxx.right {
            let at = (h * width + w) * channels;
            data[at..at + channels].copy_from_slice(&x2.pixels.data()[at..at + channels]);
        }
    }
    let lambda_eff = 1.0 - boxx.clipped_area() as f64 / (height * width) as f64;
    Ok((
        MixedTensor {
            values: Tensor::new(shape, data)?,
            label_weights: [(x1.identity, lambda_eff), (x2.identity, 1.0 - lambda_eff)],
        },
        boxx,
    ))
}

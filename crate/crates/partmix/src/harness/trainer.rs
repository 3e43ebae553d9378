//! The two-phase training loop and the total-loss step.
//!
//! The step function is pure in the flat parameter vector, which is what
//! makes the full pipeline — forward, mixing, mining, all losses, backward —
//! checkable end-to-end against finite differences.

use std::io::Write as IoWrite;
use std::time::Instant;

use serde::Serialize;

use rand::Rng;

use crate::augment::{
    cutmix, gen_negative_routed, gen_positive_routed, manifold_mixup, mixup, BankEntry,
    DescriptorBank, MixLayer, MixRoute, MixSpec, MixedSample, MixedTensor,
};
use crate::data::{sample_minibatch, DatasetSplit, MiniBatch, Modality, PersonImage};
use crate::encoder::{
    affine_backward, backward_descriptor_to_features, backward_features_to_input, backward_image,
    detect_parts, person_descriptor, pool_parts, AffineParams, FeatureMap, Forward, ModelState,
};
use crate::error::{Error, Result};
use crate::eval::{run_protocol, MetricsReport, RetrievalProtocol};
use crate::harness::config::{ExperimentConfig, Regularizer};
use crate::losses::{
    center_cluster_loss, contrastive_loss, id_loss, modality_learning_loss,
    modality_specific_id_loss, part_id_loss, AffineGrads, ContrastiveAnchor, LossBreakdown,
};
use crate::mining::{mine_scored, EntropyRecord, MinedBanks};
use crate::numerics::{adam_step, AdamState};
use crate::rng::{sample_without_replacement, SeedTree};

/// Default CMC ranks for all protocol runs.
pub const DEFAULT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Full,
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Diagnostics {
    pub steps: u64,
    pub empty_positive_pools: u64,
    pub empty_negative_pools: u64,
    pub skipped_anchors: u64,
    /// Must stay zero: the warm-up phase never evaluates aid/cont.
    pub warmup_aid_cont_evaluations: u64,
    pub center_single_identity_warnings: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepDiag {
    pub empty_positive_pools: u64,
    pub empty_negative_pools: u64,
    pub skipped_anchors: u64,
    pub aid_cont_evaluated: bool,
    pub center_single_identity: bool,
}

/// Per-epoch loss means and the learning rate in force.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub id: f64,
    pub cc: f64,
    pub sid: f64,
    pub ml: f64,
    pub aid: f64,
    pub cont: f64,
    pub total: f64,
    pub lr: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub run_seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub reports: Vec<MetricsReport>,
    pub wall_clock_secs: f64,
    pub diagnostics: Diagnostics,
}

fn affine_from(
    params: &[f64],
    w: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
    in_dim: usize,
    out_dim: usize,
) -> AffineParams {
    AffineParams { w: params[w].to_vec(), b: params[b].to_vec(), in_dim, out_dim }
}

fn add_scaled(target: &mut [f64], source: &[f64], scale: f64) {
    for (t, &s) in target.iter_mut().zip(source) {
        *t += scale * s;
    }
}

fn add_affine_grads(grads: &mut [f64], layout_w: std::ops::Range<usize>, layout_b: std::ops::Range<usize>, ag: &AffineGrads, scale: f64) {
    add_scaled(&mut grads[layout_w], &ag.dw, scale);
    add_scaled(&mut grads[layout_b], &ag.db, scale);
}

/// H(softmax(z)) = ln Z − E[z − max] computed without per-class logs.
fn entropy_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &l in logits {
        let e = (l - max).exp();
        z += e;
        weighted += e * (l - max);
    }
    z.ln() - weighted / z
}

fn slot_position_logits(
    part_w: &[f64],
    num_ids: usize,
    cf: usize,
    values: &[f64],
    position: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; num_ids];
    for (c, &v) in values.iter().enumerate() {
        let row = &part_w[(position * cf + c) * num_ids..(position * cf + c + 1) * num_ids];
        for (o, &w) in row.iter().enumerate() {
            out[o] += v * w;
        }
    }
    out
}

/// Scores mixed candidates by entropy gap without re-running the part
/// classifier on full concatenations: per-entry base logits and per-slot
/// contributions are precomputed once, and each candidate's logits are the
/// anchor's with the replaced slots' contributions swapped.
///
/// The oracle suite holds this route against the direct
/// classify-then-entropy composition.
pub(crate) struct FastScorer<'a> {
    part_c: &'a AffineParams,
    banks: &'a [DescriptorBank; 2],
    cf: usize,
    base: Vec<Vec<Vec<f64>>>,      // [bank][entry] -> logits
    diag: Vec<Vec<Vec<Vec<f64>>>>, // [bank][entry][slot] -> contribution
}

impl<'a> FastScorer<'a> {
    pub(crate) fn new(
        part_c: &'a AffineParams,
        cf: usize,
        num_parts: usize,
        banks: &'a [DescriptorBank; 2],
    ) -> Self {
        let mut base = Vec::with_capacity(2);
        let mut diag = Vec::with_capacity(2);
        for bank in banks {
            let mut bank_base = Vec::with_capacity(bank.len());
            let mut bank_diag = Vec::with_capacity(bank.len());
            for entry in bank.entries() {
                let mut logits = part_c.b.clone();
                let mut slots = Vec::with_capacity(num_parts);
                for k in 0..num_parts {
                    let contrib =
                        slot_position_logits(&part_c.w, part_c.out_dim, cf, entry.parts.part(k), k);
                    for (l, &c) in logits.iter_mut().zip(&contrib) {
                        *l += c;
                    }
                    slots.push(contrib);
                }
                bank_base.push(logits);
                bank_diag.push(slots);
            }
            base.push(bank_base);
            diag.push(bank_diag);
        }
        FastScorer { part_c, banks, cf, base, diag }
    }

    pub(crate) fn anchor_entropy(&self, bank: usize, entry: usize) -> f64 {
        entropy_from_logits(&self.base[bank][entry])
    }

    fn gap(&self, bank: usize, entry: usize, anchor_entropy: f64, candidate: &MixedSample) -> f64 {
        let mut logits = self.base[bank][entry].clone();
        let donor_bank = candidate.donor_modality.index();
        for &(u, h) in &candidate.replaced_slots {
            let sub = &self.diag[bank][entry][u];
            for (l, &c) in logits.iter_mut().zip(sub) {
                *l -= c;
            }
            if u == h {
                let add = &self.diag[donor_bank][candidate.donor_index][h];
                for (l, &c) in logits.iter_mut().zip(add) {
                    *l += c;
                }
            } else {
                let donor = self.banks[donor_bank].entry(candidate.donor_index);
                let add =
                    slot_position_logits(&self.part_c.w, self.part_c.out_dim, self.cf, donor.parts.part(h), u);
                for (l, &c) in logits.iter_mut().zip(&add) {
                    *l += c;
                }
            }
        }
        (anchor_entropy - entropy_from_logits(&logits)).abs()
    }

    pub(crate) fn score(
        &self,
        bank: usize,
        entry: usize,
        pool: Vec<MixedSample>,
    ) -> Vec<EntropyRecord> {
        let anchor_entropy = self.anchor_entropy(bank, entry);
        pool.into_iter()
            .enumerate()
            .map(|(pool_position, candidate)| {
                let entropy_gap = self.gap(bank, entry, anchor_entropy, &candidate);
                EntropyRecord { candidate, entropy_gap, pool_position }
            })
            .collect()
    }
}

pub(crate) fn routes_for(regularizer: Regularizer) -> &'static [MixRoute] {
    match regularizer {
        Regularizer::IntraOnly => &[MixRoute::Intra],
        Regularizer::InterOnly => &[MixRoute::Inter],
        _ => &[MixRoute::Inter, MixRoute::Intra],
    }
}

/// Seeded stand-in for entropy mining: a uniform subset in pool order.
fn random_select(records: Vec<EntropyRecord>, quota: usize, rng: &mut impl rand::Rng) -> Vec<EntropyRecord> {
    if records.len() <= quota {
        return records;
    }
    let mut keep = sample_without_replacement(rng, records.len(), quota);
    keep.sort_unstable();
    let mut out = Vec::with_capacity(quota);
    let mut it = keep.into_iter().peekable();
    for (i, r) in records.into_iter().enumerate() {
        if it.peek() == Some(&i) {
            out.push(r);
            it.next();
        }
    }
    out
}

/// Soft-label cross-entropy with coefficient; targets carry (label, weight)
/// with weights summing to 1.
fn soft_cross_entropy(
    classifier: &AffineParams,
    input: &[f64],
    targets: &[(usize, f64)],
    coeff: f64,
    grads: &mut AffineGrads,
    d_input: &mut [f64],
) -> Result<f64> {
    let q = crate::numerics::softmax(&classifier.forward(input)?)?;
    let mut loss = 0.0;
    let mut dlogits = q.clone();
    for &(y, w) in targets {
        if y >= classifier.out_dim {
            return Err(Error::LabelOutOfRange { label: y, num_classes: classifier.out_dim });
        }
        loss -= coeff * w * q[y].max(crate::numerics::PROB_FLOOR).ln();
        dlogits[y] -= w;
    }
    for g in &mut dlogits {
        *g *= coeff;
    }
    affine_backward(&classifier.w, input, &dlogits, &mut grads.dw, &mut grads.db, d_input);
    Ok(loss)
}

/// Runs detect → pool → descriptor on an externally provided feature map
/// (Manifold MixUp's post-embedding path).
fn forward_from_features(
    model: &ModelState,
    params: &[f64],
    feature: FeatureMap,
) -> Result<Forward> {
    let maps = detect_parts(
        &model.dims,
        &params[model.layout.det_w.clone()],
        &params[model.layout.det_b.clone()],
        &feature,
    );
    let parts = pool_parts(&feature, &maps)?;
    let descriptor = person_descriptor(&feature, parts);
    Ok(Forward { feature, maps, descriptor })
}

/// Output of one loss-and-gradient evaluation.
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub grads: Vec<f64>,
    pub diag: StepDiag,
}

/// Evaluates the phase-appropriate total loss and its gradient w.r.t. the
/// flat trainable parameters. Pure in `params`; all randomness comes from
/// `mix_seed`.
#[allow(clippy::too_many_arguments)]
pub fn step_loss_and_grads(
    config: &ExperimentConfig,
    model: &ModelState,
    split: &DatasetSplit,
    batch: &MiniBatch,
    phase: Phase,
    mix_seed: u64,
    params: &[f64],
    mut dump: Option<&mut Vec<String>>,
) -> Result<StepOutcome> {
    let dims = model.dims;
    let layout = &model.layout;
    let cf = dims.feat_dim;
    let num_parts = dims.num_parts;
    let d_len = dims.descriptor_len();
    let pc_len = dims.part_concat_len();
    let weights = config.loss.weights();

    let images: Vec<&PersonImage> = batch.images(split).collect();
    let n = images.len();
    let labels: Vec<usize> = images.iter().map(|i| i.identity).collect();
    let modalities: Vec<Modality> = images.iter().map(|i| i.modality).collect();

    let fwds: Vec<Forward> =
        images.iter().map(|img| model.forward_from_params(params, img)).collect::<Result<_>>()?;
    let descriptors: Vec<&[f64]> =
        fwds.iter().map(|f| f.descriptor.concatenated.as_slice()).collect();
    let pcs: Vec<&[f64]> = fwds.iter().map(|f| f.descriptor.part_concat()).collect();

    let shared = affine_from(params, layout.shared_w.clone(), layout.shared_b.clone(), d_len, dims.num_ids);
    let part_c = affine_from(params, layout.part_w.clone(), layout.part_b.clone(), pc_len, dims.num_ids);
    let vis = affine_from(params, layout.vis_w.clone(), layout.vis_b.clone(), d_len, dims.num_ids);
    let ir = affine_from(params, layout.ir_w.clone(), layout.ir_b.clone(), d_len, dims.num_ids);

    let mut grads = vec![0.0; layout.total];
    let mut dd = vec![vec![0.0; d_len]; n];
    let mut dpc = vec![vec![0.0; pc_len]; n];
    let mut breakdown = LossBreakdown::default();
    let mut diag = StepDiag::default();

    let image_mixer = matches!(
        config.regularizer,
        Regularizer::Mixup | Regularizer::ManifoldMixup | Regularizer::Cutmix
    ) && phase == Phase::Full;

    // --- ID loss (replaced by the soft-label mixed version under image
    // mixers after warm-up).
    struct MixedForward {
        fwd: Forward,
        targets: [(usize, f64); 2],
        source: MixSource,
    }
    enum MixSource {
        Pixels(crate::numerics::Tensor),
        Features { a: usize, b: usize, lambda: f64 },
    }
    let mut mixed_forwards: Vec<MixedForward> = Vec::new();

    if image_mixer {
        let tree = SeedTree::new(mix_seed).child("image_mix");
        let mut rng = tree.rng();
        let perm = sample_without_replacement(&mut rng, n, n);
        let post_embed = config.regularizer == Regularizer::ManifoldMixup && rng.gen_bool(0.5);
        for i in 0..n {
            let j = perm[i];
            let lambda: f64 = rng.gen_range(0.0..1.0);
            let feature_mix: Option<MixedTensor> =
                if config.regularizer == Regularizer::ManifoldMixup && post_embed {
                    Some(manifold_mixup(
                        &fwds[i].feature.values,
                        labels[i],
                        &fwds[j].feature.values,
                        labels[j],
                        lambda,
                        MixLayer::PostEmbed,
                    )?)
                } else {
                    None
                };
            if let Some(mixed) = feature_mix {
                let feature = FeatureMap { values: mixed.values };
                let fwd = forward_from_features(model, params, feature)?;
                mixed_forwards.push(MixedForward {
                    fwd,
                    targets: mixed.label_weights,
                    source: MixSource::Features { a: i, b: j, lambda },
                });
            } else {
                let mixed = match config.regularizer {
                    Regularizer::Cutmix => {
                        cutmix(images[i], images[j], lambda, tree.index(i as u64).seed())?.0
                    }
                    _ => mixup(images[i], images[j], lambda)?,
                };
                let pseudo = PersonImage {
                    pixels: mixed.values.clone(),
                    identity: labels[i],
                    modality: modalities[i],
                    nuisance_seed: 0,
                };
                let fwd = model.forward_from_params(params, &pseudo)?;
                mixed_forwards.push(MixedForward {
                    fwd,
                    targets: mixed.label_weights,
                    source: MixSource::Pixels(mixed.values),
                });
            }
        }
        // Soft-label ID loss over the mixed batch.
        let mut shared_grads = AffineGrads::zeros(&shared);
        let coeff = 1.0 / n as f64;
        let mut d_mixed: Vec<Vec<f64>> = vec![vec![0.0; d_len]; n];
        for (i, mf) in mixed_forwards.iter().enumerate() {
            breakdown.id += soft_cross_entropy(
                &shared,
                &mf.fwd.descriptor.concatenated,
                &mf.targets,
                coeff,
                &mut shared_grads,
                &mut d_mixed[i],
            )?;
        }
        add_affine_grads(&mut grads, layout.shared_w.clone(), layout.shared_b.clone(), &shared_grads, 1.0);
        // Backward through the mixed forwards.
        for (mf, dmix) in mixed_forwards.iter().zip(&d_mixed) {
            let d_global = &dmix[..cf];
            let d_parts = &dmix[cf..];
            match &mf.source {
                MixSource::Pixels(pixels) => {
                    let pseudo = PersonImage {
                        pixels: pixels.clone(),
                        identity: 0,
                        modality: Modality::Visible,
                        nuisance_seed: 0,
                    };
                    backward_image(&dims, params, layout, &pseudo, &mf.fwd, d_parts, d_global, &mut grads);
                }
                MixSource::Features { a, b, lambda } => {
                    let df = backward_descriptor_to_features(
                        &dims, params, layout, &mf.fwd, d_parts, d_global, &mut grads,
                    );
                    // The mixed feature map is λ f_a + (1−λ) f_b.
                    backward_features_to_input(
                        &dims,
                        layout,
                        &images[*a].pixels,
                        &fwds[*a].feature,
                        &df.iter().map(|v| v * lambda).collect::<Vec<f64>>(),
                        &mut grads,
                    );
                    backward_features_to_input(
                        &dims,
                        layout,
                        &images[*b].pixels,
                        &fwds[*b].feature,
                        &df.iter().map(|v| v * (1.0 - lambda)).collect::<Vec<f64>>(),
                        &mut grads,
                    );
                }
            }
        }
    } else {
        let (l_id, dd_id, shared_grads) = id_loss(&descriptors, &labels, &modalities, &shared)?;
        breakdown.id = l_id;
        for (acc, g) in dd.iter_mut().zip(&dd_id) {
            add_scaled(acc, g, 1.0);
        }
        add_affine_grads(&mut grads, layout.shared_w.clone(), layout.shared_b.clone(), &shared_grads, 1.0);
    }

    // --- Center cluster loss.
    let (l_cc, dd_cc, single_id) = center_cluster_loss(&descriptors, &labels, config.loss.center_margin)?;
    breakdown.cc = l_cc;
    diag.center_single_identity = single_id;
    for (acc, g) in dd.iter_mut().zip(&dd_cc) {
        add_scaled(acc, g, 1.0);
    }

    // --- Modality-specific ID loss.
    let (l_sid, dd_sid, vis_g, ir_g) =
        modality_specific_id_loss(&descriptors, &labels, &modalities, &vis, &ir)?;
    breakdown.sid = l_sid;
    for (acc, g) in dd.iter_mut().zip(&dd_sid) {
        add_scaled(acc, g, weights.lambda_sid);
    }
    add_affine_grads(&mut grads, layout.vis_w.clone(), layout.vis_b.clone(), &vis_g, weights.lambda_sid);
    add_affine_grads(&mut grads, layout.ir_w.clone(), layout.ir_b.clone(), &ir_g, weights.lambda_sid);

    // --- Modality learning loss.
    let (l_ml, dd_ml, vis_g2, ir_g2) = modality_learning_loss(
        &descriptors,
        &modalities,
        &vis,
        &ir,
        &model.mean_vis,
        &model.mean_ir,
    )?;
    breakdown.ml = l_ml;
    for (acc, g) in dd.iter_mut().zip(&dd_ml) {
        add_scaled(acc, g, weights.lambda_ml);
    }
    add_affine_grads(&mut grads, layout.vis_w.clone(), layout.vis_b.clone(), &vis_g2, weights.lambda_ml);
    add_affine_grads(&mut grads, layout.ir_w.clone(), layout.ir_b.clone(), &ir_g2, weights.lambda_ml);

    // --- PartMix terms (full phase, part-mixing regularizers only).
    if phase == Phase::Full && config.regularizer.uses_part_mixing() {
        diag.aid_cont_evaluated = true;

        // Part ID loss over the whole batch.
        let (l_aid, dpc_aid, part_grads) = part_id_loss(&pcs, &labels, &part_c)?;
        breakdown.aid = l_aid;
        for (acc, g) in dpc.iter_mut().zip(&dpc_aid) {
            add_scaled(acc, g, weights.lambda_aid);
        }
        add_affine_grads(&mut grads, layout.part_w.clone(), layout.part_b.clone(), &part_grads, weights.lambda_aid);

        // Banks.
        let mut banks = [
            DescriptorBank::new(Modality::Visible),
            DescriptorBank::new(Modality::Infrared),
        ];
        let mut bank_to_batch: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let mut batch_to_entry = vec![0usize; n];
        for (i, fwd) in fwds.iter().enumerate() {
            let b = modalities[i].index();
            let entry = banks[b].push(fwd.descriptor.parts.clone(), labels[i]);
            bank_to_batch[b].push(i);
            batch_to_entry[i] = entry;
        }

        let mix_spec = MixSpec {
            num_mixed: config.mix.num_mixed_parts,
            pos_pool_cap: config.mix.pos_pool_cap,
            neg_pool_cap: config.mix.neg_pool_cap,
        };
        let routes = routes_for(config.regularizer);
        let scorer = FastScorer::new(&part_c, cf, num_parts, &banks);
        let tree = SeedTree::new(mix_seed);

        // Generate, score, and select per anchor.
        let mut selected: Vec<MinedBanks> = Vec::with_capacity(n);
        for i in 0..n {
            let bank_idx = modalities[i].index();
            let anchor: &BankEntry = banks[bank_idx].entry(batch_to_entry[i]);
            let anchor_tree = tree.index(i as u64);

            let pos_pool = match gen_positive_routed(
                anchor,
                &banks,
                &mix_spec,
                routes,
                anchor_tree.child("pos").seed(),
            ) {
                Ok(pool) => scorer.score(bank_idx, batch_to_entry[i], pool),
                Err(Error::EmptyPool { .. }) => {
                    diag.empty_positive_pools += 1;
                    Vec::new()
                }
                Err(e) => return Err(e),
            };
            let neg_pool = match gen_negative_routed(
                anchor,
                &banks,
                &mix_spec,
                routes,
                anchor_tree.child("neg").seed(),
            ) {
                Ok(pool) => scorer.score(bank_idx, batch_to_entry[i], pool),
                Err(Error::EmptyPool { .. }) => {
                    diag.empty_negative_pools += 1;
                    Vec::new()
                }
                Err(e) => return Err(e),
            };

            let banks_sel = if config.regularizer == Regularizer::Partmix {
                mine_scored(pos_pool, neg_pool, config.mining.num_positives, config.mining.num_negatives)
            } else {
                let mut rng = anchor_tree.child("select").rng();
                MinedBanks {
                    positives: random_select(pos_pool, config.mining.num_positives, &mut rng),
                    negatives: random_select(neg_pool, config.mining.num_negatives, &mut rng),
                }
            };
            if let Some(lines) = dump.as_deref_mut() {
                for r in banks_sel.positives.iter().chain(&banks_sel.negatives) {
                    let line = serde_json::json!({
                        "anchor_batch_index": i,
                        "role": r.candidate.role,
                        "route": r.candidate.route,
                        "donor_modality": r.candidate.donor_modality,
                        "donor_index": r.candidate.donor_index,
                        "replaced_slots": r.candidate.replaced_slots,
                        "entropy_gap": r.entropy_gap,
                        "pool_position": r.pool_position,
                    });
                    lines.push(line.to_string());
                }
            }
            selected.push(banks_sel);
        }

        // Contrastive loss over concatenated part vectors.
        let pos_concats: Vec<Vec<Vec<f64>>> = selected
            .iter()
            .map(|s| s.positives.iter().map(|r| r.candidate.parts.concat()).collect())
            .collect();
        let neg_concats: Vec<Vec<Vec<f64>>> = selected
            .iter()
            .map(|s| s.negatives.iter().map(|r| r.candidate.parts.concat()).collect())
            .collect();
        let anchors: Vec<ContrastiveAnchor<'_>> = (0..n)
            .map(|i| ContrastiveAnchor {
                anchor: pcs[i],
                positives: pos_concats[i].iter().map(|v| v.as_slice()).collect(),
                negatives: neg_concats[i].iter().map(|v| v.as_slice()).collect(),
            })
            .collect();
        let (l_cont, cgrads) = contrastive_loss(&anchors, config.loss.temperature)?;
        breakdown.cont = l_cont;
        diag.skipped_anchors += cgrads.skipped_anchors as u64;

        // Route candidate gradients back through mix provenance.
        let route_candidate = |dpc: &mut Vec<Vec<f64>>,
                                   anchor_batch: usize,
                                   candidate: &MixedSample,
                                   grad: &[f64]| {
            let donor_batch = bank_to_batch[candidate.donor_modality.index()][candidate.donor_index];
            for k in 0..num_parts {
                let slice = &grad[k * cf..(k + 1) * cf];
                match candidate.replaced_slots.iter().find(|&&(u, _)| u == k) {
                    Some(&(_, h)) => {
                        add_scaled(&mut dpc[donor_batch][h * cf..(h + 1) * cf], slice, weights.lambda_cont);
                    }
                    None => {
                        add_scaled(&mut dpc[anchor_batch][k * cf..(k + 1) * cf], slice, weights.lambda_cont);
                    }
                }
            }
        };
        for i in 0..n {
            add_scaled(&mut dpc[i], &cgrads.d_anchor[i], weights.lambda_cont);
            for (r, g) in selected[i].positives.iter().zip(&cgrads.d_positives[i]) {
                route_candidate(&mut dpc, i, &r.candidate, g);
            }
            for (r, g) in selected[i].negatives.iter().zip(&cgrads.d_negatives[i]) {
                route_candidate(&mut dpc, i, &r.candidate, g);
            }
        }
    }

    // --- Backward through the encoder for every batch image.
    for i in 0..n {
        let d_global = dd[i][..cf].to_vec();
        let mut d_parts = dd[i][cf..].to_vec();
        add_scaled(&mut d_parts, &dpc[i], 1.0);
        if d_global.iter().all(|&v| v == 0.0) && d_parts.iter().all(|&v| v == 0.0) {
            continue;
        }
        if !d_global.iter().chain(&d_parts).all(|v| v.is_finite()) {
            return Err(Error::NumericFailure("non-finite descriptor gradient".into()));
        }
        backward_image(&dims, params, layout, images[i], &fwds[i], &d_parts, &d_global, &mut grads);
    }

    let total = breakdown.total(&config.loss.weights());
    if !total.is_finite() {
        return Err(Error::NumericFailure(format!("non-finite loss {total}")));
    }
    Ok(StepOutcome { breakdown, grads, diag })
}

/// Learning rate in force at a 1-based epoch.
pub fn lr_at_epoch(config: &ExperimentConfig, epoch: usize) -> f64 {
    let hits = config.optim.decay_epochs.iter().filter(|&&d| d <= epoch).count() as i32;
    config.optim.learning_rate * config.optim.decay_factor.powi(hits)
}

pub fn steps_per_epoch(config: &ExperimentConfig) -> usize {
    let per_batch = config.batch.identities_per_batch * config.batch.images_per_identity;
    let total = config.dataset.num_train_ids * config.dataset.images_per_id_per_modality * 2;
    (total / per_batch).max(1)
}

/// Trains on a prepared split. `run_seed` drives the init/batch/mix/protocol
/// streams; the dataset itself is the caller's (shared across sweep runs).
pub fn train_on_split(
    config: &ExperimentConfig,
    split: &DatasetSplit,
    run_seed: u64,
    mut dump: Option<&mut Vec<String>>,
) -> Result<(ModelState, RunRecord)> {
    config.validate()?;
    let started = Instant::now();
    let tree = SeedTree::new(run_seed);
    let dims = crate::encoder::ModelDims {
        channels: config.dataset.channels,
        feat_dim: config.model.feat_dim,
        num_parts: config.model.num_parts,
        num_ids: config.dataset.num_train_ids,
    };
    let mut model = ModelState::init(dims, tree.child("init").seed());
    let mut adam = AdamState::new(model.layout.total, config.optim.learning_rate);
    let steps = steps_per_epoch(config);
    let mut diagnostics = Diagnostics::default();
    let mut epochs = Vec::with_capacity(config.schedule.total_epochs);

    for epoch in 1..=config.schedule.total_epochs {
        let phase = if epoch <= config.schedule.warmup_epochs { Phase::Warmup } else { Phase::Full };
        adam.lr = lr_at_epoch(config, epoch);
        let mut sums = LossBreakdown::default();
        let mut total_sum = 0.0;
        for step in 0..steps {
            let step_id = ((epoch - 1) * steps + step) as u64;
            let batch_seed = tree.child("batch").index(step_id).seed();
            let mix_seed = tree.child("mix").index(step_id).seed();
            let batch = sample_minibatch(
                split,
                config.batch.identities_per_batch,
                config.batch.images_per_identity,
                batch_seed,
            )?;
            let outcome = step_loss_and_grads(
                config,
                &model,
                split,
                &batch,
                phase,
                mix_seed,
                &model.params,
                dump.as_deref_mut(),
            )
            .map_err(|e| match e {
                Error::NumericFailure(msg) => {
                    Error::NumericFailure(format!("epoch {epoch} step {step}: {msg}"))
                }
                other => other,
            })?;

            diagnostics.steps += 1;
            diagnostics.empty_positive_pools += outcome.diag.empty_positive_pools;
            diagnostics.empty_negative_pools += outcome.diag.empty_negative_pools;
            diagnostics.skipped_anchors += outcome.diag.skipped_anchors;
            if phase == Phase::Warmup && outcome.diag.aid_cont_evaluated {
                diagnostics.warmup_aid_cont_evaluations += 1;
            }
            if outcome.diag.center_single_identity {
                diagnostics.center_single_identity_warnings += 1;
            }

            adam_step(&mut model.params, &outcome.grads, &mut adam)?;
            model.update_mean_classifiers(config.optim.ema_momentum)?;

            sums.id += outcome.breakdown.id;
            sums.cc += outcome.breakdown.cc;
            sums.sid += outcome.breakdown.sid;
            sums.ml += outcome.breakdown.ml;
            sums.aid += outcome.breakdown.aid;
            sums.cont += outcome.breakdown.cont;
            total_sum += outcome.breakdown.total(&config.loss.weights());
        }
        let inv = 1.0 / steps as f64;
        epochs.push(EpochRecord {
            epoch,
            id: sums.id * inv,
            cc: sums.cc * inv,
            sid: sums.sid * inv,
            ml: sums.ml * inv,
            aid: sums.aid * inv,
            cont: sums.cont * inv,
            total: total_sum * inv,
            lr: adam.lr,
        });
    }

    let protocol_seed = tree.child("protocol").seed();
    let reports = RetrievalProtocol::defaults(DEFAULT_RANKS.to_vec())
        .iter()
        .map(|p| run_protocol(&model, split, p, protocol_seed))
        .collect::<Result<Vec<MetricsReport>>>()?;

    let record = RunRecord {
        config_hash: config.hash(),
        run_seed,
        epochs,
        reports,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        diagnostics,
    };
    Ok((model, record))
}

/// `losses.csv`: one row per epoch with the component means.
pub fn losses_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L_id,L_cc,L_sid,L_ML,L_aid,L_cont,total\n");
    for e in epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch, e.id, e.cc, e.sid, e.ml, e.aid, e.cont, e.total
        ));
    }
    out
}

pub fn write_losses_csv(path: &std::path::Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(losses_csv(epochs).as_bytes())?;
    Ok(())
}

//! Training objectives and their analytic gradients.
//!
//! Cross-entropy losses (shared, part, modality-specific), the KL-based
//! modality learning loss against frozen mean classifiers, the center
//! cluster loss, and the contrastive regularization over mined banks. Every
//! gradient here is derived by hand and pinned by finite-difference tests;
//! the trainer composes them into the weighted total.

use crate::data::Modality;
use crate::encoder::AffineParams;
use crate::error::{Error, Result};
use crate::numerics::{softmax, PROB_FLOOR};

/// Weights of the four modulated loss terms; the ID and center-cluster
/// terms always enter with weight 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sid: f64,
    pub lambda_ml: f64,
    pub lambda_aid: f64,
    pub lambda_cont: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_sid: 0.5, lambda_ml: 2.5, lambda_aid: 0.5, lambda_cont: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sid", self.lambda_sid),
            ("lambda_ml", self.lambda_ml),
            ("lambda_aid", self.lambda_aid),
            ("lambda_cont", self.lambda_cont),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    field: format!("loss.{name}"),
                    message: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Per-epoch component values; the weighted total is derived, never stored.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub id: f64,
    pub cc: f64,
    pub sid: f64,
    pub ml: f64,
    pub aid: f64,
    pub cont: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.id
            + self.cc
            + w.lambda_sid * self.sid
            + w.lambda_ml * self.ml
            + w.lambda_aid * self.aid
            + w.lambda_cont * self.cont
    }
}

/// Gradient of one affine map's parameters.
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl AffineGrads {
    pub fn zeros(c: &AffineParams) -> Self {
        AffineGrads { dw: vec![0.0; c.w.len()], db: vec![0.0; c.b.len()] }
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// One softmax cross-entropy term with coefficient `coeff`: adds
/// coeff·(−ln q_y) to the loss and backpropagates into the classifier and
/// the input vector.
fn cross_entropy_term(
    classifier: &AffineParams,
    input: &[f64],
    label: usize,
    coeff: f64,
    grads: &mut AffineGrads,
    d_input: &mut [f64],
) -> Result<f64> {
    check_label(label, classifier.out_dim)?;
    let q = softmax(&classifier.forward(input)?)?;
    let loss = -coeff * q[label].max(PROB_FLOOR).ln();
    let mut dlogits = q;
    dlogits[label] -= 1.0;
    for g in &mut dlogits {
        *g *= coeff;
    }
    crate::encoder::affine_backward(
        &classifier.w,
        input,
        &dlogits,
        &mut grads.dw,
        &mut grads.db,
        d_input,
    );
    Ok(loss)
}

/// Part ID loss: mean cross-entropy of the part classifier over all N
/// samples on the concatenated part vector.
pub fn part_id_loss(
    part_concats: &[&[f64]],
    labels: &[usize],
    classifier: &AffineParams,
) -> Result<(f64, Vec<Vec<f64>>, AffineGrads)> {
    let n = part_concats.len();
    if n == 0 {
        return Err(Error::Domain("part ID loss over an empty batch".into()));
    }
    let coeff = 1.0 / n as f64;
    let mut grads = AffineGrads::zeros(classifier);
    let mut d_inputs = vec![vec![0.0; classifier.in_dim]; n];
    let mut loss = 0.0;
    for i in 0..n {
        loss +=
            cross_entropy_term(classifier, part_concats[i], labels[i], coeff, &mut grads, &mut d_inputs[i])?;
    }
    Ok((loss, d_inputs, grads))
}

/// ID loss on person descriptors through the shared classifier, averaged
/// per modality and summed across the two modality terms.
pub fn id_loss(
    descriptors: &[&[f64]],
    labels: &[usize],
    modalities: &[Modality],
    classifier: &AffineParams,
) -> Result<(f64, Vec<Vec<f64>>, AffineGrads)> {
    let n = descriptors.len();
    let n_vis = modalities.iter().filter(|m| **m == Modality::Visible).count();
    let n_ir = n - n_vis;
    let mut grads = AffineGrads::zeros(classifier);
    let mut d_inputs = vec![vec![0.0; classifier.in_dim]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let count = if modalities[i] == Modality::Visible { n_vis } else { n_ir };
        let coeff = 1.0 / count as f64;
        loss +=
            cross_entropy_term(classifier, descriptors[i], labels[i], coeff, &mut grads, &mut d_inputs[i])?;
    }
    Ok((loss, d_inputs, grads))
}

/// Modality-specific ID loss: visible samples through C_v, infrared through
/// C_r, each term averaged over its own modality.
pub fn modality_specific_id_loss(
    descriptors: &[&[f64]],
    labels: &[usize],
    modalities: &[Modality],
    vis: &AffineParams,
    ir: &AffineParams,
) -> Result<(f64, Vec<Vec<f64>>, AffineGrads, AffineGrads)> {
    let n = descriptors.len();
    let n_vis = modalities.iter().filter(|m| **m == Modality::Visible).count();
    let n_ir = n - n_vis;
    let mut vis_grads = AffineGrads::zeros(vis);
    let mut ir_grads = AffineGrads::zeros(ir);
    let mut d_inputs = vec![vec![0.0; vis.in_dim]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let (classifier, grads, count) = match modalities[i] {
            Modality::Visible => (vis, &mut vis_grads, n_vis),
            Modality::Infrared => (ir, &mut ir_grads, n_ir),
        };
        let coeff = 1.0 / count as f64;
        loss +=
            cross_entropy_term(classifier, descriptors[i], labels[i], coeff, grads, &mut d_inputs[i])?;
    }
    Ok((loss, d_inputs, vis_grads, ir_grads))
}

/// Modality learning loss: KL between each live modality classifier's
/// output and the opposite mean classifier's output, summed over samples.
///
/// The mean classifiers are frozen — their parameters get no gradient — but
/// the descriptor feeds both branches, so its gradient includes the path
/// through the mean classifier.
pub fn modality_learning_loss(
    descriptors: &[&[f64]],
    modalities: &[Modality],
    live_vis: &AffineParams,
    live_ir: &AffineParams,
    mean_vis: &AffineParams,
    mean_ir: &AffineParams,
) -> Result<(f64, Vec<Vec<f64>>, AffineGrads, AffineGrads)> {
    let n = descriptors.len();
    let mut vis_grads = AffineGrads::zeros(live_vis);
    let mut ir_grads = AffineGrads::zeros(live_ir);
    let mut d_inputs = vec![vec![0.0; live_vis.in_dim]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let (live, mean, grads) = match modalities[i] {
            Modality::Visible => (live_vis, mean_ir, &mut vis_grads),
            Modality::Infrared => (live_ir, mean_vis, &mut ir_grads),
        };
        let d = descriptors[i];
        let p = softmax(&live.forward(d)?)?;
        let q = softmax(&mean.forward(d)?)?;
        let mut kl = 0.0;
        for (pc, qc) in p.iter().zip(&q) {
            if *pc > 0.0 {
                kl += pc * (pc.max(PROB_FLOOR).ln() - qc.max(PROB_FLOOR).ln());
            }
        }
        loss += kl;
        // dKL/dℓ_c = p_c[(ln p_c − ln q_c) − KL] through the live logits,
        // dKL/dℓ̃ = q − p through the frozen branch (into d only).
        let mut dlive = vec![0.0; p.len()];
        let mut dmean = vec![0.0; p.len()];
        for c in 0..p.len() {
            dlive[c] = p[c] * ((p[c].max(PROB_FLOOR).ln() - q[c].max(PROB_FLOOR).ln()) - kl);
            dmean[c] = q[c] - p[c];
        }
        crate::encoder::affine_backward(&live.w, d, &dlive, &mut grads.dw, &mut grads.db, &mut d_inputs[i]);
        // Frozen branch: discard parameter gradients, keep the input path.
        let mut sink = AffineGrads::zeros(mean);
        crate::encoder::affine_backward(&mean.w, d, &dmean, &mut sink.dw, &mut sink.db, &mut d_inputs[i]);
    }
    Ok((loss, d_inputs, vis_grads, ir_grads))
}

/// Center cluster loss: pull descriptors toward their in-batch identity
/// centers, push center pairs at least `rho` apart.
///
/// Centers are batch means, so the pull gradient includes the dependence of
/// each center on its members. Returns a warning flag when the batch holds a
/// single identity (the hinge term is then undefined and skipped).
pub fn center_cluster_loss(
    descriptors: &[&[f64]],
    labels: &[usize],
    rho: f64,
) -> Result<(f64, Vec<Vec<f64>>, bool)> {
    let n = descriptors.len();
    if n == 0 {
        return Err(Error::Domain("center cluster loss over an empty batch".into()));
    }
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::Domain(format!("margin rho must be finite and ≥ 0, got {rho}")));
    }
    let dim = descriptors[0].len();
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let p = ids.len();
    let id_slot = |y: usize| ids.binary_search(&y).expect("label present");

    // Centers.
    let mut centers = vec![vec![0.0; dim]; p];
    let mut counts = vec![0usize; p];
    for (d, &y) in descriptors.iter().zip(labels) {
        let s = id_slot(y);
        counts[s] += 1;
        for (acc, &v) in centers[s].iter_mut().zip(*d) {
            *acc += v;
        }
    }
    for (center, &count) in centers.iter_mut().zip(&counts) {
        for v in center.iter_mut() {
            *v /= count as f64;
        }
    }

    let mut d_inputs = vec![vec![0.0; dim]; n];
    let mut d_centers = vec![vec![0.0; dim]; p];

    // Pull term: (1/N) Σ ‖d_i − z_{y_i}‖, subgradient 0 at zero distance.
    let inv_n = 1.0 / n as f64;
    let mut pull = 0.0;
    let mut unit_sums = vec![vec![0.0; dim]; p];
    let mut units = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let s = id_slot(labels[i]);
        let mut norm2 = 0.0;
        for c in 0..dim {
            let r = descriptors[i][c] - centers[s][c];
            units[i][c] = r;
            norm2 += r * r;
        }
        let norm = norm2.sqrt();
        pull += norm * inv_n;
        if norm > 0.0 {
            for c in 0..dim {
                units[i][c] /= norm;
                unit_sums[s][c] += units[i][c];
            }
        } else {
            units[i].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for i in 0..n {
        let s = id_slot(labels[i]);
        let inv_count = 1.0 / counts[s] as f64;
        for c in 0..dim {
            d_inputs[i][c] += inv_n * (units[i][c] - inv_count * unit_sums[s][c]);
        }
    }

    // Hinge term over center pairs.
    let mut hinge = 0.0;
    let single_identity = p < 2;
    if !single_identity {
        let coeff = 2.0 / (p * (p - 1)) as f64;
        for k in 0..p {
            for l in (k + 1)..p {
                let mut dist2 = 0.0;
                for c in 0..dim {
                    let diff = centers[k][c] - centers[l][c];
                    dist2 += diff * diff;
                }
                let dist = dist2.sqrt();
                let margin = rho - dist;
                if margin > 0.0 {
                    hinge += coeff * margin;
                    if dist > 0.0 {
                        for c in 0..dim {
                            let diff = (centers[k][c] - centers[l][c]) / dist;
                            d_centers[k][c] -= coeff * diff;
                            d_centers[l][c] += coeff * diff;
                        }
                    }
                }
            }
        }
        for i in 0..n {
            let s = id_slot(labels[i]);
            let inv_count = 1.0 / counts[s] as f64;
            for c in 0..dim {
                d_inputs[i][c] += d_centers[s][c] * inv_count;
            }
        }
    }

    Ok((pull + hinge, d_inputs, single_identity))
}

/// One anchor's view of the contrastive objective: its own part vector and
/// the part vectors of its mined positives and negatives.
pub struct ContrastiveAnchor<'a> {
    pub anchor: &'a [f64],
    pub positives: Vec<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

/// Gradients from [`contrastive_loss`], aligned with its input lists.
#[derive(Debug, Clone)]
pub struct ContrastiveGrads {
    pub d_anchor: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<Vec<f64>>>,
    pub d_negatives: Vec<Vec<Vec<f64>>>,
    /// Anchors skipped for having no positives.
    pub skipped_anchors: usize,
}

/// One anchor's loss term from raw similarity lists:
/// −ln(Σ_j e^{s⁺_j/τ} / (Σ_j e^{s⁺_j/τ} + Σ_k e^{s⁻_k/τ})), stabilized by
/// max-subtraction.
pub fn contrastive_term(s_pos: &[f64], s_neg: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if s_pos.is_empty() {
        return Err(Error::Domain("contrastive term needs at least one positive".into()));
    }
    let max_sim =
        s_pos.iter().chain(s_neg).map(|s| s / tau).fold(f64::NEG_INFINITY, f64::max);
    let sum_pos: f64 = s_pos.iter().map(|s| (s / tau - max_sim).exp()).sum();
    let sum_all: f64 = sum_pos + s_neg.iter().map(|s| (s / tau - max_sim).exp()).sum::<f64>();
    Ok(sum_all.ln() - sum_pos.ln())
}

/// InfoNCE-style loss over cosine similarities of concatenated part
/// vectors, summed over anchors. Anchors with no positives contribute
/// nothing and are counted.
pub fn contrastive_loss(
    anchors: &[ContrastiveAnchor<'_>],
    tau: f64,
) -> Result<(f64, ContrastiveGrads)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let mut total = 0.0;
    let mut grads = ContrastiveGrads {
        d_anchor: Vec::with_capacity(anchors.len()),
        d_positives: Vec::with_capacity(anchors.len()),
        d_negatives: Vec::with_capacity(anchors.len()),
        skipped_anchors: 0,
    };

    for item in anchors {
        let dim = item.anchor.len();
        let mut d_anchor = vec![0.0; dim];
        let mut d_pos: Vec<Vec<f64>> = item.positives.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut d_neg: Vec<Vec<f64>> = item.negatives.iter().map(|p| vec![0.0; p.len()]).collect();

        if item.positives.is_empty() {
            grads.skipped_anchors += 1;
            grads.d_anchor.push(d_anchor);
            grads.d_positives.push(d_pos);
            grads.d_negatives.push(d_neg);
            continue;
        }

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let na = norm(item.anchor);
        if na == 0.0 {
            return Err(Error::DegenerateInput("zero-norm anchor descriptor".into()));
        }
        let cos_and_norm = |v: &[f64]| -> Result<(f64, f64)> {
            let nv = norm(v);
            if nv == 0.0 {
                return Err(Error::DegenerateInput("zero-norm mixed descriptor".into()));
            }
            let dot: f64 = item.anchor.iter().zip(v).map(|(a, b)| a * b).sum();
            Ok((dot / (na * nv), nv))
        };

        let pos: Vec<(f64, f64)> =
            item.positives.iter().map(|v| cos_and_norm(v)).collect::<Result<_>>()?;
        let neg: Vec<(f64, f64)> =
            item.negatives.iter().map(|v| cos_and_norm(v)).collect::<Result<_>>()?;

        // Stabilized log-sum-exp split into positive and full sums.
        let max_sim = pos
            .iter()
            .chain(&neg)
            .map(|(c, _)| c / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let exp_pos: Vec<f64> = pos.iter().map(|(c, _)| (c / tau - max_sim).exp()).collect();
        let exp_neg: Vec<f64> = neg.iter().map(|(c, _)| (c / tau - max_sim).exp()).collect();
        let sum_pos: f64 = exp_pos.iter().sum();
        let sum_all: f64 = sum_pos + exp_neg.iter().sum::<f64>();
        total += sum_all.ln() - sum_pos.ln();

        // d loss / d sim, then cosine backward into both vectors.
        let mut backprop = |v: &[f64], nv: f64, cos: f64, dsim: f64, dv: &mut [f64]| {
            let scale_pair = dsim / (na * nv);
            let scale_anchor = dsim * cos / (na * na);
            let scale_v = dsim * cos / (nv * nv);
            for c in 0..dim {
                d_anchor[c] += scale_pair * v[c] - scale_anchor * item.anchor[c];
                dv[c] += scale_pair * item.anchor[c] - scale_v * v[c];
            }
        };
        for (j, (cos, nv)) in pos.iter().enumerate() {
            let dsim = (exp_pos[j] / sum_all - exp_pos[j] / sum_pos) / tau;
            backprop(item.positives[j], *nv, *cos, dsim, &mut d_pos[j]);
        }
        for (k, (cos, nv)) in neg.iter().enumerate() {
            let dsim = (exp_neg[k] / sum_all) / tau;
            backprop(item.negatives[k], *nv, *cos, dsim, &mut d_neg[k]);
        }

        grads.d_anchor.push(d_anchor);
        grads.d_positives.push(d_pos);
        grads.d_negatives.push(d_neg);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_gradient_check;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn random_classifier(in_dim: usize, out_dim: usize, seed: u64) -> AffineParams {
        let mut rng = SeedTree::new(seed).rng();
        AffineParams {
            w: (0..in_dim * out_dim).map(|_| rng.gen_range(-0.8..0.8)).collect(),
            b: (0..out_dim).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            in_dim,
            out_dim,
        }
    }

    fn random_vecs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeedTree::new(seed).rng();
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    /// Packs descriptors + classifier into one flat vector for fd checks.
    fn pack(descs: &[Vec<f64>], c: &AffineParams) -> Vec<f64> {
        let mut flat = Vec::new();
        for d in descs {
            flat.extend_from_slice(d);
        }
        flat.extend_from_slice(&c.w);
        flat.extend_from_slice(&c.b);
        flat
    }

    fn unpack(flat: &[f64], n: usize, dim: usize, c: &AffineParams) -> (Vec<Vec<f64>>, AffineParams) {
        let descs: Vec<Vec<f64>> = (0..n).map(|i| flat[i * dim..(i + 1) * dim].to_vec()).collect();
        let at = n * dim;
        let mut cl = c.clone();
        cl.w.copy_from_slice(&flat[at..at + c.w.len()]);
        cl.b.copy_from_slice(&flat[at + c.w.len()..]);
        (descs, cl)
    }

    #[test]
    fn part_id_perfect_prediction_is_zero() {
        // A huge correct logit makes −ln q_y vanish.
        let c = AffineParams { w: vec![60.0, 0.0], b: vec![0.0, 0.0], in_dim: 1, out_dim: 2 };
        let x = [1.0];
        let inputs: Vec<&[f64]> = vec![&x];
        let (loss, _, _) = part_id_loss(&inputs, &[0], &c).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn part_id_uniform_prediction_is_ln_c() {
        let c = AffineParams::zeros(3, 5);
        let x = [0.3, -0.2, 0.9];
        let inputs: Vec<&[f64]> = vec![&x];
        let (loss, _, _) = part_id_loss(&inputs, &[2], &c).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn part_id_label_out_of_range() {
        let c = AffineParams::zeros(2, 3);
        let x = [0.1, 0.2];
        let inputs: Vec<&[f64]> = vec![&x];
        assert!(part_id_loss(&inputs, &[3], &c).is_err());
    }

    #[test]
    fn part_id_matches_naive_cross_entropy_and_fd() {
        let (n, dim, classes) = (4, 6, 5);
        let descs = random_vecs(n, dim, 1);
        let classifier = random_classifier(dim, classes, 2);
        let labels = [0usize, 3, 1, 4];

        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (loss, d_in, grads) = part_id_loss(&inputs, &labels, &classifier).unwrap();

        // Independent evaluation.
        let mut expect = 0.0;
        for i in 0..n {
            let q = softmax(&classifier.forward(&descs[i]).unwrap()).unwrap();
            expect -= q[labels[i]].ln() / n as f64;
        }
        assert!((loss - expect).abs() < 1e-12);

        // fd over descriptors + classifier.
        let flat = pack(&descs, &classifier);
        let mut analytic = Vec::new();
        for g in &d_in {
            analytic.extend_from_slice(g);
        }
        analytic.extend_from_slice(&grads.dw);
        analytic.extend_from_slice(&grads.db);
        let f = |p: &[f64]| {
            let (ds, cl) = unpack(p, n, dim, &classifier);
            let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
            Ok(part_id_loss(&inputs, &labels, &cl)?.0)
        };
        let err = fd_gradient_check(f, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-7, "fd error {err}");
    }

    fn mods(n: usize) -> Vec<Modality> {
        (0..n).map(|i| if i % 2 == 0 { Modality::Visible } else { Modality::Infrared }).collect()
    }

    #[test]
    fn id_loss_uniform_is_two_ln_c() {
        let c = AffineParams::zeros(2, 7);
        let descs = random_vecs(4, 2, 3);
        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (loss, _, _) = id_loss(&inputs, &[0, 1, 2, 3], &mods(4), &c).unwrap();
        assert!((loss - 2.0 * 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn id_loss_fd() {
        let (n, dim, classes) = (4, 5, 4);
        let descs = random_vecs(n, dim, 5);
        let classifier = random_classifier(dim, classes, 6);
        let labels = [1usize, 0, 3, 2];
        let modalities = mods(n);

        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (_, d_in, grads) = id_loss(&inputs, &labels, &modalities, &classifier).unwrap();

        let flat = pack(&descs, &classifier);
        let mut analytic = Vec::new();
        for g in &d_in {
            analytic.extend_from_slice(g);
        }
        analytic.extend_from_slice(&grads.dw);
        analytic.extend_from_slice(&grads.db);
        let f = |p: &[f64]| {
            let (ds, cl) = unpack(p, n, dim, &classifier);
            let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
            Ok(id_loss(&inputs, &labels, &modalities, &cl)?.0)
        };
        let err = fd_gradient_check(f, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-7, "fd error {err}");
    }

    #[test]
    fn modality_specific_fd() {
        let (n, dim, classes) = (4, 5, 4);
        let descs = random_vecs(n, dim, 7);
        let vis = random_classifier(dim, classes, 8);
        let ir = random_classifier(dim, classes, 9);
        let labels = [1usize, 0, 3, 2];
        let modalities = mods(n);

        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (loss, d_in, vg, ig) =
            modality_specific_id_loss(&inputs, &labels, &modalities, &vis, &ir).unwrap();
        assert!(loss > 0.0);

        // fd over descriptors + both classifiers.
        let mut flat = Vec::new();
        for d in &descs {
            flat.extend_from_slice(d);
        }
        flat.extend_from_slice(&vis.w);
        flat.extend_from_slice(&vis.b);
        flat.extend_from_slice(&ir.w);
        flat.extend_from_slice(&ir.b);
        let mut analytic = Vec::new();
        for g in &d_in {
            analytic.extend_from_slice(g);
        }
        analytic.extend_from_slice(&vg.dw);
        analytic.extend_from_slice(&vg.db);
        analytic.extend_from_slice(&ig.dw);
        analytic.extend_from_slice(&ig.db);
        let f = |p: &[f64]| {
            let ds: Vec<Vec<f64>> = (0..n).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
            let mut at = n * dim;
            let mut v2 = vis.clone();
            v2.w.copy_from_slice(&p[at..at + vis.w.len()]);
            at += vis.w.len();
            v2.b.copy_from_slice(&p[at..at + vis.b.len()]);
            at += vis.b.len();
            let mut i2 = ir.clone();
            i2.w.copy_from_slice(&p[at..at + ir.w.len()]);
            at += ir.w.len();
            i2.b.copy_from_slice(&p[at..at + ir.b.len()]);
            let _ = at;
            let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
            Ok(modality_specific_id_loss(&inputs, &labels, &modalities, &v2, &i2)?.0)
        };
        let err = fd_gradient_check(f, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-7, "fd error {err}");
    }

    #[test]
    fn modality_learning_zero_when_mean_equals_live() {
        let dim = 4;
        let live_vis = random_classifier(dim, 3, 10);
        let live_ir = random_classifier(dim, 3, 11);
        // Mean classifiers equal to the opposite-modality live ones make
        // each KL(p‖q) compare identical distributions.
        let descs = random_vecs(3, dim, 12);
        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (loss, _, _, _) = modality_learning_loss(
            &inputs,
            &mods(3),
            &live_vis,
            &live_ir,
            &live_ir, // mean_vis := live_ir, used against infrared samples
            &live_vis, // mean_ir := live_vis, used against visible samples
        )
        .unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn modality_learning_closed_form_ln2() {
        // Visible sample: live output ≈ [1,0], frozen teacher output
        // exactly [0.5, 0.5] → KL = ln 2.
        let live_vis = AffineParams { w: vec![80.0, 0.0], b: vec![0.0, 0.0], in_dim: 1, out_dim: 2 };
        let live_ir = AffineParams::zeros(1, 2);
        let mean = AffineParams::zeros(1, 2);
        let x = [1.0];
        let inputs: Vec<&[f64]> = vec![&x];
        let (loss, _, _, _) = modality_learning_loss(
            &inputs,
            &[Modality::Visible],
            &live_vis,
            &live_ir,
            &mean,
            &mean,
        )
        .unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn modality_learning_fd_and_frozen_mean() {
        let (n, dim, classes) = (4, 5, 4);
        let descs = random_vecs(n, dim, 13);
        let live_vis = random_classifier(dim, classes, 14);
        let live_ir = random_classifier(dim, classes, 15);
        let mean_vis = random_classifier(dim, classes, 16);
        let mean_ir = random_classifier(dim, classes, 17);
        let modalities = mods(n);

        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (loss, d_in, vg, ig) =
            modality_learning_loss(&inputs, &modalities, &live_vis, &live_ir, &mean_vis, &mean_ir)
                .unwrap();
        assert!(loss >= 0.0);

        // fd over descriptors + live classifiers (means are frozen inputs).
        let mut flat = Vec::new();
        for d in &descs {
            flat.extend_from_slice(d);
        }
        flat.extend_from_slice(&live_vis.w);
        flat.extend_from_slice(&live_vis.b);
        flat.extend_from_slice(&live_ir.w);
        flat.extend_from_slice(&live_ir.b);
        let mut analytic = Vec::new();
        for g in &d_in {
            analytic.extend_from_slice(g);
        }
        analytic.extend_from_slice(&vg.dw);
        analytic.extend_from_slice(&vg.db);
        analytic.extend_from_slice(&ig.dw);
        analytic.extend_from_slice(&ig.db);
        let f = |p: &[f64]| {
            let ds: Vec<Vec<f64>> = (0..n).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
            let mut at = n * dim;
            let mut v2 = live_vis.clone();
            let (vw, vb) = (v2.w.len(), v2.b.len());
            v2.w.copy_from_slice(&p[at..at + vw]);
            at += vw;
            v2.b.copy_from_slice(&p[at..at + vb]);
            at += vb;
            let mut i2 = live_ir.clone();
            let (iw, ib) = (i2.w.len(), i2.b.len());
            i2.w.copy_from_slice(&p[at..at + iw]);
            at += iw;
            i2.b.copy_from_slice(&p[at..at + ib]);
            let _ = at;
            let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
            Ok(modality_learning_loss(&inputs, &modalities, &v2, &i2, &mean_vis, &mean_ir)?.0)
        };
        let err = fd_gradient_check(f, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-7, "fd error {err}");
    }

    #[test]
    fn center_cluster_zero_at_separated_centers() {
        // Two identities, descriptors exactly at their centers, distance 2 ≥ ρ=1.
        let a = [1.0, 0.0];
        let b = [-1.0, 0.0];
        let inputs: Vec<&[f64]> = vec![&a, &a, &b, &b];
        let (loss, grads, warn) = center_cluster_loss(&inputs, &[0, 0, 1, 1], 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(!warn);
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn center_cluster_hinge_arithmetic() {
        // Centers at distance 0.4 with ρ=1 → hinge = (2/(2·1))·0.6 = 0.6.
        let a = [0.2, 0.0];
        let b = [-0.2, 0.0];
        let inputs: Vec<&[f64]> = vec![&a, &b];
        let (loss, _, _) = center_cluster_loss(&inputs, &[0, 1], 1.0).unwrap();
        assert!((loss - 0.6).abs() < 1e-12);
    }

    #[test]
    fn center_cluster_single_identity_warns() {
        let a = [0.2, 0.3];
        let b = [0.4, 0.1];
        let inputs: Vec<&[f64]> = vec![&a, &b];
        let (loss, _, warn) = center_cluster_loss(&inputs, &[5, 5], 1.0).unwrap();
        assert!(warn);
        assert!(loss > 0.0); // pull term only
    }

    #[test]
    fn center_cluster_fd_away_from_kinks() {
        let (n, dim) = (6, 4);
        let descs = random_vecs(n, dim, 19);
        let labels = [0usize, 0, 1, 1, 2, 2];
        let rho = 1.0;
        let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
        let (_, d_in, _) = center_cluster_loss(&inputs, &labels, rho).unwrap();
        let mut flat = Vec::new();
        for d in &descs {
            flat.extend_from_slice(d);
        }
        let mut analytic = Vec::new();
        for g in &d_in {
            analytic.extend_from_slice(g);
        }
        let f = |p: &[f64]| {
            let ds: Vec<Vec<f64>> = (0..n).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
            let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
            Ok(center_cluster_loss(&inputs, &labels, rho)?.0)
        };
        let err = fd_gradient_check(f, &flat, &analytic, 1e-6).unwrap();
        assert!(err < 1e-6, "fd error {err}");
    }

    #[test]
    fn contrastive_equal_similarities_is_ln2() {
        // U′=1, Q′=1 with s⁺ = s⁻: the same candidate vector serves as
        // positive and negative, so both similarities coincide.
        let anchor = [0.3, 0.8, -0.5];
        let cand = [0.1, -0.4, 0.9];
        let anchors = vec![ContrastiveAnchor {
            anchor: &anchor,
            positives: vec![&cand],
            negatives: vec![&cand],
        }];
        let (loss, _) = contrastive_loss(&anchors, 0.1).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn contrastive_frozen_reference_value() {
        // τ=0.1, s⁺=[0.3, −0.1], s⁻ = k/20 − 0.5 for k=0..19; the loss was
        // frozen from a 40-digit evaluation of ln((A+B)/A).
        // Unit-norm vectors with prescribed cosines against the anchor.
        let anchor = [1.0, 0.0];
        let with_cos = |c: f64| -> Vec<f64> { vec![c, (1.0 - c * c).sqrt()] };
        let pos: Vec<Vec<f64>> = [0.3, -0.1].iter().map(|&c| with_cos(c)).collect();
        let neg: Vec<Vec<f64>> = (0..20).map(|k| with_cos(k as f64 / 20.0 - 0.5)).collect();
        let anchors = vec![ContrastiveAnchor {
            anchor: &anchor,
            positives: pos.iter().map(|v| v.as_slice()).collect(),
            negatives: neg.iter().map(|v| v.as_slice()).collect(),
        }];
        let (loss, _) = contrastive_loss(&anchors, 0.1).unwrap();
        assert!((loss - 2.50019027110742801486).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn contrastive_shift_invariance() {
        // Adding one constant to every similarity of an anchor leaves the
        // term unchanged.
        let mut rng = SeedTree::new(31).rng();
        for _ in 0..50 {
            let s_pos: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s_neg: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let shift: f64 = rng.gen_range(-5.0..5.0);
            let l1 = contrastive_term(&s_pos, &s_neg, 0.1).unwrap();
            let sp: Vec<f64> = s_pos.iter().map(|s| s + shift).collect();
            let sn: Vec<f64> = s_neg.iter().map(|s| s + shift).collect();
            let l2 = contrastive_term(&sp, &sn, 0.1).unwrap();
            assert!((l1 - l2).abs() < 1e-9, "{l1} vs {l2}");
        }
    }

    #[test]
    fn contrastive_loss_consistent_with_term_route() {
        // The vector-based loss equals the similarity-based term computed
        // from independently evaluated cosines.
        use crate::numerics::cosine_similarity;
        let dim = 6;
        let anchor = random_vecs(1, dim, 61).remove(0);
        let pos = random_vecs(2, dim, 62);
        let neg = random_vecs(7, dim, 63);
        let anchors = vec![ContrastiveAnchor {
            anchor: &anchor,
            positives: pos.iter().map(|v| v.as_slice()).collect(),
            negatives: neg.iter().map(|v| v.as_slice()).collect(),
        }];
        let (loss, _) = contrastive_loss(&anchors, 0.1).unwrap();
        let sp: Vec<f64> = pos.iter().map(|v| cosine_similarity(&anchor, v).unwrap()).collect();
        let sn: Vec<f64> = neg.iter().map(|v| cosine_similarity(&anchor, v).unwrap()).collect();
        let expect = contrastive_term(&sp, &sn, 0.1).unwrap();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_monotone_in_similarities() {
        // Raising a positive similarity lowers the loss; raising a negative
        // similarity raises it.
        let anchor = [1.0, 0.0];
        let with_cos = |c: f64| -> Vec<f64> { vec![c, (1.0 - c * c).sqrt()] };
        let base = {
            let pos = vec![with_cos(0.2)];
            let neg = vec![with_cos(0.1)];
            let anchors = vec![ContrastiveAnchor {
                anchor: &anchor,
                positives: pos.iter().map(|v| v.as_slice()).collect(),
                negatives: neg.iter().map(|v| v.as_slice()).collect(),
            }];
            contrastive_loss(&anchors, 0.1).unwrap().0
        };
        let better_pos = {
            let pos = vec![with_cos(0.4)];
            let neg = vec![with_cos(0.1)];
            let anchors = vec![ContrastiveAnchor {
                anchor: &anchor,
                positives: pos.iter().map(|v| v.as_slice()).collect(),
                negatives: neg.iter().map(|v| v.as_slice()).collect(),
            }];
            contrastive_loss(&anchors, 0.1).unwrap().0
        };
        let worse_neg = {
            let pos = vec![with_cos(0.2)];
            let neg = vec![with_cos(0.3)];
            let anchors = vec![ContrastiveAnchor {
                anchor: &anchor,
                positives: pos.iter().map(|v| v.as_slice()).collect(),
                negatives: neg.iter().map(|v| v.as_slice()).collect(),
            }];
            contrastive_loss(&anchors, 0.1).unwrap().0
        };
        assert!(better_pos < base);
        assert!(worse_neg > base);
        assert!(base > 0.0);
    }

    #[test]
    fn contrastive_fd() {
        let dim = 5;
        let anchor_v = random_vecs(1, dim, 41).remove(0);
        let pos = random_vecs(2, dim, 42);
        let neg = random_vecs(4, dim, 43);
        let anchors = vec![ContrastiveAnchor {
            anchor: &anchor_v,
            positives: pos.iter().map(|v| v.as_slice()).collect(),
            negatives: neg.iter().map(|v| v.as_slice()).collect(),
        }];
        let (_, grads) = contrastive_loss(&anchors, 0.1).unwrap();

        let mut flat = anchor_v.clone();
        for v in pos.iter().chain(&neg) {
            flat.extend_from_slice(v);
        }
        let mut analytic = grads.d_anchor[0].clone();
        for g in grads.d_positives[0].iter().chain(&grads.d_negatives[0]) {
            analytic.extend_from_slice(g);
        }
        let f = |p: &[f64]| {
            let a = p[..dim].to_vec();
            let pv: Vec<Vec<f64>> =
                (0..2).map(|i| p[dim * (1 + i)..dim * (2 + i)].to_vec()).collect();
            let nv: Vec<Vec<f64>> =
                (0..4).map(|i| p[dim * (3 + i)..dim * (4 + i)].to_vec()).collect();
            let anchors = vec![ContrastiveAnchor {
                anchor: &a,
                positives: pv.iter().map(|v| v.as_slice()).collect(),
                negatives: nv.iter().map(|v| v.as_slice()).collect(),
            }];
            Ok(contrastive_loss(&anchors, 0.1)?.0)
        };
        let err = fd_gradient_check(f, &flat, &analytic, 1e-6).unwrap();
        assert!(err < 1e-6, "fd error {err}");
    }

    #[test]
    fn contrastive_skips_empty_positive_banks() {
        let anchor = [1.0, 0.0];
        let neg = [0.5, 0.5];
        let anchors = vec![ContrastiveAnchor {
            anchor: &anchor,
            positives: vec![],
            negatives: vec![&neg],
        }];
        let (loss, grads) = contrastive_loss(&anchors, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.skipped_anchors, 1);
    }

    #[test]
    fn contrastive_rejects_bad_temperature() {
        assert!(contrastive_loss(&[], 0.0).is_err());
        assert!(contrastive_loss(&[], -1.0).is_err());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights { lambda_ml: -0.1, ..LossWeights::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn breakdown_total_weighted_sum() {
        let b = LossBreakdown { id: 1.0, cc: 2.0, sid: 3.0, ml: 4.0, aid: 5.0, cont: 6.0 };
        let w = LossWeights::default();
        assert!((b.total(&w) - (1.0 + 2.0 + 1.5 + 10.0 + 2.5 + 3.0)).abs() < 1e-12);
        let zero = LossWeights { lambda_sid: 0.0, lambda_ml: 0.0, lambda_aid: 0.0, lambda_cont: 0.0 };
        assert_eq!(b.total(&zero), 3.0);
    }
}

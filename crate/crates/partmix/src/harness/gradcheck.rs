//! The `gradcheck` suite: finite-difference verification of every
//! hand-derived gradient, from single operations up to the full two-phase
//! total loss.
//!
//! Checks run on a reduced geometry (gradient correctness is
//! dimension-independent) but keep the config's loss weights, temperature,
//! and margin, so the composed total is exactly the trained objective.

use rand::Rng;
use serde::Serialize;

use crate::data::{generate_dataset, sample_minibatch, DatasetSpec};
use crate::encoder::{backward_image, AffineParams, ModelDims, ModelState};
use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Regularizer};
use crate::harness::trainer::{step_loss_and_grads, Phase};
use crate::losses::{
    center_cluster_loss, contrastive_loss, id_loss, modality_learning_loss,
    modality_specific_id_loss, part_id_loss, ContrastiveAnchor,
};
use crate::numerics::fd_gradient_check;
use crate::rng::SeedTree;

pub const FD_STEP: f64 = 1e-5;
pub const FD_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub op: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub trials: usize,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    fn push(&mut self, op: &str, err: f64) {
        match self.entries.iter_mut().find(|e| e.op == op) {
            Some(entry) => {
                entry.max_rel_error = entry.max_rel_error.max(err);
                entry.passed = entry.max_rel_error < self.threshold;
            }
            None => self.entries.push(GradcheckEntry {
                op: op.to_string(),
                max_rel_error: err,
                passed: err < self.threshold,
            }),
        }
    }
}

/// Reporting path for externally supplied checks; the test suite uses this
/// to confirm that a wrong gradient surfaces as a named failure.
pub fn check_custom<F>(
    report: &mut GradcheckReport,
    op: &str,
    f: F,
    params: &[f64],
    analytic: &[f64],
) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let err = fd_gradient_check(f, params, analytic, FD_STEP)?;
    report.push(op, err);
    Ok(())
}

fn reduced_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    let parts = config.model.num_parts.min(6).max(2);
    c.dataset = DatasetSpec {
        num_train_ids: 4,
        num_test_ids: 2,
        images_per_id_per_modality: 2,
        parts_gt: parts,
        attr_dim: 4,
        height: parts * 2,
        width: 4,
        channels: config.dataset.channels,
        ..config.dataset.clone()
    };
    c.model.feat_dim = config.model.feat_dim.min(4);
    c.model.num_parts = parts;
    c.mix.num_mixed_parts = config.mix.num_mixed_parts.clamp(1, parts);
    c.mix.pos_pool_cap = 4;
    c.mix.neg_pool_cap = 8;
    c.mining.num_positives = 2;
    c.mining.num_negatives = 4;
    c.batch.identities_per_batch = 2;
    c.batch.images_per_identity = 4;
    c
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_classifier(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> AffineParams {
    AffineParams {
        w: random_vec(rng, in_dim * out_dim),
        b: random_vec(rng, out_dim),
        in_dim,
        out_dim,
    }
}

/// Runs the full gradient suite. `num_trials = 0` yields an empty passing
/// report.
pub fn run_gradcheck(config: &ExperimentConfig, num_trials: usize) -> Result<GradcheckReport> {
    let mut report = GradcheckReport { threshold: FD_THRESHOLD, trials: num_trials, entries: Vec::new() };
    let reduced = reduced_config(config);
    reduced.validate()?;

    for trial in 0..num_trials {
        let tree = SeedTree::new(0xfd00 + trial as u64);
        let mut rng = tree.child("states").rng();

        // --- encoder chain: embed → detect → pool → descriptor.
        {
            let dims = ModelDims {
                channels: reduced.dataset.channels,
                feat_dim: reduced.model.feat_dim,
                num_parts: reduced.model.num_parts,
                num_ids: reduced.dataset.num_train_ids,
            };
            let state = ModelState::init(dims, tree.child("enc").seed());
            let split = generate_dataset(&reduced.dataset, tree.child("encdata").seed())?;
            let img = &split.train[trial % split.train.len()];
            let coeffs = random_vec(&mut rng, dims.descriptor_len());
            let fwd = state.forward(img)?;
            let mut grads = vec![0.0; state.layout.total];
            backward_image(
                &dims,
                &state.params,
                &state.layout,
                img,
                &fwd,
                &coeffs[dims.feat_dim..],
                &coeffs[..dims.feat_dim],
                &mut grads,
            );
            let f = |p: &[f64]| {
                let fwd = state.forward_from_params(p, img)?;
                Ok(fwd.descriptor.concatenated.iter().zip(&coeffs).map(|(d, c)| d * c).sum())
            };
            let err = fd_gradient_check(f, &state.params, &grads, FD_STEP)?;
            report.push("encoder_forward_backward", err);
        }

        // --- individual losses on random states.
        let dim = 6;
        let classes = 5;
        {
            let descs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, dim)).collect();
            let labels = [0usize, 2, 1, 4];
            let classifier = random_classifier(&mut rng, dim, classes);
            let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
            let (_, d_in, ag) = part_id_loss(&inputs, &labels, &classifier)?;
            let mut flat = Vec::new();
            for d in &descs {
                flat.extend_from_slice(d);
            }
            flat.extend_from_slice(&classifier.w);
            flat.extend_from_slice(&classifier.b);
            let mut analytic = Vec::new();
            for g in &d_in {
                analytic.extend_from_slice(g);
            }
            analytic.extend_from_slice(&ag.dw);
            analytic.extend_from_slice(&ag.db);
            let f = |p: &[f64]| {
                let ds: Vec<Vec<f64>> =
                    (0..4).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
                let mut c2 = classifier.clone();
                let at = 4 * dim;
                let w_len = c2.w.len();
                c2.w.copy_from_slice(&p[at..at + w_len]);
                c2.b.copy_from_slice(&p[at + w_len..]);
                let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
                Ok(part_id_loss(&inputs, &labels, &c2)?.0)
            };
            let err = fd_gradient_check(f, &flat, &analytic, FD_STEP)?;
            report.push("part_id_loss", err);
        }
        {
            use crate::data::Modality;
            let descs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, dim)).collect();
            let labels = [0usize, 2, 1, 4];
            let modalities =
                [Modality::Visible, Modality::Infrared, Modality::Visible, Modality::Infrared];
            let shared = random_classifier(&mut rng, dim, classes);
            let inputs: Vec<&[f64]> = descs.iter().map(|d| d.as_slice()).collect();
            let (_, d_in, ag) = id_loss(&inputs, &labels, &modalities, &shared)?;
            let mut flat = Vec::new();
            for d in &descs {
                flat.extend_from_slice(d);
            }
            let mut analytic = Vec::new();
            for g in &d_in {
                analytic.extend_from_slice(g);
            }
            let f = |p: &[f64]| {
                let ds: Vec<Vec<f64>> =
                    (0..4).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
                let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
                Ok(id_loss(&inputs, &labels, &modalities, &shared)?.0)
            };
            let err = fd_gradient_check(f, &flat, &analytic, FD_STEP)?;
            report.push("id_loss", err);
            let _ = ag;

            let vis = random_classifier(&mut rng, dim, classes);
            let ir = random_classifier(&mut rng, dim, classes);
            let (_, d_in, _, _) =
                modality_specific_id_loss(&inputs, &labels, &modalities, &vis, &ir)?;
            let mut analytic = Vec::new();
            for g in &d_in {
                analytic.extend_from_slice(g);
            }
            let f = |p: &[f64]| {
                let ds: Vec<Vec<f64>> =
                    (0..4).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
                let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
                Ok(modality_specific_id_loss(&inputs, &labels, &modalities, &vis, &ir)?.0)
            };
            let err = fd_gradient_check(f, &flat, &analytic, FD_STEP)?;
            report.push("modality_specific_id_loss", err);

            let mean_vis = random_classifier(&mut rng, dim, classes);
            let mean_ir = random_classifier(&mut rng, dim, classes);
            let (_, d_in, _, _) =
                modality_learning_loss(&inputs, &modalities, &vis, &ir, &mean_vis, &mean_ir)?;
            let mut analytic = Vec::new();
            for g in &d_in {
                analytic.extend_from_slice(g);
            }
            let f = |p: &[f64]| {
                let ds: Vec<Vec<f64>> =
                    (0..4).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
                let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
                Ok(modality_learning_loss(&inputs, &modalities, &vis, &ir, &mean_vis, &mean_ir)?.0)
            };
            let err = fd_gradient_check(f, &flat, &analytic, FD_STEP)?;
            report.push("modality_learning_loss", err);

            let (_, d_in, _) = center_cluster_loss(&inputs, &labels, reduced.loss.center_margin)?;
            let mut analytic = Vec::new();
            for g in &d_in {
                analytic.extend_from_slice(g);
            }
            let f = |p: &[f64]| {
                let ds: Vec<Vec<f64>> =
                    (0..4).map(|i| p[i * dim..(i + 1) * dim].to_vec()).collect();
                let inputs: Vec<&[f64]> = ds.iter().map(|d| d.as_slice()).collect();
                Ok(center_cluster_loss(&inputs, &labels, reduced.loss.center_margin)?.0)
            };
            let err = fd_gradient_check(f, &flat, &analytic, FD_STEP)?;
            report.push("center_cluster_loss", err);
        }
        {
            let anchor = random_vec(&mut rng, dim);
            let pos: Vec<Vec<f64>> = (0..2).map(|_| random_vec(&mut rng, dim)).collect();
            let neg: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, dim)).collect();
            let anchors = vec![ContrastiveAnchor {
                anchor: &anchor,
                positives: pos.iter().map(|v| v.as_slice()).collect(),
                negatives: neg.iter().map(|v| v.as_slice()).collect(),
            }];
            let (_, g) = contrastive_loss(&anchors, reduced.loss.temperature)?;
            let mut flat = anchor.clone();
            for v in pos.iter().chain(&neg) {
                flat.extend_from_slice(v);
            }
            let mut analytic = g.d_anchor[0].clone();
            for gv in g.d_positives[0].iter().chain(&g.d_negatives[0]) {
                analytic.extend_from_slice(gv);
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
                Ok(contrastive_loss(&anchors, reduced.loss.temperature)?.0)
            };
            let err = fd_gradient_check(f, &flat, &analytic, FD_STEP)?;
            report.push("contrastive_loss", err);
        }

        // --- the composed totals on a 2-identity batch.
        for (name, phase, regularizer) in [
            ("total_loss_warmup", Phase::Warmup, Regularizer::Partmix),
            ("total_loss_full_partmix", Phase::Full, Regularizer::Partmix),
        ] {
            let mut c = reduced.clone();
            c.regularizer = regularizer;
            let split = generate_dataset(&c.dataset, tree.child("data").seed())?;
            let dims = ModelDims {
                channels: c.dataset.channels,
                feat_dim: c.model.feat_dim,
                num_parts: c.model.num_parts,
                num_ids: c.dataset.num_train_ids,
            };
            let model = ModelState::init(dims, tree.child("model").seed());
            let batch = sample_minibatch(
                &split,
                c.batch.identities_per_batch,
                c.batch.images_per_identity,
                tree.child("batch").seed(),
            )?;
            let mix_seed = tree.child("mix").seed();
            let outcome =
                step_loss_and_grads(&c, &model, &split, &batch, phase, mix_seed, &model.params, None)?;
            let weights = c.loss.weights();
            let f = |p: &[f64]| {
                let o = step_loss_and_grads(&c, &model, &split, &batch, phase, mix_seed, p, None)?;
                Ok(o.breakdown.total(&weights))
            };
            let err = fd_gradient_check(f, &model.params, &outcome.grads, FD_STEP)?;
            report.push(name, err);
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let config = ExperimentConfig::default();
        let report = run_gradcheck(&config, 2).unwrap();
        assert!(!report.entries.is_empty());
        for e in &report.entries {
            assert!(e.passed, "{} failed with {}", e.op, e.max_rel_error);
        }
    }

    #[test]
    fn zero_trials_is_empty_pass() {
        let report = run_gradcheck(&ExperimentConfig::default(), 0).unwrap();
        assert!(report.entries.is_empty());
        assert!(report.all_passed());
    }

    #[test]
    fn injected_bug_reported_by_name() {
        let mut report =
            GradcheckReport { threshold: FD_THRESHOLD, trials: 1, entries: Vec::new() };
        let theta = [0.4, -0.8, 1.2];
        let wrong: Vec<f64> = theta.iter().map(|v| 2.1 * v).collect();
        check_custom(
            &mut report,
            "deliberately_wrong_quadratic",
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &theta,
            &wrong,
        )
        .unwrap();
        assert!(!report.all_passed());
        let entry = report.entries.iter().find(|e| e.op == "deliberately_wrong_quadratic").unwrap();
        assert!(!entry.passed);
        assert!(entry.max_rel_error > 1e-2);
    }
}

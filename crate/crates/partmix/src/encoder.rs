//! Part-based encoder: per-position embedding, sigmoid part maps, masked
//! average pooling into part descriptors, and the classifier family.
//!
//! The backbone is deliberately shallow — one affine + tanh per spatial
//! position feeding one affine + sigmoid part detector — so every backward
//! pass here is written by hand and checked against finite differences.
//!
//! All trainable parameters live in one flat `Vec<f64>` addressed through
//! [`ParamLayout`]; the EMA-tracked mean classifiers are stored separately
//! and never receive gradient.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PersonImage;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Tensor};
use crate::rng::SeedTree;

/// Fixed sizes of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input channels per pixel.
    pub channels: usize,
    /// Feature channels per position (C_f).
    pub feat_dim: usize,
    /// Number of part maps (M).
    pub num_parts: usize,
    /// Classifier output classes (train identities).
    pub num_ids: usize,
}

impl ModelDims {
    /// Length of the person descriptor d = [g ‖ p(1..M)].
    pub fn descriptor_len(&self) -> usize {
        (self.num_parts + 1) * self.feat_dim
    }

    /// Length of the concatenated part vector (global excluded).
    pub fn part_concat_len(&self) -> usize {
        self.num_parts * self.feat_dim
    }
}

/// Offsets of each trainable block inside the flat parameter vector.
///
/// Declared order (also the `params.bin` block order):
/// embed_w, embed_b, det_w, det_b, shared_w, shared_b, part_w, part_b,
/// vis_w, vis_b, ir_w, ir_b. Affine weights are row-major `in × out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embed_w: Range<usize>,
    pub embed_b: Range<usize>,
    pub det_w: Range<usize>,
    pub det_b: Range<usize>,
    pub shared_w: Range<usize>,
    pub shared_b: Range<usize>,
    pub part_w: Range<usize>,
    pub part_b: Range<usize>,
    pub vis_w: Range<usize>,
    pub vis_b: Range<usize>,
    pub ir_w: Range<usize>,
    pub ir_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(dims: &ModelDims) -> Self {
        let d = dims.descriptor_len();
        let pc = dims.part_concat_len();
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        ParamLayout {
            embed_w: take(dims.channels * dims.feat_dim),
            embed_b: take(dims.feat_dim),
            det_w: take(dims.feat_dim * dims.num_parts),
            det_b: take(dims.num_parts),
            shared_w: take(d * dims.num_ids),
            shared_b: take(dims.num_ids),
            part_w: take(pc * dims.num_ids),
            part_b: take(dims.num_ids),
            vis_w: take(d * dims.num_ids),
            vis_b: take(dims.num_ids),
            ir_w: take(d * dims.num_ids),
            ir_b: take(dims.num_ids),
            total: at,
        }
    }
}

/// A plain affine map y = Wᵀx + b with W stored row-major `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl AffineParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineParams { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} inputs", self.in_dim),
                got: format!("{}", x.len()),
            });
        }
        Ok(affine(&self.w, &self.b, x, self.out_dim))
    }
}

/// logits[o] = Σ_in x[in]·w[in·out_dim + o] + b[o]
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        for (o, &wio) in row.iter().enumerate() {
            out[o] += xi * wio;
        }
    }
    out
}

/// Accumulates dW += x·dlogitsᵀ, db += dlogits, dx += W·dlogits.
pub(crate) fn affine_backward(
    w: &[f64],
    x: &[f64],
    dlogits: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let out_dim = dlogits.len();
    for (o, &g) in dlogits.iter().enumerate() {
        db[o] += g;
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out_dim..(i + 1) * out_dim];
        let drow = &mut dw[i * out_dim..(i + 1) * out_dim];
        let mut acc = 0.0;
        for (o, &g) in dlogits.iter().enumerate() {
            drow[o] += xi * g;
            acc += row[o] * g;
        }
        dx[i] += acc;
    }
}

/// Per-position features, `S × feat_dim` with S = H·W.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
}

/// Per-position part probabilities, `S × num_parts`, entries in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PartMaps {
    pub values: Tensor,
}

/// The M pooled part descriptors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PartDescriptorSet {
    parts: Vec<Vec<f64>>,
}

impl PartDescriptorSet {
    pub fn new(parts: Vec<Vec<f64>>) -> Self {
        PartDescriptorSet { parts }
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn part(&self, k: usize) -> &[f64] {
        &self.parts[k]
    }

    pub fn parts(&self) -> &[Vec<f64>] {
        &self.parts
    }

    pub fn set_part(&mut self, k: usize, values: Vec<f64>) {
        self.parts[k] = values;
    }

    /// Concatenation p(1) ‖ … ‖ p(M).
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parts.len() * self.parts.first().map_or(0, Vec::len));
        for p in &self.parts {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Global descriptor, part descriptors, and their concatenation d = [g ‖ p].
#[derive(Debug, Clone, PartialEq)]
pub struct PersonDescriptor {
    pub global: Vec<f64>,
    pub parts: PartDescriptorSet,
    pub concatenated: Vec<f64>,
}

impl PersonDescriptor {
    /// The part-only slice of the concatenated descriptor.
    pub fn part_concat(&self) -> &[f64] {
        &self.concatenated[self.global.len()..]
    }
}

/// Applies the per-position affine + tanh embedding.
pub fn embed(dims: &ModelDims, embed_w: &[f64], embed_b: &[f64], image: &PersonImage) -> Result<FeatureMap> {
    let shape = image.pixels.shape();
    if shape.len() != 3 || shape[2] != dims.channels {
        return Err(Error::ShapeMismatch {
            expected: format!("H×W×{}", dims.channels),
            got: format!("{shape:?}"),
        });
    }
    let s_total = shape[0] * shape[1];
    let px = image.pixels.data();
    let mut values = Vec::with_capacity(s_total * dims.feat_dim);
    for s in 0..s_total {
        let x = &px[s * dims.channels..(s + 1) * dims.channels];
        let z = affine(embed_w, embed_b, x, dims.feat_dim);
        values.extend(z.into_iter().map(f64::tanh));
    }
    Ok(FeatureMap { values: Tensor::new(vec![s_total, dims.feat_dim], values)? })
}

/// Sigmoid part maps from per-position affine logits.
pub fn detect_parts(dims: &ModelDims, det_w: &[f64], det_b: &[f64], f: &FeatureMap) -> PartMaps {
    let s_total = f.values.shape()[0];
    let fv = f.values.data();
    let mut values = Vec::with_capacity(s_total * dims.num_parts);
    for s in 0..s_total {
        let x = &fv[s * dims.feat_dim..(s + 1) * dims.feat_dim];
        let z = affine(det_w, det_b, x, dims.num_parts);
        values.extend(z.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())));
    }
    let maps = PartMaps { values: Tensor::new(vec![s_total, dims.num_parts], values).expect("sized") };
    // Sigmoid keeps entries strictly inside (0,1); a violation means the
    // forward blew up.
    assert!(
        maps.values.data().iter().all(|&v| v > 0.0 && v < 1.0),
        "part map left the open interval (0,1)"
    );
    maps
}

/// p(k) = (1/S) Σ_s m(s,k)·f(s,·), accumulated in ascending spatial order.
pub fn pool_parts(f: &FeatureMap, m: &PartMaps) -> Result<PartDescriptorSet> {
    let (s_total, feat_dim) = (f.values.shape()[0], f.values.shape()[1]);
    if m.values.shape()[0] != s_total {
        return Err(Error::ShapeMismatch {
            expected: format!("{s_total} positions"),
            got: format!("{}", m.values.shape()[0]),
        });
    }
    let num_parts = m.values.shape()[1];
    let fv = f.values.data();
    let mv = m.values.data();
    let mut parts = vec![vec![0.0; feat_dim]; num_parts];
    for s in 0..s_total {
        let frow = &fv[s * feat_dim..(s + 1) * feat_dim];
        let mrow = &mv[s * num_parts..(s + 1) * num_parts];
        for (k, part) in parts.iter_mut().enumerate() {
            let w = mrow[k];
            for (c, acc) in part.iter_mut().enumerate() {
                *acc += w * frow[c];
            }
        }
    }
    let inv = 1.0 / s_total as f64;
    for part in &mut parts {
        for v in part.iter_mut() {
            *v *= inv;
        }
    }
    Ok(PartDescriptorSet { parts })
}

/// Spatial mean of the feature map; same accumulation order as pooling.
pub fn global_pool(f: &FeatureMap) -> Vec<f64> {
    let (s_total, feat_dim) = (f.values.shape()[0], f.values.shape()[1]);
    let fv = f.values.data();
    let mut g = vec![0.0; feat_dim];
    for s in 0..s_total {
        let frow = &fv[s * feat_dim..(s + 1) * feat_dim];
        for (c, acc) in g.iter_mut().enumerate() {
            *acc += frow[c];
        }
    }
    let inv = 1.0 / s_total as f64;
    for v in &mut g {
        *v *= inv;
    }
    g
}

/// Assembles d = [g ‖ p(1) ‖ … ‖ p(M)].
pub fn person_descriptor(f: &FeatureMap, parts: PartDescriptorSet) -> PersonDescriptor {
    let global = global_pool(f);
    let mut concatenated = Vec::with_capacity(global.len() * (parts.num_parts() + 1));
    concatenated.extend_from_slice(&global);
    for p in parts.parts() {
        concatenated.extend_from_slice(p);
    }
    PersonDescriptor { global, parts, concatenated }
}

/// Identity probabilities: softmax of an affine map of the descriptor.
pub fn classify(c: &AffineParams, d: &[f64]) -> Result<Vec<f64>> {
    softmax(&c.forward(d)?)
}

/// mean ← momentum·mean + (1−momentum)·live, per parameter.
pub fn ema_update(mean: &mut AffineParams, live_w: &[f64], live_b: &[f64], momentum: f64) -> Result<()> {
    if mean.w.len() != live_w.len() || mean.b.len() != live_b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}+{} parameters", mean.w.len(), mean.b.len()),
            got: format!("{}+{}", live_w.len(), live_b.len()),
        });
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Domain(format!("EMA momentum {momentum} outside [0,1)")));
    }
    for (m, &l) in mean.w.iter_mut().zip(live_w) {
        *m = momentum * *m + (1.0 - momentum) * l;
    }
    for (m, &l) in mean.b.iter_mut().zip(live_b) {
        *m = momentum * *m + (1.0 - momentum) * l;
    }
    Ok(())
}

/// Everything computed while embedding one image; kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feature: FeatureMap,
    pub maps: PartMaps,
    pub descriptor: PersonDescriptor,
}

/// Encoder + classifier parameters plus the frozen mean classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub mean_vis: AffineParams,
    pub mean_ir: AffineParams,
}

impl ModelState {
    /// Uniform(−1/√fan_in, 1/√fan_in) init from a named stream of `seed`.
    /// Mean classifiers start as copies of their live counterparts.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let layout = ParamLayout::new(&dims);
        let mut params = vec![0.0; layout.total];
        let mut rng = SeedTree::new(seed).child("init").rng();
        let d = dims.descriptor_len();
        let pc = dims.part_concat_len();
        let blocks: [(Range<usize>, usize); 12] = [
            (layout.embed_w.clone(), dims.channels),
            (layout.embed_b.clone(), dims.channels),
            (layout.det_w.clone(), dims.feat_dim),
            (layout.det_b.clone(), dims.feat_dim),
            (layout.shared_w.clone(), d),
            (layout.shared_b.clone(), d),
            (layout.part_w.clone(), pc),
            (layout.part_b.clone(), pc),
            (layout.vis_w.clone(), d),
            (layout.vis_b.clone(), d),
            (layout.ir_w.clone(), d),
            (layout.ir_b.clone(), d),
        ];
        for (range, fan_in) in blocks {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[range] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let mut state = ModelState {
            dims,
            layout,
            params,
            mean_vis: AffineParams::zeros(d, dims.num_ids),
            mean_ir: AffineParams::zeros(d, dims.num_ids),
        };
        state.mean_vis = state.classifier_vis();
        state.mean_ir = state.classifier_ir();
        state
    }

    pub fn embed_w(&self) -> &[f64] {
        &self.params[self.layout.embed_w.clone()]
    }
    pub fn embed_b(&self) -> &[f64] {
        &self.params[self.layout.embed_b.clone()]
    }
    pub fn det_w(&self) -> &[f64] {
        &self.params[self.layout.det_w.clone()]
    }
    pub fn det_b(&self) -> &[f64] {
        &self.params[self.layout.det_b.clone()]
    }

    fn affine_view(&self, w: &Range<usize>, b: &Range<usize>, in_dim: usize) -> AffineParams {
        AffineParams {
            w: self.params[w.clone()].to_vec(),
            b: self.params[b.clone()].to_vec(),
            in_dim,
            out_dim: self.dims.num_ids,
        }
    }

    pub fn classifier_shared(&self) -> AffineParams {
        self.affine_view(&self.layout.shared_w, &self.layout.shared_b, self.dims.descriptor_len())
    }
    pub fn classifier_part(&self) -> AffineParams {
        self.affine_view(&self.layout.part_w, &self.layout.part_b, self.dims.part_concat_len())
    }
    pub fn classifier_vis(&self) -> AffineParams {
        self.affine_view(&self.layout.vis_w, &self.layout.vis_b, self.dims.descriptor_len())
    }
    pub fn classifier_ir(&self) -> AffineParams {
        self.affine_view(&self.layout.ir_w, &self.layout.ir_b, self.dims.descriptor_len())
    }

    /// Full forward chain: embed → detect → pool → descriptor.
    pub fn forward(&self, image: &PersonImage) -> Result<Forward> {
        self.forward_from_params(&self.params, image)
    }

    /// Forward with an explicit parameter vector (used by gradient checks).
    pub fn forward_from_params(&self, params: &[f64], image: &PersonImage) -> Result<Forward> {
        let feature = embed(
            &self.dims,
            &params[self.layout.embed_w.clone()],
            &params[self.layout.embed_b.clone()],
            image,
        )?;
        let maps = detect_parts(
            &self.dims,
            &params[self.layout.det_w.clone()],
            &params[self.layout.det_b.clone()],
            &feature,
        );
        let parts = pool_parts(&feature, &maps)?;
        let descriptor = person_descriptor(&feature, parts);
        Ok(Forward { feature, maps, descriptor })
    }

    /// EMA step for both mean classifiers.
    pub fn update_mean_classifiers(&mut self, momentum: f64) -> Result<()> {
        let vis_w = self.params[self.layout.vis_w.clone()].to_vec();
        let vis_b = self.params[self.layout.vis_b.clone()].to_vec();
        ema_update(&mut self.mean_vis, &vis_w, &vis_b, momentum)?;
        let ir_w = self.params[self.layout.ir_w.clone()].to_vec();
        let ir_b = self.params[self.layout.ir_b.clone()].to_vec();
        ema_update(&mut self.mean_ir, &ir_w, &ir_b, momentum)
    }
}

/// Backward from descriptor-space gradients down to the feature map,
/// accumulating detector-parameter gradients along the way. Returns
/// dL/df (S × feat_dim).
pub fn backward_descriptor_to_features(
    dims: &ModelDims,
    params: &[f64],
    layout: &ParamLayout,
    fwd: &Forward,
    d_parts: &[f64],  // M × feat_dim, row-major
    d_global: &[f64], // feat_dim
    grads: &mut [f64],
) -> Vec<f64> {
    let s_total = fwd.feature.values.shape()[0];
    let cf = dims.feat_dim;
    let m = dims.num_parts;
    let inv_s = 1.0 / s_total as f64;
    let fv = fwd.feature.values.data();
    let mv = fwd.maps.values.data();
    let det_w = &params[layout.det_w.clone()];

    let mut df = vec![0.0; s_total * cf];
    let mut dz = vec![0.0; m];
    for s in 0..s_total {
        let frow = &fv[s * cf..(s + 1) * cf];
        let mrow = &mv[s * m..(s + 1) * m];
        // Pooling backward: dm(s,k), df(s,c); global backward folds in here.
        for (k, dzk) in dz.iter_mut().enumerate() {
            let dpk = &d_parts[k * cf..(k + 1) * cf];
            let mut dm = 0.0;
            for c in 0..cf {
                dm += dpk[c] * frow[c];
            }
            // Sigmoid derivative.
            *dzk = dm * inv_s * mrow[k] * (1.0 - mrow[k]);
        }
        let drow = &mut df[s * cf..(s + 1) * cf];
        for c in 0..cf {
            let mut acc = d_global[c] * inv_s;
            for k in 0..m {
                acc += d_parts[k * cf + c] * mrow[k] * inv_s;
            }
            drow[c] = acc;
        }
        // Detector backward: accumulate dW_d, db_d, and the chain into df.
        let dw = &mut grads[layout.det_w.clone()];
        for (c, &fc) in frow.iter().enumerate() {
            let wrow = &det_w[c * m..(c + 1) * m];
            let dwrow = &mut dw[c * m..(c + 1) * m];
            let mut acc = 0.0;
            for (k, &dzk) in dz.iter().enumerate() {
                dwrow[k] += fc * dzk;
                acc += wrow[k] * dzk;
            }
            drow[c] += acc;
        }
        let db = &mut grads[layout.det_b.clone()];
        for (k, &dzk) in dz.iter().enumerate() {
            db[k] += dzk;
        }
    }
    df
}

/// Backward through the tanh embedding into its affine parameters.
pub fn backward_features_to_input(
    dims: &ModelDims,
    layout: &ParamLayout,
    pixels: &Tensor,
    feature: &FeatureMap,
    df: &[f64],
    grads: &mut [f64],
) {
    let cf = dims.feat_dim;
    let cin = dims.channels;
    let s_total = feature.values.shape()[0];
    let fv = feature.values.data();
    let px = pixels.data();
    let dw = layout.embed_w.clone();
    let db = layout.embed_b.clone();
    for s in 0..s_total {
        let frow = &fv[s * cf..(s + 1) * cf];
        let dfrow = &df[s * cf..(s + 1) * cf];
        let xrow = &px[s * cin..(s + 1) * cin];
        for c in 0..cf {
            let dz = dfrow[c] * (1.0 - frow[c] * frow[c]);
            if dz == 0.0 {
                continue;
            }
            for (a, &xa) in xrow.iter().enumerate() {
                grads[dw.start + a * cf + c] += xa * dz;
            }
            grads[db.start + c] += dz;
        }
    }
}

/// Full backward for one image given descriptor-space gradients.
pub fn backward_image(
    dims: &ModelDims,
    params: &[f64],
    layout: &ParamLayout,
    image: &PersonImage,
    fwd: &Forward,
    d_parts: &[f64],
    d_global: &[f64],
    grads: &mut [f64],
) {
    let df = backward_descriptor_to_features(dims, params, layout, fwd, d_parts, d_global, grads);
    backward_features_to_input(dims, layout, &image.pixels, &fwd.feature, &df, grads);
}

// ---------------------------------------------------------------------------
// Parameter snapshot: params.bin
// ---------------------------------------------------------------------------

const SNAPSHOT_MAGIC: &[u8; 8] = b"PARTMIX\0";
const SNAPSHOT_VERSION: u32 = 1;

impl ModelState {
    /// Writes `magic, version, C_in, C_f, M, num_ids` then the trainable
    /// flat vector and the two mean classifiers (w then b each), all
    /// little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        for v in [
            SNAPSHOT_VERSION,
            self.dims.channels as u32,
            self.dims.feat_dim as u32,
            self.dims.num_parts as u32,
            self.dims.num_ids as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let blocks: Vec<&[f64]> = vec![
            &self.params,
            &self.mean_vis.w,
            &self.mean_vis.b,
            &self.mean_ir.w,
            &self.mean_ir.b,
        ];
        for block in blocks {
            for &v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let mut r = std::io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::SnapshotFormat("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::SnapshotFormat(format!("unsupported version {version}")));
        }
        let dims = ModelDims {
            channels: read_u32(&mut r)? as usize,
            feat_dim: read_u32(&mut r)? as usize,
            num_parts: read_u32(&mut r)? as usize,
            num_ids: read_u32(&mut r)? as usize,
        };
        let layout = ParamLayout::new(&dims);
        let d = dims.descriptor_len();
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let params = read_block(layout.total)?;
        let mean_vis = AffineParams {
            w: read_block(d * dims.num_ids)?,
            b: read_block(dims.num_ids)?,
            in_dim: d,
            out_dim: dims.num_ids,
        };
        let mean_ir = AffineParams {
            w: read_block(d * dims.num_ids)?,
            b: read_block(dims.num_ids)?,
            in_dim: d,
            out_dim: dims.num_ids,
        };
        Ok(ModelState { dims, layout, params, mean_vis, mean_ir })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec, Modality};
    use crate::numerics::fd_gradient_check;

    fn test_dims() -> ModelDims {
        ModelDims { channels: 3, feat_dim: 5, num_parts: 4, num_ids: 6 }
    }

    fn test_image(seed: u64) -> PersonImage {
        let spec = DatasetSpec {
            num_train_ids: 2,
            num_test_ids: 2,
            images_per_id_per_modality: 1,
            parts_gt: 4,
            height: 8,
            width: 4,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec, seed).unwrap().train.remove(0)
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let dims = test_dims();
        let img = test_image(1);
        let w = vec![0.0; dims.channels * dims.feat_dim];
        let b = vec![0.0; dims.feat_dim];
        let f = embed(&dims, &w, &b, &img).unwrap();
        assert!(f.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_gives_constant_rows() {
        let dims = test_dims();
        let mut img = test_image(1);
        let n = img.pixels.len();
        img.pixels = Tensor::new(img.pixels.shape().to_vec(), vec![0.25; n]).unwrap();
        let mut rng = SeedTree::new(5).rng();
        let w: Vec<f64> = (0..dims.channels * dims.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dims.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = embed(&dims, &w, &b, &img).unwrap();
        let first = &f.values.data()[..dims.feat_dim];
        for s in 1..f.values.shape()[0] {
            assert_eq!(&f.values.data()[s * dims.feat_dim..(s + 1) * dims.feat_dim], first);
        }
    }

    #[test]
    fn zero_detector_gives_half_maps() {
        let dims = test_dims();
        let state = ModelState::init(dims, 3);
        let img = test_image(2);
        let f = embed(&dims, state.embed_w(), state.embed_b(), &img).unwrap();
        let w = vec![0.0; dims.feat_dim * dims.num_parts];
        let b = vec![0.0; dims.num_parts];
        let m = detect_parts(&dims, &w, &b, &f);
        assert!(m.values.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_logit_saturates_monotonically() {
        let dims = ModelDims { channels: 3, feat_dim: 1, num_parts: 1, num_ids: 2 };
        let mut img = test_image(2);
        let n = img.pixels.len();
        img.pixels = Tensor::new(img.pixels.shape().to_vec(), vec![1.0; n]).unwrap();
        let f = embed(&dims, &[1.0, 1.0, 1.0], &[0.0], &img).unwrap();
        let mut prev = 0.0;
        for logit in [0.0, 2.0, 8.0, 32.0] {
            let m = detect_parts(&dims, &[logit], &[0.0], &f);
            let v = m.values.data()[0];
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }

    #[test]
    fn uniform_mask_pooling_equals_global_pool_bitwise() {
        let dims = test_dims();
        let state = ModelState::init(dims, 7);
        let img = test_image(3);
        let f = embed(&dims, state.embed_w(), state.embed_b(), &img).unwrap();
        let s_total = f.values.shape()[0];
        let ones = PartMaps {
            values: Tensor::new(vec![s_total, 1], vec![1.0; s_total]).unwrap(),
        };
        let pooled = pool_parts(&f, &ones).unwrap();
        let global = global_pool(&f);
        assert_eq!(pooled.part(0), global.as_slice());
    }

    #[test]
    fn zero_mask_pools_to_zero() {
        let dims = test_dims();
        let state = ModelState::init(dims, 7);
        let img = test_image(3);
        let f = embed(&dims, state.embed_w(), state.embed_b(), &img).unwrap();
        let s_total = f.values.shape()[0];
        let zeros = PartMaps { values: Tensor::new(vec![s_total, 1], vec![0.0; s_total]).unwrap() };
        let pooled = pool_parts(&f, &zeros).unwrap();
        assert!(pooled.part(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_matches_naive_double_loop() {
        let dims = test_dims();
        let state = ModelState::init(dims, 11);
        let img = test_image(4);
        let fwd = state.forward(&img).unwrap();
        let f = &fwd.feature;
        let m = &fwd.maps;
        let s_total = f.values.shape()[0];
        for k in 0..dims.num_parts {
            for c in 0..dims.feat_dim {
                let mut acc = 0.0;
                for s in 0..s_total {
                    acc += m.values.at2(s, k) * f.values.at2(s, c);
                }
                acc /= s_total as f64;
                let got = fwd.descriptor.parts.part(k)[c];
                assert!((got - acc).abs() < 1e-12, "part {k} chan {c}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn descriptor_concat_roundtrip() {
        let dims = test_dims();
        let state = ModelState::init(dims, 13);
        let img = test_image(5);
        let fwd = state.forward(&img).unwrap();
        let d = &fwd.descriptor;
        assert_eq!(d.concatenated.len(), (dims.num_parts + 1) * dims.feat_dim);
        assert_eq!(&d.concatenated[..dims.feat_dim], d.global.as_slice());
        for k in 0..dims.num_parts {
            let lo = (k + 1) * dims.feat_dim;
            assert_eq!(&d.concatenated[lo..lo + dims.feat_dim], d.parts.part(k));
        }
        assert_eq!(d.part_concat(), &d.concatenated[dims.feat_dim..]);
    }

    #[test]
    fn descriptor_length_arithmetic() {
        let dims = ModelDims { channels: 3, feat_dim: 16, num_parts: 6, num_ids: 64 };
        assert_eq!(dims.descriptor_len(), 112);
    }

    #[test]
    fn single_uniform_part_duplicates_global() {
        // With M=1 and a unit mask, d = [g ‖ g].
        let dims = ModelDims { channels: 3, feat_dim: 4, num_parts: 1, num_ids: 2 };
        let state = ModelState::init(dims, 17);
        let img = test_image(6);
        let f = embed(&dims, state.embed_w(), state.embed_b(), &img).unwrap();
        let s_total = f.values.shape()[0];
        let ones = PartMaps { values: Tensor::new(vec![s_total, 1], vec![1.0; s_total]).unwrap() };
        let parts = pool_parts(&f, &ones).unwrap();
        let d = person_descriptor(&f, parts);
        assert_eq!(&d.concatenated[..4], &d.concatenated[4..8]);
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let mut mean = AffineParams::zeros(2, 2);
        let live_w = vec![1.0, 2.0, 3.0, 4.0];
        let live_b = vec![5.0, 6.0];
        ema_update(&mut mean, &live_w, &live_b, 0.9).unwrap();
        // One step from zero lands at (1−momentum)·live exactly.
        let expect: Vec<f64> = live_w.iter().map(|w| (1.0 - 0.9) * w).collect();
        assert_eq!(mean.w, expect);
        let mut mean0 = AffineParams::zeros(2, 2);
        ema_update(&mut mean0, &live_w, &live_b, 0.0).unwrap();
        assert_eq!(mean0.w, live_w);
        assert_eq!(mean0.b, live_b);
        // Repeated steps converge geometrically toward live.
        let mut m = AffineParams::zeros(2, 2);
        for _ in 0..200 {
            ema_update(&mut m, &live_w, &live_b, 0.9).unwrap();
        }
        for (a, b) in m.w.iter().zip(&live_w) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// fd check over all encoder parameters for a random linear functional
    /// of the descriptor.
    #[test]
    fn encoder_backward_matches_finite_differences() {
        let dims = test_dims();
        let state = ModelState::init(dims, 23);
        let img = test_image(7);
        let mut rng = SeedTree::new(99).rng();
        let d_len = dims.descriptor_len();
        let coeffs: Vec<f64> = (0..d_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |p: &[f64]| {
            let fwd = state.forward_from_params(p, &img)?;
            Ok(fwd.descriptor.concatenated.iter().zip(&coeffs).map(|(d, c)| d * c).sum())
        };

        let fwd = state.forward(&img).unwrap();
        let mut grads = vec![0.0; state.layout.total];
        let d_global = &coeffs[..dims.feat_dim];
        let d_parts = &coeffs[dims.feat_dim..];
        backward_image(&dims, &state.params, &state.layout, &img, &fwd, d_parts, d_global, &mut grads);

        // Restrict the check to encoder blocks (classifiers are untouched by
        // this functional and have zero gradient).
        let err = fd_gradient_check(loss, &state.params, &grads, 1e-5).unwrap();
        assert!(err < 1e-6, "encoder backward fd error {err}");
    }

    #[test]
    fn snapshot_roundtrip_bit_identical() {
        let dims = test_dims();
        let state = ModelState::init(dims, 29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        state.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn forward_deterministic_across_modalities() {
        let dims = test_dims();
        let state = ModelState::init(dims, 31);
        let spec = DatasetSpec {
            num_train_ids: 2,
            num_test_ids: 2,
            images_per_id_per_modality: 1,
            parts_gt: 4,
            height: 8,
            width: 4,
            ..DatasetSpec::default()
        };
        let split = generate_dataset(&spec, 3).unwrap();
        let ir = split.train.iter().find(|i| i.modality == Modality::Infrared).unwrap();
        let a = state.forward(ir).unwrap();
        let b = state.forward(ir).unwrap();
        assert_eq!(a.descriptor.concatenated, b.descriptor.concatenated);
    }
}

//! Synthetic two-modality person dataset and identity-balanced batch sampler.
//!
//! A "person" is a stack of horizontal bands, one per latent part. Each band
//! takes its color from the identity's per-part attribute vector, pushed
//! through a per-modality channel-mixing transform, so the two modalities see
//! the same identities through different invertible color spaces. Nuisances
//! (band intensity jitter, ±1-row boundary jitter, band occlusion, pixel
//! noise) are drawn from a per-image seed, making rendering a pure function
//! of (profile, modality, nuisance seed).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{sample_without_replacement, SeedTree};

/// Scales attribute colors so band intensities spread across the sigmoid.
const COLOR_GAIN: f64 = 3.0;
/// Redraw limit and conditioning bound for channel-mixing matrices.
const MAX_CONDITION: f64 = 100.0;

/// Sensing domain of an image. Exactly two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Generation parameters for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub images_per_id_per_modality: usize,
    /// Latent ground-truth part count; `height` must divide by it.
    pub parts_gt: usize,
    /// Dimension of each per-part attribute vector.
    pub attr_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Std-dev of i.i.d. Gaussian pixel noise (pre-sigmoid).
    pub pixel_noise: f64,
    /// Per-band intensity scale drawn from U(1−j, 1+j).
    pub band_scale_jitter: f64,
    /// Probability that one band of an image is zeroed.
    pub occlusion_prob: f64,
    /// Weight of the shared per-band color component. Parts of different
    /// people share appearance structure; without this the part detector
    /// has no cross-identity color cue to discover bands from.
    pub band_signature_strength: f64,
}

impl Default for DatasetSpec {
    /// Desk-scale defaults: full training in CPU-minutes.
    fn default() -> Self {
        DatasetSpec {
            num_train_ids: 64,
            num_test_ids: 32,
            images_per_id_per_modality: 10,
            parts_gt: 6,
            attr_dim: 8,
            height: 24,
            width: 8,
            channels: 3,
            pixel_noise: 0.3,
            band_scale_jitter: 0.25,
            occlusion_prob: 0.3,
            band_signature_strength: 1.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_train_ids", self.num_train_ids),
            ("num_test_ids", self.num_test_ids),
            ("images_per_id_per_modality", self.images_per_id_per_modality),
            ("parts_gt", self.parts_gt),
            ("attr_dim", self.attr_dim),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::Config {
                    field: format!("dataset.{name}"),
                    message: "must be at least 1".into(),
                });
            }
        }
        if self.height % self.parts_gt != 0 {
            return Err(Error::Config {
                field: "dataset.height".into(),
                message: format!(
                    "height {} not divisible by parts_gt {}",
                    self.height, self.parts_gt
                ),
            });
        }
        if self.num_test_ids < 2 {
            return Err(Error::Config {
                field: "dataset.num_test_ids".into(),
                message: "retrieval needs at least 2 test identities".into(),
            });
        }
        Ok(())
    }
}

/// Latent appearance of one identity: one attribute vector per part band,
/// shared exactly by every image of that identity in both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAttributeProfile {
    pub identity: usize,
    pub attributes: Vec<Vec<f64>>,
}

/// Invertible channel-mixing matrix plus offset; one per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityTransform {
    /// Row-major `channels × channels` mixing matrix as nested arrays.
    pub mix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

/// Fixed projection from attribute space to color space plus the shared
/// per-band color signatures, drawn once per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderBasis {
    /// Row-major `channels × attr_dim`.
    pub attr_proj: Vec<Vec<f64>>,
    /// One color vector per latent band, shared by every identity.
    pub band_signatures: Vec<Vec<f64>>,
}

/// One rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonImage {
    /// `height × width × channels`, intensities in [0, 1].
    pub pixels: Tensor,
    pub identity: usize,
    pub modality: Modality,
    pub nuisance_seed: u64,
}

/// Generated dataset with disjoint train/test identity sets.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PersonImage>,
    pub gallery: Vec<PersonImage>,
    pub query: Vec<PersonImage>,
    pub train_ids: Range<usize>,
    pub test_ids: Range<usize>,
    pub profiles: Vec<PartAttributeProfile>,
    pub transforms: [ModalityTransform; 2],
    pub basis: RenderBasis,
    pub spec: DatasetSpec,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn profile(&self, identity: usize) -> &PartAttributeProfile {
        &self.profiles[identity]
    }
}

/// Identity-balanced mini-batch: indices into a split's train list.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub image_indices: Vec<usize>,
    pub identities_per_batch: usize,
    pub images_per_identity: usize,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.image_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_indices.is_empty()
    }

    pub fn images<'a>(&'a self, split: &'a DatasetSplit) -> impl Iterator<Item = &'a PersonImage> {
        self.image_indices.iter().map(move |&i| &split.train[i])
    }
}

fn draw_profiles(spec: &DatasetSpec, tree: &SeedTree) -> Vec<PartAttributeProfile> {
    let total = spec.num_train_ids + spec.num_test_ids;
    (0..total)
        .map(|identity| {
            let mut rng = tree.child("profiles").index(identity as u64).rng();
            let attributes = (0..spec.parts_gt)
                .map(|_| (0..spec.attr_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            PartAttributeProfile { identity, attributes }
        })
        .collect()
}

fn draw_basis(spec: &DatasetSpec, tree: &SeedTree) -> RenderBasis {
    let mut rng = tree.child("render_basis").rng();
    let attr_proj = (0..spec.channels)
        .map(|_| (0..spec.attr_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let band_signatures = (0..spec.parts_gt)
        .map(|_| (0..spec.channels).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    RenderBasis { attr_proj, band_signatures }
}

fn draw_transform(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> ModalityTransform {
    let c = spec.channels;
    loop {
        let mix: Vec<Vec<f64>> =
            (0..c).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        if condition_number(&mix) < MAX_CONDITION {
            let offset = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            return ModalityTransform { mix, offset };
        }
    }
}

/// Condition number via Jacobi eigenvalues of AᵀA.
pub fn condition_number(mat: &[Vec<f64>]) -> f64 {
    let n = mat.len();
    // Gram matrix.
    let mut g = vec![vec![0.0; n]; n];
    for (i, gi) in g.iter_mut().enumerate() {
        for (j, gij) in gi.iter_mut().enumerate() {
            for row in mat {
                *gij += row[i] * row[j];
            }
        }
    }
    // Cyclic Jacobi sweeps.
    for _ in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += g[p][q] * g[p][q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if g[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = 0.5 * (g[q][q] - g[p][p]) / g[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let gpk = g[p][k];
                    let gqk = g[q][k];
                    g[p][k] = c * gpk - s * gqk;
                    g[q][k] = s * gpk + c * gqk;
                }
                for k in 0..n {
                    let gkp = g[k][p];
                    let gkq = g[k][q];
                    g[k][p] = c * gkp - s * gkq;
                    g[k][q] = s * gkp + c * gkq;
                }
            }
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for (i, gi) in g.iter().enumerate() {
        let ev = gi[i].max(0.0);
        lo = lo.min(ev);
        hi = hi.max(ev);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).sqrt()
    }
}

/// Base (pre-nuisance) color of one band:
/// `T_t · (gain · proj · a + s · signature_k) + offset`.
fn band_color(
    spec: &DatasetSpec,
    basis: &RenderBasis,
    transform: &ModalityTransform,
    band: usize,
    attributes: &[f64],
) -> Vec<f64> {
    let scale = COLOR_GAIN / (spec.attr_dim as f64).sqrt();
    let sig = &basis.band_signatures[band];
    let base: Vec<f64> = basis
        .attr_proj
        .iter()
        .zip(sig)
        .map(|(row, s)| {
            scale * row.iter().zip(attributes).map(|(w, a)| w * a).sum::<f64>()
                + spec.band_signature_strength * s
        })
        .collect();
    transform
        .mix
        .iter()
        .zip(&transform.offset)
        .map(|(row, off)| row.iter().zip(&base).map(|(w, b)| w * b).sum::<f64>() + off)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders one image; pure in (spec, profile, basis, transform, seed).
pub fn render_image(
    spec: &DatasetSpec,
    profile: &PartAttributeProfile,
    basis: &RenderBasis,
    transform: &ModalityTransform,
    nuisance_seed: u64,
) -> Tensor {
    let mut rng = SeedTree::new(nuisance_seed).rng();
    let m_gt = spec.parts_gt;
    let band_h = spec.height / m_gt;

    // Fixed draw order: boundaries, band scales, occlusion, pixel noise.
    let mut bounds = vec![0usize; m_gt + 1];
    bounds[m_gt] = spec.height;
    for (k, b) in bounds.iter_mut().enumerate().take(m_gt).skip(1) {
        let jitter: i64 = rng.gen_range(-1..=1);
        *b = ((k * band_h) as i64 + jitter).max(0) as usize;
    }
    for k in 1..=m_gt {
        bounds[k] = bounds[k].max(bounds[k - 1]).min(spec.height);
    }

    let j = spec.band_scale_jitter;
    let scales: Vec<f64> = (0..m_gt).map(|_| rng.gen_range(1.0 - j..1.0 + j)).collect();

    let occluded: Option<usize> = if rng.gen_range(0.0..1.0) < spec.occlusion_prob {
        Some(rng.gen_range(0..m_gt))
    } else {
        None
    };

    let colors: Vec<Vec<f64>> = profile
        .attributes
        .iter()
        .enumerate()
        .map(|(k, a)| band_color(spec, basis, transform, k, a))
        .collect();

    let noise = Normal::new(0.0, spec.pixel_noise.max(1e-300)).expect("valid std");
    let mut data = Vec::with_capacity(spec.height * spec.width * spec.channels);
    let mut band = 0usize;
    for h in 0..spec.height {
        while band + 1 < m_gt && h >= bounds[band + 1] {
            band += 1;
        }
        let zeroed = occluded == Some(band);
        for _w in 0..spec.width {
            for c in 0..spec.channels {
                let eps: f64 = noise.sample(&mut rng);
                let v = if zeroed {
                    0.0
                } else {
                    sigmoid(scales[band] * colors[band][c] + eps)
                };
                data.push(v);
            }
        }
    }
    Tensor::new(vec![spec.height, spec.width, spec.channels], data).expect("sized by loop")
}

/// Generates a full dataset; deterministic for a fixed (spec, seed).
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let tree = SeedTree::new(seed).child("dataset");

    let profiles = draw_profiles(spec, &tree);
    let basis = draw_basis(spec, &tree);
    let mut transform_rng = tree.child("modality_transform").rng();
    let transforms = [
        draw_transform(spec, &mut transform_rng),
        draw_transform(spec, &mut transform_rng),
    ];

    let train_ids = 0..spec.num_train_ids;
    let test_ids = spec.num_train_ids..spec.num_train_ids + spec.num_test_ids;

    let nuisance = tree.child("nuisance");
    let mut counter = 0u64;
    let mut render_set = |ids: Range<usize>| -> Vec<PersonImage> {
        let mut images = Vec::new();
        for identity in ids {
            for modality in Modality::BOTH {
                for _ in 0..spec.images_per_id_per_modality {
                    let nuisance_seed = nuisance.index(counter).seed();
                    counter += 1;
                    let pixels = render_image(
                        spec,
                        &profiles[identity],
                        &basis,
                        &transforms[modality.index()],
                        nuisance_seed,
                    );
                    images.push(PersonImage { pixels, identity, modality, nuisance_seed });
                }
            }
        }
        images
    };

    let train = render_set(train_ids.clone());
    let gallery = render_set(test_ids.clone());
    let query = render_set(test_ids.clone());

    Ok(DatasetSplit {
        train,
        gallery,
        query,
        train_ids,
        test_ids,
        profiles,
        transforms,
        basis,
        spec: spec.clone(),
        seed,
    })
}

/// Draws P identities and K/2 images per modality per identity, all without
/// replacement, in an order fully determined by the seed.
pub fn sample_minibatch(
    split: &DatasetSplit,
    identities_per_batch: usize,
    images_per_identity: usize,
    seed: u64,
) -> Result<MiniBatch> {
    let p = identities_per_batch;
    let k = images_per_identity;
    if k == 0 || k % 2 != 0 {
        return Err(Error::Sampling(format!("images per identity must be even, got {k}")));
    }
    let per_modality = k / 2;
    let num_ids = split.train_ids.len();
    if p == 0 || p > num_ids {
        return Err(Error::Sampling(format!(
            "cannot draw {p} identities from a train set of {num_ids}"
        )));
    }

    // identity -> per-modality image index lists, in train order.
    let mut by_id: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; num_ids];
    for (i, img) in split.train.iter().enumerate() {
        by_id[img.identity][img.modality.index()].push(i);
    }

    let mut rng = SeedTree::new(seed).child("minibatch").rng();
    let chosen = sample_without_replacement(&mut rng, num_ids, p);

    let mut image_indices = Vec::with_capacity(p * k);
    for &identity in &chosen {
        for modality in Modality::BOTH {
            let pool = &by_id[identity][modality.index()];
            if pool.len() < per_modality {
                return Err(Error::Sampling(format!(
                    "identity {identity} has {} {} images, need {per_modality}",
                    pool.len(),
                    modality
                )));
            }
            for pick in sample_without_replacement(&mut rng, pool.len(), per_modality) {
                image_indices.push(pool[pick]);
            }
        }
    }

    Ok(MiniBatch {
        image_indices,
        identities_per_batch: p,
        images_per_identity: k,
    })
}

// ---------------------------------------------------------------------------
// Persistence: meta.json + one binary tensor file per split.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SplitMeta {
    identities: Vec<usize>,
    modalities: Vec<Modality>,
    nuisance_seeds: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    spec: DatasetSpec,
    seed: u64,
    modality_transforms: Vec<ModalityTransform>,
    attr_proj: Vec<Vec<f64>>,
    band_signatures: Vec<Vec<f64>>,
    train: SplitMeta,
    gallery: SplitMeta,
    query: SplitMeta,
}

fn split_meta(images: &[PersonImage]) -> SplitMeta {
    SplitMeta {
        identities: images.iter().map(|i| i.identity).collect(),
        modalities: images.iter().map(|i| i.modality).collect(),
        nuisance_seeds: images.iter().map(|i| i.nuisance_seed).collect(),
    }
}

/// Binary tensor file: ASCII header line `H W C count`, then `count`
/// images of little-endian f64, each row-major (h, w, c).
fn write_tensor_file(path: &Path, spec: &DatasetSpec, images: &[PersonImage]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{} {} {} {}", spec.height, spec.width, spec.channels, images.len())?;
    for img in images {
        for &v in img.pixels.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_tensor_file(path: &Path, spec: &DatasetSpec, meta: &SplitMeta) -> Result<Vec<PersonImage>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::SnapshotFormat(format!("bad tensor header: {e}")))?;
    if dims.len() != 4 || dims[0] != spec.height || dims[1] != spec.width || dims[2] != spec.channels
    {
        return Err(Error::SnapshotFormat(format!(
            "tensor header {header:?} does not match spec {}x{}x{}",
            spec.height, spec.width, spec.channels
        )));
    }
    let count = dims[3];
    if count != meta.identities.len() {
        return Err(Error::SnapshotFormat(format!(
            "tensor file holds {count} images, meta lists {}",
            meta.identities.len()
        )));
    }
    let per_image = spec.height * spec.width * spec.channels;
    let mut images = Vec::with_capacity(count);
    let mut buf = vec![0u8; per_image * 8];
    for i in 0..count {
        r.read_exact(&mut buf)?;
        let data: Vec<f64> =
            buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        images.push(PersonImage {
            pixels: Tensor::new(vec![spec.height, spec.width, spec.channels], data)?,
            identity: meta.identities[i],
            modality: meta.modalities[i],
            nuisance_seed: meta.nuisance_seeds[i],
        });
    }
    Ok(images)
}

pub fn save_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        spec: split.spec.clone(),
        seed: split.seed,
        modality_transforms: split.transforms.to_vec(),
        attr_proj: split.basis.attr_proj.clone(),
        band_signatures: split.basis.band_signatures.clone(),
        train: split_meta(&split.train),
        gallery: split_meta(&split.gallery),
        query: split_meta(&split.query),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_tensor_file(&dir.join("train.bin"), &split.spec, &split.train)?;
    write_tensor_file(&dir.join("gallery.bin"), &split.spec, &split.gallery)?;
    write_tensor_file(&dir.join("query.bin"), &split.spec, &split.query)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let spec = meta.spec.clone();
    spec.validate()?;
    if meta.modality_transforms.len() != 2 {
        return Err(Error::SnapshotFormat("expected exactly 2 modality transforms".into()));
    }
    let train = read_tensor_file(&dir.join("train.bin"), &spec, &meta.train)?;
    let gallery = read_tensor_file(&dir.join("gallery.bin"), &spec, &meta.gallery)?;
    let query = read_tensor_file(&dir.join("query.bin"), &spec, &meta.query)?;
    // Profiles are a pure function of (spec, seed); regenerate them.
    let tree = SeedTree::new(meta.seed).child("dataset");
    let profiles = draw_profiles(&spec, &tree);
    Ok(DatasetSplit {
        train,
        gallery,
        query,
        train_ids: 0..spec.num_train_ids,
        test_ids: spec.num_train_ids..spec.num_train_ids + spec.num_test_ids,
        profiles,
        transforms: [meta.modality_transforms[0].clone(), meta.modality_transforms[1].clone()],
        basis: RenderBasis { attr_proj: meta.attr_proj, band_signatures: meta.band_signatures },
        spec,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_train_ids: 8,
            num_test_ids: 4,
            images_per_id_per_modality: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_dataset(&spec, 11).unwrap();
        let b = generate_dataset(&spec, 11).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.pixels.data(), y.pixels.data());
            assert_eq!(x.identity, y.identity);
            assert_eq!(x.modality, y.modality);
        }
        for (x, y) in a.query.iter().zip(&b.query) {
            assert_eq!(x.pixels.data(), y.pixels.data());
        }
    }

    #[test]
    fn profiles_shared_across_modalities() {
        let split = generate_dataset(&small_spec(), 5).unwrap();
        let vis = split.train.iter().find(|i| i.modality == Modality::Visible).unwrap();
        let inf = split
            .train
            .iter()
            .find(|i| i.modality == Modality::Infrared && i.identity == vis.identity)
            .unwrap();
        assert_eq!(split.profile(vis.identity), split.profile(inf.identity));
    }

    #[test]
    fn train_and_test_ids_disjoint() {
        let spec = DatasetSpec {
            num_train_ids: 64,
            num_test_ids: 32,
            images_per_id_per_modality: 1,
            ..DatasetSpec::default()
        };
        let split = generate_dataset(&spec, 0).unwrap();
        let train: BTreeSet<usize> = split.train.iter().map(|i| i.identity).collect();
        let test: BTreeSet<usize> =
            split.gallery.iter().chain(&split.query).map(|i| i.identity).collect();
        assert_eq!(train.intersection(&test).count(), 0);
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 32);
    }

    #[test]
    fn rendering_is_pure() {
        let split = generate_dataset(&small_spec(), 3).unwrap();
        for img in split.train.iter().take(5) {
            let again = render_image(
                &split.spec,
                split.profile(img.identity),
                &split.basis,
                &split.transforms[img.modality.index()],
                img.nuisance_seed,
            );
            assert_eq!(img.pixels.data(), again.data());
        }
    }

    #[test]
    fn pixels_in_unit_interval() {
        let split = generate_dataset(&small_spec(), 9).unwrap();
        for img in &split.train {
            assert!(img.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }
    }

    #[test]
    fn transforms_well_conditioned() {
        let split = generate_dataset(&small_spec(), 21).unwrap();
        for t in &split.transforms {
            assert!(condition_number(&t.mix) < MAX_CONDITION);
        }
    }

    #[test]
    fn condition_number_of_identity_is_one() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((condition_number(&eye) - 1.0).abs() < 1e-9);
        let scaled = vec![vec![10.0, 0.0], vec![0.0, 0.1]];
        assert!((condition_number(&scaled) - 100.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = small_spec();
        spec.height = 25; // not divisible by 6
        assert!(generate_dataset(&spec, 0).is_err());
        let mut spec = small_spec();
        spec.num_test_ids = 1;
        assert!(generate_dataset(&spec, 0).is_err());
    }

    #[test]
    fn minibatch_shape_and_balance() {
        let spec = DatasetSpec {
            num_train_ids: 20,
            num_test_ids: 4,
            images_per_id_per_modality: 5,
            ..DatasetSpec::default()
        };
        let split = generate_dataset(&spec, 1).unwrap();
        let batch = sample_minibatch(&split, 16, 8, 42).unwrap();
        assert_eq!(batch.len(), 128);
        let mut per_id_mod: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
        for img in batch.images(&split) {
            *per_id_mod.entry((img.identity, img.modality.index())).or_default() += 1;
        }
        let ids: BTreeSet<usize> = per_id_mod.keys().map(|(id, _)| *id).collect();
        assert_eq!(ids.len(), 16);
        for (_, count) in per_id_mod {
            assert_eq!(count, 4);
        }
        // No image drawn twice.
        let distinct: BTreeSet<usize> = batch.image_indices.iter().copied().collect();
        assert_eq!(distinct.len(), 128);
    }

    #[test]
    fn smallest_balanced_batch() {
        let split = generate_dataset(&small_spec(), 2).unwrap();
        let batch = sample_minibatch(&split, 2, 2, 0).unwrap();
        assert_eq!(batch.len(), 4);
        let vis = batch.images(&split).filter(|i| i.modality == Modality::Visible).count();
        assert_eq!(vis, 2);
    }

    #[test]
    fn minibatch_deterministic() {
        let split = generate_dataset(&small_spec(), 2).unwrap();
        let a = sample_minibatch(&split, 4, 4, 9).unwrap();
        let b = sample_minibatch(&split, 4, 4, 9).unwrap();
        assert_eq!(a.image_indices, b.image_indices);
    }

    #[test]
    fn sampling_errors_are_explicit() {
        let split = generate_dataset(&small_spec(), 2).unwrap();
        assert!(sample_minibatch(&split, 9, 2, 0).is_err(), "more ids than train set");
        assert!(sample_minibatch(&split, 2, 3, 0).is_err(), "odd K");
        assert!(sample_minibatch(&split, 2, 8, 0).is_err(), "more images than available");
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_dataset(&small_spec(), 33).unwrap();
        save_dataset(dir.path(), &split).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(split.seed, loaded.seed);
        assert_eq!(split.spec, loaded.spec);
        assert_eq!(split.transforms[0], loaded.transforms[0]);
        assert_eq!(split.profiles, loaded.profiles);
        assert_eq!(split.train.len(), loaded.train.len());
        for (a, b) in split.train.iter().zip(&loaded.train) {
            assert_eq!(a, b);
        }
        for (a, b) in split.query.iter().zip(&loaded.query) {
            assert_eq!(a.pixels.data(), b.pixels.data());
        }
    }
}

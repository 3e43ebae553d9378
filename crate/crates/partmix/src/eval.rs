//! Retrieval evaluation: gallery ranking, CMC@k, mAP, and the
//! cross-modality query/gallery protocols.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{DatasetSplit, Modality, PersonImage};
use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::numerics::cosine_similarity;
use crate::rng::{sample_without_replacement, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotMode {
    /// One gallery image per identity, drawn from the protocol seed.
    Single,
    /// Every gallery image of the gallery modality.
    Multi,
}

impl ShotMode {
    pub fn name(self) -> &'static str {
        match self {
            ShotMode::Single => "single",
            ShotMode::Multi => "multi",
        }
    }
}

/// A cross-modality retrieval protocol.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalProtocol {
    pub query_modality: Modality,
    pub gallery_modality: Modality,
    pub shot_mode: ShotMode,
    pub ranks: Vec<usize>,
}

impl RetrievalProtocol {
    pub fn new(query_modality: Modality, shot_mode: ShotMode, ranks: Vec<usize>) -> Result<Self> {
        let p = RetrievalProtocol {
            query_modality,
            gallery_modality: query_modality.other(),
            shot_mode,
            ranks,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_modality == self.gallery_modality {
            return Err(Error::Protocol("query and gallery modality must differ".into()));
        }
        if self.ranks.is_empty() || self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Protocol("ranks must be non-empty and strictly ascending".into()));
        }
        if self.ranks[0] == 0 {
            return Err(Error::Protocol("ranks are 1-based".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("{}_to_{}", self.query_modality, self.gallery_modality)
    }

    /// The four default protocols: both directions × single/multi-shot.
    pub fn defaults(ranks: Vec<usize>) -> Vec<RetrievalProtocol> {
        let mut out = Vec::new();
        for q in Modality::BOTH {
            for shot in [ShotMode::Single, ShotMode::Multi] {
                out.push(RetrievalProtocol::new(q, shot, ranks.clone()).expect("valid defaults"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CmcPoint {
    pub k: usize,
    pub rate: f64,
}

/// Metrics of one protocol run.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub protocol_name: String,
    pub shot_mode: ShotMode,
    pub cmc: Vec<CmcPoint>,
    pub map_score: f64,
    pub num_queries: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn cmc_at(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|p| p.k == k).map(|p| p.rate)
    }
}

/// Gallery indices by descending cosine similarity to the query descriptor;
/// ties break toward the lower index.
pub fn rank_gallery(query_d: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| Ok((i, cosine_similarity(query_d, g)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// CMC@k = fraction of queries whose first true match sits at rank ≤ k.
/// `rankings` holds per-query match flags in ranked order.
pub fn cmc(rankings: &[Vec<bool>], ks: &[usize]) -> Result<Vec<CmcPoint>> {
    let n = rankings.len();
    if n == 0 {
        return Err(Error::Protocol("no queries".into()));
    }
    let mut first_match = Vec::with_capacity(n);
    for (q, flags) in rankings.iter().enumerate() {
        match flags.iter().position(|&f| f) {
            Some(at) => first_match.push(at + 1),
            None => {
                return Err(Error::Protocol(format!("query {q} has no gallery match")));
            }
        }
    }
    Ok(ks
        .iter()
        .map(|&k| CmcPoint {
            k,
            rate: first_match.iter().filter(|&&r| r <= k).count() as f64 / n as f64,
        })
        .collect())
}

/// AP of one ranked flag list: mean over true-match positions r of
/// (matches at ranks ≤ r)/r.
fn average_precision(flags: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Protocol("query has no gallery match".into()));
    }
    Ok(sum / hits as f64)
}

/// Mean AP over queries.
pub fn mean_average_precision(rankings: &[Vec<bool>]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    let mut total = 0.0;
    for flags in rankings {
        total += average_precision(flags)?;
    }
    Ok(total / rankings.len() as f64)
}

/// Selects the gallery image list for a protocol: all images of the gallery
/// modality (multi-shot) or one per identity (single-shot, seeded).
pub fn select_gallery<'a>(
    pool: &'a [PersonImage],
    protocol: &RetrievalProtocol,
    seed: u64,
) -> Vec<&'a PersonImage> {
    let candidates: Vec<&PersonImage> =
        pool.iter().filter(|i| i.modality == protocol.gallery_modality).collect();
    match protocol.shot_mode {
        ShotMode::Multi => candidates,
        ShotMode::Single => {
            let mut ids: Vec<usize> = candidates.iter().map(|i| i.identity).collect();
            ids.sort_unstable();
            ids.dedup();
            let mut rng =
                SeedTree::new(seed).child("protocol").child(&protocol.name()).rng();
            let mut picked = Vec::with_capacity(ids.len());
            for id in ids {
                let of_id: Vec<&PersonImage> =
                    candidates.iter().copied().filter(|i| i.identity == id).collect();
                let at = sample_without_replacement(&mut rng, of_id.len(), 1)[0];
                picked.push(of_id[at]);
            }
            picked
        }
    }
}

/// Runs one protocol: embeds queries and gallery, ranks, and aggregates
/// CMC/mAP. Deterministic given the seed.
pub fn run_protocol(
    model: &ModelState,
    split: &DatasetSplit,
    protocol: &RetrievalProtocol,
    seed: u64,
) -> Result<MetricsReport> {
    protocol.validate()?;
    let queries: Vec<&PersonImage> =
        split.query.iter().filter(|i| i.modality == protocol.query_modality).collect();
    if queries.is_empty() {
        return Err(Error::Protocol("no query images for protocol".into()));
    }
    let gallery_images = select_gallery(&split.gallery, protocol, seed);
    if gallery_images.is_empty() {
        return Err(Error::Protocol("no gallery images for protocol".into()));
    }

    let gallery_desc: Vec<Vec<f64>> = gallery_images
        .iter()
        .map(|img| Ok(model.forward(img)?.descriptor.concatenated))
        .collect::<Result<_>>()?;
    let gallery_ids: Vec<usize> = gallery_images.iter().map(|i| i.identity).collect();

    let mut rankings = Vec::with_capacity(queries.len());
    for q in &queries {
        let qd = model.forward(q)?.descriptor.concatenated;
        let order = rank_gallery(&qd, &gallery_desc)?;
        rankings.push(order.into_iter().map(|i| gallery_ids[i] == q.identity).collect::<Vec<bool>>());
    }

    Ok(MetricsReport {
        protocol_name: protocol.name(),
        shot_mode: protocol.shot_mode,
        cmc: cmc(&rankings, &protocol.ranks)?,
        map_score: mean_average_precision(&rankings)?,
        num_queries: queries.len(),
        seed,
    })
}

/// mAP distribution under random gallery labelings: one shared label
/// permutation per trial, applied to every query's ranking.
pub fn permutation_chance_maps(
    ranked_gallery_indices: &[Vec<usize>],
    gallery_ids: &[usize],
    query_ids: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(trials);
    let tree = SeedTree::new(seed).child("permutation");
    for t in 0..trials {
        let mut rng = tree.index(t as u64).rng();
        let perm = sample_without_replacement(&mut rng, gallery_ids.len(), gallery_ids.len());
        let permuted: Vec<usize> = perm.iter().map(|&i| gallery_ids[i]).collect();
        let rankings: Vec<Vec<bool>> = ranked_gallery_indices
            .iter()
            .zip(query_ids)
            .map(|(order, &qid)| order.iter().map(|&g| permuted[g] == qid).collect())
            .collect();
        out.push(mean_average_precision(&rankings)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// metrics.csv / metrics.json
// ---------------------------------------------------------------------------

/// `protocol,shot_mode,k,cmc` rows for every rank, then a
/// `protocol,shot_mode,mAP,value` row per report. LF line endings.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("protocol,shot_mode,k,cmc\n");
    for r in reports {
        for p in &r.cmc {
            out.push_str(&format!("{},{},{},{}\n", r.protocol_name, r.shot_mode.name(), p.k, p.rate));
        }
    }
    for r in reports {
        out.push_str(&format!("{},{},mAP,{}\n", r.protocol_name, r.shot_mode.name(), r.map_score));
    }
    out
}

pub fn write_metrics(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    fs::write(dir.join("metrics.csv"), metrics_csv(reports))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn query_in_gallery_ranks_first() {
        let q = vec![0.3, -0.7, 0.2];
        let gallery = vec![vec![1.0, 0.0, 0.0], q.clone(), vec![0.0, 1.0, 0.0]];
        assert_eq!(rank_gallery(&q, &gallery).unwrap()[0], 1);
    }

    #[test]
    fn orthogonal_gallery_tie_break_by_index() {
        let q = vec![1.0, 0.0, 0.0];
        let gallery = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        // Match first, then the two orthogonal entries in index order.
        assert_eq!(rank_gallery(&q, &gallery).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn ranking_matches_brute_force_on_random_instances() {
        let mut rng = SeedTree::new(77).rng();
        for _ in 0..100 {
            let dim = rng.gen_range(2..6);
            let n = rng.gen_range(1..50);
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect();
            let gallery: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect())
                .collect();
            let got = rank_gallery(&q, &gallery).unwrap();
            // O(n²) selection by repeated max search.
            let sims: Vec<f64> =
                gallery.iter().map(|g| cosine_similarity(&q, g).unwrap()).collect();
            let mut remaining: Vec<usize> = (0..n).collect();
            let mut expect = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0;
                for i in 1..remaining.len() {
                    if sims[remaining[i]] > sims[remaining[best]] {
                        best = i;
                    }
                }
                expect.push(remaining.remove(best));
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn cmc_all_rank_one() {
        let rankings = vec![vec![true, false], vec![true, true]];
        let points = cmc(&rankings, &[1]).unwrap();
        assert_eq!(points[0].rate, 1.0);
    }

    #[test]
    fn cmc_arithmetic_two_queries() {
        let rankings = vec![vec![true, false, false], vec![false, false, true]];
        let points = cmc(&rankings, &[1, 3]).unwrap();
        assert_eq!(points[0], CmcPoint { k: 1, rate: 0.5 });
        assert_eq!(points[1], CmcPoint { k: 3, rate: 1.0 });
    }

    #[test]
    fn cmc_matches_first_match_scan() {
        let mut rng = SeedTree::new(78).rng();
        for _ in 0..100 {
            let n_q = rng.gen_range(1..10);
            let n_g = rng.gen_range(1..50);
            let rankings: Vec<Vec<bool>> = (0..n_q)
                .map(|_| {
                    let mut flags: Vec<bool> = (0..n_g).map(|_| rng.gen_bool(0.2)).collect();
                    let at = rng.gen_range(0..n_g);
                    flags[at] = true; // ensure ≥1 match
                    flags
                })
                .collect();
            let ks: Vec<usize> = (1..=n_g).collect();
            let points = cmc(&rankings, &ks).unwrap();
            for p in &points {
                let mut count = 0;
                for flags in &rankings {
                    let first = flags.iter().position(|&f| f).unwrap() + 1;
                    if first <= p.k {
                        count += 1;
                    }
                }
                assert_eq!(p.rate, count as f64 / n_q as f64);
            }
            // Monotone non-decreasing in k.
            for w in points.windows(2) {
                assert!(w[0].rate <= w[1].rate);
            }
        }
    }

    #[test]
    fn cmc_rejects_matchless_query() {
        assert!(cmc(&[vec![false, false]], &[1]).is_err());
    }

    #[test]
    fn ap_closed_forms() {
        assert_eq!(average_precision(&[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true]).unwrap(), 0.5);
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn map_matches_exhaustive_oracle() {
        let mut rng = SeedTree::new(79).rng();
        for _ in 0..100 {
            let n_q = rng.gen_range(1..10);
            let n_g = rng.gen_range(1..50);
            let rankings: Vec<Vec<bool>> = (0..n_q)
                .map(|_| {
                    let mut flags: Vec<bool> = (0..n_g).map(|_| rng.gen_bool(0.3)).collect();
                    let at = rng.gen_range(0..n_g);
                    flags[at] = true;
                    flags
                })
                .collect();
            let got = mean_average_precision(&rankings).unwrap();
            // Exhaustive scan oracle.
            let mut total = 0.0;
            for flags in &rankings {
                let positions: Vec<usize> = flags
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &f)| if f { Some(i + 1) } else { None })
                    .collect();
                let mut ap = 0.0;
                for (hit_no, &r) in positions.iter().enumerate() {
                    ap += (hit_no + 1) as f64 / r as f64;
                }
                total += ap / positions.len() as f64;
            }
            assert!((got - total / n_q as f64).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn map_invariant_under_gallery_permutation() {
        // Permuting gallery entries permutes ranked flags identically once
        // scores re-rank them; verify on the flag level by permuting ranks
        // of equal structure.
        let mut rng = SeedTree::new(80).rng();
        let q = vec![0.4, 0.3, -0.2, 0.9];
        let gallery: Vec<Vec<f64>> =
            (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ids: Vec<usize> = (0..20).map(|i| i % 5).collect();
        let order = rank_gallery(&q, &gallery).unwrap();
        let flags: Vec<bool> = order.iter().map(|&g| ids[g] == 2).collect();
        let map1 = mean_average_precision(&[flags]).unwrap();

        // Permute the gallery list and recompute end-to-end.
        let perm: Vec<usize> = {
            let mut rng2 = SeedTree::new(81).rng();
            sample_without_replacement(&mut rng2, 20, 20)
        };
        let gallery2: Vec<Vec<f64>> = perm.iter().map(|&i| gallery[i].clone()).collect();
        let ids2: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let order2 = rank_gallery(&q, &gallery2).unwrap();
        let flags2: Vec<bool> = order2.iter().map(|&g| ids2[g] == 2).collect();
        let map2 = mean_average_precision(&[flags2]).unwrap();
        assert!((map1 - map2).abs() < 1e-12);
    }

    #[test]
    fn protocol_validation() {
        assert!(RetrievalProtocol::new(Modality::Visible, ShotMode::Single, vec![1, 5]).is_ok());
        let mut p = RetrievalProtocol::new(Modality::Visible, ShotMode::Single, vec![1]).unwrap();
        p.gallery_modality = Modality::Visible;
        assert!(p.validate().is_err());
        assert!(RetrievalProtocol::new(Modality::Visible, ShotMode::Single, vec![5, 1]).is_err());
        assert!(RetrievalProtocol::new(Modality::Visible, ShotMode::Single, vec![0, 1]).is_err());
    }

    #[test]
    fn csv_shape() {
        let reports = vec![MetricsReport {
            protocol_name: "visible_to_infrared".into(),
            shot_mode: ShotMode::Single,
            cmc: vec![CmcPoint { k: 1, rate: 0.5 }, CmcPoint { k: 5, rate: 1.0 }],
            map_score: 0.75,
            num_queries: 4,
            seed: 0,
        }];
        let csv = metrics_csv(&reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "protocol,shot_mode,k,cmc");
        assert_eq!(lines[1], "visible_to_infrared,single,1,0.5");
        assert_eq!(lines[3], "visible_to_infrared,single,mAP,0.75");
    }
}

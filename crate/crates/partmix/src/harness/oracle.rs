//! The `oracle` suite: brute-force equivalence checks on seeded random
//! instances. Each suite pits a production path against an independent
//! naive implementation written here.

use rand::Rng;
use serde::Serialize;

use crate::augment::{
    gen_negative_routed, gen_positive_routed, part_mix, BankEntry, DescriptorBank, MixRole,
    MixRoute, MixSpec, MixedSample,
};
use crate::data::Modality;
use crate::encoder::{classify, AffineParams, PartDescriptorSet};
use crate::error::Result;
use crate::eval::{cmc, mean_average_precision, rank_gallery};
use crate::harness::config::ExperimentConfig;
use crate::harness::trainer::FastScorer;
use crate::mining::{entropy_gap, mine_scored, score_pool, EntropyRecord};
use crate::numerics::{cosine_similarity, shannon_entropy};
use crate::rng::{sample_without_replacement, SeedTree};

#[derive(Debug, Clone, Serialize)]
pub struct OracleEntry {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub entries: Vec<OracleEntry>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.failures == 0)
    }
}

const REAL_TOL: f64 = 1e-12;
/// The incremental scorer reorders floating-point sums; allow rounding slack.
const FAST_TOL: f64 = 1e-9;

fn random_parts(rng: &mut impl Rng, m: usize, cf: usize) -> PartDescriptorSet {
    PartDescriptorSet::new(
        (0..m).map(|_| (0..cf).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
    )
}

fn random_banks(rng: &mut impl Rng, m: usize, cf: usize) -> [DescriptorBank; 2] {
    let ids = rng.gen_range(2..=4);
    let mut banks = [DescriptorBank::new(Modality::Visible), DescriptorBank::new(Modality::Infrared)];
    for bank in banks.iter_mut() {
        for identity in 0..ids {
            for _ in 0..rng.gen_range(1..=3usize) {
                bank.push(random_parts(rng, m, cf), identity);
            }
        }
    }
    banks
}

/// Independent enumeration of positive partners: per route, every
/// same-identity entry of the route's source bank.
fn oracle_positive_partners(
    anchor: &BankEntry,
    banks: &[DescriptorBank; 2],
    routes: &[MixRoute],
) -> Vec<(MixRoute, usize)> {
    let mut out = Vec::new();
    for &route in routes {
        let (bank, skip) = match route {
            MixRoute::Inter => (&banks[anchor.modality.other().index()], None),
            MixRoute::Intra => (&banks[anchor.modality.index()], Some(anchor.entry_index)),
        };
        for e in bank.entries() {
            if e.identity == anchor.identity && Some(e.entry_index) != skip {
                out.push((route, e.entry_index));
            }
        }
    }
    out
}

/// Independent enumeration of negative partners: same-identity branch over
/// both routes, then different-identity branch.
fn oracle_negative_partners(
    anchor: &BankEntry,
    banks: &[DescriptorBank; 2],
    routes: &[MixRoute],
) -> Vec<(bool, MixRoute, usize)> {
    let mut out = Vec::new();
    for same in [true, false] {
        for &route in routes {
            let (bank, skip) = match route {
                MixRoute::Inter => (&banks[anchor.modality.other().index()], None),
                MixRoute::Intra => (&banks[anchor.modality.index()], Some(anchor.entry_index)),
            };
            for e in bank.entries() {
                if (e.identity == anchor.identity) == same && Some(e.entry_index) != skip {
                    out.push((same, route, e.entry_index));
                }
            }
        }
    }
    out
}

fn replay(anchor: &PartDescriptorSet, donor: &PartDescriptorSet, sample: &MixedSample) -> bool {
    let mut rebuilt = anchor.clone();
    for &(u, h) in &sample.replaced_slots {
        rebuilt = match part_mix(&rebuilt, u, donor, h) {
            Ok(p) => p,
            Err(_) => return false,
        };
    }
    rebuilt == sample.parts
}

fn suite_part_mix(cases: usize, seed: u64) -> OracleEntry {
    let mut rng = SeedTree::new(seed).child("part_mix").rng();
    let mut failures = 0;
    for _ in 0..cases {
        let m = rng.gen_range(2..=8);
        let cf = rng.gen_range(1..=6);
        let a = random_parts(&mut rng, m, cf);
        let b = random_parts(&mut rng, m, cf);
        let u = rng.gen_range(0..m);
        let h = rng.gen_range(0..m);
        let mixed = match part_mix(&a, u, &b, h) {
            Ok(p) => p,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        // Naive list rewrite.
        let mut expect: Vec<Vec<f64>> = a.parts().to_vec();
        expect[u] = b.part(h).to_vec();
        if mixed.parts() != expect.as_slice() {
            failures += 1;
        }
    }
    OracleEntry { suite: "part_mix".into(), cases, failures }
}

fn suite_pools(cases: usize, seed: u64) -> (OracleEntry, OracleEntry, OracleEntry) {
    let mut rng = SeedTree::new(seed).child("pools").rng();
    let mut pos_failures = 0;
    let mut neg_failures = 0;
    let mut replay_failures = 0;
    let mut replay_cases = 0;
    let routes = [MixRoute::Inter, MixRoute::Intra];
    for case in 0..cases {
        let m = rng.gen_range(2..=6);
        let cf = rng.gen_range(1..=4);
        let b = rng.gen_range(0..=m.min(3));
        let spec = MixSpec { num_mixed: b, pos_pool_cap: 1000, neg_pool_cap: 1000 };
        let banks = random_banks(&mut rng, m, cf);
        let bank_idx = rng.gen_range(0..2usize);
        let entry_idx = rng.gen_range(0..banks[bank_idx].len());
        let anchor = banks[bank_idx].entry(entry_idx).clone();
        let case_seed = seed ^ (case as u64) << 16;

        let pos = gen_positive_routed(&anchor, &banks, &spec, &routes, case_seed).unwrap();
        let expect = oracle_positive_partners(&anchor, &banks, &routes);
        let got: Vec<(MixRoute, usize)> = pos.iter().map(|s| (s.route, s.donor_index)).collect();
        let invariants_ok = pos.iter().all(|s| {
            s.role == MixRole::Positive
                && s.donor_identity == anchor.identity
                && s.replaced_slots.len() == b
                && s.replaced_slots.iter().all(|&(u, h)| u == h)
        });
        if got != expect || !invariants_ok {
            pos_failures += 1;
        }

        let neg = gen_negative_routed(&anchor, &banks, &spec, &routes, case_seed).unwrap();
        let expect = oracle_negative_partners(&anchor, &banks, &routes);
        // Same-identity pairs need crossed slots, impossible only when m < 2.
        let got: Vec<(bool, MixRoute, usize)> = neg
            .iter()
            .map(|s| (s.donor_identity == anchor.identity, s.route, s.donor_index))
            .collect();
        let invariants_ok = neg.iter().all(|s| {
            let crossed = s.replaced_slots.iter().all(|&(u, h)| u != h);
            let matched = s.replaced_slots.iter().all(|&(u, h)| u == h);
            s.role == MixRole::Negative
                && s.replaced_slots.len() == b
                && if s.donor_identity == anchor.identity { crossed } else { matched }
        });
        if got != expect || !invariants_ok {
            neg_failures += 1;
        }

        for s in pos.iter().chain(&neg) {
            replay_cases += 1;
            let donor = banks[s.donor_modality.index()].entry(s.donor_index);
            if !replay(&anchor.parts, &donor.parts, s) {
                replay_failures += 1;
            }
        }
    }
    (
        OracleEntry { suite: "positive_pool_enumeration".into(), cases, failures: pos_failures },
        OracleEntry { suite: "negative_pool_enumeration".into(), cases, failures: neg_failures },
        OracleEntry {
            suite: "provenance_replay".into(),
            cases: replay_cases,
            failures: replay_failures,
        },
    )
}

fn suite_mining(cases: usize, seed: u64) -> OracleEntry {
    let mut rng = SeedTree::new(seed).child("mining").rng();
    let mut failures = 0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=200usize);
        // Coarse grid makes duplicate gaps (ties) common.
        let gaps: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let make = |gaps: &[f64]| -> Vec<EntropyRecord> {
            gaps.iter()
                .enumerate()
                .map(|(i, &g)| EntropyRecord {
                    candidate: MixedSample {
                        parts: PartDescriptorSet::new(vec![vec![g]]),
                        anchor_index: 0,
                        donor_index: 0,
                        donor_modality: Modality::Infrared,
                        donor_identity: 0,
                        replaced_slots: vec![],
                        route: MixRoute::Inter,
                        role: MixRole::Positive,
                    },
                    entropy_gap: g,
                    pool_position: i,
                })
                .collect()
        };
        let u = rng.gen_range(1..=n);
        let q = rng.gen_range(1..=n);
        let banks = mine_scored(make(&gaps), make(&gaps), u, q);

        // O(n²) selection-sort oracle.
        let select = |descending: bool, quota: usize| -> Vec<usize> {
            let mut remaining: Vec<(f64, usize)> = gaps.iter().cloned().zip(0..n).collect();
            let mut picked = Vec::new();
            while picked.len() < quota && !remaining.is_empty() {
                let mut best = 0;
                for i in 1..remaining.len() {
                    let better = if descending {
                        remaining[i].0 > remaining[best].0
                    } else {
                        remaining[i].0 < remaining[best].0
                    };
                    if better
                        || (remaining[i].0 == remaining[best].0
                            && remaining[i].1 < remaining[best].1)
                    {
                        best = i;
                    }
                }
                picked.push(remaining.remove(best).1);
            }
            picked
        };
        let pos_got: Vec<usize> = banks.positives.iter().map(|r| r.pool_position).collect();
        let neg_got: Vec<usize> = banks.negatives.iter().map(|r| r.pool_position).collect();
        if pos_got != select(false, u) || neg_got != select(true, q) {
            failures += 1;
        }
    }
    OracleEntry { suite: "entropy_mining".into(), cases, failures }
}

fn suite_entropy_gap(cases: usize, seed: u64) -> (OracleEntry, OracleEntry) {
    let mut rng = SeedTree::new(seed).child("gaps").rng();
    let mut direct_failures = 0;
    let mut fast_failures = 0;
    for _ in 0..cases {
        let m = rng.gen_range(2..=6);
        let cf = rng.gen_range(1..=4);
        let classes = rng.gen_range(2..=8);
        let classifier = AffineParams {
            w: (0..m * cf * classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b: (0..classes).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            in_dim: m * cf,
            out_dim: classes,
        };
        let banks = random_banks(&mut rng, m, cf);
        let bank_idx = rng.gen_range(0..2usize);
        let entry_idx = rng.gen_range(0..banks[bank_idx].len());
        let anchor = banks[bank_idx].entry(entry_idx).clone();
        let spec = MixSpec { num_mixed: rng.gen_range(1..=m.min(3)), pos_pool_cap: 64, neg_pool_cap: 64 };
        let routes = [MixRoute::Inter, MixRoute::Intra];
        let pool =
            gen_negative_routed(&anchor, &banks, &spec, &routes, rng.gen()).unwrap();

        // Direct recomposition: classify then entropy, independently.
        for s in &pool {
            let got = entropy_gap(&anchor.parts, s, &classifier).unwrap();
            let ha = shannon_entropy(&classify(&classifier, &anchor.parts.concat()).unwrap()).unwrap();
            let hc = shannon_entropy(&classify(&classifier, &s.parts.concat()).unwrap()).unwrap();
            if (got - (ha - hc).abs()).abs() > REAL_TOL {
                direct_failures += 1;
            }
        }

        // Incremental scorer against the direct scoring route.
        let scorer = FastScorer::new(&classifier, cf, m, &banks);
        let direct = score_pool(&anchor.parts, pool.clone(), &classifier).unwrap();
        let fast = scorer.score(bank_idx, entry_idx, pool);
        for (d, f) in direct.iter().zip(&fast) {
            if (d.entropy_gap - f.entropy_gap).abs() > FAST_TOL {
                fast_failures += 1;
            }
        }
    }
    (
        OracleEntry { suite: "entropy_gap_recomposition".into(), cases, failures: direct_failures },
        OracleEntry { suite: "fast_scoring_consistency".into(), cases, failures: fast_failures },
    )
}

fn suite_pooling(cases: usize, seed: u64) -> OracleEntry {
    use crate::encoder::{pool_parts, FeatureMap, PartMaps};
    use crate::numerics::Tensor;
    let mut rng = SeedTree::new(seed).child("pooling").rng();
    let mut failures = 0;
    for _ in 0..cases {
        let s_total = rng.gen_range(1..=30);
        let cf = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=6);
        let f = FeatureMap {
            values: Tensor::new(
                vec![s_total, cf],
                (0..s_total * cf).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        };
        let maps = PartMaps {
            values: Tensor::new(
                vec![s_total, m],
                (0..s_total * m).map(|_| rng.gen_range(0.01..0.99)).collect(),
            )
            .unwrap(),
        };
        let pooled = pool_parts(&f, &maps).unwrap();
        for k in 0..m {
            for c in 0..cf {
                let mut acc = 0.0;
                for s in 0..s_total {
                    acc += maps.values.at2(s, k) * f.values.at2(s, c);
                }
                acc /= s_total as f64;
                if (pooled.part(k)[c] - acc).abs() > REAL_TOL {
                    failures += 1;
                }
            }
        }
    }
    OracleEntry { suite: "masked_pooling".into(), cases, failures }
}

fn suite_retrieval(cases: usize, seed: u64) -> (OracleEntry, OracleEntry, OracleEntry) {
    let mut rng = SeedTree::new(seed).child("retrieval").rng();
    let mut rank_failures = 0;
    let mut cmc_failures = 0;
    let mut map_failures = 0;
    for _ in 0..cases {
        let dim = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=50);
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect();
        let gallery: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 0.01).collect())
            .collect();
        let got = rank_gallery(&q, &gallery).unwrap();
        let sims: Vec<f64> = gallery.iter().map(|g| cosine_similarity(&q, g).unwrap()).collect();
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
        if got != expect {
            rank_failures += 1;
        }

        // CMC and mAP over random match flags (≥ 1 match per query).
        let n_q = rng.gen_range(1..=10);
        let n_g = rng.gen_range(1..=50);
        let rankings: Vec<Vec<bool>> = (0..n_q)
            .map(|_| {
                let mut flags: Vec<bool> = (0..n_g).map(|_| rng.gen_bool(0.25)).collect();
                let at = rng.gen_range(0..n_g);
                flags[at] = true;
                flags
            })
            .collect();
        let ks: Vec<usize> = (1..=n_g).collect();
        let points = cmc(&rankings, &ks).unwrap();
        for p in &points {
            let mut count = 0;
            for flags in &rankings {
                if flags.iter().position(|&f| f).unwrap() + 1 <= p.k {
                    count += 1;
                }
            }
            if (p.rate - count as f64 / n_q as f64).abs() > REAL_TOL {
                cmc_failures += 1;
            }
        }
        let got_map = mean_average_precision(&rankings).unwrap();
        let mut total = 0.0;
        for flags in &rankings {
            let positions: Vec<usize> = flags
                .iter()
                .enumerate()
                .filter_map(|(i, &f)| if f { Some(i + 1) } else { None })
                .collect();
            let mut ap = 0.0;
            for (hit, &r) in positions.iter().enumerate() {
                ap += (hit + 1) as f64 / r as f64;
            }
            total += ap / positions.len() as f64;
        }
        if (got_map - total / n_q as f64).abs() > REAL_TOL {
            map_failures += 1;
        }
    }
    (
        OracleEntry { suite: "rank_gallery".into(), cases, failures: rank_failures },
        OracleEntry { suite: "cmc".into(), cases, failures: cmc_failures },
        OracleEntry { suite: "mean_average_precision".into(), cases, failures: map_failures },
    )
}

fn suite_mining_permutation(cases: usize, seed: u64) -> OracleEntry {
    let mut rng = SeedTree::new(seed).child("perm").rng();
    let mut failures = 0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=60);
        let gaps: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
        let recs = |gs: &[f64]| -> Vec<EntropyRecord> {
            gs.iter()
                .enumerate()
                .map(|(i, &g)| EntropyRecord {
                    candidate: MixedSample {
                        parts: PartDescriptorSet::new(vec![vec![g]]),
                        anchor_index: 0,
                        donor_index: 0,
                        donor_modality: Modality::Visible,
                        donor_identity: 0,
                        replaced_slots: vec![],
                        route: MixRoute::Intra,
                        role: MixRole::Negative,
                    },
                    entropy_gap: g,
                    pool_position: i,
                })
                .collect()
        };
        let quota = rng.gen_range(1..=n);
        let a = mine_scored(vec![], recs(&gaps), 1, quota);
        let perm = sample_without_replacement(&mut rng, n, n);
        let shuffled: Vec<f64> = perm.iter().map(|&i| gaps[i]).collect();
        let b = mine_scored(vec![], recs(&shuffled), 1, quota);
        let mut ga: Vec<f64> = a.negatives.iter().map(|r| r.entropy_gap).collect();
        let mut gb: Vec<f64> = b.negatives.iter().map(|r| r.entropy_gap).collect();
        ga.sort_by(|x, y| x.partial_cmp(y).unwrap());
        gb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if ga != gb {
            failures += 1;
        }
    }
    OracleEntry { suite: "mining_permutation_invariance".into(), cases, failures }
}

/// Runs every suite with at least `cases_per_suite` seeded instances.
pub fn run_oracle(_config: &ExperimentConfig, cases_per_suite: usize, seed: u64) -> Result<OracleReport> {
    let mut entries = Vec::new();
    entries.push(suite_part_mix(cases_per_suite, seed));
    let (p, n, r) = suite_pools(cases_per_suite, seed);
    entries.push(p);
    entries.push(n);
    entries.push(r);
    entries.push(suite_mining(cases_per_suite, seed));
    let (direct, fast) = suite_entropy_gap(cases_per_suite, seed);
    entries.push(direct);
    entries.push(fast);
    entries.push(suite_pooling(cases_per_suite, seed));
    let (rank, cmc_entry, map_entry) = suite_retrieval(cases_per_suite, seed);
    entries.push(rank);
    entries.push(cmc_entry);
    entries.push(map_entry);
    entries.push(suite_mining_permutation(cases_per_suite, seed));
    Ok(OracleReport { entries })
}

//! Exhaustive retrieval reference: every gallery entry's rank is obtained
//! by counting the valid entries that precede it, with no sorting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmt_core::eval::{Labels, Protocol, RankingReport};
use tmt_core::Tensor;

pub struct Instance {
    pub distances: Tensor,
    pub query_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub gallery_cams: Vec<usize>,
}

impl Instance {
    pub fn query(&self) -> Labels<'_> {
        Labels {
            identities: &self.query_ids,
            cameras: &self.query_cams,
        }
    }

    pub fn gallery(&self) -> Labels<'_> {
        Labels {
            identities: &self.gallery_ids,
            cameras: &self.gallery_cams,
        }
    }
}

/// `Nq ≤ 6`, `Ng ≤ 10`, few identities and cameras, and distances drawn
/// from a coarse grid so that ties are common.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let nq = r.random_range(1..=6);
    let ng = r.random_range(1..=10);
    let ids = r.random_range(1..=4);
    let cams = r.random_range(1..=3);
    let data = (0..nq * ng).map(|_| r.random_range(0..5) as f64 * 0.25).collect();
    Instance {
        distances: Tensor::new(&[nq, ng], data).unwrap(),
        query_ids: (0..nq).map(|_| r.random_range(0..ids)).collect(),
        query_cams: (0..nq).map(|_| r.random_range(0..cams)).collect(),
        gallery_ids: (0..ng).map(|_| r.random_range(0..ids)).collect(),
        gallery_cams: (0..ng).map(|_| r.random_range(0..cams)).collect(),
    }
}

fn valid(inst: &Instance, qi: usize, gj: usize, protocol: Protocol) -> bool {
    protocol == Protocol::SingleGallery
        || !(inst.gallery_ids[gj] == inst.query_ids[qi] && inst.gallery_cams[gj] == inst.query_cams[qi])
}

/// 1-based rank of valid entry `gj` among the valid entries for query `qi`:
/// entries strictly closer, or equally close with a lower index, precede it.
fn rank_of(inst: &Instance, qi: usize, gj: usize, protocol: Protocol) -> usize {
    let d = |j: usize| inst.distances.at2(qi, j);
    1 + (0..inst.gallery_ids.len())
        .filter(|&k| k != gj && valid(inst, qi, k, protocol))
        .filter(|&k| d(k) < d(gj) || (d(k) == d(gj) && k < gj))
        .count()
}

/// Reference report for `max_rank` ranks.
pub fn brute_force(inst: &Instance, protocol: Protocol, max_rank: usize) -> RankingReport {
    let nq = inst.query_ids.len();
    let ng = inst.gallery_ids.len();
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    for qi in 0..nq {
        let mut relevant_ranks: Vec<usize> = (0..ng)
            .filter(|&j| valid(inst, qi, j, protocol) && inst.gallery_ids[j] == inst.query_ids[qi])
            .map(|j| rank_of(inst, qi, j, protocol))
            .collect();
        if relevant_ranks.is_empty() {
            continue;
        }
        relevant_ranks.sort_unstable();
        first_hits.push(relevant_ranks[0]);
        let mut acc = 0.0;
        for (i, &rank) in relevant_ranks.iter().enumerate() {
            acc += (i + 1) as f64 / rank as f64;
        }
        aps.push(acc / relevant_ranks.len() as f64);
    }
    let evaluated = first_hits.len();
    let cmc = (1..=max_rank)
        .map(|k| {
            if evaluated == 0 {
                0.0
            } else {
                first_hits.iter().filter(|&&h| h <= k).count() as f64 / evaluated as f64
            }
        })
        .collect();
    let (map, per_query_ap) = match protocol {
        Protocol::CrossCamera => {
            let m = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
            (Some(m), aps)
        }
        Protocol::SingleGallery => (None, Vec::new()),
    };
    RankingReport {
        cmc,
        map,
        per_query_ap,
        evaluated_queries: evaluated,
        skipped_queries: nq - evaluated,
    }
}

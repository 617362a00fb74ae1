//! Retrieval metrics: distance matrices, CMC curves and mean average
//! precision.
//!
//! Gallery entries are ranked by ascending distance, ties broken by gallery
//! index. Under [`Protocol::CrossCamera`] gallery entries sharing both the
//! query's identity and camera are removed from the ranking before anything
//! is counted. Queries without any valid match are skipped and counted.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance between L2-normalised rows.
    Euclidean,
    /// `1 − cos(q, g)`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Multi-shot protocol: same identity under the same camera is junk;
    /// reports CMC and mAP.
    CrossCamera,
    /// No filtering; reports CMC only.
    SingleGallery,
}

/// Identity and camera labels of a query or gallery set.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub identities: &'a [usize],
    pub cameras: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// `cmc[k]` = fraction of evaluated queries matched within rank `k+1`.
    pub cmc: Vec<f64>,
    /// Mean over evaluated queries; absent under single-gallery protocol.
    pub map: Option<f64>,
    /// AP of every evaluated query, in query order.
    pub per_query_ap: Vec<f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

impl RankingReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

fn normalized_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    x.data()
        .chunks(x.last_dim())
        .map(|r| {
            let n = math::sqrt(r.iter().map(|v| v * v).sum());
            if !n.is_finite() {
                return Err(Error::NonFinite {
                    what: "descriptor norm".into(),
                    value: n,
                });
            }
            if n == 0.0 {
                return Err(Error::Contract("a zero descriptor cannot be normalised".into()));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// `[Nq, Ng]` distances between the rows of `queries` and `gallery`.
pub fn pairwise_distance(queries: &Tensor, gallery: &Tensor, metric: Metric) -> Result<Tensor> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.last_dim() != gallery.last_dim() {
        return Err(dim_err("pairwise_distance", queries.shape(), gallery.shape()));
    }
    let q = normalized_rows(queries)?;
    let g = normalized_rows(gallery)?;
    let mut out = Vec::with_capacity(q.len() * g.len());
    for a in &q {
        for b in &g {
            let d = match metric {
                Metric::Euclidean => math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
                Metric::Cosine => 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
            };
            out.push(d);
        }
    }
    Tensor::new(&[q.len(), g.len()], out)
}

fn check_labels(distances: &Tensor, query: Labels<'_>, gallery: Labels<'_>) -> Result<(usize, usize)> {
    if distances.rank() != 2 {
        return Err(dim_err("ranking", distances.shape(), &[]));
    }
    let (nq, ng) = (distances.shape()[0], distances.shape()[1]);
    if query.identities.len() != nq || query.cameras.len() != nq {
        return Err(dim_err("ranking query labels", &[nq], &[query.identities.len(), query.cameras.len()]));
    }
    if gallery.identities.len() != ng || gallery.cameras.len() != ng {
        return Err(dim_err(
            "ranking gallery labels",
            &[ng],
            &[gallery.identities.len(), gallery.cameras.len()],
        ));
    }
    if distances.data().iter().any(|d| d.is_nan()) {
        return Err(Error::Contract("distance matrix contains NaN".into()));
    }
    Ok((nq, ng))
}

/// Relevance flags of the valid gallery entries for query `qi`, in rank
/// order.
fn ranked_matches(
    distances: &Tensor,
    qi: usize,
    query: Labels<'_>,
    gallery: Labels<'_>,
    protocol: Protocol,
) -> Vec<bool> {
    let ng = distances.shape()[1];
    let row = distances.row(qi);
    let mut order: Vec<usize> = (0..ng).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let (qid, qcam) = (query.identities[qi], query.cameras[qi]);
    order
        .into_iter()
        .filter(|&g| {
            protocol == Protocol::SingleGallery || !(gallery.identities[g] == qid && gallery.cameras[g] == qcam)
        })
        .map(|g| gallery.identities[g] == qid)
        .collect()
}

/// CMC curve up to `max_rank` and the number of skipped queries.
pub fn cmc_curve(
    distances: &Tensor,
    query: Labels<'_>,
    gallery: Labels<'_>,
    protocol: Protocol,
    max_rank: usize,
) -> Result<(Vec<f64>, usize)> {
    let (nq, _) = check_labels(distances, query, gallery)?;
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be ≥ 1".into()));
    }
    let mut hits = alloc::vec![0usize; max_rank];
    let (mut evaluated, mut skipped) = (0usize, 0usize);
    for qi in 0..nq {
        let m = ranked_matches(distances, qi, query, gallery, protocol);
        match m.iter().position(|&r| r) {
            None => skipped += 1,
            Some(first) => {
                evaluated += 1;
                for h in hits.iter_mut().skip(first) {
                    *h += 1;
                }
            }
        }
    }
    let cmc = hits
        .into_iter()
        .map(|h| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 })
        .collect();
    Ok((cmc, skipped))
}

/// Average precision from rank-ordered relevance flags:
/// `(1/R) Σ_i i / rank_i` over the `R` relevant entries.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut acc = 0.0;
    for (pos, _) in relevance.iter().enumerate().filter(|(_, &r)| r) {
        found += 1;
        acc += found as f64 / (pos + 1) as f64;
    }
    (found > 0).then(|| acc / found as f64)
}

/// mAP over queries with at least one valid match, the per-query APs and
/// the number of skipped queries.
pub fn mean_ap(
    distances: &Tensor,
    query: Labels<'_>,
    gallery: Labels<'_>,
    protocol: Protocol,
) -> Result<(f64, Vec<f64>, usize)> {
    let (nq, _) = check_labels(distances, query, gallery)?;
    let mut aps = Vec::new();
    let mut skipped = 0;
    for qi in 0..nq {
        match average_precision(&ranked_matches(distances, qi, query, gallery, protocol)) {
            Some(ap) => aps.push(ap),
            None => skipped += 1,
        }
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok((map, aps, skipped))
}

/// CMC and (under the cross-camera protocol) mAP in one report.
pub fn evaluate(
    distances: &Tensor,
    query: Labels<'_>,
    gallery: Labels<'_>,
    protocol: Protocol,
    max_rank: usize,
) -> Result<RankingReport> {
    let (cmc, skipped) = cmc_curve(distances, query, gallery, protocol, max_rank)?;
    let (map, per_query_ap) = match protocol {
        Protocol::CrossCamera => {
            let (m, aps, _) = mean_ap(distances, query, gallery, protocol)?;
            (Some(m), aps)
        }
        Protocol::SingleGallery => (None, Vec::new()),
    };
    Ok(RankingReport {
        cmc,
        map,
        per_query_ap,
        evaluated_queries: distances.shape()[0] - skipped,
        skipped_queries: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels<'a>(ids: &'a [usize], cams: &'a [usize]) -> Labels<'a> {
        Labels {
            identities: ids,
            cameras: cams,
        }
    }

    #[test]
    fn distance_examples() {
        let q = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 0.0]]).unwrap();
        let e = pairwise_distance(&q, &g, Metric::Euclidean).unwrap();
        assert_eq!(e.data()[1], 0.0);
        let c = pairwise_distance(&q, &g, Metric::Cosine).unwrap();
        assert_eq!(c.data()[0], 1.0);
        let z = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        assert!(matches!(pairwise_distance(&z, &g, Metric::Cosine), Err(Error::Contract(_))));
    }

    #[test]
    fn first_match_at_rank_two() {
        let d = Tensor::from_rows(&[&[0.1, 0.2, 0.3]]).unwrap();
        let (cmc, skipped) = cmc_curve(&d, labels(&[1], &[0]), labels(&[2, 1, 1], &[1, 1, 2]), Protocol::CrossCamera, 3).unwrap();
        assert_eq!(cmc, [0.0, 1.0, 1.0]);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[false, true, false]), Some(0.5));
        assert_eq!(average_precision(&[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn same_camera_matches_are_junk() {
        // The nearest entry shares identity and camera, so it is removed.
        let d = Tensor::from_rows(&[&[0.0, 0.5, 0.7]]).unwrap();
        let q = labels(&[3], &[0]);
        let g = labels(&[3, 4, 3], &[0, 1, 1]);
        let (cmc, _) = cmc_curve(&d, q, g, Protocol::CrossCamera, 2).unwrap();
        assert_eq!(cmc, [0.0, 1.0]);
        let (cmc, _) = cmc_curve(&d, q, g, Protocol::SingleGallery, 2).unwrap();
        assert_eq!(cmc, [1.0, 1.0]);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let d = Tensor::from_rows(&[&[0.5, 0.5]]).unwrap();
        let (cmc, _) = cmc_curve(&d, labels(&[1], &[0]), labels(&[2, 1], &[1, 1]), Protocol::CrossCamera, 2).unwrap();
        assert_eq!(cmc, [0.0, 1.0]);
        let (cmc, _) = cmc_curve(&d, labels(&[1], &[0]), labels(&[1, 2], &[1, 1]), Protocol::CrossCamera, 2).unwrap();
        assert_eq!(cmc, [1.0, 1.0]);
    }

    #[test]
    fn unmatched_queries_are_skipped() {
        let d = Tensor::from_rows(&[&[0.1, 0.2], &[0.3, 0.4]]).unwrap();
        let r = evaluate(&d, labels(&[1, 9], &[0, 0]), labels(&[1, 2], &[1, 1]), Protocol::CrossCamera, 2).unwrap();
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.evaluated_queries, 1);
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.rank1(), 1.0);
    }
}

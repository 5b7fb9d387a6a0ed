//! Retrieval metrics: CMC rank-k and mean average precision.
//!
//! For each query the gallery is ranked by ascending distance (ties by
//! gallery index). Gallery entries sharing both identity and camera with the
//! query are dropped when `exclude_same_camera` is set. Queries without any
//! correct match left in their gallery are skipped and counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProjectedKeys;
use crate::tensor::euclidean;

/// Which key is used as the retrieval descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalFeature {
    #[default]
    Global,
    Local,
    /// Global key with the concatenated local key appended.
    Joint,
}

impl std::str::FromStr for EvalFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            "joint" => Ok(Self::Joint),
            other => Err(Error::config(format!(
                "unknown eval feature `{other}` (expected global, local or joint)"
            ))),
        }
    }
}

pub fn descriptor(keys: &ProjectedKeys, feature: EvalFeature) -> Vec<f64> {
    match feature {
        EvalFeature::Global => keys.v_global.clone(),
        EvalFeature::Local => keys.v_local_concat.clone(),
        EvalFeature::Joint => {
            let mut v = keys.v_global.clone();
            v.extend_from_slice(&keys.v_local_concat);
            v
        }
    }
}

/// Identities and cameras of both sides of a retrieval benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub query_ids: Vec<u32>,
    pub query_cams: Vec<u16>,
    pub gallery_ids: Vec<u32>,
    pub gallery_cams: Vec<u16>,
    pub exclude_same_camera: bool,
}

impl EvalProtocol {
    fn check(&self, dists: &[Vec<f64>]) -> Result<()> {
        let q = self.query_ids.len();
        let m = self.gallery_ids.len();
        if self.query_cams.len() != q || self.gallery_cams.len() != m {
            return Err(Error::shape("eval", "identity and camera lists differ in length"));
        }
        if dists.len() != q || dists.iter().any(|r| r.len() != m) {
            return Err(Error::shape(
                "eval",
                format!("distance matrix does not match {q} queries x {m} gallery entries"),
            ));
        }
        Ok(())
    }

    fn excluded(&self, q: usize, g: usize) -> bool {
        self.exclude_same_camera
            && self.gallery_ids[g] == self.query_ids[q]
            && self.gallery_cams[g] == self.query_cams[q]
    }

    /// Relevance flags of the valid gallery in ranked order, plus the number
    /// of excluded entries.
    fn ranked_relevance(&self, q: usize, row: &[f64]) -> (Vec<bool>, usize) {
        let mut order: Vec<usize> = (0..row.len()).filter(|&g| !self.excluded(q, g)).collect();
        let excluded = row.len() - order.len();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let rel = order
            .into_iter()
            .map(|g| self.gallery_ids[g] == self.query_ids[q])
            .collect();
        (rel, excluded)
    }
}

/// `entry (q, g) = ||query_q - gallery_g||`.
pub fn distance_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = queries.first().or(gallery.first()).map_or(0, |v| v.len());
    if let Some(v) = queries.iter().chain(gallery).find(|v| v.len() != dim) {
        return Err(Error::shape(
            "distance_matrix",
            format!("feature of length {} among length-{dim} features", v.len()),
        ));
    }
    Ok(queries
        .iter()
        .map(|q| gallery.iter().map(|g| euclidean(q, g)).collect())
        .collect())
}

/// Average precision of one ranked relevance list.
pub fn average_precision(ranked: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    pub ks: Vec<usize>,
    pub rates: Vec<f64>,
    pub num_evaluated: usize,
    pub num_skipped: usize,
}

impl CmcResult {
    pub fn rate(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.rates[i])
    }
}

pub fn cmc_rank_k(dists: &[Vec<f64>], proto: &EvalProtocol, ks: &[usize]) -> Result<CmcResult> {
    proto.check(dists)?;
    let mut hits = vec![0usize; ks.len()];
    let mut evaluated = 0;
    let mut skipped = 0;
    for (q, row) in dists.iter().enumerate() {
        let (ranked, _) = proto.ranked_relevance(q, row);
        let Some(first) = ranked.iter().position(|&r| r) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k {
                *h += 1;
            }
        }
    }
    let rates = hits
        .iter()
        .map(|&h| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 })
        .collect();
    Ok(CmcResult {
        ks: ks.to_vec(),
        rates,
        num_evaluated: evaluated,
        num_skipped: skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub num_evaluated: usize,
    pub num_skipped: usize,
    pub num_excluded: usize,
}

pub fn mean_average_precision(dists: &[Vec<f64>], proto: &EvalProtocol) -> Result<MapResult> {
    proto.check(dists)?;
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    let mut excluded = 0;
    for (q, row) in dists.iter().enumerate() {
        let (ranked, ex) = proto.ranked_relevance(q, row);
        excluded += ex;
        if !ranked.iter().any(|&r| r) {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        total += average_precision(&ranked);
    }
    Ok(MapResult {
        map: if evaluated == 0 { 0.0 } else { total / evaluated as f64 },
        num_evaluated: evaluated,
        num_skipped: skipped,
        num_excluded: excluded,
    })
}

/// The JSON metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    /// Gallery entries removed by the same-identity same-camera rule,
    /// summed over queries.
    pub num_excluded: usize,
    /// Queries without any valid correct match.
    pub num_skipped: usize,
}

pub fn evaluate(dists: &[Vec<f64>], proto: &EvalProtocol) -> Result<EvalReport> {
    let cmc = cmc_rank_k(dists, proto, &[1, 5, 10])?;
    let map = mean_average_precision(dists, proto)?;
    Ok(EvalReport {
        rank1: cmc.rates[0],
        rank5: cmc.rates[1],
        rank10: cmc.rates[2],
        map: map.map,
        num_queries: dists.len(),
        num_excluded: map.num_excluded,
        num_skipped: map.num_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(qids: &[u32], gids: &[u32]) -> EvalProtocol {
        EvalProtocol {
            query_ids: qids.to_vec(),
            query_cams: vec![0; qids.len()],
            gallery_ids: gids.to_vec(),
            gallery_cams: vec![1; gids.len()],
            exclude_same_camera: true,
        }
    }

    #[test]
    fn distance_examples() {
        let d = distance_matrix(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(d[0][0], 0.0);
        assert!((d[0][1] - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert!(distance_matrix(&[vec![1.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn single_query_match_at_position_two() {
        let p = proto(&[7], &[1, 7, 2, 3, 4, 5]);
        let d = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]];
        let cmc = cmc_rank_k(&d, &p, &[1, 5]).unwrap();
        assert_eq!(cmc.rate(1), Some(0.0));
        assert_eq!(cmc.rate(5), Some(1.0));
    }

    #[test]
    fn ap_examples() {
        let mut one = vec![false; 10];
        one[1] = true;
        assert_eq!(average_precision(&one), 0.5);
        let two = [true, false, true, false];
        assert!((average_precision(&two) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true, true, false, false]), 1.0);
    }

    #[test]
    fn same_camera_same_identity_excluded() {
        let p = EvalProtocol {
            query_ids: vec![1],
            query_cams: vec![0],
            gallery_ids: vec![1, 2, 1],
            gallery_cams: vec![0, 1, 1],
            exclude_same_camera: true,
        };
        let d = vec![vec![0.0, 0.5, 1.0]];
        let r = evaluate(&d, &p).unwrap();
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.rank5, 1.0);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.num_excluded, 1);
        let keep = EvalProtocol {
            exclude_same_camera: false,
            ..p
        };
        assert_eq!(evaluate(&d, &keep).unwrap().rank1, 1.0);
    }

    #[test]
    fn queries_without_match_are_skipped() {
        let p = proto(&[1, 9], &[1, 2]);
        let d = vec![vec![0.1, 0.2], vec![0.1, 0.2]];
        let r = evaluate(&d, &p).unwrap();
        assert_eq!(r.num_skipped, 1);
        assert_eq!(r.rank1, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let p = proto(&[1], &[2, 1]);
        let d = vec![vec![0.3, 0.3]];
        assert_eq!(cmc_rank_k(&d, &p, &[1]).unwrap().rates[0], 0.0);
    }

    #[test]
    fn report_json_keys() {
        let p = proto(&[1], &[1]);
        let r = evaluate(&[vec![0.0]], &p).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        for key in ["rank1", "rank5", "rank10", "mAP", "num_queries", "num_excluded"] {
            assert!(json.contains(&format!("\"{key}\"")), "{json}");
        }
    }

    #[test]
    fn eval_feature_parses() {
        assert_eq!("joint".parse::<EvalFeature>().unwrap(), EvalFeature::Joint);
        assert!("both".parse::<EvalFeature>().is_err());
    }
}

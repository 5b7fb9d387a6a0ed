//! Distance-ranked selection of positives and negatives for one anchor.
//!
//! The anchor's fresh keys are compared against every other sample's bank
//! entries. The blended distance is a dissimilarity: smaller means more
//! alike, and same-camera pairs are pushed away by `lambda_c`. Candidates
//! are sorted ascending (ties by index) and split into the similar set
//! (first `n_plus`, the positives), the borderline set (next `n_minus`, the
//! negatives) and the discarded dissimilar remainder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBanks;
use crate::model::ProjectedKeys;
use crate::tensor::euclidean;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Weight of the global distance against the local one.
    pub beta: f64,
    /// Penalty added to same-camera pairs.
    pub lambda_c: f64,
    pub n_plus: usize,
    pub n_minus: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda_c: 0.005,
            n_plus: 7,
            n_minus: 500,
        }
    }
}

impl SimilarityConfig {
    /// Checks ranges, and that `n_samples` leaves enough candidates.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda_c >= 0.0) || !self.lambda_c.is_finite() {
            return Err(Error::config(format!("lambda_c must be >= 0, got {}", self.lambda_c)));
        }
        if self.n_plus + self.n_minus >= n_samples {
            return Err(Error::config(format!(
                "n_plus + n_minus = {} needs at least {} training samples, have {n_samples}",
                self.n_plus + self.n_minus,
                self.n_plus + self.n_minus + 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSelection {
    pub anchor: usize,
    /// The anchor followed by its `n_plus` nearest samples.
    pub positives: Vec<usize>,
    /// Ranks `n_plus + 1 ..= n_plus + n_minus`.
    pub negatives: Vec<usize>,
}

/// `||v_g - M^g[j]||`.
pub fn global_distance(v_global: &[f64], banks: &MemoryBanks, j: usize) -> Result<f64> {
    if j >= banks.len() {
        return Err(Error::IndexOutOfRange {
            what: "global bank",
            index: j,
            len: banks.len(),
        });
    }
    if !banks.global_initialized(j) {
        return Err(Error::Uninitialized { bank: "global", row: j });
    }
    Ok(euclidean(v_global, banks.global_row(j)))
}

/// Mean over stripes of the per-stripe Euclidean distance.
pub fn local_distance(v_stripes: &[f64], banks: &MemoryBanks, j: usize) -> Result<f64> {
    if j >= banks.len() {
        return Err(Error::IndexOutOfRange {
            what: "local bank",
            index: j,
            len: banks.len(),
        });
    }
    if !banks.local_initialized(j) {
        return Err(Error::Uninitialized { bank: "local", row: j });
    }
    let d = banks.dim();
    let s = banks.stripes();
    let total: f64 = (0..s)
        .map(|k| euclidean(&v_stripes[k * d..(k + 1) * d], banks.local_stripe(j, k)))
        .sum();
    Ok(total / s as f64)
}

pub fn camera_term(cam_i: u16, cam_j: u16, lambda_c: f64) -> f64 {
    if cam_i == cam_j {
        lambda_c
    } else {
        0.0
    }
}

pub fn total_distance(global: f64, local: f64, cce: f64, beta: f64) -> f64 {
    beta * global + (1.0 - beta) * local + cce
}

/// Blended distance from the anchor to every other sample, as
/// `(index, distance)` pairs in index order.
pub fn anchor_distances(
    anchor: usize,
    keys: &ProjectedKeys,
    banks: &MemoryBanks,
    cameras: &[u16],
    cfg: &SimilarityConfig,
) -> Result<Vec<(usize, f64)>> {
    if cameras.len() != banks.len() {
        return Err(Error::shape(
            "anchor_distances",
            format!("{} cameras for {} bank rows", cameras.len(), banks.len()),
        ));
    }
    if anchor >= banks.len() {
        return Err(Error::IndexOutOfRange {
            what: "training set",
            index: anchor,
            len: banks.len(),
        });
    }
    let mut out = Vec::with_capacity(banks.len() - 1);
    for j in (0..banks.len()).filter(|&j| j != anchor) {
        // Skip the unused branch so ablations with beta at an endpoint never
        // require the other bank.
        let g = if cfg.beta > 0.0 {
            global_distance(&keys.v_global, banks, j)?
        } else {
            0.0
        };
        let l = if cfg.beta < 1.0 {
            local_distance(&keys.v_stripes, banks, j)?
        } else {
            0.0
        };
        let cce = camera_term(cameras[anchor], cameras[j], cfg.lambda_c);
        out.push((j, total_distance(g, l, cce, cfg.beta)));
    }
    Ok(out)
}

/// Splits ranked candidates into positives and negatives.
pub fn select_ranked(
    anchor: usize,
    mut candidates: Vec<(usize, f64)>,
    n_plus: usize,
    n_minus: usize,
) -> Result<SampleSelection> {
    if candidates.len() < n_plus + n_minus {
        return Err(Error::config(format!(
            "only {} candidates for {n_plus} positives and {n_minus} negatives",
            candidates.len()
        )));
    }
    if let Some((j, d)) = candidates.iter().find(|(_, d)| d.is_nan()) {
        return Err(Error::non_finite(format!("distance to sample {j} is {d}")));
    }
    candidates.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut positives = Vec::with_capacity(n_plus + 1);
    positives.push(anchor);
    positives.extend(candidates[..n_plus].iter().map(|c| c.0));
    let negatives = candidates[n_plus..n_plus + n_minus]
        .iter()
        .map(|c| c.0)
        .collect();
    Ok(SampleSelection {
        anchor,
        positives,
        negatives,
    })
}

pub fn partition_and_select(
    anchor: usize,
    keys: &ProjectedKeys,
    banks: &MemoryBanks,
    cameras: &[u16],
    cfg: &SimilarityConfig,
) -> Result<SampleSelection> {
    let candidates = anchor_distances(anchor, keys, banks, cameras, cfg)?;
    select_ranked(anchor, candidates, cfg.n_plus, cfg.n_minus)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn global_distance_examples() {
        let mut b = MemoryBanks::new(3, 2, 1).unwrap();
        b.update_anchor_global(0, &[1.0, 0.0]).unwrap();
        b.update_anchor_global(1, &[-1.0, 0.0]).unwrap();
        b.update_anchor_global(2, &[0.0, 1.0]).unwrap();
        assert_eq!(global_distance(&[1.0, 0.0], &b, 0).unwrap(), 0.0);
        assert_eq!(global_distance(&[1.0, 0.0], &b, 1).unwrap(), 2.0);
        assert!((global_distance(&[1.0, 0.0], &b, 2).unwrap() - SQRT2).abs() < 1e-15);
    }

    #[test]
    fn uninitialized_rows_are_errors() {
        let b = MemoryBanks::new(2, 2, 1).unwrap();
        assert!(matches!(
            global_distance(&[1.0, 0.0], &b, 1),
            Err(Error::Uninitialized { bank: "global", row: 1 })
        ));
        assert!(matches!(
            local_distance(&[1.0, 0.0], &b, 0),
            Err(Error::Uninitialized { bank: "local", row: 0 })
        ));
    }

    #[test]
    fn local_distance_examples() {
        let d = 2;
        let mut b = MemoryBanks::new(1, d, 4).unwrap();
        let stored: Vec<f64> = [e(0, d), e(0, d), e(1, d), e(1, d)].concat();
        b.update_anchor_local(0, &stored).unwrap();
        assert_eq!(local_distance(&stored, &b, 0).unwrap(), 0.0);
        let half: Vec<f64> = [e(1, d), e(1, d), e(1, d), e(1, d)].concat();
        assert!((local_distance(&half, &b, 0).unwrap() - SQRT2 / 2.0).abs() < 1e-15);

        let mut p = MemoryBanks::new(1, d, 4).unwrap();
        let swapped: Vec<f64> = [e(1, d), e(1, d), e(0, d), e(0, d)].concat();
        p.update_anchor_local(0, &swapped).unwrap();
        let half_swapped: Vec<f64> = half.clone();
        assert_eq!(
            local_distance(&half, &b, 0).unwrap(),
            local_distance(&half_swapped, &p, 0).unwrap()
        );
    }

    #[test]
    fn camera_term_and_total() {
        assert_eq!(camera_term(2, 2, 0.005), 0.005);
        assert_eq!(camera_term(2, 3, 0.005), 0.0);
        assert_eq!(camera_term(3, 2, 0.005), camera_term(2, 3, 0.005));
        assert!((total_distance(0.2, 0.4, 0.005, 0.5) - 0.305).abs() < 1e-15);
        assert_eq!(total_distance(0.2, 0.4, 0.005, 1.0), 0.2 + 0.005);
        assert_eq!(total_distance(0.2, 0.4, 0.005, 0.0), 0.4 + 0.005);
    }

    #[test]
    fn hand_sorted_selection() {
        let cands = vec![(1, 0.1), (2, 0.9), (3, 0.3), (4, 0.5), (5, 0.7)];
        let sel = select_ranked(0, cands, 2, 2).unwrap();
        assert_eq!(sel.positives, vec![0, 1, 3]);
        assert_eq!(sel.negatives, vec![4, 5]);
    }

    #[test]
    fn ties_break_by_index() {
        let sel = select_ranked(0, vec![(7, 0.3), (2, 0.3)], 1, 1).unwrap();
        assert_eq!(sel.positives, vec![0, 2]);
        assert_eq!(sel.negatives, vec![7]);
    }

    #[test]
    fn too_few_candidates() {
        assert!(matches!(
            select_ranked(0, vec![(1, 0.1)], 1, 1),
            Err(Error::Config(_))
        ));
        let cfg = SimilarityConfig::default();
        assert!(cfg.validate(508).is_ok());
        assert!(cfg.validate(507).is_err());
        assert_eq!((cfg.n_plus, cfg.n_minus), (7, 500));
    }
}

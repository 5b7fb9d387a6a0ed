//! Selective contrastive loss against the mixture bank.
//!
//! For an anchor key `v` with positives `P` (anchor first) and negatives `Q`:
//!
//! ```text
//! L = -log( sum_{k in P} mu_k exp(v . M[k] / tau) / sum_{k in P u Q} exp(v . M[k] / tau) )
//! mu_anchor = lambda_t,   mu_k = alpha (1 - lambda_t) / |P|  otherwise
//! ```
//!
//! The factors are not normalized, so `L` can be negative. Both sums are
//! evaluated as log-sum-exp with max subtraction. Bank rows enter as
//! constants; only `v` receives gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::memory::MemoryBanks;
use crate::sampling::SampleSelection;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    /// Contribution factor of the anchor's own key.
    pub lambda_t: f64,
    /// Expanding coefficient for the non-anchor positives.
    pub alpha: f64,
    /// Weight of the local loss against the global one.
    pub lambda_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda_t: 0.5,
            alpha: 1.75,
            lambda_p: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda_t) {
            return Err(Error::config(format!("lambda_t must be in [0, 1], got {}", self.lambda_t)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda_p) {
            return Err(Error::config(format!("lambda_p must be in [0, 1], got {}", self.lambda_p)));
        }
        Ok(())
    }
}

/// Factors aligned with `positives`.
pub fn contribution_factors(positives: &[usize], anchor: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    if !positives.contains(&anchor) {
        return Err(Error::config(format!("anchor {anchor} missing from its positive set")));
    }
    let other = cfg.alpha * (1.0 - cfg.lambda_t) / positives.len() as f64;
    Ok(positives
        .iter()
        .map(|&k| if k == anchor { cfg.lambda_t } else { other })
        .collect())
}

fn gather_mixture(banks: &MemoryBanks, keys: &[usize]) -> Result<Tensor> {
    let d = banks.dim();
    let mut data = Vec::with_capacity(keys.len() * d);
    for &k in keys {
        if k >= banks.len() {
            return Err(Error::IndexOutOfRange {
                what: "mixture bank",
                index: k,
                len: banks.len(),
            });
        }
        let row = banks.mixture_row(k);
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite(format!("mixture bank key {k}")));
        }
        data.extend_from_slice(row);
    }
    Tensor::matrix(keys.len(), d, data)
}

/// `log sum_k exp(z_k)  -  log sum_k w_k exp(z_k)` with `z = v . M[keys] / tau`.
fn contrastive_from_weights(
    graph: &mut Graph,
    v: Var,
    banks: &MemoryBanks,
    keys: &[usize],
    numerator_weights: &[f64],
    tau: f64,
) -> Result<Var> {
    let dict = graph.input(gather_mixture(banks, keys)?);
    let v_row = if graph.value(v).shape().len() == 2 {
        v
    } else {
        let d = graph.value(v).len();
        graph.reshape(v, &[1, d])?
    };
    let logits = graph.matmul_nt(v_row, dict)?;
    if let Some(pos) = graph.value(logits).data().iter().position(|z| !z.is_finite()) {
        return Err(Error::non_finite(format!("similarity with key {}", keys[pos])));
    }
    let logits = graph.scale(logits, 1.0 / tau)?;
    let denominator = graph.log_sum_exp(logits)?;
    let numerator = graph.weighted_log_sum_exp(logits, numerator_weights)?;
    let loss = graph.sub(denominator, numerator)?;
    if !graph.value(loss).item().is_finite() {
        return Err(Error::non_finite("contrastive loss"));
    }
    Ok(loss)
}

/// Selective contrastive loss of one key (shape `[d]` or `[1, d]`).
pub fn selective_contrastive_loss(
    graph: &mut Graph,
    v: Var,
    banks: &MemoryBanks,
    sel: &SampleSelection,
    cfg: &LossConfig,
) -> Result<Var> {
    let mu = contribution_factors(&sel.positives, sel.anchor, cfg)?;
    let keys: Vec<usize> = sel.positives.iter().chain(&sel.negatives).copied().collect();
    let mut weights = mu;
    weights.resize(keys.len(), 0.0);
    contrastive_from_weights(graph, v, banks, &keys, &weights, cfg.tau)
}

/// Warm-up loss: the anchor's own mixture key is the only positive.
pub fn init_contrastive_loss(
    graph: &mut Graph,
    v: Var,
    banks: &MemoryBanks,
    anchor: usize,
    negatives: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    if negatives.contains(&anchor) {
        return Err(Error::config(format!("anchor {anchor} drawn as its own negative")));
    }
    let keys: Vec<usize> = std::iter::once(anchor).chain(negatives.iter().copied()).collect();
    let mut weights = vec![0.0; keys.len()];
    weights[0] = 1.0;
    contrastive_from_weights(graph, v, banks, &keys, &weights, cfg.tau)
}

/// `(1 - lambda_p) * global + lambda_p * local`.
pub fn total_loss(graph: &mut Graph, global: Var, local: Var, lambda_p: f64) -> Result<Var> {
    let g = graph.scale(global, 1.0 - lambda_p)?;
    let l = graph.scale(local, lambda_p)?;
    graph.add(g, l)
}

pub fn combine(global: f64, local: f64, lambda_p: f64) -> f64 {
    (1.0 - lambda_p) * global + lambda_p * local
}

//! The three per-sample key dictionaries.
//!
//! * `global` (`N x d`) and `local` (`N x stripes x d`) hold each sample's
//!   own keys and are only ever rewritten at the anchor's row.
//! * `mixture` (`N x d`) starts at zero and is updated at every positive of
//!   an anchor, first with its global key and then with its concatenated
//!   local key.
//!
//! Every update has the form `row <- normalize((row + key) / 2)`. Stored
//! keys are plain data; nothing here participates in gradient computation.

use crate::error::{Error, Result};
use crate::tensor::normalize_in_place;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBanks {
    n: usize,
    dim: usize,
    stripes: usize,
    global: Vec<f64>,
    local: Vec<f64>,
    mixture: Vec<f64>,
    global_init: Vec<bool>,
    local_init: Vec<bool>,
    mixture_touched: Vec<bool>,
    degenerate_updates: usize,
}

/// `row <- normalize((row + key) / 2)`.
fn average_into(row: &mut [f64], key: &[f64]) -> bool {
    for (r, k) in row.iter_mut().zip(key) {
        *r = (*r + k) / 2.0;
    }
    normalize_in_place(row)
}

impl MemoryBanks {
    pub fn new(n: usize, dim: usize, stripes: usize) -> Result<Self> {
        if n == 0 || dim == 0 || stripes == 0 {
            return Err(Error::config(format!(
                "memory banks need positive sizes, got N={n}, d={dim}, stripes={stripes}"
            )));
        }
        Ok(Self {
            n,
            dim,
            stripes,
            global: vec![0.0; n * dim],
            local: vec![0.0; n * stripes * dim],
            mixture: vec![0.0; n * dim],
            global_init: vec![false; n],
            local_init: vec![false; n],
            mixture_touched: vec![false; n],
            degenerate_updates: 0,
        })
    }

    /// Rebuilds banks from serialized parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n: usize,
        dim: usize,
        stripes: usize,
        global: Vec<f64>,
        local: Vec<f64>,
        mixture: Vec<f64>,
        global_init: Vec<bool>,
        local_init: Vec<bool>,
        mixture_touched: Vec<bool>,
    ) -> Result<Self> {
        let ok = global.len() == n * dim
            && local.len() == n * stripes * dim
            && mixture.len() == n * dim
            && global_init.len() == n
            && local_init.len() == n
            && mixture_touched.len() == n;
        if !ok {
            return Err(Error::shape("memory_banks", "serialized bank sizes disagree"));
        }
        Ok(Self {
            n,
            dim,
            stripes,
            global,
            local,
            mixture,
            global_init,
            local_init,
            mixture_touched,
            degenerate_updates: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stripes(&self) -> usize {
        self.stripes
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange {
                what: "memory bank",
                index: i,
                len: self.n,
            });
        }
        Ok(())
    }

    fn check_key(&self, key: &[f64], expected: usize) -> Result<()> {
        if key.len() != expected {
            return Err(Error::shape(
                "memory update",
                format!("key of length {} for rows of length {expected}", key.len()),
            ));
        }
        Ok(())
    }

    pub fn global_row(&self, i: usize) -> &[f64] {
        &self.global[i * self.dim..(i + 1) * self.dim]
    }

    /// All stripes of row `i`, flattened.
    pub fn local_row(&self, i: usize) -> &[f64] {
        let w = self.stripes * self.dim;
        &self.local[i * w..(i + 1) * w]
    }

    pub fn local_stripe(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.stripes + j) * self.dim;
        &self.local[start..start + self.dim]
    }

    pub fn mixture_row(&self, i: usize) -> &[f64] {
        &self.mixture[i * self.dim..(i + 1) * self.dim]
    }

    pub fn global_data(&self) -> &[f64] {
        &self.global
    }

    pub fn local_data(&self) -> &[f64] {
        &self.local
    }

    pub fn mixture_data(&self) -> &[f64] {
        &self.mixture
    }

    pub fn global_initialized(&self, i: usize) -> bool {
        self.global_init[i]
    }

    pub fn local_initialized(&self, i: usize) -> bool {
        self.local_init[i]
    }

    pub fn mixture_touched(&self, i: usize) -> bool {
        self.mixture_touched[i]
    }

    pub fn init_flags(&self) -> (&[bool], &[bool], &[bool]) {
        (&self.global_init, &self.local_init, &self.mixture_touched)
    }

    /// Updates whose averaged row was too small to normalize.
    pub fn degenerate_updates(&self) -> usize {
        self.degenerate_updates
    }

    /// Anchor-only update of the global bank.
    pub fn update_anchor_global(&mut self, i: usize, v_global: &[f64]) -> Result<()> {
        self.check(i)?;
        self.check_key(v_global, self.dim)?;
        let d = self.dim;
        if !average_into(&mut self.global[i * d..(i + 1) * d], v_global) {
            self.degenerate_updates += 1;
        }
        self.global_init[i] = true;
        Ok(())
    }

    /// Anchor-only update of the local bank, each stripe with its own key.
    pub fn update_anchor_local(&mut self, i: usize, v_stripes: &[f64]) -> Result<()> {
        self.check(i)?;
        self.check_key(v_stripes, self.stripes * self.dim)?;
        let w = self.stripes * self.dim;
        let row = &mut self.local[i * w..(i + 1) * w];
        for (r, k) in row.chunks_mut(self.dim).zip(v_stripes.chunks(self.dim)) {
            if !average_into(r, k) {
                self.degenerate_updates += 1;
            }
        }
        self.local_init[i] = true;
        Ok(())
    }

    /// Fuses the anchor's keys into every positive's mixture row: first the
    /// global key, then `second` (normally the concatenated local key).
    /// Either key may be omitted for single-branch ablations.
    pub fn update_mixture_positives(
        &mut self,
        positives: &[usize],
        first: Option<&[f64]>,
        second: Option<&[f64]>,
    ) -> Result<()> {
        if positives.is_empty() {
            return Err(Error::config("mixture update needs at least one positive"));
        }
        for &k in positives {
            self.check(k)?;
        }
        for key in [first, second].into_iter().flatten() {
            self.check_key(key, self.dim)?;
        }
        let d = self.dim;
        for &k in positives {
            let row = &mut self.mixture[k * d..(k + 1) * d];
            for key in [first, second].into_iter().flatten() {
                if !average_into(row, key) {
                    self.degenerate_updates += 1;
                }
            }
            self.mixture_touched[k] = true;
        }
        Ok(())
    }
}

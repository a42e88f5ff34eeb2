use serde::{Deserialize, Serialize};

use crate::grid::{BlockId, SlotId};

/// Joint flow probabilities `P(Y = j, X = i | T = k)`.
///
/// Stored origin-major as `[i][k][j]` so that all destinations reachable
/// from one origin at one slot are contiguous; [`DemandTensor::get`] takes
/// the `(destination, origin, slot)` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandTensor {
    m: usize,
    n: usize,
    p: Vec<f64>,
    marginal_x: Vec<f64>,
}

impl DemandTensor {
    pub fn zeros(m: usize, n: usize) -> Self {
        DemandTensor {
            m,
            n,
            p: vec![0.0; m * m * n],
            marginal_x: vec![0.0; m * n],
        }
    }

    /// Rebuilds from raw storage in the internal `[i][k][j]` layout.
    pub fn from_parts(m: usize, n: usize, p: Vec<f64>, marginal_x: Vec<f64>) -> Option<Self> {
        (p.len() == m * m * n && marginal_x.len() == m * n).then_some(DemandTensor {
            m,
            n,
            p,
            marginal_x,
        })
    }

    #[inline]
    pub fn blocks(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn slots(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, j: usize, i: usize, k: usize) -> usize {
        (i * self.n + k) * self.m + j
    }

    #[inline]
    pub fn get(&self, des: BlockId, origin: BlockId, slot: SlotId) -> f64 {
        self.p[self.idx(des.index(), origin.index(), slot.index())]
    }

    #[inline]
    pub fn get_idx(&self, j: usize, i: usize, k: usize) -> f64 {
        self.p[self.idx(j, i, k)]
    }

    #[inline]
    pub fn set(&mut self, j: usize, i: usize, k: usize, v: f64) {
        let idx = self.idx(j, i, k);
        self.p[idx] = v;
    }

    /// `P(Y = ·, X = i | T = k)` for every destination.
    #[inline]
    pub fn destinations(&self, origin: usize, slot: usize) -> &[f64] {
        let start = (origin * self.n + slot) * self.m;
        &self.p[start..start + self.m]
    }

    #[inline]
    pub fn destinations_mut(&mut self, origin: usize, slot: usize) -> &mut [f64] {
        let start = (origin * self.n + slot) * self.m;
        &mut self.p[start..start + self.m]
    }

    #[inline]
    pub fn marginal(&self, origin: usize, slot: usize) -> f64 {
        self.marginal_x[origin * self.n + slot]
    }

    pub fn set_marginal(&mut self, origin: usize, slot: usize, v: f64) {
        self.marginal_x[origin * self.n + slot] = v;
    }

    pub fn raw(&self) -> &[f64] {
        &self.p
    }

    pub fn raw_marginal(&self) -> &[f64] {
        &self.marginal_x
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.p
    }
}

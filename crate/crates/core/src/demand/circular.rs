//! Gaussian fits on the circular day.

use serde::{Deserialize, Serialize};

use crate::demand::normal::norm_band;
use crate::error::{Error, Result};
use crate::grid::SlotId;

/// Variance floor applied to fitted departure-time models, in slots².
pub const SIGMA2_FLOOR: f64 = 0.25;

/// Period images summed when evaluating the wrapped normal.
pub const WRAP_IMAGES: i32 = 3;

#[inline]
pub fn circular_distance(a: u32, b: u32, n: u32) -> u32 {
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircularFit {
    /// Circular mean, an integer slot in `[0, N)`.
    pub mu: u32,
    /// Sample variance of circular deviations, before the floor.
    pub sigma2_raw: f64,
    pub samples: u32,
}

impl CircularFit {
    /// Variance with the [`SIGMA2_FLOOR`] applied.
    pub fn sigma2(&self) -> f64 {
        self.sigma2_raw.max(SIGMA2_FLOOR)
    }

    /// Probability mass of slot `k` under the wrapped normal.
    ///
    /// A slot index stands for the unit interval centred on it, the same
    /// convention used for the integer sample values the fit was made from.
    pub fn slot_mass(&self, k: u32, n: u32) -> f64 {
        let sd = self.sigma2().sqrt();
        let mut mass = 0.0;
        for image in -WRAP_IMAGES..=WRAP_IMAGES {
            let shift = self.mu as f64 + image as f64 * n as f64;
            let lo = (k as f64 - 0.5 - shift) / sd;
            let hi = (k as f64 + 0.5 - shift) / sd;
            mass += norm_band(lo, hi);
        }
        mass
    }
}

/// Fits `(μ, σ²)` to slot samples on a circular day of `n` slots.
///
/// μ minimises the summed squared circular distance over every integer slot
/// (smallest slot wins ties); σ² divides that sum by `len - 1`.
pub fn fit_circular_gaussian(samples: &[SlotId], n: u32) -> Result<CircularFit> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut hist = vec![0u64; n as usize];
    for s in samples {
        hist[(s.0 % n) as usize] += 1;
    }
    fit_histogram(&hist, n)
}

/// Same as [`fit_circular_gaussian`] from per-slot counts.
pub fn fit_histogram(hist: &[u64], n: u32) -> Result<CircularFit> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::EmptySamples);
    }
    let mut best = (u128::MAX, 0u32);
    for mu in 0..n {
        let cost: u128 = hist
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| {
                let d = circular_distance(s as u32, mu, n) as u128;
                c as u128 * d * d
            })
            .sum();
        if cost < best.0 {
            best = (cost, mu);
        }
    }
    let sigma2_raw = if total == 1 {
        0.0
    } else {
        best.0 as f64 / (total - 1) as f64
    };
    Ok(CircularFit {
        mu: best.1,
        sigma2_raw,
        samples: total as u32,
    })
}

/// Representative of `value` in `(center - n/2, center + n/2]`.
pub fn unroll(value: f64, center: f64, n: u32) -> f64 {
    let n = n as f64;
    let mut v = value;
    while v <= center - n / 2.0 {
        v += n;
    }
    while v > center + n / 2.0 {
        v -= n;
    }
    v
}

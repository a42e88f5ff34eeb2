//! Passenger-flow model: circular departure-time fits per origin block,
//! trivariate departure Gaussians per destination block, and their Bayesian
//! combination into the joint tensor `P(Y, X | T)`.

pub mod circular;
pub mod normal;
mod tensor;

use serde::{Deserialize, Serialize};

pub use circular::{fit_circular_gaussian, CircularFit};
pub use normal::{gaussian_box_integral, Mat3, Vec3};
pub use tensor::DemandTensor;

use crate::error::{Error, Result};
use crate::grid::{BlockId, GridSpec, SlotId};
use circular::unroll;
use normal::{box_integral_with_factor, cholesky3, grid_cell_masses, log_density3};

/// Minimum arrivals needed to fit a destination Gaussian.
pub const MIN_DESTINATION_SAMPLES: usize = 4;

/// One historical trip, already mapped onto the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub order_id: String,
    pub dep_slot: SlotId,
    pub dep_block: BlockId,
    pub des_block: BlockId,
    pub dep_lng: f64,
    pub dep_lat: f64,
    pub des_lng: f64,
    pub des_lat: f64,
    pub arr_slot: SlotId,
    /// Local-time epoch seconds.
    pub dep_epoch: i64,
    pub arr_epoch: i64,
}

/// Per-origin circular Gaussian of departure slots, plus departure counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepartureTimeModel {
    pub slot_count: u32,
    pub fits: Vec<Option<CircularFit>>,
    pub freq: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationGaussian {
    /// `(lat, lng, t)`; `t` reduced into `[0, N)`.
    pub mean: Vec3,
    pub cov: Mat3,
    pub samples: u32,
}

/// Per-destination trivariate Gaussian of `(dep_lat, dep_lng, dep_slot)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationModel {
    pub slot_count: u32,
    pub fits: Vec<Option<DestinationGaussian>>,
    pub freq: Vec<u64>,
}

/// Counters for the fallback paths taken while evaluating the model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Slots where no origin had departure mass; `P(X|T)` fell back to uniform.
    pub uniform_departure_slots: u64,
    /// `(i, k)` cells where every destination box underflowed and the
    /// destination posterior was ranked by log density at the box centre.
    pub density_fallback_cells: u64,
    /// `(i, k)` cells with no usable destination model at all.
    pub zero_destination_cells: u64,
}

impl DepartureTimeModel {
    pub fn fit(orders: &[OrderRecord], m: usize, n: u32) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hist = vec![vec![0u64; n as usize]; m];
        let mut freq = vec![0u64; m];
        for o in orders {
            hist[o.dep_block.index()][o.dep_slot.index()] += 1;
            freq[o.dep_block.index()] += 1;
        }
        let fits = hist
            .iter()
            .map(|h| circular::fit_histogram(h, n).ok())
            .collect();
        Ok(DepartureTimeModel {
            slot_count: n,
            fits,
            freq,
        })
    }

    /// `P(T = k | X = i) · freq(i)` for every origin; unnormalised.
    fn weighted_column(&self, k: u32) -> Vec<f64> {
        self.fits
            .iter()
            .zip(&self.freq)
            .map(|(fit, &f)| match fit {
                Some(fit) if f > 0 => fit.slot_mass(k, self.slot_count) * f as f64,
                _ => 0.0,
            })
            .collect()
    }

    /// `P(X = · | T = k)` over all origins, by Bayes' rule.
    ///
    /// The boolean is true when the denominator vanished and the column fell
    /// back to uniform over origins with any departures.
    pub fn column(&self, k: SlotId) -> (Vec<f64>, bool) {
        let mut col = self.weighted_column(k.0);
        let total: f64 = col.iter().sum();
        if total > 0.0 {
            col.iter_mut().for_each(|v| *v /= total);
            return (col, false);
        }
        let active = self.freq.iter().filter(|&&f| f > 0).count();
        for (v, &f) in col.iter_mut().zip(&self.freq) {
            *v = if f > 0 { 1.0 / active as f64 } else { 0.0 };
        }
        (col, true)
    }

    /// `P(X = i | T = k)`.
    pub fn departure_prob(&self, i: BlockId, k: SlotId) -> f64 {
        self.column(k).0[i.index()]
    }
}

/// Fits the departure Gaussian of one destination block.
pub fn fit_destination_gaussian(orders: &[&OrderRecord], n: u32) -> Result<DestinationGaussian> {
    if orders.len() < MIN_DESTINATION_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_DESTINATION_SAMPLES,
            got: orders.len(),
        });
    }
    let slots: Vec<SlotId> = orders.iter().map(|o| o.dep_slot).collect();
    let center = fit_circular_gaussian(&slots, n)?.mu as f64;
    let points: Vec<Vec3> = orders
        .iter()
        .map(|o| [o.dep_lat, o.dep_lng, unroll(o.dep_slot.0 as f64, center, n)])
        .collect();
    let count = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in &points {
        for d in 0..3 {
            mean[d] += p[d];
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut cov = [[0.0; 3]; 3];
    for p in &points {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    for row in cov.iter_mut() {
        row.iter_mut().for_each(|v| *v /= count - 1.0);
    }
    let trace = cov[0][0] + cov[1][1] + cov[2][2];
    let eps = 1e-9 * trace / 3.0 + 1e-12;
    for (d, row) in cov.iter_mut().enumerate() {
        row[d] += eps;
    }
    mean[2] = mean[2].rem_euclid(n as f64);
    Ok(DestinationGaussian {
        mean,
        cov,
        samples: orders.len() as u32,
    })
}

/// Time interval of slot `k` nearest to `center` on the unrolled line.
fn slot_interval_near(k: u32, center: f64, n: u32) -> (f64, f64) {
    let mid = unroll(k as f64, center, n);
    (mid - 0.5, mid + 0.5)
}

impl DestinationModel {
    pub fn fit(orders: &[OrderRecord], m: usize, n: u32) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut by_dest: Vec<Vec<&OrderRecord>> = vec![Vec::new(); m];
        for o in orders {
            by_dest[o.des_block.index()].push(o);
        }
        let freq = by_dest.iter().map(|v| v.len() as u64).collect();
        let fits = by_dest
            .iter()
            .map(|v| {
                if v.len() < MIN_DESTINATION_SAMPLES {
                    return Ok(None);
                }
                match fit_destination_gaussian(v, n) {
                    Ok(g) => Ok(cholesky3(&g.cov).is_ok().then_some(g)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DestinationModel {
            slot_count: n,
            fits,
            freq,
        })
    }

    fn box_for(&self, grid: &GridSpec, g: &DestinationGaussian, i: BlockId, k: SlotId) -> (Vec3, Vec3) {
        let (lng0, lng1, lat0, lat1) = grid.block_rect(i);
        let (t0, t1) = slot_interval_near(k.0, g.mean[2], self.slot_count);
        ([lat0, lng0, t0], [lat1, lng1, t1])
    }

    /// `P(Y = · | X = i, T = k)` over all destinations, each box integral
    /// evaluated with [`gaussian_box_integral`].
    pub fn column(&self, grid: &GridSpec, i: BlockId, k: SlotId, diag: &mut Diagnostics) -> Vec<f64> {
        let mut masses = vec![0.0; self.fits.len()];
        let mut logd = vec![f64::NEG_INFINITY; self.fits.len()];
        for (j, fit) in self.fits.iter().enumerate() {
            let Some(g) = fit else { continue };
            let Ok(l) = cholesky3(&g.cov) else { continue };
            let (lo, hi) = self.box_for(grid, g, i, k);
            masses[j] = box_integral_with_factor(&g.mean, &l, &lo, &hi);
            let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
            logd[j] = log_density3(&g.mean, &l, &center);
        }
        bayes_destinations(&masses, &logd, &self.freq, diag)
    }

    /// `P(Y = j | X = i, T = k)`.
    pub fn destination_prob(&self, grid: &GridSpec, j: BlockId, i: BlockId, k: SlotId) -> f64 {
        self.column(grid, i, k, &mut Diagnostics::default())[j.index()]
    }
}

/// Bayes' rule over destinations, with a log-density ranking when every
/// box mass underflows.
fn bayes_destinations(masses: &[f64], log_density: &[f64], freq: &[u64], diag: &mut Diagnostics) -> Vec<f64> {
    let mut post: Vec<f64> = masses
        .iter()
        .zip(freq)
        .map(|(&m, &f)| m * f as f64)
        .collect();
    let total: f64 = post.iter().sum();
    if total > 0.0 {
        post.iter_mut().for_each(|v| *v /= total);
        return post;
    }
    let logs: Vec<f64> = log_density
        .iter()
        .zip(freq)
        .map(|(&d, &f)| if f > 0 { d + (f as f64).ln() } else { f64::NEG_INFINITY })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        diag.zero_destination_cells += 1;
        post.iter_mut().for_each(|v| *v = 0.0);
        return post;
    }
    diag.density_fallback_cells += 1;
    for (v, &l) in post.iter_mut().zip(&logs) {
        *v = (l - top).exp();
    }
    let total: f64 = post.iter().sum();
    post.iter_mut().for_each(|v| *v /= total);
    post
}

/// Everything learned from a training order set.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub departures: DepartureTimeModel,
    pub destinations: DestinationModel,
}

impl FlowModel {
    pub fn fit(train: &[OrderRecord], grid: &GridSpec) -> Result<Self> {
        let m = grid.block_count();
        Ok(FlowModel {
            departures: DepartureTimeModel::fit(train, m, grid.slot_count)?,
            destinations: DestinationModel::fit(train, m, grid.slot_count)?,
        })
    }

    /// `P(Y = j, X = i | T = k)` for one cell, through the per-box integrator.
    pub fn joint_prob(&self, grid: &GridSpec, j: BlockId, i: BlockId, k: SlotId) -> f64 {
        self.destinations.destination_prob(grid, j, i, k) * self.departures.departure_prob(i, k)
    }

    /// Materialises the whole tensor. Destination box masses come from the
    /// batched grid integrator, which shares quadrature samples across cells.
    pub fn tensor(&self, grid: &GridSpec) -> Result<(DemandTensor, Diagnostics)> {
        let m = grid.block_count();
        let n = grid.slot_count as usize;
        let mut diag = Diagnostics::default();
        let mut tensor = DemandTensor::zeros(m, n);

        for k in 0..n {
            let (col, uniform) = self.departures.column(SlotId(k as u32));
            if uniform {
                diag.uniform_departure_slots += 1;
            }
            for (i, v) in col.into_iter().enumerate() {
                tensor.set_marginal(i, k, v);
            }
        }

        // masses[j][k][i] for every fitted destination
        let lat_edges: Vec<f64> = (0..=grid.rows).map(|r| grid.lat_edge(r)).collect();
        let lng_edges: Vec<f64> = (0..=grid.cols).map(|c| grid.lng_edge(c)).collect();
        let mut masses: Vec<Option<Vec<f64>>> = Vec::with_capacity(m);
        let mut chols = Vec::with_capacity(m);
        for fit in &self.destinations.fits {
            let Some(g) = fit else {
                masses.push(None);
                chols.push(None);
                continue;
            };
            let intervals: Vec<(f64, f64)> = (0..n as u32)
                .map(|k| slot_interval_near(k, g.mean[2], grid.slot_count))
                .collect();
            masses.push(Some(grid_cell_masses(&g.mean, &g.cov, &lat_edges, &lng_edges, &intervals)?));
            chols.push(Some(cholesky3(&g.cov)?));
        }

        let mut col_mass = vec![0.0; m];
        let mut col_logd = vec![f64::NEG_INFINITY; m];
        for i in 0..m {
            let (lng0, lng1, lat0, lat1) = grid.block_rect(BlockId(i as u32));
            for k in 0..n {
                for j in 0..m {
                    col_mass[j] = masses[j].as_ref().map_or(0.0, |v| v[k * m + i]);
                }
                let needs_fallback = col_mass
                    .iter()
                    .zip(&self.destinations.freq)
                    .all(|(&v, &f)| v * f as f64 == 0.0);
                if needs_fallback {
                    for j in 0..m {
                        col_logd[j] = match (&self.destinations.fits[j], &chols[j]) {
                            (Some(g), Some(l)) => {
                                let (t0, t1) = slot_interval_near(k as u32, g.mean[2], grid.slot_count);
                                let c = [0.5 * (lat0 + lat1), 0.5 * (lng0 + lng1), 0.5 * (t0 + t1)];
                                log_density3(&g.mean, l, &c)
                            }
                            _ => f64::NEG_INFINITY,
                        };
                    }
                }
                let post = bayes_destinations(&col_mass, &col_logd, &self.destinations.freq, &mut diag);
                let px = tensor.marginal(i, k);
                for (dst, p) in tensor.destinations_mut(i, k).iter_mut().zip(post) {
                    *dst = (p * px).clamp(0.0, 1.0);
                }
            }
        }
        Ok((tensor, diag))
    }
}

/// Trains the flow model and materialises `P(Y, X | T)`.
pub fn build_demand_tensor(train: &[OrderRecord], grid: &GridSpec) -> Result<DemandTensor> {
    Ok(FlowModel::fit(train, grid)?.tensor(grid)?.0)
}

/// Historical-average tensor: joint order frequencies per slot.
///
/// With `smoothing = Some(α)` every `(i, j)` pair of every slot receives α
/// pseudo-orders before normalising.
pub fn aveprob_tensor(train: &[OrderRecord], grid: &GridSpec, smoothing: Option<f64>) -> Result<DemandTensor> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = grid.block_count();
    let n = grid.slot_count as usize;
    let mut tensor = DemandTensor::zeros(m, n);
    let mut per_slot = vec![0.0f64; n];
    for o in train {
        let (i, j, k) = (o.dep_block.index(), o.des_block.index(), o.dep_slot.index());
        tensor.destinations_mut(i, k)[j] += 1.0;
        per_slot[k] += 1.0;
    }
    let alpha = smoothing.unwrap_or(0.0);
    for k in 0..n {
        let denom = per_slot[k] + alpha * (m * m) as f64;
        for i in 0..m {
            let row = tensor.destinations_mut(i, k);
            let mut marginal = 0.0;
            for v in row.iter_mut() {
                *v = if denom > 0.0 { (*v + alpha) / denom } else { 0.0 };
                marginal += *v;
            }
            tensor.set_marginal(i, k, marginal);
        }
    }
    Ok(tensor)
}

//! Spatial blocks, circular time slots and the block-to-block travel-time matrix.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::demand::OrderRecord;
use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: u32 = 1440;
pub const SECONDS_PER_DAY: i64 = 86_400;

/// Index of a grid cell in row-major order (row 0 at `lat_min`, column 0 at `lng_min`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u32);

impl BlockId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// Slot of the day, always in `[0, N)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId(pub u32);

impl SlotId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// `(self + d) mod n`.
    #[inline]
    pub fn wrapping_add(self, d: u64, n: u32) -> SlotId {
        SlotId(((self.0 as u64 + d) % n as u64) as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lng_min: f64,
    pub lng_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub rows: u32,
    pub cols: u32,
    pub slot_count: u32,
    pub slot_minutes: u32,
}

impl GridSpec {
    pub fn new(
        (lng_min, lng_max): (f64, f64),
        (lat_min, lat_max): (f64, f64),
        rows: u32,
        cols: u32,
        slot_count: u32,
    ) -> Result<Self> {
        if slot_count == 0 || !MINUTES_PER_DAY.is_multiple_of(slot_count) {
            return Err(Error::InvalidGrid(format!(
                "{slot_count} slots do not evenly divide a day"
            )));
        }
        let grid = GridSpec {
            lng_min,
            lng_max,
            lat_min,
            lat_max,
            rows,
            cols,
            slot_count,
            slot_minutes: MINUTES_PER_DAY / slot_count,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// The 10×10, 144-slot layout over the central Chengdu rectangle.
    pub fn chengdu() -> Self {
        GridSpec::new((104.0, 104.12), (30.6, 30.72), 10, 10, 144).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lng_min, self.lng_max, self.lat_min, self.lat_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.lng_min < self.lng_max) || !(self.lat_min < self.lat_max) {
            return Err(Error::InvalidGrid("empty or non-finite bounding box".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidGrid("rows and cols must be at least 1".into()));
        }
        if self.slot_count == 0 || self.slot_count * self.slot_minutes != MINUTES_PER_DAY {
            return Err(Error::InvalidGrid(format!(
                "{} slots of {} minutes do not cover a day",
                self.slot_count, self.slot_minutes
            )));
        }
        Ok(())
    }

    /// Number of blocks, M.
    #[inline]
    pub fn block_count(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    #[inline]
    pub fn slots(&self) -> u32 {
        self.slot_count
    }

    #[inline]
    pub fn slot_seconds(&self) -> i64 {
        self.slot_minutes as i64 * 60
    }

    #[inline]
    pub fn block(&self, row: u32, col: u32) -> BlockId {
        debug_assert!(row < self.rows && col < self.cols);
        BlockId(row * self.cols + col)
    }

    #[inline]
    pub fn row_col(&self, b: BlockId) -> (u32, u32) {
        (b.0 / self.cols, b.0 % self.cols)
    }

    #[inline]
    pub fn lng_edge(&self, col: u32) -> f64 {
        if col >= self.cols {
            return self.lng_max;
        }
        self.lng_min + (self.lng_max - self.lng_min) * col as f64 / self.cols as f64
    }

    #[inline]
    pub fn lat_edge(&self, row: u32) -> f64 {
        if row >= self.rows {
            return self.lat_max;
        }
        self.lat_min + (self.lat_max - self.lat_min) * row as f64 / self.rows as f64
    }

    /// `(lng_lo, lng_hi, lat_lo, lat_hi)` of a block.
    pub fn block_rect(&self, b: BlockId) -> (f64, f64, f64, f64) {
        let (r, c) = self.row_col(b);
        (
            self.lng_edge(c),
            self.lng_edge(c + 1),
            self.lat_edge(r),
            self.lat_edge(r + 1),
        )
    }

    pub fn block_center(&self, b: BlockId) -> (f64, f64) {
        let (x0, x1, y0, y1) = self.block_rect(b);
        (0.5 * (x0 + x1), 0.5 * (y0 + y1))
    }

    pub fn contains(&self, lng: f64, lat: f64) -> bool {
        lng >= self.lng_min && lng <= self.lng_max && lat >= self.lat_min && lat <= self.lat_max
    }

    pub fn manhattan(&self, a: BlockId, b: BlockId) -> u32 {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }

    pub fn block_of(&self, lng: f64, lat: f64) -> Result<BlockId> {
        block_of(lng, lat, self)
    }

    pub fn slot_of(&self, epoch_seconds: i64) -> SlotId {
        slot_of(epoch_seconds, self)
    }

    pub fn slot_add(&self, k: SlotId, d: u64) -> SlotId {
        k.wrapping_add(d, self.slot_count)
    }

    /// Day slot of an absolute (multi-day) slot counter.
    #[inline]
    pub fn day_slot(&self, absolute: u64) -> SlotId {
        SlotId((absolute % self.slot_count as u64) as u32)
    }
}

fn axis_cell(v: f64, lo: f64, hi: f64, cells: u32, edge: impl Fn(u32) -> f64) -> u32 {
    let raw = ((v - lo) / (hi - lo) * cells as f64).floor();
    let mut c = raw.clamp(0.0, (cells - 1) as f64) as u32;
    // Reconcile rounding with the exact edge values so that a point on an
    // interior edge lands in the higher cell.
    while c > 0 && v < edge(c) {
        c -= 1;
    }
    while c + 1 < cells && v >= edge(c + 1) {
        c += 1;
    }
    c
}

/// Cell containing `(lng, lat)`. Interior edges belong to the higher-index cell;
/// the outer `lng_max` / `lat_max` edges belong to the last cell.
pub fn block_of(lng: f64, lat: f64, grid: &GridSpec) -> Result<BlockId> {
    if !grid.contains(lng, lat) {
        return Err(Error::OutOfBounds { lng, lat });
    }
    let col = axis_cell(lng, grid.lng_min, grid.lng_max, grid.cols, |c| grid.lng_edge(c));
    let row = axis_cell(lat, grid.lat_min, grid.lat_max, grid.rows, |r| grid.lat_edge(r));
    Ok(grid.block(row, col))
}

/// Slot of the day for a local-time epoch (seconds).
pub fn slot_of(epoch_seconds: i64, grid: &GridSpec) -> SlotId {
    let into_day = epoch_seconds.rem_euclid(SECONDS_PER_DAY);
    SlotId((into_day / grid.slot_seconds()) as u32)
}

/// Local day number (days since the epoch) of a local-time epoch.
pub fn day_of(epoch_seconds: i64) -> i64 {
    epoch_seconds.div_euclid(SECONDS_PER_DAY)
}

pub fn slot_add(k: SlotId, d: u64, grid: &GridSpec) -> SlotId {
    grid.slot_add(k, d)
}

/// δ: travel time between blocks in whole slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TravelTimeMatrix {
    m: usize,
    delta: Vec<u32>,
}

impl TravelTimeMatrix {
    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut delta = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                delta.push(f(i, j));
            }
        }
        TravelTimeMatrix { m, delta }
    }

    /// Builds from raw row-major values, checking the diagonal and range invariants.
    pub fn from_raw(m: usize, delta: Vec<u32>, slot_count: u32) -> Result<Self> {
        if delta.len() != m * m {
            return Err(Error::CorruptFile(format!(
                "travel matrix has {} entries, expected {}",
                delta.len(),
                m * m
            )));
        }
        let tm = TravelTimeMatrix { m, delta };
        for i in 0..m {
            for j in 0..m {
                let d = tm.get_idx(i, j);
                let ok = if i == j { d == 0 } else { (1..=slot_count).contains(&d) };
                if !ok {
                    return Err(Error::CorruptFile(format!("delta[{i}][{j}] = {d}")));
                }
            }
        }
        Ok(tm)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, from: BlockId, to: BlockId) -> u32 {
        self.delta[from.index() * self.m + to.index()]
    }

    #[inline]
    pub fn get_idx(&self, from: usize, to: usize) -> u32 {
        self.delta[from * self.m + to]
    }

    pub fn raw(&self) -> &[u32] {
        &self.delta
    }

    pub fn max(&self) -> u32 {
        self.delta.iter().copied().max().unwrap_or(0)
    }
}

/// Source of travel times for [`build_travel_matrix`].
pub enum TravelSource<'a> {
    Orders(&'a [OrderRecord]),
    Synthetic,
}

pub fn build_travel_matrix(source: TravelSource<'_>, grid: &GridSpec) -> Result<TravelTimeMatrix> {
    match source {
        TravelSource::Synthetic => Ok(synthetic_travel_matrix(grid)),
        TravelSource::Orders(orders) => travel_matrix_from_orders(orders, grid),
    }
}

pub fn synthetic_travel_matrix(grid: &GridSpec) -> TravelTimeMatrix {
    let n = grid.slot_count;
    TravelTimeMatrix::from_fn(grid.block_count(), |i, j| {
        if i == j {
            0
        } else {
            grid.manhattan(BlockId(i as u32), BlockId(j as u32)).clamp(1, n)
        }
    })
}

fn median_seconds(durations: &mut [i64]) -> f64 {
    durations.sort_unstable();
    let n = durations.len();
    if n % 2 == 1 {
        durations[n / 2] as f64
    } else {
        0.5 * (durations[n / 2 - 1] + durations[n / 2]) as f64
    }
}

pub fn travel_matrix_from_orders(orders: &[OrderRecord], grid: &GridSpec) -> Result<TravelTimeMatrix> {
    if orders.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = grid.block_count();
    let n = grid.slot_count;
    let mut durations: HashMap<(usize, usize), Vec<i64>> = HashMap::new();
    for o in orders {
        if o.dep_block == o.des_block {
            continue;
        }
        durations
            .entry((o.dep_block.index(), o.des_block.index()))
            .or_default()
            .push(o.arr_epoch - o.dep_epoch);
    }
    let slot_s = grid.slot_seconds() as f64;
    let observed: HashMap<(usize, usize), u32> = durations
        .into_iter()
        .map(|(k, mut v)| {
            let slots = (median_seconds(&mut v) / slot_s).ceil() as u32;
            (k, slots.clamp(1, n))
        })
        .collect();
    Ok(TravelTimeMatrix::from_fn(m, |i, j| {
        if i == j {
            return 0;
        }
        observed
            .get(&(i, j))
            .or_else(|| observed.get(&(j, i)))
            .copied()
            .unwrap_or_else(|| grid.manhattan(BlockId(i as u32), BlockId(j as u32)).clamp(1, n))
    }))
}

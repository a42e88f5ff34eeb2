use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::demand::OrderRecord;
use crate::error::{Error, Result};
use crate::grid::{BlockId, GridSpec, SECONDS_PER_DAY};

/// 2016-11-01, a Tuesday, as days since 1970-01-01.
pub const DEFAULT_BASE_DAY: i64 = 17_106;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdComponent {
    pub origin: u32,
    pub destination: u32,
    /// Peak departure slot.
    pub peak_slot: f64,
    /// Standard deviation of the departure slot.
    pub spread: f64,
    /// Mean orders per day.
    pub volume: f64,
}

/// A bump in the background departure-time profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePeak {
    pub peak_slot: f64,
    pub spread: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCitySpec {
    pub grid: GridSpec,
    /// Per-block weight for background trips, used for both ends.
    pub attraction: Vec<f64>,
    /// Mean background orders per day, departure slot uniform.
    #[serde(default)]
    pub background_volume: f64,
    /// Background destinations are weighted by `exp(-d / distance_decay)`
    /// for Manhattan distance `d` in blocks; 0 turns the decay off.
    #[serde(default)]
    pub distance_decay: f64,
    /// Background departure slots mix these peaks with a flat profile.
    #[serde(default)]
    pub background_peaks: Vec<TimePeak>,
    #[serde(default = "one")]
    pub background_flat_weight: f64,
    /// Driving time per block of Manhattan distance; `None` means one slot.
    #[serde(default)]
    pub minutes_per_block: Option<f64>,
    #[serde(default)]
    pub components: Vec<OdComponent>,
    pub seed: u64,
    #[serde(default = "default_base_day")]
    pub base_day: i64,
    /// Days between consecutive generated days.
    #[serde(default = "default_stride")]
    pub day_stride: i64,
}

fn default_base_day() -> i64 {
    DEFAULT_BASE_DAY
}

fn default_stride() -> i64 {
    7
}

fn one() -> f64 {
    1.0
}

impl SynthCitySpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let m = self.grid.block_count();
        let bad = |msg: String| Err(Error::Config(msg));
        if self.attraction.len() != m {
            return bad(format!("{} attraction weights for {m} blocks", self.attraction.len()));
        }
        if self.attraction.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("attraction weights must be finite and non-negative".into());
        }
        if !(self.background_volume.is_finite() && self.background_volume >= 0.0) {
            return bad("background volume must be non-negative".into());
        }
        if !(self.distance_decay.is_finite() && self.distance_decay >= 0.0) {
            return bad("distance decay must be non-negative".into());
        }
        if self.background_volume > 0.0 && self.attraction.iter().all(|&w| w == 0.0) {
            return bad("background trips need a positive attraction weight".into());
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.origin as usize >= m || c.destination as usize >= m {
                return bad(format!("component {i} references a block outside the grid"));
            }
            if !(c.volume.is_finite() && c.volume >= 0.0) {
                return bad(format!("component {i} has a negative volume"));
            }
            if !(c.peak_slot >= 0.0 && c.peak_slot < self.grid.slot_count as f64) {
                return bad(format!("component {i} peak outside [0, N)"));
            }
            if !(c.spread.is_finite() && c.spread >= 0.0) {
                return bad(format!("component {i} has a negative spread"));
            }
        }
        for (i, p) in self.background_peaks.iter().enumerate() {
            let ok = p.peak_slot >= 0.0
                && p.peak_slot < self.grid.slot_count as f64
                && p.spread.is_finite()
                && p.spread >= 0.0
                && p.weight.is_finite()
                && p.weight >= 0.0;
            if !ok {
                return bad(format!("background peak {i} is invalid"));
            }
        }
        let profile_total = self.background_flat_weight + self.background_peaks.iter().map(|p| p.weight).sum::<f64>();
        if !(self.background_flat_weight >= 0.0 && profile_total.is_finite() && profile_total > 0.0) {
            return bad("background profile weights must be non-negative with a positive sum".into());
        }
        if let Some(v) = self.minutes_per_block {
            if !(v.is_finite() && v > 0.0) {
                return bad("minutes per block must be positive".into());
            }
        }
        if self.day_stride < 1 {
            return bad("day stride must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: SynthCitySpec = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// A 10×10 city with a dense centre, morning and evening peaks, local
    /// trips whose length falls off with distance, and commuter flows from
    /// every block into its nearest hub.
    pub fn rush_hour(seed: u64) -> Self {
        Self::rush_hour_scaled(seed, 1.0)
    }

    /// [`SynthCitySpec::rush_hour`] with every volume multiplied by `scale`.
    pub fn rush_hour_scaled(seed: u64, scale: f64) -> Self {
        let grid = GridSpec::chengdu();
        let (rows, cols) = (grid.rows as i32, grid.cols as i32);
        let mut attraction = Vec::with_capacity((rows * cols) as usize);
        for r in 0..rows {
            for c in 0..cols {
                let dr = r as f64 - 4.5;
                let dc = c as f64 - 4.5;
                attraction.push(1.0 + 4.0 * (-(dr * dr + dc * dc) / 10.0).exp());
            }
        }
        let at = |r: u32, c: u32| r * grid.cols + c;
        let hubs = [at(4, 4), at(5, 5), at(2, 2), at(7, 2), at(2, 7), at(7, 7)];
        let mut components = Vec::new();
        for b in 0..grid.block_count() as u32 {
            let bid = BlockId(b);
            let Some(&h) = hubs
                .iter()
                .filter(|&&h| h != b)
                .min_by_key(|&&h| (grid.manhattan(bid, BlockId(h)), h))
            else {
                continue;
            };
            components.push(OdComponent { origin: b, destination: h, peak_slot: 48.0, spread: 5.0, volume: 2.0 * scale });
            components.push(OdComponent { origin: h, destination: b, peak_slot: 108.0, spread: 6.0, volume: 2.0 * scale });
        }
        SynthCitySpec {
            grid,
            attraction,
            background_volume: 1500.0 * scale,
            distance_decay: 1.0,
            background_peaks: vec![
                TimePeak { peak_slot: 50.0, spread: 8.0, weight: 1.0 },
                TimePeak { peak_slot: 108.0, spread: 10.0, weight: 1.0 },
            ],
            background_flat_weight: 1.5,
            minutes_per_block: Some(4.0),
            components,
            seed,
            base_day: DEFAULT_BASE_DAY,
            day_stride: 7,
        }
    }
}

fn point_in_block(grid: &GridSpec, b: BlockId, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (lng0, lng1, lat0, lat1) = grid.block_rect(b);
    // stay clear of the upper edge, which belongs to the next block
    let lng = lng0 + (lng1 - lng0) * rng.random_range(0.0..0.999_999);
    let lat = lat0 + (lat1 - lat0) * rng.random_range(0.0..0.999_999);
    (lng, lat)
}

fn wrapped_slot(peak: f64, spread: f64, n: u32, rng: &mut ChaCha8Rng) -> u32 {
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    ((peak + spread * z).round() as i64).rem_euclid(n as i64) as u32
}

/// Whole slots a trip between two blocks takes; every generated duration
/// falls inside this bracket, so the trained δ reproduces it.
pub fn travel_slots(spec: &SynthCitySpec, from: BlockId, to: BlockId) -> i64 {
    let d = spec.grid.manhattan(from, to) as f64;
    let slots = match spec.minutes_per_block {
        None => d,
        Some(mpb) => (d * mpb / spec.grid.slot_minutes as f64).ceil(),
    };
    (slots as i64).max(1)
}

struct Trip {
    origin: BlockId,
    destination: BlockId,
    slot: u32,
    tag: String,
}

/// Orders for `days` days starting at `spec.base_day`, `spec.day_stride`
/// days apart. Sorted by departure epoch, then id.
pub fn generate_synthetic_orders(spec: &SynthCitySpec, days: u32) -> Result<Vec<OrderRecord>> {
    spec.validate()?;
    let grid = &spec.grid;
    let n = grid.slot_count;
    let slot_s = grid.slot_seconds();
    let slot_min = grid.slot_minutes as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let attraction = (spec.background_volume > 0.0)
        .then(|| WeightedIndex::new(&spec.attraction).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;
    let m = grid.block_count();
    let destination_weights: Vec<Option<WeightedIndex<f64>>> = (0..m)
        .map(|i| {
            if spec.distance_decay <= 0.0 {
                return None;
            }
            let w: Vec<f64> = (0..m)
                .map(|j| {
                    let d = grid.manhattan(BlockId(i as u32), BlockId(j as u32)) as f64;
                    if i == j {
                        0.0
                    } else {
                        spec.attraction[j] * (-d / spec.distance_decay).exp()
                    }
                })
                .collect();
            WeightedIndex::new(&w).ok()
        })
        .collect();
    let mut profile_weights = vec![spec.background_flat_weight];
    profile_weights.extend(spec.background_peaks.iter().map(|p| p.weight));
    let profile = WeightedIndex::new(&profile_weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    for d in 0..days as i64 {
        let day = spec.base_day + d * spec.day_stride;
        let mut trips = Vec::new();
        if let Some(w) = &attraction {
            let count = Poisson::new(spec.background_volume).expect("positive rate").sample(&mut rng) as u64;
            for k in 0..count {
                let origin = w.sample(&mut rng);
                let destination = match &destination_weights[origin] {
                    Some(dw) => dw.sample(&mut rng),
                    None => w.sample(&mut rng),
                };
                trips.push(Trip {
                    origin: BlockId(origin as u32),
                    destination: BlockId(destination as u32),
                    slot: match profile.sample(&mut rng) {
                        0 => rng.random_range(0..n),
                        p => {
                            let peak = &spec.background_peaks[p - 1];
                            wrapped_slot(peak.peak_slot, peak.spread, n, &mut rng)
                        }
                    },
                    tag: format!("bg{k}"),
                });
            }
        }
        for (ci, c) in spec.components.iter().enumerate() {
            if c.volume <= 0.0 {
                continue;
            }
            let count = Poisson::new(c.volume).expect("positive rate").sample(&mut rng) as u64;
            for k in 0..count {
                trips.push(Trip {
                    origin: BlockId(c.origin),
                    destination: BlockId(c.destination),
                    slot: wrapped_slot(c.peak_slot, c.spread, n, &mut rng),
                    tag: format!("c{ci}-{k}"),
                });
            }
        }
        for trip in trips {
            let (dep_lng, dep_lat) = point_in_block(grid, trip.origin, &mut rng);
            let (des_lng, des_lat) = point_in_block(grid, trip.destination, &mut rng);
            let dep_epoch = day * SECONDS_PER_DAY + trip.slot as i64 * slot_s + rng.random_range(0..slot_s);
            let slots = travel_slots(spec, trip.origin, trip.destination);
            let minutes = (slots - 1) * slot_min + rng.random_range(1..=slot_min);
            let arr_epoch = dep_epoch + minutes * 60;
            out.push(OrderRecord {
                order_id: format!("d{day}-{}", trip.tag),
                dep_slot: grid.slot_of(dep_epoch),
                dep_block: trip.origin,
                des_block: trip.destination,
                dep_lng,
                dep_lat,
                des_lng,
                des_lat,
                arr_slot: grid.slot_of(arr_epoch),
                dep_epoch,
                arr_epoch,
            });
        }
    }
    out.sort_by(|a, b| a.dep_epoch.cmp(&b.dep_epoch).then_with(|| a.order_id.cmp(&b.order_id)));
    Ok(out)
}

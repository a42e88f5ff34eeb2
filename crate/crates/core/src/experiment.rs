//! Wiring for simulation runs and parameter sweeps over a trained bundle.

use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::demand::{DemandTensor, OrderRecord};
use crate::error::{Error, Result};
use crate::grid::{day_of, GridSpec, TravelTimeMatrix};
use crate::io::results::{ResultsRow, ResultsTable};
use crate::io::ModelBundle;
use crate::planners::{PassengerOrder, Policy};
use crate::sim::{
    default_districts, generate_packages, generate_taxis, run_simulation, DepartureSpec, District, SimConfig,
    SimInputs, SimMetrics, TaxiState,
};

/// Replay stream: absolute slots, arrival after δ, reveal order by epoch.
pub fn replay_orders(test: &[OrderRecord], grid: &GridSpec, delta: &TravelTimeMatrix) -> Vec<PassengerOrder> {
    let n = grid.slot_count as i64;
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.sort_by_key(|&i| (test[i].dep_epoch, i));
    let mut out: Vec<PassengerOrder> = Vec::with_capacity(test.len());
    for (id, &i) in idx.iter().enumerate() {
        let o = &test[i];
        let dep_slot = (day_of(o.dep_epoch) * n + o.dep_slot.0 as i64) as u64;
        let reveal_seq = match out.last() {
            Some(prev) if prev.dep_slot == dep_slot => prev.reveal_seq + 1,
            _ => 0,
        };
        out.push(PassengerOrder {
            id: id as u64,
            dep_block: o.dep_block,
            dep_slot,
            des_block: o.des_block,
            des_slot: dep_slot + delta.get(o.dep_block, o.des_block) as u64,
            reveal_seq,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fleet {
    /// One idle taxi waiting at every package origin.
    PerPackage,
    /// This many taxis placed in proportion to departures.
    Sampled(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub planner: Policy,
    pub max_t: u32,
    /// Departure slot of the day.
    pub dep_slot: u32,
    pub packages: usize,
    pub seed: u64,
    pub wait_limit: u32,
    pub fleet: Fleet,
    /// Measure planner step time.
    pub timing: bool,
}

impl RunSpec {
    pub fn new(planner: Policy, max_t: u32, dep_slot: u32, packages: usize, seed: u64) -> Self {
        RunSpec { planner, max_t, dep_slot, packages, seed, wait_limit: 6, fleet: Fleet::PerPackage, timing: false }
    }
}

/// A trained bundle together with a replay day.
pub struct Experiment {
    pub grid: GridSpec,
    pub delta: TravelTimeMatrix,
    pub tensor: DemandTensor,
    pub aveprob: Option<DemandTensor>,
    pub orders: Vec<PassengerOrder>,
    pub districts: Vec<District>,
    /// First replay day, days since 1970-01-01.
    pub day: i64,
}

impl Experiment {
    pub fn new(bundle: &ModelBundle, test: &[OrderRecord]) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let tensor = bundle.demand_tensor()?;
        let orders = replay_orders(test, &bundle.grid, &bundle.delta);
        let day = test.iter().map(|o| day_of(o.dep_epoch)).min().expect("non-empty");
        Ok(Experiment {
            districts: default_districts(&bundle.grid),
            grid: bundle.grid.clone(),
            delta: bundle.delta.clone(),
            tensor,
            aveprob: bundle.aveprob.clone(),
            orders,
            day,
        })
    }

    pub fn run(&self, spec: &RunSpec) -> Result<SimMetrics> {
        let cfg = SimConfig {
            max_t: spec.max_t,
            planner: spec.planner,
            seed: spec.seed,
            package_count: spec.packages,
            order_exclusive: true,
            wait_limit_for_match: spec.wait_limit,
            unmatched_are_failures: true,
            timing: spec.timing,
        };
        cfg.validate()?;
        if spec.dep_slot >= self.grid.slot_count {
            return Err(Error::Config(format!("departure slot {} outside the day", spec.dep_slot)));
        }
        let start = self.day as u64 * self.grid.slot_count as u64 + spec.dep_slot as u64;
        let packages = generate_packages(
            &self.grid,
            &self.districts,
            spec.packages,
            DepartureSpec::Fixed(start),
            spec.max_t,
            spec.seed,
        )?;
        let taxis = match spec.fleet {
            Fleet::PerPackage => packages
                .iter()
                .map(|p| TaxiState { id: p.id, block: p.dep, available_from: start, carrying: None })
                .collect(),
            Fleet::Sampled(count) => generate_taxis(&self.orders, self.grid.block_count(), count, start, spec.seed),
        };
        let inputs = SimInputs { tensor: &self.tensor, aveprob: self.aveprob.as_ref(), delta: &self.delta };
        run_simulation(&cfg, &inputs, &self.orders, &packages, taxis)
    }

    pub fn row(&self, spec: &RunSpec) -> Result<ResultsRow> {
        let m = self.run(spec)?;
        Ok(ResultsRow {
            planner: spec.planner.name().to_string(),
            max_t: spec.max_t,
            dep_t: spec.dep_slot,
            packages: spec.packages,
            seed: spec.seed,
            sr: m.success_rate,
            ap: m.average_neglogp,
            mr: m.matching_rate,
            step_ms: spec.timing.then_some(m.mean_step_ms),
        })
    }
}

/// Parameter grid of a benchmark sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub planners: Vec<Policy>,
    pub max_t: Vec<u32>,
    pub dep_slots: Vec<u32>,
    pub packages: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Sweep {
    /// Configurations in row order: planner, maxT, depT, packages, seed.
    pub fn specs(&self, wait_limit: u32, fleet: Fleet, timing: bool) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &planner in &self.planners {
            for &max_t in &self.max_t {
                for &dep_slot in &self.dep_slots {
                    for &packages in &self.packages {
                        for &seed in &self.seeds {
                            out.push(RunSpec { planner, max_t, dep_slot, packages, seed, wait_limit, fleet, timing });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Runs every configuration, spreading work over `threads` workers; rows
/// come back in configuration order whatever the thread count.
pub fn run_sweep(exp: &Experiment, specs: &[RunSpec], threads: usize) -> Result<ResultsTable> {
    let threads = threads.clamp(1, specs.len().max(1));
    let mut slots: Vec<Option<Result<ResultsRow>>> = specs.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks = slots.chunks_mut(specs.len().div_ceil(threads).max(1));
        for (c, chunk) in chunks.enumerate() {
            let base = c * specs.len().div_ceil(threads).max(1);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(exp.row(&specs[base + k]));
                }
            });
        }
    });
    let rows = slots.into_iter().map(|r| r.expect("every configuration ran")).collect::<Result<_>>()?;
    Ok(ResultsTable { rows })
}

fn parse_values<T>(text: &str) -> Result<Vec<T>>
where
    T: FromStr + Copy + TryFrom<u64>,
{
    let bad = || Error::Config(format!("bad sweep values `{text}`"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            // both `a..b` and `a..=b` include `b`, as in `maxT=1..12`
            let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            let range: RangeInclusive<u64> = a..=b;
            if range.is_empty() {
                return Err(bad());
            }
            for v in range {
                out.push(T::try_from(v).map_err(|_| bad())?);
            }
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Applies `key=values` sweep clauses, e.g. `maxT=1..12` or `packages=100,500`.
/// Several clauses may be joined with `;`.
pub fn apply_sweep(sweep: &mut Sweep, clause: &str) -> Result<()> {
    for part in clause.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep clause `{part}` lacks `=`")))?;
        match key.trim().to_ascii_lowercase().as_str() {
            "maxt" => sweep.max_t = parse_values(values)?,
            "dept" | "depslot" => sweep.dep_slots = parse_values(values)?,
            "packages" => {
                sweep.packages = parse_values::<u64>(values)?.into_iter().map(|v| v as usize).collect()
            }
            "seed" | "seeds" => sweep.seeds = parse_values(values)?,
            other => return Err(Error::Config(format!("unknown sweep key `{other}`"))),
        }
    }
    Ok(())
}

pub fn parse_planners(text: &str) -> Result<Vec<Policy>> {
    let out: Vec<Policy> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("no planners given".into()));
    }
    Ok(out)
}

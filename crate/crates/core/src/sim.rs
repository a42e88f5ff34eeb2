//! Slot-stepped replay of a passenger order stream with package-carrying taxis.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::DemandTensor;
use crate::error::{Error, Result};
use crate::grid::{BlockId, GridSpec, TravelTimeMatrix};
use crate::planners::{
    apply_decision, baseline_step, candidate_set, hsp_step, psp_step, Baseline, DeliveryState, DeliveryStatus,
    PassengerOrder, PlannerDecision, Policy,
};
use crate::route::{PackageRequest, RoutePlanner};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxiState {
    pub id: u32,
    pub block: BlockId,
    /// Absolute slot from which the taxi is idle at `block`.
    pub available_from: u64,
    pub carrying: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_t: u32,
    pub planner: Policy,
    pub seed: u64,
    pub package_count: usize,
    /// A taken passenger order is unavailable to every other package.
    pub order_exclusive: bool,
    /// Slots a package may wait after generation for a taxi.
    pub wait_limit_for_match: u32,
    /// Count unmatched packages in the success-rate denominator.
    pub unmatched_are_failures: bool,
    /// Measure planner wall-clock time. Off keeps metrics bit-reproducible.
    pub timing: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_t: 18,
            planner: Policy::Hsp,
            seed: 0,
            package_count: 100,
            order_exclusive: true,
            wait_limit_for_match: 6,
            unmatched_are_failures: true,
            timing: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_t < 1 {
            return Err(Error::Config("maxT must be at least 1 slot".into()));
        }
        if self.package_count < 1 {
            return Err(Error::Config("package count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PackageOutcome {
    Delivered,
    Failed,
    Unmatched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackageRecord {
    pub id: u32,
    pub outcome: PackageOutcome,
    /// Slot the package actually left its origin (absolute).
    pub departed: Option<u64>,
    pub hops: u32,
    /// Candidate orders offered over all steps (N_orders · steps).
    pub candidates_seen: u32,
    pub steps: u32,
    pub len_t: u32,
    /// Passenger orders ridden, in order.
    pub orders: Vec<u64>,
    /// `−ln Π P` of the ridden legs under the evaluation tensor.
    pub neglog_p: Option<f64>,
    /// Wall-clock spent in planner decisions for this package; zero unless timed.
    pub plan_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub packages: usize,
    pub delivered: usize,
    pub failed: usize,
    pub unmatched: usize,
    /// NaN when there are no packages.
    pub success_rate: f64,
    /// Mean `−ln P(r)` over delivered packages; NaN when none.
    pub average_neglogp: f64,
    pub matching_rate: f64,
    pub records: Vec<PackageRecord>,
    pub decisions: u64,
    /// NaN unless the run was timed.
    pub mean_step_ms: f64,
}

/// SR, AP and MR from per-package records.
pub fn compute_metrics(records: Vec<PackageRecord>, unmatched_are_failures: bool) -> SimMetrics {
    let packages = records.len();
    let count = |o| records.iter().filter(|r| r.outcome == o).count();
    let delivered = count(PackageOutcome::Delivered);
    let failed = count(PackageOutcome::Failed);
    let unmatched = count(PackageOutcome::Unmatched);
    let denom = if unmatched_are_failures {
        packages
    } else {
        packages - unmatched
    };
    let ratio = |num: usize, den: usize| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
    let ap_values: Vec<f64> = records
        .iter()
        .filter(|r| r.outcome == PackageOutcome::Delivered)
        .filter_map(|r| r.neglog_p)
        .collect();
    let average_neglogp = if ap_values.is_empty() {
        f64::NAN
    } else {
        ap_values.iter().sum::<f64>() / ap_values.len() as f64
    };
    let steps: u64 = records.iter().map(|r| r.steps as u64).sum();
    let plan_ms: f64 = records.iter().map(|r| r.plan_ms).sum();
    SimMetrics {
        packages,
        delivered,
        failed,
        unmatched,
        success_rate: ratio(delivered, denom),
        average_neglogp,
        matching_rate: ratio(packages - unmatched, packages),
        records,
        decisions: steps,
        mean_step_ms: if steps == 0 { f64::NAN } else { plan_ms / steps as f64 },
    }
}

/// Block weights for package origins: every block of a district gets that
/// district's density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct District {
    pub name: String,
    pub blocks: Vec<BlockId>,
    pub density: f64,
}

/// Five districts over the grid: four quadrants and a central square, with
/// the 2015 population densities of Jinniu, Wuhou, Chenghua, Jinjiang and
/// Qingyang.
pub fn default_districts(grid: &GridSpec) -> Vec<District> {
    let (rows, cols) = (grid.rows, grid.cols);
    let central = |r: u32, c: u32| {
        let (r0, r1) = (rows * 3 / 10, (rows * 7).div_ceil(10));
        let (c0, c1) = (cols * 3 / 10, (cols * 7).div_ceil(10));
        r >= r0 && r < r1 && c >= c0 && c < c1
    };
    let mut districts = vec![
        District { name: "Qingyang".into(), blocks: Vec::new(), density: 9822.0 },
        District { name: "Jinniu".into(), blocks: Vec::new(), density: 6990.0 },
        District { name: "Chenghua".into(), blocks: Vec::new(), density: 6623.0 },
        District { name: "Wuhou".into(), blocks: Vec::new(), density: 8755.0 },
        District { name: "Jinjiang".into(), blocks: Vec::new(), density: 8233.0 },
    ];
    for r in 0..rows {
        for c in 0..cols {
            let idx = if central(r, c) {
                0
            } else {
                // north = high rows
                match (r >= rows / 2, c >= cols / 2) {
                    (true, false) => 1,
                    (true, true) => 2,
                    (false, false) => 3,
                    (false, true) => 4,
                }
            };
            districts[idx].blocks.push(grid.block(r, c));
        }
    }
    districts.retain(|d| !d.blocks.is_empty());
    districts
}

/// How package departure slots are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepartureSpec {
    /// Every package departs at this absolute slot.
    Fixed(u64),
    /// Uniform over `[start, end)` absolute slots.
    Spread { start: u64, end: u64 },
}

/// Package requests with origins weighted by district density and uniform
/// destinations distinct from the origin.
pub fn generate_packages(
    grid: &GridSpec,
    districts: &[District],
    count: usize,
    departure: DepartureSpec,
    max_t: u32,
    seed: u64,
) -> Result<Vec<PackageRequest>> {
    let m = grid.block_count();
    let mut weights = vec![0.0f64; m];
    for d in districts {
        for b in &d.blocks {
            weights[b.index()] = d.density;
        }
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Config("district weights must cover every block".into()));
    }
    if m < 2 {
        return Err(Error::Config("package generation needs at least two blocks".into()));
    }
    let origin_dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        let dep = origin_dist.sample(&mut rng);
        let mut des = rng.random_range(0..m - 1);
        if des >= dep {
            des += 1;
        }
        let dep_t = match departure {
            DepartureSpec::Fixed(s) => s,
            DepartureSpec::Spread { start, end } => rng.random_range(start..end.max(start + 1)),
        };
        out.push(PackageRequest {
            id: id as u32,
            dep: BlockId(dep as u32),
            des: BlockId(des as u32),
            dep_t,
            gen_t: dep_t,
            max_t,
        });
    }
    Ok(out)
}

/// Taxi idle at `block` with the lowest id, if any.
pub fn match_taxi(block: BlockId, taxis: &[TaxiState], cur_slot: u64) -> Option<usize> {
    taxis
        .iter()
        .enumerate()
        .filter(|(_, t)| t.carrying.is_none() && t.block == block && t.available_from <= cur_slot)
        .min_by_key(|(_, t)| t.id)
        .map(|(i, _)| i)
}

/// A fleet placed in proportion to departure frequency, idle from `from_slot`.
pub fn generate_taxis(
    orders: &[PassengerOrder],
    m: usize,
    count: usize,
    from_slot: u64,
    seed: u64,
) -> Vec<TaxiState> {
    let mut weights = vec![1.0f64; m];
    for o in orders {
        weights[o.dep_block.index()] += 1.0;
    }
    let dist = WeightedIndex::new(&weights).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a71_5eed);
    (0..count)
        .map(|id| TaxiState {
            id: id as u32,
            block: BlockId(dist.sample(&mut rng) as u32),
            available_from: from_slot,
            carrying: None,
        })
        .collect()
}

/// Tensors and travel times a simulation plans against.
pub struct SimInputs<'a> {
    pub tensor: &'a DemandTensor,
    /// Needed only by [`Policy::AveProb`].
    pub aveprob: Option<&'a DemandTensor>,
    pub delta: &'a TravelTimeMatrix,
}

enum Slot {
    Pending,
    Matched { taxi: usize, depart: u64 },
    Active { taxi: usize, state: DeliveryState },
    Done,
}

struct Tracker {
    steps: u32,
    candidates: u32,
    plan_ms: f64,
    departed: Option<u64>,
}

pub fn run_simulation(
    cfg: &SimConfig,
    inputs: &SimInputs<'_>,
    orders: &[PassengerOrder],
    packages: &[PackageRequest],
    mut taxis: Vec<TaxiState>,
) -> Result<SimMetrics> {
    if cfg.max_t < 1 {
        return Err(Error::Config("maxT must be at least 1 slot".into()));
    }
    if cfg.planner == Policy::AveProb && inputs.aveprob.is_none() {
        return Err(Error::Config("aveprob planner needs the historical-average tensor".into()));
    }
    if packages.is_empty() {
        return Ok(compute_metrics(Vec::new(), cfg.unmatched_are_failures));
    }
    let mut by_slot: BTreeMap<u64, Vec<PassengerOrder>> = BTreeMap::new();
    for o in orders {
        by_slot.entry(o.dep_slot).or_default().push(o.clone());
    }
    for v in by_slot.values_mut() {
        v.sort_by_key(|o| (o.reveal_seq, o.id));
    }

    let mut pkgs: Vec<&PackageRequest> = packages.iter().collect();
    pkgs.sort_by_key(|p| p.id);
    let wait = cfg.wait_limit_for_match as u64;
    let start = pkgs.iter().map(|p| p.gen_t.min(p.dep_t)).min().unwrap_or(0);
    let end = pkgs
        .iter()
        .map(|p| p.dep_t.max(p.gen_t + wait))
        .max()
        .unwrap_or(0)
        + cfg.max_t as u64
        + 1;

    let mut planner = RoutePlanner::new(inputs.tensor, inputs.delta);
    let mut slots: Vec<Slot> = pkgs.iter().map(|_| Slot::Pending).collect();
    let mut trackers: Vec<Tracker> = pkgs
        .iter()
        .map(|_| Tracker { steps: 0, candidates: 0, plan_ms: 0.0, departed: None })
        .collect();
    let mut records: Vec<Option<PackageRecord>> = pkgs.iter().map(|_| None).collect();
    let mut open = pkgs.len();
    let empty = Vec::new();

    for s in start..=end {
        if open == 0 {
            break;
        }
        let mut pool: Vec<PassengerOrder> = by_slot.get(&s).unwrap_or(&empty).clone();

        for (idx, pkg) in pkgs.iter().enumerate() {
            // matching
            if let Slot::Pending = slots[idx] {
                if s < pkg.gen_t {
                    continue;
                }
                if let Some(t) = match_taxi(pkg.dep, &taxis, s) {
                    taxis[t].carrying = Some(pkg.id);
                    slots[idx] = Slot::Matched { taxi: t, depart: s.max(pkg.dep_t) };
                } else if s >= pkg.gen_t + wait {
                    slots[idx] = Slot::Done;
                    open -= 1;
                    records[idx] = Some(PackageRecord {
                        id: pkg.id,
                        outcome: PackageOutcome::Unmatched,
                        departed: None,
                        hops: 0,
                        candidates_seen: 0,
                        steps: 0,
                        len_t: 0,
                        orders: Vec::new(),
                        neglog_p: None,
                        plan_ms: 0.0,
                    });
                    continue;
                }
            }
            if let Slot::Matched { taxi, depart } = slots[idx] {
                if depart != s {
                    continue;
                }
                let mut req = (*pkg).clone();
                req.dep_t = depart;
                let mut state = DeliveryState::new(req);
                trackers[idx].departed = Some(depart);
                if cfg.planner == Policy::Psp && state.status == DeliveryStatus::InFlight {
                    let t0 = cfg.timing.then(Instant::now);
                    state.r_opt = planner.plan(&state.pkg);
                    trackers[idx].plan_ms += elapsed_ms(t0);
                }
                slots[idx] = Slot::Active { taxi, state };
            }

            let Slot::Active { taxi, state } = &mut slots[idx] else { continue };
            if state.status == DeliveryStatus::InFlight && state.cur_slot == s {
                let cand = candidate_set(state, &pool);
                let tr = &mut trackers[idx];
                let t0 = cfg.timing.then(Instant::now);
                let decision = match cfg.planner {
                    Policy::Hsp => hsp_step(state, &cand, inputs.tensor),
                    Policy::AveProb => hsp_step(state, &cand, inputs.aveprob.expect("checked above")),
                    Policy::Fcfs => baseline_step(Baseline::Fcfs, state, &cand, inputs.delta),
                    Policy::DesCloser => baseline_step(Baseline::DesCloser, state, &cand, inputs.delta),
                    Policy::Psp => {
                        let choice = psp_step(state, &cand, &mut planner);
                        if let Some(r) = choice.replanned {
                            state.r_opt = Some(r);
                        }
                        choice.decision
                    }
                };
                tr.plan_ms += elapsed_ms(t0);
                tr.steps += 1;
                tr.candidates += cand.len() as u32;
                let next = apply_decision(state.clone(), decision, &cand, inputs.delta)?;
                if let PlannerDecision::Take(id) = decision {
                    if cfg.order_exclusive {
                        pool.retain(|o| o.id != id);
                    }
                }
                *state = next;
            }

            if state.status != DeliveryStatus::InFlight {
                let t = *taxi;
                let delivered = state.status == DeliveryStatus::Delivered;
                // failed packages are driven straight to their destination
                let arrive = if delivered {
                    state.cur_slot
                } else {
                    state.cur_slot + inputs.delta.get(state.cur_block, state.pkg.des) as u64
                };
                taxis[t].block = state.pkg.des;
                taxis[t].available_from = arrive;
                taxis[t].carrying = None;
                let tr = &trackers[idx];
                records[idx] = Some(PackageRecord {
                    id: pkg.id,
                    outcome: if delivered { PackageOutcome::Delivered } else { PackageOutcome::Failed },
                    departed: tr.departed,
                    hops: state.r_act.len() as u32,
                    candidates_seen: tr.candidates,
                    steps: tr.steps,
                    len_t: state.len_t,
                    orders: state.r_act.iter().map(|o| o.id).collect(),
                    neglog_p: delivered.then(|| state.realized_route(inputs.tensor).weight),
                    plan_ms: tr.plan_ms,
                });
                slots[idx] = Slot::Done;
                open -= 1;
            }
        }
    }

    // anything still open at the horizon has run out of time
    for (idx, pkg) in pkgs.iter().enumerate() {
        if records[idx].is_some() {
            continue;
        }
        let tr = &trackers[idx];
        let (outcome, len_t, orders) = match &slots[idx] {
            Slot::Active { state, .. } => {
                (PackageOutcome::Failed, state.len_t, state.r_act.iter().map(|o| o.id).collect())
            }
            Slot::Matched { .. } => (PackageOutcome::Failed, 0, Vec::new()),
            _ => (PackageOutcome::Unmatched, 0, Vec::new()),
        };
        records[idx] = Some(PackageRecord {
            id: pkg.id,
            outcome,
            departed: tr.departed,
            hops: orders.len() as u32,
            candidates_seen: tr.candidates,
            steps: tr.steps,
            len_t,
            orders,
            neglog_p: None,
            plan_ms: tr.plan_ms,
        });
    }
    let mut metrics = compute_metrics(
        records.into_iter().map(|r| r.expect("every package resolved")).collect(),
        cfg.unmatched_are_failures,
    );
    if !cfg.timing {
        metrics.mean_step_ms = f64::NAN;
    }
    Ok(metrics)
}

fn elapsed_ms(start: Option<Instant>) -> f64 {
    start.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(outcome: PackageOutcome, neglog_p: Option<f64>) -> PackageRecord {
        PackageRecord {
            id: 0,
            outcome,
            departed: Some(0),
            hops: 1,
            candidates_seen: 1,
            steps: 1,
            len_t: 1,
            neglog_p,
            orders: vec![1],
            plan_ms: 0.0,
        }
    }

    #[test]
    fn metrics_all_and_none_delivered() {
        let all = compute_metrics(vec![record(PackageOutcome::Delivered, Some(0.5)); 3], true);
        assert_eq!(all.success_rate, 1.0);
        assert_eq!(all.average_neglogp, 0.5);
        let none = compute_metrics(vec![record(PackageOutcome::Failed, None); 2], true);
        assert_eq!(none.success_rate, 0.0);
        assert!(none.average_neglogp.is_nan());
        let empty = compute_metrics(Vec::new(), true);
        assert!(empty.success_rate.is_nan());
        assert_eq!(empty.packages, 0);
    }

    #[test]
    fn metrics_average_neglog() {
        let recs = [0.1f64, 0.2, 0.4]
            .iter()
            .map(|p| record(PackageOutcome::Delivered, Some(-p.ln())))
            .collect();
        let m = compute_metrics(recs, true);
        assert!((m.average_neglogp - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn unmatched_denominator_switch() {
        let recs = vec![
            record(PackageOutcome::Delivered, Some(1.0)),
            record(PackageOutcome::Unmatched, None),
            record(PackageOutcome::Failed, None),
            record(PackageOutcome::Unmatched, None),
        ];
        let a = compute_metrics(recs.clone(), true);
        assert_eq!((a.success_rate, a.matching_rate), (0.25, 0.5));
        let b = compute_metrics(recs, false);
        assert_eq!(b.success_rate, 0.5);
    }

    #[test]
    fn match_prefers_lowest_id() {
        let taxis = vec![
            TaxiState { id: 5, block: BlockId(3), available_from: 0, carrying: None },
            TaxiState { id: 2, block: BlockId(3), available_from: 0, carrying: None },
            TaxiState { id: 1, block: BlockId(3), available_from: 0, carrying: Some(9) },
            TaxiState { id: 0, block: BlockId(3), available_from: 50, carrying: None },
        ];
        assert_eq!(match_taxi(BlockId(3), &taxis, 10), Some(1));
        assert_eq!(match_taxi(BlockId(4), &taxis, 10), None);
        assert_eq!(match_taxi(BlockId(3), &taxis, 60).map(|i| taxis[i].id), Some(0));
    }

    #[test]
    fn district_weighted_origins() {
        let grid = GridSpec::new((0.0, 1.0), (0.0, 1.0), 2, 2, 144).unwrap();
        let all = vec![District {
            name: "all".into(),
            blocks: (0..4).map(BlockId).collect(),
            density: 1.0,
        }];
        let pk = generate_packages(&grid, &all, 4000, DepartureSpec::Fixed(48), 18, 1).unwrap();
        for b in 0..4 {
            let share = pk.iter().filter(|p| p.dep == BlockId(b)).count() as f64 / 4000.0;
            assert!((share - 0.25).abs() < 0.03);
        }
        assert!(pk.iter().all(|p| p.dep != p.des && p.dep_t == 48));

        let two = vec![
            District { name: "a".into(), blocks: vec![BlockId(0), BlockId(1)], density: 1.0 },
            District { name: "b".into(), blocks: vec![BlockId(2), BlockId(3)], density: 3.0 },
        ];
        let pk = generate_packages(&grid, &two, 10_000, DepartureSpec::Fixed(0), 18, 2).unwrap();
        let a = pk.iter().filter(|p| p.dep.0 < 2).count() as f64 / 10_000.0;
        assert!((a - 0.25).abs() < 0.02, "share {a}");
    }

    #[test]
    fn hourly_generation_count() {
        let grid = GridSpec::chengdu();
        let districts = default_districts(&grid);
        assert_eq!(districts.iter().map(|d| d.blocks.len()).sum::<usize>(), 100);
        let mut all = Vec::new();
        for h in 0..24u64 {
            all.extend(generate_packages(&grid, &districts, 100, DepartureSpec::Fixed(h * 6), 18, h).unwrap());
        }
        assert_eq!(all.len(), 2400);
    }

    #[test]
    fn uncovered_blocks_rejected() {
        let grid = GridSpec::new((0.0, 1.0), (0.0, 1.0), 2, 2, 144).unwrap();
        let partial = vec![District { name: "a".into(), blocks: vec![BlockId(0)], density: 1.0 }];
        assert!(generate_packages(&grid, &partial, 10, DepartureSpec::Fixed(0), 5, 0).is_err());
    }
}

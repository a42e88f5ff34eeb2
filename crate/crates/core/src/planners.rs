//! Online passenger-selection policies for a package riding along with passengers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demand::DemandTensor;
use crate::error::{Error, Result};
use crate::grid::{BlockId, SlotId, TravelTimeMatrix};
use crate::route::{Leg, PackageRequest, Route, RoutePlanner};

/// A revealed passenger trip in replay.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassengerOrder {
    pub id: u64,
    pub dep_block: BlockId,
    /// Absolute slot.
    pub dep_slot: u64,
    pub des_block: BlockId,
    /// Absolute slot; `dep_slot + δ(dep_block, des_block)` in replay.
    pub des_slot: u64,
    /// Order of appearance within its slot.
    pub reveal_seq: u32,
}

impl PassengerOrder {
    #[inline]
    pub fn duration(&self) -> u64 {
        self.des_slot - self.dep_slot
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryStatus {
    InFlight,
    Delivered,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliveryState {
    pub pkg: PackageRequest,
    pub cur_block: BlockId,
    pub cur_slot: u64,
    /// Slots elapsed since departure.
    pub len_t: u32,
    pub r_opt: Option<Route>,
    /// Passenger orders carried so far, in order.
    pub r_act: Vec<PassengerOrder>,
    pub status: DeliveryStatus,
}

impl DeliveryState {
    /// Package at its origin at its departure slot.
    pub fn new(pkg: PackageRequest) -> Self {
        let status = if pkg.dep == pkg.des {
            DeliveryStatus::Delivered
        } else {
            DeliveryStatus::InFlight
        };
        DeliveryState {
            cur_block: pkg.dep,
            cur_slot: pkg.dep_t,
            len_t: 0,
            r_opt: None,
            r_act: Vec::new(),
            status,
            pkg,
        }
    }

    #[inline]
    pub fn remaining(&self) -> u32 {
        self.pkg.max_t.saturating_sub(self.len_t)
    }

    /// Legs actually ridden, with probabilities looked up in `tensor`.
    pub fn realized_route(&self, tensor: &DemandTensor) -> Route {
        let n = tensor.slots() as u64;
        Route::from_legs(
            self.r_act
                .iter()
                .map(|v| Leg {
                    from: v.dep_block,
                    to: v.des_block,
                    dep_slot: v.dep_slot,
                    arr_slot: v.des_slot,
                    prob: tensor.get(v.des_block, v.dep_block, SlotId((v.dep_slot % n) as u32)),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerDecision {
    Take(u64),
    Wait,
    GiveUpDirect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    /// Prediction-based sequential planning.
    Psp,
    /// Heuristic sequential planning.
    Hsp,
    /// First-come-first-served.
    Fcfs,
    DesCloser,
    /// HSP scored on the historical-average tensor.
    AveProb,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Hsp, Policy::Psp, Policy::Fcfs, Policy::DesCloser, Policy::AveProb];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Psp => "psp",
            Policy::Hsp => "hsp",
            Policy::Fcfs => "fcfs",
            Policy::DesCloser => "descloser",
            Policy::AveProb => "aveprob",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psp" => Ok(Policy::Psp),
            "hsp" | "pptaxi" => Ok(Policy::Hsp),
            "fcfs" => Ok(Policy::Fcfs),
            "descloser" => Ok(Policy::DesCloser),
            "aveprob" | "pptaxi_aveprob" => Ok(Policy::AveProb),
            other => Err(Error::Config(format!("unknown planner '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Fcfs,
    DesCloser,
}

/// Orders the package can ride from where it is now without blowing its budget.
///
/// Same-block trips are skipped: they take zero slots and leave the package
/// where it is.
pub fn candidate_set(state: &DeliveryState, slot_orders: &[PassengerOrder]) -> Vec<PassengerOrder> {
    let budget = state.remaining() as u64;
    let mut cand: Vec<PassengerOrder> = slot_orders
        .iter()
        .filter(|v| {
            v.dep_block == state.cur_block
                && v.dep_slot == state.cur_slot
                && v.des_block != v.dep_block
                && v.duration() <= budget
        })
        .cloned()
        .collect();
    cand.sort_by_key(|v| (v.reveal_seq, v.id));
    cand
}

fn direct_order(state: &DeliveryState, cand: &[PassengerOrder]) -> Option<u64> {
    cand.iter().find(|v| v.des_block == state.pkg.des).map(|v| v.id)
}

/// First candidate with the strictly smallest finite score.
fn argmin_finite(cand: &[PassengerOrder], mut score: impl FnMut(&PassengerOrder) -> f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, v) in cand.iter().enumerate() {
        let s = score(v);
        if !s.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((idx, s));
        }
    }
    best
}

/// Greedy one-hop step: ride to where passengers are most likely to leave
/// for the package destination.
pub fn hsp_step(state: &DeliveryState, cand: &[PassengerOrder], tensor: &DemandTensor) -> PlannerDecision {
    if let Some(id) = direct_order(state, cand) {
        return PlannerDecision::Take(id);
    }
    let n = tensor.slots() as u64;
    let des = state.pkg.des;
    argmin_finite(cand, |v| {
        let p = tensor.get(des, v.des_block, SlotId((v.des_slot % n) as u32));
        if p > 0.0 {
            -p.ln()
        } else {
            f64::INFINITY
        }
    })
    .map_or(PlannerDecision::Wait, |(i, _)| PlannerDecision::Take(cand[i].id))
}

/// Outcome of a PSP step: the decision plus a replacement plan when the
/// step had to replan.
#[derive(Clone, Debug, PartialEq)]
pub struct PspChoice {
    pub decision: PlannerDecision,
    pub replanned: Option<Route>,
}

/// Follows the planned route when its next passenger shows up, otherwise
/// replans from every candidate's drop-off and takes the cheapest full route.
pub fn psp_step(state: &DeliveryState, cand: &[PassengerOrder], planner: &mut RoutePlanner<'_>) -> PspChoice {
    let keep = |decision| PspChoice { decision, replanned: None };
    if let Some(id) = direct_order(state, cand) {
        return keep(PlannerDecision::Take(id));
    }
    if let Some(leg) = state
        .r_opt
        .as_ref()
        .and_then(|r| r.leg_from(state.cur_block, state.cur_slot))
    {
        if let Some(v) = cand
            .iter()
            .find(|v| v.des_block == leg.to && v.des_slot == leg.arr_slot)
        {
            return keep(PlannerDecision::Take(v.id));
        }
    }

    let mut best: Option<(f64, usize, Route)> = None;
    for (idx, v) in cand.iter().enumerate() {
        let budget = state.pkg.max_t as i64 - state.len_t as i64 - v.duration() as i64;
        if budget < 1 {
            continue;
        }
        let hop = planner.hop_weight(v.des_block, state.cur_block, state.cur_slot);
        if !hop.is_finite() {
            continue;
        }
        let tail_req = PackageRequest {
            id: state.pkg.id,
            dep: v.des_block,
            des: state.pkg.des,
            dep_t: v.des_slot,
            gen_t: v.des_slot,
            max_t: budget as u32,
        };
        let Some(tail) = planner.plan(&tail_req) else { continue };
        let score = hop + tail.weight;
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, idx, tail));
        }
    }
    match best {
        None => keep(PlannerDecision::Wait),
        Some((score, idx, tail)) => {
            let v = &cand[idx];
            let tensor = planner.tensor();
            let n = tensor.slots() as u64;
            let mut legs = vec![Leg {
                from: v.dep_block,
                to: v.des_block,
                dep_slot: v.dep_slot,
                arr_slot: v.des_slot,
                prob: tensor.get(v.des_block, v.dep_block, SlotId((v.dep_slot % n) as u32)),
            }];
            legs.extend(tail.legs);
            let mut route = Route::from_legs(legs);
            route.weight = score;
            PspChoice {
                decision: PlannerDecision::Take(v.id),
                replanned: Some(route),
            }
        }
    }
}

pub fn baseline_step(
    policy: Baseline,
    state: &DeliveryState,
    cand: &[PassengerOrder],
    delta: &TravelTimeMatrix,
) -> PlannerDecision {
    let pick = match policy {
        Baseline::Fcfs => cand.first(),
        Baseline::DesCloser => cand
            .iter()
            .min_by_key(|v| (delta.get(v.des_block, state.pkg.des), v.reveal_seq)),
    };
    pick.map_or(PlannerDecision::Wait, |v| PlannerDecision::Take(v.id))
}

/// Advances the delivery by one decision.
pub fn apply_decision(
    mut state: DeliveryState,
    decision: PlannerDecision,
    cand: &[PassengerOrder],
    delta: &TravelTimeMatrix,
) -> Result<DeliveryState> {
    if state.status != DeliveryStatus::InFlight {
        return Ok(state);
    }
    match decision {
        PlannerDecision::Take(id) => {
            let v = cand
                .iter()
                .find(|v| v.id == id)
                .ok_or(Error::InvalidDecision(id))?;
            let dur = v.duration();
            state.cur_block = v.des_block;
            state.cur_slot = v.des_slot;
            state.len_t += dur as u32;
            state.r_act.push(v.clone());
        }
        PlannerDecision::Wait => {
            state.cur_slot += 1;
            state.len_t += 1;
        }
        PlannerDecision::GiveUpDirect => {
            state.cur_slot += delta.get(state.cur_block, state.pkg.des) as u64;
            state.cur_block = state.pkg.des;
            state.status = DeliveryStatus::Failed;
            return Ok(state);
        }
    }
    if state.cur_block == state.pkg.des {
        state.status = if state.len_t <= state.pkg.max_t {
            DeliveryStatus::Delivered
        } else {
            DeliveryStatus::Failed
        };
    } else if state.len_t >= state.pkg.max_t {
        state.status = DeliveryStatus::Failed;
    }
    Ok(state)
}

//! Block-slot time-expanded graph and the exact maximum-probability route search.
//!
//! Node `n(b, t)` is block `b` at `t` slots after the package departs. An edge
//! `n(i, t) → n(j, t + δ(i, j))` carries weight `−ln P(Y = j, X = i | T = slot)`,
//! so the shortest path is the route whose leg probabilities have the largest
//! product.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::demand::DemandTensor;
use crate::grid::{BlockId, SlotId, TravelTimeMatrix};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageRequest {
    pub id: u32,
    pub dep: BlockId,
    pub des: BlockId,
    /// Departure, as an absolute slot counter (day · N + slot).
    pub dep_t: u64,
    /// Generation time, absolute slot.
    pub gen_t: u64,
    /// Delivery budget in slots.
    pub max_t: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub from: BlockId,
    pub to: BlockId,
    pub dep_slot: u64,
    pub arr_slot: u64,
    /// Tensor entry of this leg at its departure slot.
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub legs: Vec<Leg>,
    /// `Σ −ln P` over legs.
    pub weight: f64,
    /// `Π P` over legs.
    pub probability: f64,
}

impl Route {
    pub fn empty() -> Self {
        Route {
            legs: Vec::new(),
            weight: 0.0,
            probability: 1.0,
        }
    }

    pub fn from_legs(legs: Vec<Leg>) -> Self {
        let weight = legs.iter().map(|l| -l.prob.ln()).sum();
        let probability = legs.iter().map(|l| l.prob).product();
        Route {
            legs,
            weight,
            probability,
        }
    }

    pub fn duration(&self) -> u64 {
        match (self.legs.first(), self.legs.last()) {
            (Some(a), Some(b)) => b.arr_slot - a.dep_slot,
            _ => 0,
        }
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        let mut out: Vec<BlockId> = self.legs.first().map(|l| l.from).into_iter().collect();
        out.extend(self.legs.iter().map(|l| l.to));
        out
    }

    /// Leg that departs `block` at absolute slot `slot`, if any.
    pub fn leg_from(&self, block: BlockId, slot: u64) -> Option<&Leg> {
        self.legs
            .iter()
            .find(|l| l.from == block && l.dep_slot == slot)
    }
}

/// Product of the tensor entries of each leg at its departure slot.
pub fn route_probability(route: &Route, tensor: &DemandTensor) -> f64 {
    let n = tensor.slots() as u64;
    route
        .legs
        .iter()
        .map(|l| tensor.get(l.to, l.from, SlotId((l.dep_slot % n) as u32)))
        .product()
}

/// Materialised time-expanded graph.
#[derive(Clone, Debug)]
pub struct TimeExpandedGraph {
    pub blocks: usize,
    pub horizon: u32,
    pub origin_slot: SlotId,
    adjacency: Vec<Vec<(u32, f64)>>,
}

impl TimeExpandedGraph {
    #[inline]
    pub fn node(&self, b: BlockId, t: u32) -> usize {
        t as usize * self.blocks + b.index()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Outgoing `(target node, weight)` pairs.
    pub fn edges(&self, node: usize) -> &[(u32, f64)] {
        &self.adjacency[node]
    }

    /// `(block, relative slot)` of a node index.
    pub fn locate(&self, node: usize) -> (BlockId, u32) {
        (BlockId((node % self.blocks) as u32), (node / self.blocks) as u32)
    }
}

/// Calls `f(to, dt, p)` for every edge leaving block `from` at relative
/// slot `t` of a graph anchored at `origin_slot`.
#[inline]
fn for_each_edge(
    tensor: &DemandTensor,
    delta: &TravelTimeMatrix,
    origin_slot: SlotId,
    horizon: u32,
    from: usize,
    t: u32,
    mut f: impl FnMut(usize, u32, f64),
) {
    let n = tensor.slots() as u64;
    let k = ((origin_slot.0 as u64 + t as u64) % n) as usize;
    let row = tensor.destinations(from, k);
    for (to, &p) in row.iter().enumerate() {
        if to == from || p <= 0.0 {
            continue;
        }
        let dt = delta.get_idx(from, to);
        if t + dt <= horizon {
            f(to, dt, p);
        }
    }
}

pub fn build_graph(
    tensor: &DemandTensor,
    delta: &TravelTimeMatrix,
    origin_slot: SlotId,
    horizon: u32,
) -> TimeExpandedGraph {
    let m = tensor.blocks();
    let mut adjacency = vec![Vec::new(); m * (horizon as usize + 1)];
    for t in 0..=horizon {
        for from in 0..m {
            let node = t as usize * m + from;
            for_each_edge(tensor, delta, origin_slot, horizon, from, t, |to, dt, p| {
                adjacency[node].push((((t + dt) as usize * m + to) as u32, -p.ln()));
            });
        }
    }
    TimeExpandedGraph {
        blocks: m,
        horizon,
        origin_slot,
        adjacency,
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    t: u32,
    node: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, t, node)
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.t.cmp(&self.t))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NO_PRED: u32 = u32::MAX;

fn block_path(pred: &[u32], mut node: u32, m: usize) -> Vec<u32> {
    let mut out = vec![node % m as u32];
    while pred[node as usize] != NO_PRED {
        node = pred[node as usize];
        out.push(node % m as u32);
    }
    out.reverse();
    out
}

/// Whether the block sequence through `a` is lexicographically smaller than through `b`.
fn lex_less(pred: &[u32], a: u32, b: u32, m: usize) -> bool {
    block_path(pred, a, m) < block_path(pred, b, m)
}

/// Search state reused across route queries.
#[derive(Default)]
struct Search {
    dist: Vec<f64>,
    pred: Vec<u32>,
    settled: Vec<bool>,
    heap: BinaryHeap<HeapEntry>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stop {
    /// Label every reachable node, then pick the best destination copy.
    Exhaustive,
    /// Stop at the first destination copy taken off the heap.
    FirstTarget,
}

impl Search {
    fn run(
        &mut self,
        pkg: &PackageRequest,
        tensor: &DemandTensor,
        delta: &TravelTimeMatrix,
        weight: impl Fn(usize, usize, usize, f64) -> f64,
        stop: Stop,
    ) -> Option<Route> {
        if pkg.dep == pkg.des {
            return Some(Route::empty());
        }
        let m = tensor.blocks();
        let n = tensor.slots() as u64;
        let horizon = pkg.max_t;
        let origin_slot = SlotId((pkg.dep_t % n) as u32);
        let nodes = m * (horizon as usize + 1);
        self.dist.clear();
        self.dist.resize(nodes, f64::INFINITY);
        self.pred.clear();
        self.pred.resize(nodes, NO_PRED);
        self.settled.clear();
        self.settled.resize(nodes, false);
        self.heap.clear();

        let start = pkg.dep.index();
        self.dist[start] = 0.0;
        self.heap.push(HeapEntry { dist: 0.0, t: 0, node: start as u32 });
        let des = pkg.des.index();
        let mut target = None;

        while let Some(HeapEntry { dist: d, t, node }) = self.heap.pop() {
            let v = node as usize;
            if self.settled[v] || d > self.dist[v] {
                continue;
            }
            self.settled[v] = true;
            let b = v % m;
            if b == des && t > 0 {
                if stop == Stop::FirstTarget {
                    target = Some(v);
                    break;
                }
                // the destination is terminal for a delivery route
                continue;
            }
            let k = ((origin_slot.0 as u64 + t as u64) % n) as usize;
            let (dist, pred, heap) = (&mut self.dist, &mut self.pred, &mut self.heap);
            for_each_edge(tensor, delta, origin_slot, horizon, b, t, |to, dt, p| {
                let u = (t + dt) as usize * m + to;
                let nd = d + weight(to, b, k, p);
                if nd < dist[u] {
                    dist[u] = nd;
                    pred[u] = node;
                    heap.push(HeapEntry { dist: nd, t: t + dt, node: u as u32 });
                } else if nd == dist[u] && pred[u] != node && lex_less(pred, node, pred[u], m) {
                    pred[u] = node;
                }
            });
        }

        let best = match stop {
            Stop::FirstTarget => target,
            Stop::Exhaustive => (1..=horizon as usize)
                .map(|t| t * m + des)
                .filter(|&v| self.dist[v].is_finite())
                .fold(None, |acc: Option<usize>, v| match acc {
                    Some(a) if self.dist[a] <= self.dist[v] => Some(a),
                    _ => Some(v),
                }),
        }?;

        let mut nodes_rev = vec![best];
        let mut cur = best;
        while self.pred[cur] != NO_PRED {
            cur = self.pred[cur] as usize;
            nodes_rev.push(cur);
        }
        nodes_rev.reverse();
        let legs = nodes_rev
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let (ta, tb) = ((a / m) as u64, (b / m) as u64);
                let k = SlotId(((origin_slot.0 as u64 + ta) % n) as u32);
                let (from, to) = (BlockId((a % m) as u32), BlockId((b % m) as u32));
                Leg {
                    from,
                    to,
                    dep_slot: pkg.dep_t + ta,
                    arr_slot: pkg.dep_t + tb,
                    prob: tensor.get(to, from, k),
                }
            })
            .collect();
        let mut route = Route::from_legs(legs);
        route.weight = self.dist[best];
        Some(route)
    }
}

/// Exact maximum-probability route for `pkg` within its budget.
///
/// Labels the whole time-expanded graph from `n(dep, 0)`, then returns the
/// cheapest copy `n(des, t)` for `t` in `1..=max_t`; ties go to the earliest
/// arrival, then to the lexicographically smallest block sequence. `None`
/// when no destination copy is reachable.
pub fn dop(pkg: &PackageRequest, tensor: &DemandTensor, delta: &TravelTimeMatrix) -> Option<Route> {
    Search::default().run(pkg, tensor, delta, |_, _, _, p| -p.ln(), Stop::Exhaustive)
}

/// Repeated route queries against one tensor, with `−ln P` precomputed.
pub struct RoutePlanner<'a> {
    tensor: &'a DemandTensor,
    delta: &'a TravelTimeMatrix,
    neglog: Vec<f64>,
    search: Search,
}

impl<'a> RoutePlanner<'a> {
    pub fn new(tensor: &'a DemandTensor, delta: &'a TravelTimeMatrix) -> Self {
        let neglog = tensor.raw().iter().map(|&p| -p.ln()).collect();
        RoutePlanner {
            tensor,
            delta,
            neglog,
            search: Search::default(),
        }
    }

    pub fn tensor(&self) -> &'a DemandTensor {
        self.tensor
    }

    pub fn delta(&self) -> &'a TravelTimeMatrix {
        self.delta
    }

    /// Same result as [`dop`], stopping as soon as the optimum is known.
    pub fn plan(&mut self, pkg: &PackageRequest) -> Option<Route> {
        let m = self.tensor.blocks();
        let n = self.tensor.slots();
        let neglog = &self.neglog;
        self.search.run(
            pkg,
            self.tensor,
            self.delta,
            |to, from, k, _| neglog[(from * n + k) * m + to],
            Stop::FirstTarget,
        )
    }

    /// `−ln P(Y = to, X = from | T = slot)`.
    #[inline]
    pub fn hop_weight(&self, to: BlockId, from: BlockId, slot: u64) -> f64 {
        let m = self.tensor.blocks();
        let n = self.tensor.slots();
        let k = (slot % n as u64) as usize;
        self.neglog[(from.index() * n + k) * m + to.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_tensor(m: usize, n: usize, p: f64) -> DemandTensor {
        let mut t = DemandTensor::zeros(m, n);
        for i in 0..m {
            for k in 0..n {
                for j in 0..m {
                    t.set(j, i, k, p);
                }
            }
        }
        t
    }

    fn pkg(dep: u32, des: u32, dep_t: u64, max_t: u32) -> PackageRequest {
        PackageRequest {
            id: 0,
            dep: BlockId(dep),
            des: BlockId(des),
            dep_t,
            gen_t: dep_t,
            max_t,
        }
    }

    #[test]
    fn zero_tensor_has_no_edges() {
        let t = DemandTensor::zeros(3, 6);
        let d = TravelTimeMatrix::from_fn(3, |i, j| (i != j) as u32);
        let g = build_graph(&t, &d, SlotId(0), 4);
        assert_eq!(g.node_count(), 15);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn single_edge_family() {
        let mut t = DemandTensor::zeros(2, 6);
        for k in 0..6 {
            t.set(1, 0, k, 0.5);
        }
        let d = TravelTimeMatrix::from_fn(2, |i, j| (i != j) as u32);
        let g = build_graph(&t, &d, SlotId(3), 4);
        assert_eq!(g.edge_count(), 4);
        for tt in 0..4u32 {
            let e = g.edges(g.node(BlockId(0), tt));
            assert_eq!(e.len(), 1);
            assert_eq!(e[0].0 as usize, g.node(BlockId(1), tt + 1));
            assert!((e[0].1 - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn edges_match_brute_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n, horizon) = (3usize, 5usize, 4u32);
        let mut t = DemandTensor::zeros(m, n);
        for i in 0..m {
            for k in 0..n {
                for j in 0..m {
                    if rng.random_bool(0.7) {
                        t.set(j, i, k, rng.random_range(0.01..1.0));
                    }
                }
            }
        }
        let d = TravelTimeMatrix::from_fn(m, |i, j| if i == j { 0 } else { 1 + ((i + 2 * j) % 3) as u32 });
        let origin = SlotId(3);
        let g = build_graph(&t, &d, origin, horizon);
        let mut got: Vec<(usize, usize, u64)> = (0..g.node_count())
            .flat_map(|v| g.edges(v).iter().map(move |&(u, w)| (v, u as usize, w.to_bits())))
            .collect();
        got.sort();
        let mut want = Vec::new();
        for tk in 0..=horizon {
            for tg in 0..=horizon {
                for i in 0..m {
                    for j in 0..m {
                        let k = (origin.0 + tk) as usize % n;
                        let p = t.get_idx(j, i, k);
                        if i != j && tg as i64 - tk as i64 == d.get_idx(i, j) as i64 && p > 0.0 {
                            want.push((tk as usize * m + i, tg as usize * m + j, (-p.ln()).to_bits()));
                        }
                    }
                }
            }
        }
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn same_block_is_free() {
        let t = uniform_tensor(3, 6, 0.2);
        let d = TravelTimeMatrix::from_fn(3, |i, j| (i != j) as u32);
        let r = dop(&pkg(1, 1, 0, 3), &t, &d).unwrap();
        assert!(r.legs.is_empty());
        assert_eq!(r.weight, 0.0);
        assert_eq!(r.probability, 1.0);
    }

    #[test]
    fn uniform_tensor_gives_min_hop_route() {
        let p: f64 = 0.1;
        let t = uniform_tensor(4, 8, p);
        // path graph 0-1-2-3, with a direct but slow 0→3 hop
        let d = TravelTimeMatrix::from_fn(4, |i, j| {
            if i == j {
                0
            } else if (i, j) == (0, 3) {
                5
            } else {
                (i as i64 - j as i64).unsigned_abs() as u32
            }
        });
        let r = dop(&pkg(0, 3, 2, 6), &t, &d).unwrap();
        assert_eq!(r.legs.len(), 1);
        assert!((r.weight + p.ln()).abs() < 1e-12);
        let r = dop(&pkg(0, 3, 2, 4), &t, &d).unwrap();
        assert!((r.weight - 3.0 * -p.ln()).abs() < 1e-12 || (r.weight - 2.0 * -p.ln()).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_earliest_then_lexicographic() {
        let t = uniform_tensor(4, 8, 0.5);
        // 0→1→3 and 0→2→3 take the same time, 0→3 direct is not allowed
        let d = TravelTimeMatrix::from_fn(4, |i, j| if i == j { 0 } else { 1 });
        let mut t2 = t.clone();
        for k in 0..8 {
            t2.set(3, 0, k, 0.0);
        }
        let r = dop(&pkg(0, 3, 0, 4), &t2, &d).unwrap();
        assert_eq!(r.blocks(), vec![BlockId(0), BlockId(1), BlockId(3)]);
        assert_eq!(r.legs[1].arr_slot, 2);
    }

    #[test]
    fn unreachable_is_none() {
        let t = uniform_tensor(3, 4, 0.3);
        let d = TravelTimeMatrix::from_fn(3, |i, j| if i == j { 0 } else { 3 });
        assert!(dop(&pkg(0, 2, 0, 2), &t, &d).is_none());
        assert!(dop(&pkg(0, 2, 0, 3), &t, &d).is_some());
    }

    #[test]
    fn route_probability_examples() {
        let mut t = DemandTensor::zeros(4, 4);
        t.set(1, 0, 0, 0.5);
        t.set(2, 1, 1, 0.4);
        t.set(3, 2, 2, 0.25);
        let t_single = {
            let mut s = DemandTensor::zeros(2, 4);
            s.set(1, 0, 1, 0.3);
            s
        };
        assert_eq!(route_probability(&Route::empty(), &t), 1.0);
        let one = Route::from_legs(vec![Leg { from: BlockId(0), to: BlockId(1), dep_slot: 5, arr_slot: 6, prob: 0.3 }]);
        assert!((route_probability(&one, &t_single) - 0.3).abs() < 1e-15);
        let legs = vec![
            Leg { from: BlockId(0), to: BlockId(1), dep_slot: 4, arr_slot: 5, prob: 0.5 },
            Leg { from: BlockId(1), to: BlockId(2), dep_slot: 5, arr_slot: 6, prob: 0.4 },
            Leg { from: BlockId(2), to: BlockId(3), dep_slot: 6, arr_slot: 7, prob: 0.25 },
        ];
        let r = Route::from_legs(legs);
        assert!((route_probability(&r, &t) - 0.05).abs() < 1e-15);
        assert!((r.weight + 0.05f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn early_exit_agrees_with_full_labelling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (m, n) = (6usize, 12usize);
            let mut t = DemandTensor::zeros(m, n);
            for i in 0..m {
                for k in 0..n {
                    for j in 0..m {
                        if rng.random_bool(0.5) {
                            t.set(j, i, k, rng.random_range(0.001..0.5));
                        }
                    }
                }
            }
            let d = TravelTimeMatrix::from_fn(m, |i, j| if i == j { 0 } else { 1 + ((i * 7 + j * 3) % 3) as u32 });
            let mut planner = RoutePlanner::new(&t, &d);
            let p = pkg(rng.random_range(0..m as u32), rng.random_range(0..m as u32), rng.random_range(0..40), rng.random_range(1..8));
            let a = dop(&p, &t, &d);
            let b = planner.plan(&p);
            assert_eq!(a.as_ref().map(Route::blocks), b.as_ref().map(Route::blocks));
            if let (Some(a), Some(b)) = (a, b) {
                assert_eq!(a.legs, b.legs);
                assert!((a.weight - b.weight).abs() < 1e-12);
            }
        }
    }
}

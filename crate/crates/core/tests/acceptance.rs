//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL` line
//! to stderr (bypassing the test harness capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use pptaxi_core::demand::{Mat3, Vec3};
use pptaxi_core::experiment::{run_sweep, Experiment, RunSpec, Sweep};
use pptaxi_core::io::model::{decode_model, encode_model, FORMAT_VERSION};
use pptaxi_core::io::results::write_results;
use pptaxi_core::io::ModelBundle;
use pptaxi_core::{
    dop, fit_circular_gaussian, gaussian_box_integral, generate_synthetic_orders, BlockId, DemandTensor, Error,
    Fleet, OrderRecord, PackageRequest, Policy, SlotId, SynthCitySpec, TravelTimeMatrix,
};

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion}: {verdict}  {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- criterion 1

/// Best `Π p` over every leg sequence from `at` that ends at `des` within the
/// horizon; `des` is terminal.
fn enumerate_best(
    tensor: &DemandTensor,
    delta: &TravelTimeMatrix,
    pkg: &PackageRequest,
    at: usize,
    t: u32,
    prob: f64,
) -> Option<f64> {
    let n = tensor.slots() as u64;
    let k = ((pkg.dep_t + t as u64) % n) as usize;
    let mut best: Option<f64> = None;
    for to in 0..tensor.blocks() {
        if to == at {
            continue;
        }
        let p = tensor.get_idx(to, at, k);
        let dt = delta.get_idx(at, to);
        if p <= 0.0 || t + dt > pkg.max_t {
            continue;
        }
        let found = if to == pkg.des.index() {
            Some(prob * p)
        } else {
            enumerate_best(tensor, delta, pkg, to, t + dt, prob * p)
        };
        if let Some(f) = found {
            best = Some(best.map_or(f, |b: f64| b.max(f)));
        }
    }
    best
}

fn random_instance(rng: &mut ChaCha8Rng) -> (DemandTensor, TravelTimeMatrix, PackageRequest) {
    let m = rng.random_range(2..=5usize);
    let n = rng.random_range(1..=8usize);
    let mut tensor = DemandTensor::zeros(m, n);
    for v in tensor.raw_mut() {
        *v = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(1e-4..1.0) };
    }
    let delta = TravelTimeMatrix::from_fn(m, |i, j| if i == j { 0 } else { rng.random_range(1..=3) });
    let dep = rng.random_range(0..m as u32);
    let mut des = rng.random_range(0..m as u32 - 1);
    if des >= dep {
        des += 1;
    }
    let dep_t = rng.random_range(0..3 * n as u64);
    let pkg = PackageRequest {
        id: 0,
        dep: BlockId(dep),
        des: BlockId(des),
        dep_t,
        gen_t: dep_t,
        max_t: rng.random_range(1..=6),
    };
    (tensor, delta, pkg)
}

#[test]
fn criterion_1_dop_matches_enumeration() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0);
    let (mut mismatches, mut routed) = (0, 0);
    for _ in 0..200 {
        let (tensor, delta, pkg) = random_instance(&mut rng);
        let oracle = enumerate_best(&tensor, &delta, &pkg, pkg.dep.index(), 0, 1.0);
        let got = dop(&pkg, &tensor, &delta);
        let ok = match (&got, oracle) {
            (None, None) => true,
            (Some(r), Some(best)) => {
                routed += 1;
                let legs_chain = r.legs.windows(2).all(|w| w[0].to == w[1].from && w[0].arr_slot == w[1].dep_slot);
                let recomputed: f64 = r
                    .legs
                    .iter()
                    .map(|l| tensor.get(l.to, l.from, SlotId((l.dep_slot % tensor.slots() as u64) as u32)))
                    .product();
                (r.probability - best).abs() <= 1e-12
                    && (recomputed - best).abs() <= 1e-12
                    && (r.weight - (-best.ln())).abs() <= 1e-12 * r.weight.max(1.0)
                    && r.duration() <= pkg.max_t as u64
                    && r.legs.first().is_some_and(|l| l.from == pkg.dep && l.dep_slot == pkg.dep_t)
                    && r.legs.last().is_some_and(|l| l.to == pkg.des)
                    && legs_chain
            }
            _ => false,
        };
        if !ok {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 30.0;
    report(
        1,
        pass,
        &format!("200 instances ({routed} routable), {mismatches} mismatches, {secs:.2}s (limit 30s)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_circular_fit_matches_scan() {
    const N: u32 = 144;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut bad = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=200usize);
        // mixture of clustered and spread samples so ties and wraparound occur
        let centre = rng.random_range(0..N);
        let spread = rng.random_range(0..=80u32);
        let samples: Vec<SlotId> = (0..len)
            .map(|_| {
                let off = rng.random_range(0..=2 * spread) as i64 - spread as i64;
                SlotId((centre as i64 + off).rem_euclid(N as i64) as u32)
            })
            .collect();
        let cost = |mu: u32| -> u64 {
            samples
                .iter()
                .map(|s| {
                    let d = s.0.abs_diff(mu);
                    let d = d.min(N - d) as u64;
                    d * d
                })
                .sum()
        };
        let (mut best_mu, mut best_cost) = (0, u64::MAX);
        for mu in 0..N {
            let c = cost(mu);
            if c < best_cost {
                (best_mu, best_cost) = (mu, c);
            }
        }
        let sigma2 = if len == 1 { 0.0 } else { best_cost as f64 / (len - 1) as f64 };
        let fit = fit_circular_gaussian(&samples, N).unwrap();
        if fit.mu != best_mu || (fit.sigma2_raw - sigma2).abs() > 1e-9 {
            bad += 1;
        }
    }
    report(2, bad == 0, &format!("1000 sample sets, {bad} disagreements (sigma2 tol 1e-9)"));
    assert_eq!(bad, 0);
}

// ------------------------------------------------------- shared 20k-order city

struct SmallCity {
    orders: Vec<OrderRecord>,
    bundle: ModelBundle,
}

fn small_city() -> &'static SmallCity {
    static CITY: OnceLock<SmallCity> = OnceLock::new();
    CITY.get_or_init(|| {
        let spec = SynthCitySpec::rush_hour_scaled(11, 2.65);
        let orders = generate_synthetic_orders(&spec, 4).unwrap();
        let bundle = ModelBundle::train(&orders, &spec.grid, true).unwrap();
        SmallCity { orders, bundle }
    })
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_tensor_normalization() {
    let city = small_city();
    let tensor = city.bundle.demand_tensor().unwrap();
    let (m, n) = (tensor.blocks(), tensor.slots());
    let (mut worst_x, mut worst_y, mut out_of_range, mut positive) = (0.0f64, 0.0f64, 0, 0);
    for k in 0..n {
        let sx: f64 = (0..m).map(|i| tensor.marginal(i, k)).sum();
        worst_x = worst_x.max((sx - 1.0).abs());
        for i in 0..m {
            let px = tensor.marginal(i, k);
            let row = tensor.destinations(i, k);
            out_of_range += row.iter().filter(|p| !(0.0..=1.0).contains(*p)).count();
            if px > 0.0 {
                positive += 1;
                let sy: f64 = row.iter().sum::<f64>() / px;
                worst_y = worst_y.max((sy - 1.0).abs());
            }
        }
    }
    let pass = worst_x <= 1e-9 && worst_y <= 1e-3 && out_of_range == 0 && (m, n) == (100, 144);
    report(
        3,
        pass,
        &format!(
            "{} orders, max |sum P(X|T) - 1| = {worst_x:.2e} (tol 1e-9), max |sum P(Y|X,T) - 1| = {worst_y:.2e} over {positive} cells (tol 1e-3), {out_of_range} entries outside [0,1]",
            city.orders.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_box_integral_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB4);
    let std_normal = Normal::standard();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mean: Vec3 = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let var: Vec3 = std::array::from_fn(|_| rng.random_range(0.05..9.0));
        let cov: Mat3 = std::array::from_fn(|r| std::array::from_fn(|c| if r == c { var[r] } else { 0.0 }));
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for d in 0..3 {
            let a = mean[d] + rng.random_range(-3.0..3.0) * var[d].sqrt();
            let w = rng.random_range(0.01..4.0) * var[d].sqrt();
            (lo[d], hi[d]) = (a, a + w);
        }
        let exact: f64 = (0..3)
            .map(|d| {
                let sd = var[d].sqrt();
                std_normal.cdf((hi[d] - mean[d]) / sd) - std_normal.cdf((lo[d] - mean[d]) / sd)
            })
            .product();
        let got = gaussian_box_integral(&mean, &cov, &lo, &hi).unwrap();
        worst = worst.max((got - exact).abs());
    }
    let mean: Vec3 = [0.5, -1.0, 70.0];
    let cov: Mat3 = [[2.0, 0.4, 0.3], [0.4, 1.0, -0.2], [0.3, -0.2, 25.0]];
    let full = gaussian_box_integral(&mean, &cov, &[f64::NEG_INFINITY; 3], &[f64::INFINITY; 3]).unwrap();
    let pass = worst <= 1e-3 && (full - 1.0).abs() <= 1e-3;
    report(
        4,
        pass,
        &format!("100 diagonal cases, max abs error {worst:.2e} (tol 1e-3), full support {full:.6}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------- criteria 5 and 6

const PLANNERS: [Policy; 4] = [Policy::Psp, Policy::Hsp, Policy::Fcfs, Policy::DesCloser];

/// Rush-hour city, trained on four days and replayed on the fifth.
fn rush_hour_experiment(seed: u64) -> Experiment {
    let spec = SynthCitySpec::rush_hour_scaled(seed, 100.0);
    let all = generate_synthetic_orders(&spec, 5).unwrap();
    let test_day = spec.base_day + 4 * spec.day_stride;
    let split = all.partition_point(|o| o.dep_epoch < test_day * 86_400);
    let (train, test) = all.split_at(split);
    let bundle = ModelBundle::train(train, &spec.grid, false).unwrap();
    Experiment::new(&bundle, test).unwrap()
}

#[test]
fn criteria_5_and_6_planner_ordering() {
    const MORNING: u32 = 8 * 6;
    let mut sr18: Vec<Vec<f64>> = vec![Vec::new(); PLANNERS.len()];
    let mut by_count: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); 3]; PLANNERS.len()];
    let mut monotone_breaks = Vec::new();
    let mut ap_wins = 0;
    for seed in 0..10u64 {
        let exp = rush_hour_experiment(seed);
        let mut ap = [f64::NAN; 4];
        for (pi, &planner) in PLANNERS.iter().enumerate() {
            let mut prev = f64::NEG_INFINITY;
            for max_t in [6, 12, 18, 30] {
                let m = exp.run(&RunSpec::new(planner, max_t, MORNING, 500, seed)).unwrap();
                if m.success_rate < prev {
                    monotone_breaks.push(format!("{planner}@seed{seed}/maxT{max_t}"));
                }
                prev = m.success_rate;
                if max_t == 18 {
                    sr18[pi].push(m.success_rate);
                    ap[pi] = m.average_neglogp;
                    by_count[pi][1].push(m.success_rate);
                }
            }
            for (ci, count) in [(0, 100), (2, 1500)] {
                let m = exp.run(&RunSpec::new(planner, 18, MORNING, count, seed)).unwrap();
                by_count[pi][ci].push(m.success_rate);
            }
        }
        // ap[1] is HSP; a planner with no deliveries has no AP to beat
        let beats = |other: f64| other.is_nan() || ap[1] <= other;
        if beats(ap[2]) && beats(ap[3]) {
            ap_wins += 1;
        }
    }
    let md: Vec<f64> = sr18.iter().map(|v| median(v.clone())).collect();
    let (psp, hsp, fcfs, descloser) = (md[0], md[1], md[2], md[3]);
    let count_medians: Vec<[f64; 3]> = by_count
        .iter()
        .map(|c| [median(c[0].clone()), median(c[1].clone()), median(c[2].clone())])
        .collect();
    let count_trend = count_medians.iter().all(|c| c[0] >= c[1] && c[1] >= c[2]);
    let pass5 = psp >= hsp - 0.02 && hsp >= fcfs + 0.02 && hsp >= descloser && monotone_breaks.is_empty() && count_trend;
    let trend: Vec<String> = PLANNERS
        .iter()
        .zip(&count_medians)
        .map(|(p, c)| format!("{p} {:.3}/{:.3}/{:.3}", c[0], c[1], c[2]))
        .collect();
    report(
        5,
        pass5,
        &format!(
            "median SR psp {psp:.3} hsp {hsp:.3} fcfs {fcfs:.3} descloser {descloser:.3}; maxT breaks {:?}; SR by packages 100/500/1500: {}",
            monotone_breaks,
            trend.join(", ")
        ),
    );
    let pass6 = ap_wins >= 8;
    report(6, pass6, &format!("AP(hsp) <= AP(fcfs) and AP(descloser) in {ap_wins}/10 seeds (need 8)"));
    assert!(pass5 && pass6);
}

// ---------------------------------------------------------------- criterion 7

fn time_dop(tensor: &DemandTensor, delta: &TravelTimeMatrix, pairs: &[(u32, u32)], max_t: u32) -> f64 {
    let mut runs = Vec::new();
    for _ in 0..5 {
        let t0 = Instant::now();
        for &(dep, des) in pairs {
            let pkg = PackageRequest { id: 0, dep: BlockId(dep), des: BlockId(des), dep_t: 48, gen_t: 48, max_t };
            std::hint::black_box(dop(&pkg, tensor, delta));
        }
        runs.push(t0.elapsed().as_secs_f64() / pairs.len() as f64);
    }
    median(runs)
}

#[test]
fn criterion_7_runtime() {
    let city = small_city();
    let tensor = city.bundle.demand_tensor().unwrap();
    let delta = &city.bundle.delta;
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    let pairs: Vec<(u32, u32)> = (0..40)
        .map(|_| {
            let a = rng.random_range(0..100);
            let b = (a + rng.random_range(1..100)) % 100;
            (a, b)
        })
        .collect();
    let d12 = time_dop(&tensor, delta, &pairs, 12);
    let d24 = time_dop(&tensor, delta, &pairs, 24);
    let ratio = d24 / d12;

    let day: Vec<OrderRecord> = {
        let spec = SynthCitySpec::rush_hour_scaled(3, 20.0);
        generate_synthetic_orders(&spec, 1).unwrap()
    };
    let exp = Experiment::new(&city.bundle, &day).unwrap();
    let mut spec = RunSpec::new(Policy::Hsp, 18, 48, 500, 3);
    spec.timing = true;
    let m = exp.run(&spec).unwrap();
    let plan_ms = m.records.iter().map(|r| r.plan_ms).sum::<f64>() / m.records.len() as f64;
    let pass = m.mean_step_ms <= 1.0 && plan_ms <= 10.0 && (2.0..=8.0).contains(&ratio);
    report(
        7,
        pass,
        &format!(
            "HSP step {:.4} ms (limit 1), HSP package plan {plan_ms:.4} ms (limit 10), dop {:.3} ms at maxT 12 vs {:.3} ms at 24, ratio {ratio:.2} (range 2..8)",
            m.mean_step_ms,
            d12 * 1e3,
            d24 * 1e3
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_benchmark_is_deterministic() {
    let city = small_city();
    let day = {
        let spec = SynthCitySpec::rush_hour_scaled(5, 2.65);
        generate_synthetic_orders(&spec, 1).unwrap()
    };
    let exp = Experiment::new(&city.bundle, &day).unwrap();
    let sweep = Sweep {
        planners: Policy::ALL.to_vec(),
        max_t: (1..=12).collect(),
        dep_slots: vec![48],
        packages: vec![60],
        seeds: vec![0, 1],
    };
    let specs = sweep.specs(6, Fleet::PerPackage, false);
    let render = |threads: usize| {
        let table = run_sweep(&exp, &specs, threads).unwrap();
        let mut buf = Vec::new();
        write_results(&mut buf, &table).unwrap();
        buf
    };
    let first = render(1);
    let second = render(1);
    let threaded = render(4);
    let pass = first == second && first == threaded;
    report(
        8,
        pass,
        &format!("{} rows, {} bytes, repeat and 4-thread outputs identical: {pass}", specs.len(), first.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_model_round_trip() {
    let city = small_city();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    pptaxi_core::save_model(&path, &city.bundle).unwrap();
    let loaded = pptaxi_core::load_model(&path).unwrap();
    let original = encode_model(&city.bundle);
    let exact = loaded == city.bundle
        && encode_model(&loaded) == original
        && std::fs::read(&path).unwrap() == original
        && loaded.tensor.as_ref().unwrap().raw().iter().zip(city.bundle.tensor.as_ref().unwrap().raw()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut flipped = original.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let corrupt = matches!(decode_model(&flipped), Err(Error::CorruptFile(_)));
    let truncated = matches!(decode_model(&original[..original.len() - 7]), Err(Error::CorruptFile(_)));

    let mut newer = original.clone();
    newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let version = matches!(
        decode_model(&newer),
        Err(Error::VersionMismatch { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    );
    let path_bad = dir.path().join("bad.bin");
    std::fs::write(&path_bad, &flipped).unwrap();
    let via_file = matches!(pptaxi_core::load_model(&path_bad), Err(Error::CorruptFile(_)));

    let pass = exact && corrupt && truncated && version && via_file;
    report(
        9,
        pass,
        &format!(
            "{} byte bundle, bit-exact {exact}, corrupt {corrupt}, truncated {truncated}, version mismatch {version}, file load {via_file}",
            original.len()
        ),
    );
    assert!(pass);
}

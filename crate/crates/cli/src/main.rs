use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pptaxi_core::experiment::{apply_sweep, parse_planners, run_sweep, Experiment, Fleet, RunSpec, Sweep};
use pptaxi_core::io::orders::{load_orders_with, save_orders, DayFilter, LoadOptions};
use pptaxi_core::io::results::emit_results;
use pptaxi_core::io::{generate_synthetic_orders, load_model, save_model, ModelBundle, ResultsTable, SynthCitySpec};
use pptaxi_core::{dop, BlockId, GridSpec, PackageRequest, Policy};

#[derive(Parser)]
#[command(name = "pptaxi", version, about = "Package delivery on passenger taxis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the flow model and write a model bundle.
    Train(TrainArgs),
    /// Print the most probable route for one package.
    Plan(PlanArgs),
    /// Replay a test day with packages and write one results row.
    Simulate(SimulateArgs),
    /// Generate synthetic orders.
    Synth(SynthArgs),
    /// Run a parameter sweep and write the results table.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    orders: PathBuf,
    /// Grid as ROWSxCOLS.
    #[arg(long, default_value = "10x10")]
    grid: String,
    #[arg(long, default_value_t = 144)]
    slots: u32,
    /// Bounding box as LNG_MIN,LNG_MAX,LAT_MIN,LAT_MAX.
    #[arg(long, default_value = "104.0,104.12,30.6,30.72")]
    bbox: String,
    /// weekday, weekend or all.
    #[arg(long, default_value = "all")]
    day_filter: String,
    /// Seconds added to every timestamp to get local time.
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    utc_offset: i64,
    /// Also store the historical-average tensor.
    #[arg(long)]
    aveprob: bool,
    /// Add-α smoothing of the historical-average tensor (α = 1 when given bare).
    #[arg(long, value_name = "ALPHA", num_args = 0..=1, default_missing_value = "1")]
    smoothing: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dep: u32,
    #[arg(long)]
    des: u32,
    #[arg(long)]
    dep_slot: u32,
    #[arg(long = "maxT", alias = "max-t")]
    max_t: u32,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test_orders: PathBuf,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    utc_offset: i64,
    /// Slots a package may wait for a taxi.
    #[arg(long, default_value_t = 6)]
    wait_limit: u32,
    /// Fleet size; by default every package gets a taxi at its origin.
    #[arg(long)]
    taxis: Option<usize>,
    /// Record mean planner step time (makes output run-dependent).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "hsp")]
    planner: String,
    #[arg(long = "maxT", alias = "max-t", default_value_t = 18)]
    max_t: u32,
    #[arg(long, default_value_t = 100)]
    packages: usize,
    #[arg(long, default_value_t = 8)]
    dep_hour: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Clauses such as `maxT=1..12`, `packages=100,500`, `seeds=0..9`, `depT=48`.
    #[arg(long)]
    sweep: Vec<String>,
    #[arg(long, default_value = "hsp,psp,fcfs,descloser,aveprob")]
    planners: String,
    #[arg(long, default_value_t = 8)]
    dep_hour: u32,
    #[arg(long, default_value_t = 100)]
    packages: usize,
    #[arg(long, default_value_t = 18)]
    max_t: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; rows are written in configuration order regardless.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// City spec as JSON; defaults to the built-in rush-hour city.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Volume multiplier for the built-in city.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Seed for the built-in city.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    days: u32,
    #[arg(long)]
    out: PathBuf,
    /// Also write the spec that was used.
    #[arg(long)]
    write_spec: Option<PathBuf>,
}

fn parse_grid(grid: &str, bbox: &str, slots: u32) -> Result<GridSpec> {
    let (r, c) = grid
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!(pptaxi_core::Error::Config(format!("grid `{grid}` is not ROWSxCOLS"))))?;
    let num = |s: &str| -> Result<u32> {
        s.trim()
            .parse()
            .map_err(|_| anyhow!(pptaxi_core::Error::Config(format!("bad grid size `{s}`"))))
    };
    let b: Vec<f64> = bbox
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!(pptaxi_core::Error::Config(format!("bad bounding box `{bbox}`"))))?;
    if b.len() != 4 {
        bail!(pptaxi_core::Error::Config("bounding box needs four numbers".into()));
    }
    GridSpec::new((b[0], b[1]), (b[2], b[3]), num(r)?, num(c)?, slots)
        .map_err(|e| anyhow!(pptaxi_core::Error::Config(e.to_string())))
}

fn dep_slot(grid: &GridSpec, hour: u32) -> Result<u32> {
    if hour >= 24 {
        bail!(pptaxi_core::Error::Config(format!("departure hour {hour} outside 0..24")));
    }
    Ok(hour * 60 / grid.slot_minutes)
}

fn experiment(run: &RunArgs) -> Result<Experiment> {
    let bundle = load_model(&run.model).with_context(|| format!("loading {}", run.model.display()))?;
    let opts = LoadOptions { day_filter: DayFilter::All, utc_offset_s: run.utc_offset };
    let test = load_orders_with(&run.test_orders, &bundle.grid, opts)
        .with_context(|| format!("reading {}", run.test_orders.display()))?;
    if test.dropped_out_of_bounds > 0 {
        eprintln!("dropped {} out-of-bounds test orders", test.dropped_out_of_bounds);
    }
    Ok(Experiment::new(&bundle, &test.orders)?)
}

fn fleet(run: &RunArgs) -> Fleet {
    run.taxis.map_or(Fleet::PerPackage, Fleet::Sampled)
}

fn train(a: TrainArgs) -> Result<()> {
    let grid = parse_grid(&a.grid, &a.bbox, a.slots)?;
    let day_filter: DayFilter = a.day_filter.parse()?;
    let loaded = load_orders_with(&a.orders, &grid, LoadOptions { day_filter, utc_offset_s: a.utc_offset })
        .with_context(|| format!("reading {}", a.orders.display()))?;
    eprintln!(
        "{} orders ({} out of bounds, {} filtered by day)",
        loaded.orders.len(),
        loaded.dropped_out_of_bounds,
        loaded.dropped_by_day
    );
    let bundle = ModelBundle::train_smoothed(&loaded.orders, &grid, a.aveprob || a.smoothing.is_some(), a.smoothing)?;
    let d = &bundle.diagnostics;
    eprintln!(
        "fallbacks: {} uniform departure slots, {} density-ranked cells, {} empty cells",
        d.uniform_departure_slots, d.density_fallback_cells, d.zero_destination_cells
    );
    save_model(&a.out, &bundle)?;
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let bundle = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let m = bundle.grid.block_count() as u32;
    if a.dep >= m || a.des >= m {
        bail!(pptaxi_core::Error::Config(format!("blocks must be below {m}")));
    }
    if a.dep_slot >= bundle.grid.slot_count {
        bail!(pptaxi_core::Error::Config(format!("slot must be below {}", bundle.grid.slot_count)));
    }
    if a.max_t < 1 {
        bail!(pptaxi_core::Error::Config("maxT must be at least 1".into()));
    }
    let tensor = bundle.demand_tensor()?;
    let pkg = PackageRequest {
        id: 0,
        dep: BlockId(a.dep),
        des: BlockId(a.des),
        dep_t: a.dep_slot as u64,
        gen_t: a.dep_slot as u64,
        max_t: a.max_t,
    };
    match dop(&pkg, &tensor, &bundle.delta) {
        None => println!("no route within {} slots", a.max_t),
        Some(route) => {
            for leg in &route.legs {
                println!(
                    "{} -> {}  slots {} -> {}  p={:.6e}",
                    leg.from.0, leg.to.0, leg.dep_slot, leg.arr_slot, leg.prob
                );
            }
            println!("hops {}  duration {}", route.legs.len(), route.duration());
            println!("probability {:.6e}  -ln p {:.4}", route.probability, route.weight);
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let planner: Policy = a.planner.parse()?;
    let exp = experiment(&a.run)?;
    let mut spec = RunSpec::new(planner, a.max_t, dep_slot(&exp.grid, a.dep_hour)?, a.packages, a.seed);
    spec.wait_limit = a.run.wait_limit;
    spec.fleet = fleet(&a.run);
    spec.timing = a.run.timing;
    let row = exp.row(&spec)?;
    println!("sr {:.4}  ap {:.4}  mr {:.4}", row.sr, row.ap, row.mr);
    emit_results(&ResultsTable { rows: vec![row] }, &a.run.out)?;
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let exp = experiment(&a.run)?;
    let mut sweep = Sweep {
        planners: parse_planners(&a.planners)?,
        max_t: vec![a.max_t],
        dep_slots: vec![dep_slot(&exp.grid, a.dep_hour)?],
        packages: vec![a.packages],
        seeds: vec![a.seed],
    };
    for clause in &a.sweep {
        apply_sweep(&mut sweep, clause)?;
    }
    let specs = sweep.specs(a.run.wait_limit, fleet(&a.run), a.run.timing);
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let table = run_sweep(&exp, &specs, threads)?;
    emit_results(&table, &a.run.out)?;
    eprintln!("{} configurations written to {}", table.rows.len(), a.run.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => SynthCitySpec::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => SynthCitySpec::rush_hour_scaled(a.seed, a.scale),
    };
    let orders = generate_synthetic_orders(&spec, a.days)?;
    save_orders(&a.out, &orders)?;
    if let Some(path) = &a.write_spec {
        std::fs::write(path, spec.to_json())?;
    }
    eprintln!("{} orders written to {}", orders.len(), a.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<pptaxi_core::Error>() {
        Some(e) if !e.is_data_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate(a),
        Command::Synth(a) => synth(a),
        Command::Benchmark(a) => benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

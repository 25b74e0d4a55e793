use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use logit_lanes::equilibrium::{max_wave_speed, solve_split};
use logit_lanes::estimation::{self, nu_grid, DEFAULT_BANDS};
use logit_lanes::lagrange::HeadwayRule;
use logit_lanes::model::ClassDensities;
use logit_lanes::output;
use logit_lanes::scenario::{load_scenario, Scenario, Scheme};
use logit_lanes::simulation::{compare, simulate, SchemeConfig, Simulation};

/// Environment variable capping the number of worker threads.
const THREADS_VAR: &str = "LOGIT_LANES_THREADS";

#[derive(Parser)]
#[command(name = "logit-lanes", version, about = "Multilane traffic on a ring road with Logit lane choice")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scheme on a scenario and write snapshots, mass audit and plots.
    Simulate(SimulateArgs),
    /// Run several schemes on a scenario and report their distances.
    Compare(CompareArgs),
    /// Print the equilibrium lane split at given class densities.
    Equilibrium(EquilibriumArgs),
    /// Estimate ν from detector records.
    Estimate(EstimateArgs),
}

#[derive(Args)]
struct RunOverrides {
    /// Mesh cells (binning grid for the Lagrangian scheme).
    #[arg(long)]
    cells: Option<usize>,
    /// CFL number V_max·Δt/Δx.
    #[arg(long)]
    cfl: Option<f64>,
    /// Vehicles per group for the Lagrangian scheme.
    #[arg(long)]
    group_size: Option<f64>,
    /// Simulated time in hours.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// lax-friedrichs, rusanov, remap or lagrange; defaults to the scenario's.
    #[arg(long)]
    scheme: Option<String>,
    #[command(flatten)]
    overrides: RunOverrides,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Scheme configuration `name[:key=value,...]` with keys cells, cfl,
    /// group, rule (class-interval or any-class). Repeat for each run; the
    /// first is the reference. Defaults to rusanov, remap and lagrange.
    #[arg(long = "scheme")]
    schemes: Vec<String>,
    /// Simulated time in hours.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EquilibriumArgs {
    /// Scenario JSON file providing the network.
    scenario: PathBuf,
    /// Class densities in veh/km, comma separated in class order.
    #[arg(long, value_delimiter = ',', required = true)]
    rho: Vec<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with columns station,timestamp,lane,density,speed.
    samples: PathBuf,
    /// Mean-lane-density band `low:high` in veh/km; repeatable.
    #[arg(long = "band")]
    bands: Vec<String>,
    #[arg(long, default_value_t = estimation::GRID_MIN)]
    grid_min: f64,
    #[arg(long, default_value_t = estimation::GRID_MAX)]
    grid_max: f64,
    #[arg(long, default_value_t = estimation::GRID_POINTS)]
    grid_points: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Equilibrium(args) => cmd_equilibrium(args),
        Command::Estimate(args) => cmd_estimate(args),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var(THREADS_VAR) {
        let n: usize = value
            .parse()
            .with_context(|| format!("{THREADS_VAR} must be a positive integer, got {value:?}"))?;
        if n == 0 {
            bail!("{THREADS_VAR} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn open_scenario(path: &Path) -> Result<Scenario> {
    load_scenario(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let scenario = open_scenario(&args.scenario)?;
    let mut config = SchemeConfig::from_scenario(&scenario);
    if let Some(name) = &args.scheme {
        let scheme = Scheme::from_str(name)?;
        if scheme != config.scheme {
            // a different scheme starts from its own default resolution
            let group_size = config.group_size;
            config = SchemeConfig::new(scheme).with_group_size(group_size);
        }
    }
    let o = &args.overrides;
    if let Some(cells) = o.cells {
        config.cells = cells;
    }
    if let Some(cfl) = o.cfl {
        config.cfl = cfl;
    }
    if let Some(g) = o.group_size {
        config.group_size = g;
    }
    let sim = simulate(&scenario, &config, o.duration, None)?;
    write_simulation(&scenario, &sim, &args.out)?;
    println!(
        "{}: {} snapshots, {} steps, {} equilibrium solves, {:.2} s -> {}",
        config.label(),
        sim.snapshots.len(),
        sim.steps,
        sim.evaluations,
        sim.wall_clock.as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn write_simulation(scenario: &Scenario, sim: &Simulation, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let spec = &scenario.spec;
    let solver = &scenario.run.solver;
    output::write_snapshots(create(out, "snapshots.csv")?, spec, &sim.snapshots, solver)?;
    output::write_mass(create(out, "mass.csv")?, spec, &sim.mass)?;
    if let Some(groups) = &sim.groups {
        output::write_groups(create(out, "groups.csv")?, spec, &groups.trajectory)?;
    }
    for (k, snap) in sim.snapshots.iter().enumerate() {
        let svg = output::snapshot_svg(spec, snap, solver)?;
        let path = out.join(format!("snapshot_{k:03}.svg"));
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn parse_scheme_config(text: &str) -> Result<SchemeConfig> {
    let (name, options) = text.split_once(':').unwrap_or((text, ""));
    let mut config = SchemeConfig::new(Scheme::from_str(name)?);
    for option in options.split(',').filter(|s| !s.is_empty()) {
        let (key, value) = option
            .split_once('=')
            .with_context(|| format!("option {option:?} in {text:?} is not key=value"))?;
        let bad = || format!("invalid value {value:?} for {key} in {text:?}");
        match key {
            "cells" => config.cells = value.parse().with_context(bad)?,
            "cfl" => config.cfl = value.parse().with_context(bad)?,
            "group" => config.group_size = value.parse().with_context(bad)?,
            "rule" => {
                config.rule = match value {
                    "class-interval" => HeadwayRule::ClassInterval,
                    "any-class" => HeadwayRule::AnyClass,
                    _ => bail!(bad()),
                }
            }
            _ => bail!("unknown option {key:?} in {text:?}; valid: cells, cfl, group, rule"),
        }
    }
    Ok(config)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let scenario = open_scenario(&args.scenario)?;
    let configs: Vec<SchemeConfig> = if args.schemes.is_empty() {
        [Scheme::Rusanov, Scheme::Remap, Scheme::Lagrange]
            .into_iter()
            .map(SchemeConfig::new)
            .collect()
    } else {
        args.schemes.iter().map(|s| parse_scheme_config(s)).collect::<Result<_>>()?
    };
    if configs.len() < 2 {
        bail!("compare needs at least two --scheme configurations");
    }
    let runs = configs
        .iter()
        .map(|c| simulate(&scenario, c, args.duration, None).with_context(|| format!("running {}", c.label())))
        .collect::<Result<Vec<_>>>()?;
    let report = compare(&scenario, &runs)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    serde_json::to_writer_pretty(create(&args.out, "comparison.json")?, &report)?;
    output::write_comparison_csv(create(&args.out, "comparison.csv")?, &report)?;

    println!("{:<32} {:>12} {:>8} {:>10} {:>12}", "scheme", "evaluations", "steps", "wall (s)", "mass drift");
    for s in &report.schemes {
        let drift = s.mass_drift.iter().copied().fold(0.0, f64::max);
        println!("{:<32} {:>12} {:>8} {:>10.2} {:>12.1e}", s.label, s.evaluations, s.steps, s.wall_clock, drift);
    }
    let last = runs[0].snapshots.last().map_or(0.0, |s| s.time);
    println!("\nrelative L1 at t = {:.3} min", last * 60.0);
    for d in report.distances.iter().filter(|d| d.time == last) {
        println!("  {} vs {} [{}]: {:.4}", d.scheme, d.reference, d.class, d.relative_l1);
    }
    Ok(())
}

fn cmd_equilibrium(args: EquilibriumArgs) -> Result<()> {
    let scenario = open_scenario(&args.scenario)?;
    let rho = ClassDensities::new(args.rho)?;
    let split = solve_split(&scenario.spec, &rho, &scenario.run.solver)?;
    let wave_speed = max_wave_speed(&scenario.spec, &rho, &scenario.run.solver)?;
    let value = serde_json::json!({ "split": split, "max_wave_speed": wave_speed });
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn parse_band(text: &str) -> Result<(f64, f64)> {
    let (a, b) = text
        .split_once(':')
        .with_context(|| format!("band {text:?} must look like low:high"))?;
    let band: (f64, f64) = (a.trim().parse()?, b.trim().parse()?);
    if !(band.0 >= 0.0 && band.1 > band.0) {
        bail!("band {text:?} must satisfy 0 <= low < high");
    }
    Ok(band)
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let file = File::open(&args.samples).with_context(|| format!("opening {}", args.samples.display()))?;
    let samples = estimation::read_samples(file).with_context(|| format!("reading {}", args.samples.display()))?;
    let bands: Vec<(f64, f64)> = if args.bands.is_empty() {
        DEFAULT_BANDS.to_vec()
    } else {
        args.bands.iter().map(|b| parse_band(b)).collect::<Result<_>>()?
    };
    if !(args.grid_min > 0.0 && args.grid_max > args.grid_min && args.grid_points >= 2) {
        bail!("grid needs 0 < grid-min < grid-max and at least two points");
    }
    let grid = nu_grid(args.grid_min, args.grid_max, args.grid_points);
    let report = estimation::estimate_report(&samples, &bands, &grid)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    serde_json::to_writer_pretty(create(&args.out, "estimate.json")?, &report)?;
    estimation::write_sse_curves(create(&args.out, "sse_curve.csv")?, &report)?;

    println!("{:<12} {:>12} {:>8} {:>12} {:>12}", "station", "band", "samples", "nu (grid)", "nu (regr.)");
    for station in &report.stations {
        for b in &station.bands {
            let grid = b.grid.as_ref().map_or("-".to_string(), |e| e.nu.to_string());
            let regr = b
                .regression
                .as_ref()
                .map_or("-".to_string(), |r| r.pooled.estimate.nu.to_string());
            let band = format!("{}-{}", b.band.0, b.band.1);
            println!("{:<12} {:>12} {:>8} {:>12} {:>12}", station.station, band, b.sample_count, grid, regr);
        }
    }
    Ok(())
}

//! `rilab`: runs one TOML-configured experiment and writes `records.csv`
//! plus `meta.json` into the output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 success with a
//! bias-dominated record (some estimate's truncation-bias bound exceeds three
//! standard errors; the records are still written).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use interlace_core::interlacements::{sample_to_json, sample_window};
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::Site;

use interlace_lab::config::{ExperimentConfig, ExperimentKind};
use interlace_lab::experiments::{self, kill_radius, lattice_of, RunParams};
use interlace_lab::records::{write_meta, write_records};

#[derive(Parser)]
#[command(name = "rilab", about = "Random-interlacement laboratory", version)]
struct Cli {
    /// Path to the experiment TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replica-count override.
    #[arg(long, global = true)]
    replicas: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Emptiness identity plus a serialized window sample.
    Sample,
    /// Capacity of a ball (or tube, when p is set); writes capacity_report.json.
    Capacity,
    /// Green-function asymptotics on Z^3.
    Green,
    /// Tube capacity and the union-of-balls bracket.
    Tube,
    /// Laplace functional of the local-time field.
    Laplace,
    /// Trace-capacity Laplace bridge.
    Bridge,
    /// Local-uniqueness failure frequency.
    Locuniq,
    /// Walk-trace capacity tail.
    Walkcap,
    /// FPP crossing costs (fine or coarse weights).
    Fpp,
}

impl Command {
    fn accepts(&self, kind: ExperimentKind) -> bool {
        match self {
            Command::Sample | Command::Capacity => kind == ExperimentKind::EmptinessIdentity,
            Command::Green => kind == ExperimentKind::GreenAsymptotics,
            Command::Tube => kind == ExperimentKind::TubeCapacity,
            Command::Laplace => kind == ExperimentKind::LaplaceFunctional,
            Command::Bridge => kind == ExperimentKind::LaplaceBridge,
            Command::Locuniq => kind == ExperimentKind::LocalUniqueness,
            Command::Walkcap => kind == ExperimentKind::WalkCapacityTail,
            Command::Fpp => {
                matches!(kind, ExperimentKind::FppScaling | ExperimentKind::CoarseFppEvent)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let config_path = cli.config.as_ref().context("--config is required")?;
    let config_text = std::fs::read_to_string(config_path)
        .with_context(|| format!("cannot read {}", config_path.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&config_text).map_err(anyhow::Error::msg)?;
    if !cli.command.accepts(cfg.kind) {
        bail!("subcommand does not match config kind '{}'", cfg.kind.as_str());
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(replicas) = cli.replicas {
        cfg.run.replicas = replicas;
    }
    let threads = cli.threads.unwrap_or_else(num_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("thread pool setup failed")?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out));
    let rp = RunParams { seed: cfg.run.seed, replicas: cfg.run.replicas };

    let started = Instant::now();
    let records = match cli.command {
        Command::Capacity => {
            write_capacity_report(&cfg, &rp, &out)?;
            Vec::new()
        }
        Command::Sample => {
            write_sample_json(&cfg, &rp, &out)?;
            experiments::run(&cfg, &rp)?
        }
        _ => experiments::run(&cfg, &rp)?,
    };
    let wall = started.elapsed().as_secs_f64();

    let g = lattice_of(&cfg)?;
    if !records.is_empty() {
        write_records(&out, &records)?;
    }
    write_meta(&out, &config_text, rp.seed, threads, rp.replicas, g.constants(), wall)?;

    let bias_dominated = records
        .iter()
        .any(|r| r.n_replicas > 0 && r.bias_bound > 3.0 * r.std_error);
    Ok(if bias_dominated { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn num_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Exact or MC capacity of ball(0, n[0]) (tube R_{n,p} when p is set).
fn write_capacity_report(cfg: &ExperimentConfig, rp: &RunParams, out: &PathBuf) -> Result<()> {
    let g = lattice_of(cfg)?;
    let n = *cfg.model.n.first().context("model.n must name the radius")?;
    let (set, descriptor) = match cfg.model.p.first() {
        Some(&p) => (
            interlace_core::graph::tube_sites(&g, n, p)?,
            format!("tube(n={n},p={p})"),
        ),
        None => (g.ball(&Site::origin(g.dim()), n as f64), format!("ball(0,{n})")),
    };
    let rho = kill_radius(cfg, set.radius_about(&g, &Site::origin(g.dim())));
    let method = if cfg.run.capacity_samples == 0 {
        Method::exact(rho)
    } else {
        Method::monte_carlo(rho, cfg.run.capacity_samples)
    };
    let mut rng = stream(rp.seed, &[stream_id::CALIBRATION]);
    let est = equilibrium_and_capacity(&g, &set, &method, &mut rng)?;
    let report = serde_json::json!({
        "set": descriptor,
        "value": est.value,
        "extrapolated": est.extrapolated,
        "lower": est.bracket.lower,
        "upper": est.bracket.upper,
        "kill_radius": est.kill_radius,
        "method": format!("{:?}", est.method),
        "n_samples": est.n_samples,
        "seed": rp.seed,
    });
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("capacity_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// One full labeled window sample, serialized for inspection and replay.
fn write_sample_json(cfg: &ExperimentConfig, rp: &RunParams, out: &PathBuf) -> Result<()> {
    let g = lattice_of(cfg)?;
    let n = *cfg.model.n.first().context("model.n must name the radius")?;
    let u = *cfg.model.u.first().context("model.u must name the level")?;
    let window = g.ball(&Site::origin(g.dim()), n as f64);
    let rho = kill_radius(cfg, n as f64);
    let mut rng = stream(rp.seed, &[stream_id::CALIBRATION, 99]);
    let cap = equilibrium_and_capacity(&g, &window, &Method::exact(rho), &mut rng)?;
    let sample = sample_window(&g, &window, u, rho, &cap, &mut rng)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sample.json"), sample_to_json(&g, &sample)?)?;
    Ok(())
}

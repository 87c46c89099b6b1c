//! Experiment dispatch and shared replica plumbing.

pub mod bridge;
pub mod coarse;
pub mod emptiness;
pub mod fpp;
pub mod green;
pub mod laplace;
pub mod locuniq;
pub mod tube;
pub mod walkcap;

use anyhow::Result;
use interlace_core::bracket::Bracket;
use interlace_core::graph::{DistanceKind, GraphSpec};
use interlace_core::potential::CapacityEstimate;
use interlace_core::rng::{stream, stream_id};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::records::EstimateRecord;

/// Resolved run parameters (config values plus CLI overrides).
#[derive(Clone, Debug)]
pub struct RunParams {
    pub seed: u64,
    pub replicas: u64,
}

pub fn lattice_of(cfg: &ExperimentConfig) -> Result<GraphSpec> {
    let distance = match cfg.lattice.distance.as_str() {
        "graph" => DistanceKind::Graph,
        _ => DistanceKind::Euclidean,
    };
    if cfg.lattice.normalized {
        Ok(GraphSpec::lattice_normalized(cfg.lattice.d, distance)?)
    } else {
        Ok(GraphSpec::lattice(cfg.lattice.d, distance)?)
    }
}

/// Kill radius policy: the explicit config value, else factor * window radius
/// with a floor.
pub fn kill_radius(cfg: &ExperimentConfig, window_radius: f64) -> f64 {
    if cfg.run.kill_radius > 0.0 {
        cfg.run.kill_radius
    } else {
        (cfg.run.kill_factor * window_radius).max(25.0)
    }
}

/// Replaces the capacity bracket by its killed point value, so that the
/// Poisson sampling rate is exactly u * cap_kill.  With trajectories killed
/// at the same radius, the simulated window law is then exactly the
/// interlacement law of the killed chain, and killed-model predictions
/// (emptiness, local times, Laplace functionals) match with no rate bias.
/// The distance to the untruncated model stays reported via bias bounds.
pub fn killed_rate(mut est: CapacityEstimate) -> CapacityEstimate {
    est.bracket = Bracket::exact(est.value);
    est
}

/// Deterministic replica fan-out: replica i draws from the dedicated stream
/// (REPLICA, tag, i) of the master seed, and results are collected in replica
/// order regardless of the worker count.
pub fn par_replicas<T, F>(n: u64, master: u64, tag: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(master, &[stream_id::REPLICA, tag, i]);
            f(i, &mut rng)
        })
        .collect()
}

pub fn binomial_se(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Wilson score interval at 3 sigma.
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    let z = 3.0;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Clopper-Pearson style upper bound reported when no successes were seen.
pub fn zero_success_upper(n: u64) -> f64 {
    1.0 - 0.05f64.powf(1.0 / n as f64)
}

/// Frequency record with rare-event flagging.
pub fn frequency_record(
    kind: &str,
    params: String,
    successes: u64,
    n: u64,
    seed: u64,
) -> EstimateRecord {
    let p = successes as f64 / n as f64;
    if successes == 0 {
        EstimateRecord::new(kind, params, zero_success_upper(n), 0.0)
            .with_replicas(n)
            .with_seed(seed)
            .with_flag("below_mc_floor")
    } else {
        EstimateRecord::new(kind, params, p, binomial_se(p, n))
            .with_replicas(n)
            .with_seed(seed)
    }
}

/// Ordinary least squares of y on x; returns (slope, intercept, r_squared).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// Dispatches a validated config to its experiment.
pub fn run(cfg: &ExperimentConfig, params: &RunParams) -> Result<Vec<EstimateRecord>> {
    match cfg.kind {
        ExperimentKind::EmptinessIdentity => emptiness::run(cfg, params),
        ExperimentKind::LaplaceBridge => bridge::run(cfg, params),
        ExperimentKind::GreenAsymptotics => green::run(cfg, params),
        ExperimentKind::TubeCapacity => tube::run(cfg, params),
        ExperimentKind::FppScaling => fpp::run(cfg, params),
        ExperimentKind::LocalUniqueness => locuniq::run(cfg, params),
        ExperimentKind::WalkCapacityTail => walkcap::run(cfg, params),
        ExperimentKind::LaplaceFunctional => laplace::run(cfg, params),
        ExperimentKind::CoarseFppEvent => coarse::run(cfg, params),
    }
}

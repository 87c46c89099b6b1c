//! Exact Laplace functionals of the local-time field: MC means of
//! exp(sum_x V(x) l_{x,u}) against the matrix predictions, plus the
//! first-order identity E[l_{x,u}] = u.
//!
//! Trajectories are killed at rho and the Poisson rate is the killed
//! capacity, so the simulated field is exactly the interlacement field of
//! the killed chain; predictions built from the killed Green table at the
//! same radius match without truncation bias.

use anyhow::{bail, Result};
use interlace_core::graph::SiteSet;
use interlace_core::interlacements::{local_times, sample_window};
use interlace_core::potential::{
    equilibrium_and_capacity, green_table, laplace_functional_prediction, Method,
};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::Site;

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{killed_rate, kill_radius, lattice_of, par_replicas, RunParams};

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let origin = Site::origin(d);
    // Window: a ball around the origin covering every potential's support.
    let mut r_w = 2.0f64;
    for pot in &cfg.model.potential {
        for e in &pot.entries {
            r_w = r_w.max(Site::new(&e.site).euclid(&origin) + 1e-9);
        }
    }
    let window = g.ball(&origin, r_w);
    let rho = kill_radius(cfg, r_w).max(30.0);
    let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, 0]);
    let cap = equilibrium_and_capacity(&g, &window, &Method::exact(rho), &mut cal)?;
    let rate_cap = killed_rate(cap);
    let mut records = Vec::new();
    for (pi, pot) in cfg.model.potential.iter().enumerate() {
        let v: Vec<(Site, f64)> =
            pot.entries.iter().map(|e| (Site::new(&e.site), e.value)).collect();
        for s in v.iter().map(|(s, _)| s) {
            if !window.contains(s) {
                bail!("potential '{}' has support outside the window", pot.name);
            }
        }
        // Killed Green table over the support (empty support => prediction 1).
        let prediction = if v.is_empty() {
            1.0
        } else {
            let support = SiteSet::from_sites(v.iter().map(|(s, _)| *s).collect());
            let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, 1 + pi as u64]);
            let table = green_table(&g, &support, &Method::exact(rho), &mut cal)?;
            laplace_functional_prediction(&table, &v, cfg.model.u[0])?
        };
        let u = cfg.model.u[0];
        let tag = pi as u64;
        let samples = par_replicas(rp.replicas, rp.seed, tag, |i, rng| {
            let sample = sample_window(&g, &window, u, rho, &rate_cap, rng)?;
            let holding_seed = rp.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(i + 1));
            let lt = local_times(&g, &sample, holding_seed);
            let s: f64 = v.iter().map(|(x, vx)| vx * lt.get(x)).sum();
            Ok((s.exp(), lt.get(&origin)))
        })?;
        let n = rp.replicas as f64;
        let mean = samples.iter().map(|&(e, _)| e).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|&(e, _)| (e - mean) * (e - mean))
            .sum::<f64>()
            / (n - 1.0);
        let se = (var / n).sqrt();
        let params = format!("potential={};u={};rho={rho}", pot.name, u);
        records.push(
            EstimateRecord::new("laplace_functional", format!("{params};stat=mc_mean"), mean, se)
                .with_replicas(rp.replicas)
                .with_seed(rp.seed),
        );
        records.push(
            EstimateRecord::new(
                "laplace_functional",
                format!("{params};stat=prediction"),
                prediction,
                0.0,
            )
            .with_seed(rp.seed),
        );
        if pi == 0 {
            // First-order identity at the origin.
            let mean_l = samples.iter().map(|&(_, l)| l).sum::<f64>() / n;
            let var_l = samples
                .iter()
                .map(|&(_, l)| (l - mean_l) * (l - mean_l))
                .sum::<f64>()
                / (n - 1.0);
            records.push(
                EstimateRecord::new(
                    "laplace_functional",
                    format!("u={u};rho={rho};stat=mean_local_time"),
                    mean_l,
                    (var_l / n).sqrt(),
                )
                .with_replicas(rp.replicas)
                .with_seed(rp.seed),
            );
        }
    }
    Ok(records)
}

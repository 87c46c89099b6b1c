//! Laplace bridge: E[exp(-u cap(trace))] for the trace of a walk stopped on
//! exiting ball(0, N), against the direct probability that an independent
//! interlacement sample at level u avoids that trace.
//!
//! The left side averages exp(-u c_hat) over MC capacity estimates of
//! independent traces, with a lognormal correction exp(-u^2 se^2 / 2) for the
//! estimator noise inside the exponential.  The right side crosses the same
//! traces against independent occupied-window samples and counts disjoint
//! pairs; its standard error combines the per-trace and per-sample group
//! variances.

use anyhow::Result;
use interlace_core::fpp::walk_trace_capacity;
use interlace_core::interlacements::OccupiedSampler;
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::{PackedSet, Site};

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{killed_rate, lattice_of, par_replicas, RunParams};

/// Occupied-window samples crossed against every trace.
const RHS_SAMPLES: u64 = 100;
/// MC probes per trace-capacity estimate.
const CAP_PROBES: u64 = 2000;

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let origin = Site::origin(d);
    let n = cfg.model.n[0];
    let u = cfg.model.u[0];
    let rho_cap = if cfg.run.kill_radius > 0.0 {
        cfg.run.kill_radius
    } else {
        2.0 * n as f64 + 20.0
    };
    let cap_method = Method::monte_carlo(rho_cap, CAP_PROBES);

    // Left side plus the packed trace kept for the crossing below.
    let lhs_samples = par_replicas(rp.replicas, rp.seed, 1, |_, rng| {
        let (trace, cap) = walk_trace_capacity(&g, &origin, n as f64, &cap_method, rng)?;
        let c_hat = cap.extrapolated.unwrap_or(cap.value);
        let se = (cap.bracket.upper - cap.value).max(0.0) / 3.0;
        let lhs = (-u * c_hat - 0.5 * u * u * se * se).exp();
        let packed: Vec<u64> = trace.iter().map(|s| s.packed()).collect();
        Ok((lhs, packed))
    })?;
    let nt = lhs_samples.len() as f64;
    let lhs_mean = lhs_samples.iter().map(|(v, _)| v).sum::<f64>() / nt;
    let lhs_var = lhs_samples
        .iter()
        .map(|(v, _)| (v - lhs_mean) * (v - lhs_mean))
        .sum::<f64>()
        / (nt - 1.0);
    let lhs_se = (lhs_var / nt).sqrt();

    // Right side: occupied samples in a window containing every trace.
    let r_w = n as f64 + 4.0;
    let window = g.ball(&origin, r_w);
    let rho_w = 2.5 * r_w;
    let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, 7]);
    let w_cap = equilibrium_and_capacity(
        &g,
        &window,
        &Method::monte_carlo(rho_w, cfg.run.capacity_samples.max(10_000)),
        &mut cal,
    )?;
    let rate_cap = killed_rate(w_cap);
    let sampler = OccupiedSampler::new(&g, &window, &rate_cap, rho_w)?;
    let occupied = par_replicas(RHS_SAMPLES, rp.seed, 2, |_, rng| {
        let mut buf = PackedSet::default();
        sampler.sample_occupied(&g, u, rng, &mut buf)?;
        Ok(buf)
    })?;

    // Cross every trace against every sample; integer counts keep the
    // aggregation exactly reproducible.
    let ns = occupied.len() as f64;
    let mut per_trace = vec![0u64; lhs_samples.len()];
    let mut per_sample = vec![0u64; occupied.len()];
    for (i, (_, trace)) in lhs_samples.iter().enumerate() {
        for (j, occ) in occupied.iter().enumerate() {
            let disjoint = trace.iter().all(|p| !occ.contains(p));
            if disjoint {
                per_trace[i] += 1;
                per_sample[j] += 1;
            }
        }
    }
    let total: u64 = per_trace.iter().sum();
    let rhs = total as f64 / (nt * ns);
    let var_of = |counts: &[u64], denom: f64| {
        let means: Vec<f64> = counts.iter().map(|&c| c as f64 / denom).collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (means.len() as f64 - 1.0)
    };
    let rhs_se = (var_of(&per_trace, ns) / nt + var_of(&per_sample, nt) / ns).sqrt();

    let params = format!("u={u};n={n};rho_cap={rho_cap};rho_w={rho_w}");
    let combined_se = (lhs_se * lhs_se + rhs_se * rhs_se).sqrt();
    Ok(vec![
        EstimateRecord::new("laplace_bridge", format!("{params};stat=lhs"), lhs_mean, lhs_se)
            .with_replicas(rp.replicas)
            .with_seed(rp.seed),
        EstimateRecord::new("laplace_bridge", format!("{params};stat=rhs"), rhs, rhs_se)
            .with_replicas(RHS_SAMPLES)
            .with_seed(rp.seed),
        EstimateRecord::new(
            "laplace_bridge",
            format!("{params};stat=discrepancy"),
            (lhs_mean - rhs).abs(),
            combined_se,
        )
        .with_replicas(rp.replicas)
        .with_seed(rp.seed),
    ])
}

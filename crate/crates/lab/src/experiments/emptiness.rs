//! Emptiness identity: P(I^u n K = empty) versus exp(-u cap(K)) for
//! K = ball(0, n), together with the Poisson index of dispersion of the
//! trajectory count.
//!
//! With the conditioning set equal to the window, every trajectory enters K
//! at its entry site, so the window is empty exactly when the trajectory
//! count is zero; replicas therefore reduce to Poisson draws.

use anyhow::Result;
use interlace_core::interlacements::sample_count;
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::Site;

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{binomial_se, killed_rate, kill_radius, lattice_of, par_replicas, RunParams};

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let mut records = Vec::new();
    for (ni, &n) in cfg.model.n.iter().enumerate() {
        let k = g.ball(&Site::origin(d), n as f64);
        let rho = kill_radius(cfg, n as f64);
        let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, ni as u64]);
        let cap = equilibrium_and_capacity(&g, &k, &Method::exact(rho), &mut cal)?;
        let rate_cap = killed_rate(cap.clone());
        for &u in &cfg.model.u {
            let tag = (ni as u64) << 16 | (u * 1e6) as u64 % (1 << 16);
            let outcomes = par_replicas(rp.replicas, rp.seed, tag, |_, rng| {
                Ok(sample_count(&rate_cap, u, rng)?)
            })?;
            let empty = outcomes.iter().filter(|&&c| c == 0).count() as u64;
            let nrep = rp.replicas;
            let phat = empty as f64 / nrep as f64;
            let pred = (-u * cap.value).exp();
            // Prediction bias: how far exp(-u cap) can move within the
            // (honest) capacity bracket of the killed estimate.
            let pred_lo = (-u * cap.bracket.upper).exp();
            let pred_hi = (-u * cap.bracket.lower).exp();
            let pred_bias = (pred_hi - pred).max(pred - pred_lo);
            let params = format!("u={u};n={n};rho={rho}");
            records.push(
                EstimateRecord::new("emptiness_identity", format!("{params};stat=phat"), phat, binomial_se(pred.max(1e-12), nrep))
                    .with_replicas(nrep)
                    .with_bias(0.0)
                    .with_seed(rp.seed),
            );
            records.push(
                EstimateRecord::new(
                    "emptiness_identity",
                    format!("{params};stat=prediction"),
                    pred,
                    0.0,
                )
                .with_bias(pred_bias)
                .with_seed(rp.seed),
            );
            // Index of dispersion of the Poisson counts.
            let mean = outcomes.iter().map(|&c| c as f64).sum::<f64>() / nrep as f64;
            let var = outcomes
                .iter()
                .map(|&c| {
                    let d = c as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / (nrep as f64 - 1.0);
            let dispersion = if mean > 0.0 { var / mean } else { 1.0 };
            let disp_se = (2.0 / nrep as f64).sqrt();
            records.push(
                EstimateRecord::new(
                    "emptiness_identity",
                    format!("{params};stat=dispersion"),
                    dispersion,
                    disp_se,
                )
                .with_replicas(nrep)
                .with_seed(rp.seed),
            );
        }
    }
    Ok(records)
}

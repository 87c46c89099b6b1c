//! Walk-trace capacity tail: -log P(cap(trace) <= cap(R_{N,p})) against the
//! linear-in-N/p prediction, plus a constructive lower bound from tube
//! confinement (a walk that stays within distance p of the axis until leaving
//! ball(0, N) has its trace inside R_{N,p}, so its capacity is below the
//! threshold).

use anyhow::Result;
use interlace_core::fpp::walk_trace_capacity;
use interlace_core::graph::tube_sites;
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::Site;
use interlace_core::walk::step;

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{frequency_record, lattice_of, linear_fit, par_replicas, RunParams};

/// MC probes per trace-capacity estimate.
const CAP_PROBES: u64 = 3000;
/// Replicas of the cheap confinement walk per threshold.
const CONFINE_REPLICAS: u64 = 20_000;
const MAX_WALK_STEPS: u64 = 50_000_000;

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let origin = Site::origin(d);
    let n = cfg.model.n[0];
    let rho = if cfg.run.kill_radius > 0.0 {
        cfg.run.kill_radius
    } else {
        3.0 * n as f64
    };
    // Thresholds cap(R_{N,p}) per tube radius.
    let mut thresholds = Vec::new();
    for (pi, &p) in cfg.model.p.iter().enumerate() {
        let tube = tube_sites(&g, n, p)?;
        let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, pi as u64]);
        let est = equilibrium_and_capacity(
            &g,
            &tube,
            &Method::monte_carlo(rho, cfg.run.capacity_samples.max(10_000)),
            &mut cal,
        )?;
        thresholds.push((p, est.value));
    }
    // One shared pass of trace capacities, reused across all thresholds.
    let cap_method = Method::monte_carlo(rho, CAP_PROBES);
    let caps = par_replicas(rp.replicas, rp.seed, 1, |_, rng| {
        let (_, cap) = walk_trace_capacity(&g, &origin, n as f64, &cap_method, rng)?;
        Ok(cap.value)
    })?;
    let nrep = rp.replicas;
    let mut records = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(p, thr) in &thresholds {
        let hits = caps.iter().filter(|&&c| c <= thr).count() as u64;
        let params = format!("n={n};p={p};rho={rho};threshold={thr}");
        records.push(frequency_record(
            "walk_capacity_tail",
            format!("{params};stat=phat"),
            hits,
            nrep,
            rp.seed,
        ));
        if hits > 0 {
            let ph = hits as f64 / nrep as f64;
            let se = (ph * (1.0 - ph) / nrep as f64).sqrt();
            xs.push(n as f64 / p as f64);
            ys.push(-ph.ln());
            records.push(
                EstimateRecord::new(
                    "walk_capacity_tail",
                    format!("{params};stat=neg_log_p"),
                    -ph.ln(),
                    se / ph,
                )
                .with_replicas(nrep)
                .with_seed(rp.seed),
            );
        }
        // Constructive lower bound: tube confinement until exiting the ball.
        let confined = par_replicas(CONFINE_REPLICAS, rp.seed, 100 + p as u64, |_, rng| {
            let p2 = (p * p) as i64;
            let n2 = (n * n) as i64;
            let mut x = origin;
            let mut steps = 0u64;
            loop {
                let mut axis2 = 0i64;
                let c0 = x.coord(0) as i64;
                for i in 1..d {
                    let c = x.coord(i) as i64;
                    axis2 += c * c;
                }
                let t = c0.clamp(0, n);
                let seg2 = axis2 + (c0 - t) * (c0 - t);
                if seg2 > p2 {
                    return Ok(false);
                }
                if axis2 + c0 * c0 >= n2 {
                    return Ok(true);
                }
                x = step(&g, &x, rng)?;
                steps += 1;
                if steps > MAX_WALK_STEPS {
                    return Ok(false);
                }
            }
        })?;
        let succ = confined.iter().filter(|&&b| b).count() as u64;
        let mut rec = frequency_record(
            "walk_capacity_tail",
            format!("{params};stat=confinement_lower"),
            succ,
            CONFINE_REPLICAS,
            rp.seed,
        );
        if hits > 0 && succ > 0 {
            let lower = succ as f64 / CONFINE_REPLICAS as f64;
            let direct = hits as f64 / nrep as f64;
            let sigma = (direct * (1.0 - direct) / nrep as f64).sqrt();
            if lower > direct + 3.0 * sigma {
                rec = rec.with_flag("exceeds_direct");
            }
        }
        records.push(rec);
    }
    if xs.len() >= 2 {
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        let params = format!("n={n};rho={rho};points={}", xs.len());
        records.push(
            EstimateRecord::new("walk_capacity_tail", format!("{params};stat=fit_slope"), slope, 0.0)
                .with_seed(rp.seed),
        );
        records.push(
            EstimateRecord::new(
                "walk_capacity_tail",
                format!("{params};stat=fit_intercept"),
                intercept,
                0.0,
            )
            .with_seed(rp.seed),
        );
        records.push(
            EstimateRecord::new("walk_capacity_tail", format!("{params};stat=fit_r2"), r2, 0.0)
                .with_seed(rp.seed),
        );
    }
    Ok(records)
}

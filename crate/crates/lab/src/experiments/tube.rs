//! Tube capacity: cap(R_{N,p}) against the asymptotic normalization and the
//! union-of-balls lower bound.

use anyhow::Result;
use interlace_core::potential::{tube_capacity_check, Method};
use interlace_core::rng::{stream, stream_id};

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{lattice_of, RunParams};

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let n = cfg.model.n[0];
    let p = cfg.model.p[0];
    let rho = if cfg.run.kill_radius > 0.0 {
        cfg.run.kill_radius
    } else {
        3.0 * n as f64
    };
    let method = if cfg.run.capacity_samples == 0 {
        Method::exact(rho)
    } else {
        Method::monte_carlo(rho, cfg.run.capacity_samples)
    };
    let eta = 0.1;
    let mut rng = stream(rp.seed, &[stream_id::CALIBRATION]);
    let report = tube_capacity_check(&g, n, p, eta, &method, &mut rng)?;
    let params = format!("n={n};p={p};rho={rho};eta={eta}");
    let cap_half = report.cap.bracket.width() / 2.0;
    let mut records = vec![
        EstimateRecord::new(
            "tube_capacity",
            format!("{params};stat=cap"),
            report.cap.extrapolated.unwrap_or(report.cap.value),
            cap_half / 3.0,
        )
        .with_replicas(report.cap.n_samples.unwrap_or(0))
        .with_bias(cap_half)
        .with_seed(rp.seed),
        EstimateRecord::new(
            "tube_capacity",
            format!("{params};stat=ratio"),
            report.ratio,
            report.ratio_bracket.width() / 6.0,
        )
        .with_bias(report.ratio_bracket.width() / 2.0)
        .with_seed(rp.seed),
        EstimateRecord::new(
            "tube_capacity",
            format!("{params};stat=union_lower;balls={}", report.n_balls),
            report.union_lower_bound,
            0.0,
        )
        .with_seed(rp.seed),
    ];
    if report.union_lower_bound > report.cap.bracket.upper {
        records[2] = records[2].clone().with_flag("exceeds_cap_bracket");
    }
    if let Some(env) = report.union_upper_envelope {
        records.push(
            EstimateRecord::new(
                "tube_capacity",
                format!("{params};stat=union_upper_envelope"),
                env,
                0.0,
            )
            .with_seed(rp.seed),
        );
    }
    Ok(records)
}

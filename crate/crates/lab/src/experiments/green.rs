//! Green-function asymptotics on Z^3: |x| g(0, x) along the first axis from
//! exact killed solves, Richardson-extrapolated in the kill radius.

use anyhow::{bail, Context, Result};
use interlace_core::linalg::OctantBallGrid;

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{lattice_of, RunParams};

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    if g.dim() != 3 {
        bail!("green_asymptotics runs on Z^3");
    }
    let rho = if cfg.run.kill_radius > 0.0 { cfg.run.kill_radius } else { 160.0 };
    let max_x = cfg.model.n.iter().max().copied().unwrap_or(0) as f64;
    if rho / 2.0 <= max_x + 2.0 {
        bail!("kill radius {rho} too small for probe distance {max_x}");
    }
    let origin = interlace_core::site::Site::origin(3);
    let w = g.weight(&origin, &origin.offset(0, 1));
    let tol = 1e-10;
    // Origin-centered solves folded over the reflection group; Richardson in
    // 1/rho from the rho/2 and rho solutions.
    let fine = OctantBallGrid::new(rho)?;
    let coarse = OctantBallGrid::new(rho / 2.0)?;
    let u_fine = fine.green_at_origin(w, tol, 200_000)?;
    let u_coarse = coarse.green_at_origin(w, tol, 200_000)?;
    let mut records = Vec::new();
    for &n in &cfg.model.n {
        let x = n as i32;
        let gf = fine.value(&u_fine, x, 0, 0);
        let gc = coarse.value(&u_coarse, x, 0, 0);
        let extrap = 2.0 * gf - gc;
        let estimate = n as f64 * extrap;
        // The Richardson correction magnitude is the natural error scale.
        let bias = n as f64 * (gf - gc).abs();
        records.push(
            EstimateRecord::new(
                "green_asymptotics",
                format!("x={n};rho={rho};stat=x_times_green"),
                estimate,
                0.0,
            )
            .with_bias(bias)
            .with_seed(rp.seed),
        );
    }
    records.push(
        EstimateRecord::new(
            "green_asymptotics",
            format!("rho={rho};stat=target"),
            g.constants().c_asymp.context("lattice has no asymptotic Green constant")?,
            0.0,
        )
        .with_seed(rp.seed),
    );
    Ok(records)
}

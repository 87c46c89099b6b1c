//! Local uniqueness: frequency of the failure event (the occupied sites in
//! ball(0, n) split across several components of the occupied set in
//! ball(0, xi n)), with the normalized exponent -log p * log(Nu) / (Nu).
//!
//! The per-replica check runs on a flat occupancy array over the window's
//! bounding box (no hashing): flag visits, then BFS from one inner occupied
//! cell and verify every inner occupied cell was reached.

use anyhow::{bail, Result};
use interlace_core::interlacements::OccupiedSampler;
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::Site;

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{frequency_record, killed_rate, kill_radius, lattice_of, par_replicas, wilson_interval, RunParams};

/// Flat-array connectivity scratch over the box [-h, h]^d.
struct BoxGrid {
    d: usize,
    h: i32,
    side: usize,
    strides: Vec<usize>,
    len: usize,
}

impl BoxGrid {
    fn new(d: usize, h: i32) -> Result<Self> {
        let side = (2 * h + 1) as usize;
        let len = side.pow(d as u32);
        if len > 1 << 26 {
            bail!("window bounding box of {len} cells is too large");
        }
        let strides = (0..d).map(|i| side.pow((d - 1 - i) as u32)).collect();
        Ok(BoxGrid { d, h, side, strides, len })
    }

    #[inline]
    fn index(&self, s: &Site) -> usize {
        let mut idx = 0;
        for i in 0..self.d {
            idx += (s.coord(i) + self.h) as usize * self.strides[i];
        }
        idx
    }

    /// True iff all `inner` cells lie in one nearest-neighbor component of the
    /// occupied cells (`flags` nonzero); `flags` is left modified.
    fn connected(&self, flags: &mut [u8], inner: &[u32], stack: &mut Vec<u32>) -> bool {
        if inner.len() <= 1 {
            return true;
        }
        stack.clear();
        stack.push(inner[0]);
        flags[inner[0] as usize] = 2;
        while let Some(idx) = stack.pop() {
            let idx = idx as usize;
            for i in 0..self.d {
                let c = (idx / self.strides[i]) % self.side;
                if c > 0 {
                    let j = idx - self.strides[i];
                    if flags[j] == 1 {
                        flags[j] = 2;
                        stack.push(j as u32);
                    }
                }
                if c + 1 < self.side {
                    let j = idx + self.strides[i];
                    if flags[j] == 1 {
                        flags[j] = 2;
                        stack.push(j as u32);
                    }
                }
            }
        }
        inner.iter().all(|&i| flags[i as usize] == 2)
    }
}

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let origin = Site::origin(d);
    let xi = cfg.model.xi;
    let mut records = Vec::new();
    for (ni, &n) in cfg.model.n.iter().enumerate() {
        let r_w = xi * n as f64;
        let window = g.ball(&origin, r_w);
        if window.len() as u64 > cfg.run.max_window_sites {
            bail!(
                "window of radius {r_w} has {} sites, over the cap {}",
                window.len(),
                cfg.run.max_window_sites
            );
        }
        let grid = BoxGrid::new(d, r_w.floor() as i32)?;
        let inner2 = (n * n) as i64;
        let rho = kill_radius(cfg, r_w);
        let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, ni as u64]);
        let cap = equilibrium_and_capacity(&g, &window, &Method::exact(rho), &mut cal)?;
        let rate_cap = killed_rate(cap);
        let sampler = OccupiedSampler::new(&g, &window, &rate_cap, rho)?;
        for &u in &cfg.model.u {
            let tag = (ni as u64) << 16 | (u * 1e6) as u64 % (1 << 16);
            let outcomes = par_replicas(rp.replicas, rp.seed, tag, |_, rng| {
                let mut flags = vec![0u8; grid.len];
                let mut inner: Vec<u32> = Vec::new();
                sampler.sample_occupied_visit(&g, u, rng, |s| {
                    let idx = grid.index(s);
                    if flags[idx] == 0 {
                        flags[idx] = 1;
                        if s.dist2(&origin) <= inner2 {
                            inner.push(idx as u32);
                        }
                    }
                })?;
                let mut stack = Vec::new();
                Ok(!grid.connected(&mut flags, &inner, &mut stack))
            })?;
            let fails = outcomes.iter().filter(|&&b| b).count() as u64;
            let nrep = rp.replicas;
            let params = format!("u={u};n={n};xi={xi};rho={rho}");
            records.push(frequency_record(
                "local_uniqueness",
                format!("{params};stat=phat_fail"),
                fails,
                nrep,
                rp.seed,
            ));
            let (lo, hi) = wilson_interval(fails, nrep);
            records.push(
                EstimateRecord::new(
                    "local_uniqueness",
                    format!("{params};stat=wilson3"),
                    (lo + hi) / 2.0,
                    (hi - lo) / 6.0,
                )
                .with_replicas(nrep)
                .with_seed(rp.seed),
            );
            // Normalized exponent for the Nu -> infinity comparison;
            // delta-method standard error.
            let nu_prod = u * n as f64;
            let scale = nu_prod.ln() / nu_prod;
            if fails > 0 {
                let p = fails as f64 / nrep as f64;
                let se_p = (p * (1.0 - p) / nrep as f64).sqrt();
                records.push(
                    EstimateRecord::new(
                        "local_uniqueness",
                        format!("{params};stat=norm_exponent"),
                        -p.ln() * scale,
                        (se_p / p) * scale,
                    )
                    .with_replicas(nrep)
                    .with_seed(rp.seed),
                );
            }
        }
    }
    Ok(records)
}

//! FPP scaling on the occupied-indicator landscape: the cost of crossing
//! ball(0, n) when every occupied site charges 1, over a grid of (u, n),
//! with a constructive lower bound from a vacant tube.

use anyhow::Result;
use interlace_core::fpp::{fpp_distance, FppTarget, FppWeights, Monotonicity, WeightKind};
use interlace_core::graph::{GraphSpec, RenormLattice, SiteSet};
use interlace_core::interlacements::OccupiedSampler;
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::{BBox, Site};

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{binomial_se, frequency_record, killed_rate, kill_radius, lattice_of, par_replicas, RunParams};

/// The tube of overlapping balls along the first axis whose vacancy forces a
/// zero-cost crossing: balls of radius 2s at j*s*e1, j = 1..P, s ~ n/P.
fn crossing_tube(g: &GraphSpec, n: i64, big_p: i64) -> SiteSet {
    let s = (n / big_p).max(1) as i32;
    let mut tube = SiteSet::empty(g.dim());
    for j in 1..=big_p as i32 {
        let mut c = Site::origin(g.dim());
        c = c.offset(0, j * s);
        tube = tube.union(&g.ball(&c, 2.0 * s as f64));
    }
    tube
}

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let origin = Site::origin(d);
    let s_thresh = if cfg.model.s > 0.0 { cfg.model.s } else { 0.25 };
    let mut records = Vec::new();
    for (ni, &n) in cfg.model.n.iter().enumerate() {
        // Ball window covering the whole renormalized box +-(n+1), so the
        // concentric fast sampling path applies.
        let h = n as i32 + 1;
        let r_w = (h as f64) * (d as f64).sqrt() + 0.5;
        let window = g.ball(&origin, r_w);
        let rho = kill_radius(cfg, r_w);
        let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, ni as u64]);
        let cap = equilibrium_and_capacity(&g, &window, &Method::exact(rho), &mut cal)?;
        let rate_cap = killed_rate(cap);
        let sampler = OccupiedSampler::new(&g, &window, &rate_cap, rho)?;
        let region = BBox::of_sites(d, [&origin]).grown(n as i32);
        let lattice_sites: Vec<Site> = RenormLattice::new(d, 1.0, region)?.sites();
        // Flat occupancy flags over the box [-hf, hf]^d containing the window.
        let hf = r_w.floor() as i32;
        let side = (2 * hf + 1) as usize;
        let flag_len = side.pow(d as u32);
        let flag_index = |s: &Site| -> usize {
            let mut idx = 0;
            for i in 0..d {
                idx = idx * side + (s.coord(i) + hf) as usize;
            }
            idx
        };
        // Vacant-tube capacity for the constructive lower bound.
        let tube = crossing_tube(&g, n, cfg.model.big_p);
        let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, 1000 + ni as u64]);
        let tube_cap = equilibrium_and_capacity(
            &g,
            &tube,
            &Method::monte_carlo(3.0 * n as f64, cfg.run.capacity_samples.max(10_000)),
            &mut cal,
        )?;
        for &u in &cfg.model.u {
            let tag = (ni as u64) << 16 | (u * 1e6) as u64 % (1 << 16);
            let outcomes = par_replicas(rp.replicas, rp.seed, tag, |_, rng| {
                let mut flags = vec![false; flag_len];
                sampler.sample_occupied_visit(&g, u, rng, |s| {
                    flags[flag_index(s)] = true;
                })?;
                let values: Vec<(Site, f64)> = lattice_sites
                    .iter()
                    .map(|z| (*z, flags[flag_index(z)] as u8 as f64))
                    .collect();
                let w = FppWeights::with_values(
                    RenormLattice::new(d, 1.0, region)?,
                    WeightKind::OccupiedIndicator,
                    Monotonicity::Increasing,
                    values,
                )?;
                let r = fpp_distance(&w, &origin, &FppTarget::ExitBall {
                    inner: 0.0,
                    outer: n as f64,
                })?;
                Ok(r.distance)
            })?;
            let nrep = rp.replicas;
            let threshold = s_thresh * n as f64;
            let hits = outcomes.iter().filter(|&&v| v <= threshold).count() as u64;
            let params = format!("u={u};n={n};s={s_thresh};rho={rho}");
            records.push(frequency_record(
                "fpp_scaling",
                format!("{params};stat=phat"),
                hits,
                nrep,
                rp.seed,
            ));
            let mean = outcomes.iter().sum::<f64>() / nrep as f64;
            let var = outcomes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (nrep as f64 - 1.0);
            records.push(
                EstimateRecord::new(
                    "fpp_scaling",
                    format!("{params};stat=mean_distance"),
                    mean,
                    (var / nrep as f64).sqrt(),
                )
                .with_replicas(nrep)
                .with_seed(rp.seed),
            );
            records.push(
                EstimateRecord::new(
                    "fpp_scaling",
                    format!("{params};stat=norm_distance"),
                    mean / n as f64,
                    (var / nrep as f64).sqrt() / n as f64,
                )
                .with_replicas(nrep)
                .with_seed(rp.seed),
            );
            // Vacant tube => a zero-cost crossing path exists.
            let lower = (-u * tube_cap.bracket.upper).exp();
            let direct = hits as f64 / nrep as f64;
            let mut rec = EstimateRecord::new(
                "fpp_scaling",
                format!("{params};big_p={};stat=tube_lower", cfg.model.big_p),
                lower,
                0.0,
            )
            .with_seed(rp.seed);
            if lower > direct + 3.0 * binomial_se(direct.max(1e-12), nrep) {
                rec = rec.with_flag("exceeds_direct");
            }
            records.push(rec);
        }
    }
    Ok(records)
}

//! Coarse-grained FPP: crossing costs on box-nonempty weights at renormalized
//! scale r, over a grid of (u, n).

use anyhow::Result;
use interlace_core::fpp::{build_weights, fpp_distance, FppTarget, Monotonicity, WeightKind};
use interlace_core::graph::{RenormLattice, SiteSet};
use interlace_core::interlacements::{InterlacementSample, OccupiedSampler};
use interlace_core::potential::{equilibrium_and_capacity, Method};
use interlace_core::rng::{stream, stream_id};
use interlace_core::site::{BBox, PackedSet, Site};

use crate::config::ExperimentConfig;
use crate::records::EstimateRecord;

use super::{frequency_record, killed_rate, kill_radius, lattice_of, par_replicas, RunParams};

pub fn run(cfg: &ExperimentConfig, rp: &RunParams) -> Result<Vec<EstimateRecord>> {
    let g = lattice_of(cfg)?;
    let d = g.dim();
    let origin = Site::origin(d);
    let r = cfg.model.r;
    let s_thresh = if cfg.model.s > 0.0 { cfg.model.s } else { 0.25 };
    let mut records = Vec::new();
    for (ni, &n) in cfg.model.n.iter().enumerate() {
        let region = BBox::of_sites(d, [&origin]).grown(n as i32);
        let stride = RenormLattice::new(d, r, region)?.stride;
        // The window must cover every cell of the renormalized lattice.
        let bbox = region.grown(stride as i32 + 2);
        let window = SiteSet::from_sites(bbox.iter_sites().collect());
        let r_w = window.radius_about(&g, &origin);
        let rho = kill_radius(cfg, r_w);
        let mut cal = stream(rp.seed, &[stream_id::CALIBRATION, ni as u64]);
        let cap = equilibrium_and_capacity(&g, &window, &Method::exact(rho), &mut cal)?;
        let rate_cap = killed_rate(cap);
        let sampler = OccupiedSampler::new(&g, &window, &rate_cap, rho)?;
        for &u in &cfg.model.u {
            let tag = (ni as u64) << 16 | (u * 1e6) as u64 % (1 << 16);
            let outcomes = par_replicas(rp.replicas, rp.seed, tag, |_, rng| {
                let mut seen = PackedSet::default();
                let mut sites: Vec<Site> = Vec::new();
                let (_, bias) =
                    sampler.sample_occupied_sites(&g, u, rng, &mut seen, &mut sites)?;
                let sample = InterlacementSample {
                    window: window.clone(),
                    u,
                    trajectories: Vec::new(),
                    occupied: SiteSet::from_sites(sites),
                    kill_radius: rho,
                    truncation_bias_bound: bias,
                };
                let w = build_weights(
                    &g,
                    &sample,
                    WeightKind::BoxNonempty,
                    r,
                    Monotonicity::Increasing,
                    region,
                    rng,
                )?;
                let res = fpp_distance(&w, &origin, &FppTarget::ExitBall {
                    inner: 0.0,
                    outer: n as f64,
                })?;
                Ok(res.distance)
            })?;
            let nrep = rp.replicas;
            let threshold = s_thresh * n as f64 / stride as f64;
            let hits = outcomes.iter().filter(|&&v| v <= threshold).count() as u64;
            let params = format!("u={u};n={n};r={r};s={s_thresh};rho={rho}");
            records.push(frequency_record(
                "coarse_fpp_event",
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
                    "coarse_fpp_event",
                    format!("{params};stat=mean_distance"),
                    mean,
                    (var / nrep as f64).sqrt(),
                )
                .with_replicas(nrep)
                .with_seed(rp.seed),
            );
        }
    }
    Ok(records)
}

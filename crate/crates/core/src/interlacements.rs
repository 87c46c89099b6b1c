//! Sampling the random interlacement point process restricted to a finite
//! window: labeled trajectories, occupied sets, local times, and monotone
//! couplings across levels.
//!
//! Window sampling takes the conditioning set A equal to the window W itself,
//! which makes the law of I^u n W exact up to trajectory truncation at the
//! kill radius; the union-bound truncation bias is attached to every sample.
//! Because the backward half of each trajectory is conditioned never to
//! return to A, only forward traces can contribute occupied window sites.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::graph::{GraphSpec, SiteSet};
use crate::potential::CapacityEstimate;
use crate::rng::{stream, stream_id};
use crate::site::{PackedSet, Site};
use crate::walk::{step, walk_killed, KilledOutcome, DEFAULT_MAX_STEPS};

/// Rejection-sampling budget for the conditioned backward walk.
pub const REJECTION_BUDGET: u64 = 10_000;

/// One doubly-infinite trajectory truncated at the kill radius.  Both halves
/// start at the entry site; the backward half never returns to the
/// conditioning set after time 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub label: f64,
    pub entry: Site,
    pub forward: Vec<Site>,
    pub backward: Vec<Site>,
}

/// The interlacement set at level u restricted to a window.
#[derive(Clone, Debug)]
pub struct InterlacementSample {
    pub window: SiteSet,
    pub u: f64,
    pub trajectories: Vec<Trajectory>,
    pub occupied: SiteSet,
    pub kill_radius: f64,
    pub truncation_bias_bound: f64,
}

/// Per-site local times of a sample; `seed_stream` is the master seed of the
/// holding-time streams (one independent stream per trajectory index, so
/// label-filtered sub-levels reuse identical holding times).
#[derive(Clone, Debug)]
pub struct LocalTimeField {
    pub times: std::collections::HashMap<Site, f64>,
    pub seed_stream: u64,
}

impl LocalTimeField {
    pub fn get(&self, s: &Site) -> f64 {
        self.times.get(s).copied().unwrap_or(0.0)
    }
}

/// Poisson number of trajectories hitting A at level u, with intensity
/// u * cap(A) taken at the bracket midpoint.
pub fn sample_count(cap_est: &CapacityEstimate, u: f64, rng: &mut impl Rng) -> Result<u64> {
    if u < 0.0 {
        return Err(ModelError::BadParameter("level u must be nonnegative".into()));
    }
    let lambda = u * cap_est.bracket.midpoint();
    if lambda <= 0.0 {
        return Ok(0);
    }
    let pois = Poisson::new(lambda)
        .map_err(|_| ModelError::BadParameter(format!("bad Poisson intensity {lambda}")))?;
    Ok(pois.sample(rng) as u64)
}

/// Per-trajectory probability bound of returning to A after exiting the kill
/// ball (the truncation error of one trajectory half).
pub fn trajectory_return_bound(g: &GraphSpec, cap_value: f64, radius: f64, rho: f64) -> f64 {
    let c = g.constants();
    let gap = (rho - radius).max(1.0);
    (c.c_g_upper * cap_value / gap.powf(c.nu)).min(1.0)
}

fn sample_entry(
    entry_sites: &[Site],
    entry_cdf: &[f64],
    rng: &mut impl Rng,
) -> Site {
    let total = *entry_cdf.last().unwrap();
    let t = rng.gen_range(0.0..total);
    let i = entry_cdf.partition_point(|&c| c <= t).min(entry_sites.len() - 1);
    entry_sites[i]
}

fn entry_tables(cap_est: &CapacityEstimate) -> Result<(Vec<Site>, Vec<f64>)> {
    let eq = cap_est.equilibrium.as_ref().ok_or(ModelError::MissingEquilibrium)?;
    let mut sites = Vec::with_capacity(eq.len());
    let mut cdf = Vec::with_capacity(eq.len());
    let mut acc = 0.0;
    for &(s, w) in eq {
        if w > 0.0 {
            acc += w;
            sites.push(s);
            cdf.push(acc);
        }
    }
    if sites.is_empty() {
        return Err(ModelError::BadMeasure("equilibrium measure has no mass".into()));
    }
    Ok((sites, cdf))
}

fn record_walk_from(
    g: &GraphSpec,
    start: &Site,
    center: &Site,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Site>> {
    let mut path = Vec::new();
    let (outcome, _) = walk_killed(g, start, center, rho, DEFAULT_MAX_STEPS, rng, |s| {
        path.push(*s);
        true
    })?;
    if outcome == KilledOutcome::Truncated {
        return Err(ModelError::SolverStalled {
            tol: 0.0,
            max_iter: DEFAULT_MAX_STEPS as usize,
            residual: f64::NAN,
        });
    }
    Ok(path)
}

/// Samples one unlabeled trajectory through A: entry from the normalized
/// equilibrium measure, a free forward walk killed at rho, and a backward walk
/// conditioned on never returning to A (rejection against the killed proxy).
pub fn sample_trajectory(
    g: &GraphSpec,
    a: &SiteSet,
    cap_est: &CapacityEstimate,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Site>, Vec<Site>, Site)> {
    let (entry_sites, entry_cdf) = entry_tables(cap_est)?;
    let center = a.ball_meta().map(|(c, _)| c).unwrap_or_else(|| a.center());
    let radius = a.radius_about(g, &center);
    if rho <= radius + 2.0 {
        return Err(ModelError::KillRadiusTooSmall { rho, min: radius + 2.0 });
    }
    let entry = sample_entry(&entry_sites, &entry_cdf, rng);
    let forward = record_walk_from(g, &entry, &center, rho, rng)?;
    let backward = sample_backward(g, a, &entry, &center, rho, rng)?;
    Ok((forward, backward, entry))
}

fn sample_backward(
    g: &GraphSpec,
    a: &SiteSet,
    entry: &Site,
    center: &Site,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Site>> {
    let rho2 = rho * rho + 1e-9;
    for _attempt in 0..REJECTION_BUDGET {
        let mut path = vec![*entry];
        let mut current = *entry;
        loop {
            current = step(g, &current, rng)?;
            if (current.dist2(center) as f64) > rho2 {
                return Ok(path);
            }
            if a.contains(&current) {
                break; // returned to A: reject this candidate
            }
            path.push(current);
            if path.len() as u64 > DEFAULT_MAX_STEPS {
                return Err(ModelError::SolverStalled {
                    tol: 0.0,
                    max_iter: DEFAULT_MAX_STEPS as usize,
                    residual: f64::NAN,
                });
            }
        }
    }
    Err(ModelError::RejectionBudget {
        budget: REJECTION_BUDGET,
        acceptance: 1.0 / REJECTION_BUDGET as f64,
    })
}

/// Samples I^u restricted to `w`, conditioning on A = W.
pub fn sample_window(
    g: &GraphSpec,
    w: &SiteSet,
    u: f64,
    rho: f64,
    cap_est: &CapacityEstimate,
    rng: &mut impl Rng,
) -> Result<InterlacementSample> {
    if w.is_empty() {
        return Ok(InterlacementSample {
            window: w.clone(),
            u,
            trajectories: Vec::new(),
            occupied: SiteSet::empty(3),
            kill_radius: rho,
            truncation_bias_bound: 0.0,
        });
    }
    let count = sample_count(cap_est, u, rng)?;
    let mut trajectories = Vec::with_capacity(count as usize);
    let mut occupied_sites = Vec::new();
    for _ in 0..count {
        let (forward, backward, entry) = sample_trajectory(g, w, cap_est, rho, rng)?;
        let label = u * (1.0 - rng.gen::<f64>()); // uniform on (0, u]
        for s in &forward {
            if w.contains(s) {
                occupied_sites.push(*s);
            }
        }
        trajectories.push(Trajectory { label, entry, forward, backward });
    }
    let center = w.ball_meta().map(|(c, _)| c).unwrap_or_else(|| w.center());
    let radius = w.radius_about(g, &center);
    let eps = trajectory_return_bound(g, cap_est.value, radius, rho);
    Ok(InterlacementSample {
        window: w.clone(),
        u,
        trajectories,
        occupied: SiteSet::from_sites(occupied_sites),
        kill_radius: rho,
        truncation_bias_bound: (2.0 * count as f64 * eps).min(1.0),
    })
}

/// Local times of a sample: each visit to a window site x contributes an
/// independent Exp(1)/lambda_x holding time.  Backward halves skip their
/// time-0 entry visit (already counted by the forward half).
pub fn local_times(g: &GraphSpec, sample: &InterlacementSample, seed: u64) -> LocalTimeField {
    local_times_at_level(g, sample, seed, sample.u)
}

/// Label-filtered local times: only trajectories with label <= level
/// contribute, with per-trajectory holding times shared across levels, so
/// fields at nested levels are sitewise monotone.
pub fn local_times_at_level(
    g: &GraphSpec,
    sample: &InterlacementSample,
    seed: u64,
    level: f64,
) -> LocalTimeField {
    let mut times = std::collections::HashMap::new();
    for (k, traj) in sample.trajectories.iter().enumerate() {
        let mut rng = stream(seed, &[stream_id::HOLDING, k as u64]);
        let include = traj.label <= level;
        let mut add_visit = |s: &Site, rng: &mut rand_chacha::ChaCha8Rng| {
            if sample.window.contains(s) {
                let e: f64 = Exp1.sample(rng);
                if include {
                    *times.entry(*s).or_insert(0.0) += e / g.lambda(s);
                }
            }
        };
        for s in &traj.forward {
            add_visit(s, &mut rng);
        }
        for s in traj.backward.iter().skip(1) {
            add_visit(s, &mut rng);
        }
    }
    LocalTimeField { times, seed_stream: seed }
}

/// Occupied sets at nested levels: I^{u_i} collects the traces of the
/// trajectories with label at most u_i.
pub fn coupled_levels(sample: &InterlacementSample, u_list: &[f64]) -> Result<Vec<SiteSet>> {
    let mut out = Vec::with_capacity(u_list.len());
    for &level in u_list {
        if level > sample.u + 1e-12 {
            return Err(ModelError::LevelTooHigh { level, max: sample.u });
        }
        let mut sites = Vec::new();
        for traj in &sample.trajectories {
            if traj.label <= level {
                for s in &traj.forward {
                    if sample.window.contains(s) {
                        sites.push(*s);
                    }
                }
            }
        }
        out.push(SiteSet::from_sites(sites));
    }
    Ok(out)
}

/// A reusable, allocation-light sampler of occupied sets for high-replica
/// studies.  Only forward traces are walked (the backward halves cannot touch
/// the window, see module docs) and paths are not stored.
pub struct OccupiedSampler {
    entry_sites: Vec<Site>,
    entry_cdf: Vec<f64>,
    rate: f64,
    center: Site,
    radius: f64,
    rho: f64,
    eps_per_traj: f64,
    window: WindowTest,
}

enum WindowTest {
    Ball { center: Site, r2: f64 },
    Set(PackedSet),
}

impl WindowTest {
    #[inline]
    fn contains(&self, s: &Site) -> bool {
        match self {
            WindowTest::Ball { center, r2 } => (s.dist2(center) as f64) <= *r2,
            WindowTest::Set(set) => set.contains(&s.packed()),
        }
    }
}

impl OccupiedSampler {
    pub fn new(
        g: &GraphSpec,
        w: &SiteSet,
        cap_est: &CapacityEstimate,
        rho: f64,
    ) -> Result<Self> {
        if w.is_empty() {
            return Err(ModelError::EmptySet);
        }
        let (entry_sites, entry_cdf) = entry_tables(cap_est)?;
        let center = w.ball_meta().map(|(c, _)| c).unwrap_or_else(|| w.center());
        let radius = w.radius_about(g, &center);
        if rho <= radius + 2.0 {
            return Err(ModelError::KillRadiusTooSmall { rho, min: radius + 2.0 });
        }
        let window = match w.ball_meta() {
            Some((c, r)) => WindowTest::Ball { center: c, r2: r * r + 1e-9 },
            None => {
                let mut set = PackedSet::default();
                for s in w.iter() {
                    set.insert(s.packed());
                }
                WindowTest::Set(set)
            }
        };
        Ok(OccupiedSampler {
            entry_sites,
            entry_cdf,
            rate: cap_est.bracket.midpoint(),
            center,
            radius,
            rho,
            eps_per_traj: trajectory_return_bound(g, cap_est.value, radius, rho),
            window,
        })
    }

    /// Poisson trajectory count at level u.
    pub fn draw_count(&self, u: f64, rng: &mut impl Rng) -> u64 {
        let lambda = u * self.rate;
        if lambda <= 0.0 {
            return 0;
        }
        Poisson::new(lambda).unwrap().sample(rng) as u64
    }

    /// Samples the occupied window set into `buf` (cleared first); returns the
    /// trajectory count and the truncation bias bound of this sample.
    pub fn sample_occupied(
        &self,
        g: &GraphSpec,
        u: f64,
        rng: &mut impl Rng,
        buf: &mut PackedSet,
    ) -> Result<(u64, f64)> {
        buf.clear();
        let count = self.draw_count(u, rng);
        for _ in 0..count {
            let entry = sample_entry(&self.entry_sites, &self.entry_cdf, rng);
            let (outcome, _) =
                walk_killed(g, &entry, &self.center, self.rho, DEFAULT_MAX_STEPS, rng, |s| {
                    if self.window.contains(s) {
                        buf.insert(s.packed());
                    }
                    true
                })?;
            if outcome == KilledOutcome::Truncated {
                return Err(ModelError::SolverStalled {
                    tol: 0.0,
                    max_iter: DEFAULT_MAX_STEPS as usize,
                    residual: f64::NAN,
                });
            }
        }
        Ok((count, (2.0 * count as f64 * self.eps_per_traj).min(1.0)))
    }

    /// Like [`sample_occupied`](Self::sample_occupied) but also collects the
    /// distinct occupied sites into `sites` for callers that need coordinates.
    pub fn sample_occupied_sites(
        &self,
        g: &GraphSpec,
        u: f64,
        rng: &mut impl Rng,
        seen: &mut PackedSet,
        sites: &mut Vec<Site>,
    ) -> Result<(u64, f64)> {
        seen.clear();
        sites.clear();
        let count = self.draw_count(u, rng);
        for _ in 0..count {
            let entry = sample_entry(&self.entry_sites, &self.entry_cdf, rng);
            let (outcome, _) =
                walk_killed(g, &entry, &self.center, self.rho, DEFAULT_MAX_STEPS, rng, |s| {
                    if self.window.contains(s) && seen.insert(s.packed()) {
                        sites.push(*s);
                    }
                    true
                })?;
            if outcome == KilledOutcome::Truncated {
                return Err(ModelError::SolverStalled {
                    tol: 0.0,
                    max_iter: DEFAULT_MAX_STEPS as usize,
                    residual: f64::NAN,
                });
            }
        }
        Ok((count, (2.0 * count as f64 * self.eps_per_traj).min(1.0)))
    }

    /// Lowest-overhead variant: calls `visit` for every in-window visit of
    /// every trajectory, duplicates included, leaving deduplication to the
    /// caller (e.g. a flat occupancy array over a bounding box).
    pub fn sample_occupied_visit(
        &self,
        g: &GraphSpec,
        u: f64,
        rng: &mut impl Rng,
        mut visit: impl FnMut(&Site),
    ) -> Result<(u64, f64)> {
        let count = self.draw_count(u, rng);
        // Fast path for a ball window concentric with the kill ball on a
        // lattice: one incrementally-updated squared distance serves both the
        // kill check and the window test.  The RNG call sequence is identical
        // to the generic path, so the sampled law is bit-for-bit the same.
        let fast = match (&self.window, &g.kind) {
            (WindowTest::Ball { center, r2 }, crate::graph::GraphKind::Lattice { d, .. })
                if *center == self.center =>
            {
                Some((*r2, *d))
            }
            _ => None,
        };
        if let Some((win_r2, d)) = fast {
            let rho2 = self.rho * self.rho + 1e-9;
            for _ in 0..count {
                let mut cur = sample_entry(&self.entry_sites, &self.entry_cdf, rng);
                let mut d2 = cur.dist2(&self.center);
                if (d2 as f64) <= win_r2 {
                    visit(&cur);
                }
                let mut steps = 0u64;
                loop {
                    if steps >= DEFAULT_MAX_STEPS {
                        return Err(ModelError::SolverStalled {
                            tol: 0.0,
                            max_iter: DEFAULT_MAX_STEPS as usize,
                            residual: f64::NAN,
                        });
                    }
                    let r: usize = rng.gen_range(0..2 * d);
                    let axis = r >> 1;
                    let delta = if r & 1 == 0 { 1 } else { -1 };
                    let c = (cur.coord(axis) - self.center.coord(axis)) as i64;
                    d2 += 2 * c * delta as i64 + 1;
                    cur = cur.offset(axis, delta);
                    steps += 1;
                    if (d2 as f64) > rho2 {
                        break;
                    }
                    if (d2 as f64) <= win_r2 {
                        visit(&cur);
                    }
                }
            }
            return Ok((count, (2.0 * count as f64 * self.eps_per_traj).min(1.0)));
        }
        for _ in 0..count {
            let entry = sample_entry(&self.entry_sites, &self.entry_cdf, rng);
            let (outcome, _) =
                walk_killed(g, &entry, &self.center, self.rho, DEFAULT_MAX_STEPS, rng, |s| {
                    if self.window.contains(s) {
                        visit(s);
                    }
                    true
                })?;
            if outcome == KilledOutcome::Truncated {
                return Err(ModelError::SolverStalled {
                    tol: 0.0,
                    max_iter: DEFAULT_MAX_STEPS as usize,
                    residual: f64::NAN,
                });
            }
        }
        Ok((count, (2.0 * count as f64 * self.eps_per_traj).min(1.0)))
    }

    pub fn kill_radius(&self) -> f64 {
        self.rho
    }

    pub fn window_radius(&self) -> f64 {
        self.radius
    }
}

// --- serialization ---------------------------------------------------------

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
enum PathCode {
    /// Lattice paths as run-length encoded unit steps: (direction, run),
    /// direction = 2*axis + (1 if negative).
    Steps(Vec<(u8, u32)>),
    /// Fallback for non-lattice graphs: explicit coordinates.
    Sites(Vec<Vec<i32>>),
}

#[derive(Serialize, Deserialize)]
struct TrajectoryCode {
    label: f64,
    entry: Vec<i32>,
    forward: PathCode,
    backward: PathCode,
}

#[derive(Serialize, Deserialize)]
struct SampleCode {
    schema_version: u32,
    u: f64,
    kill_radius: f64,
    truncation_bias_bound: f64,
    window: Vec<Vec<i32>>,
    trajectories: Vec<TrajectoryCode>,
}

fn encode_path(g: &GraphSpec, path: &[Site]) -> Result<PathCode> {
    if g.as_lattice().is_none() {
        return Ok(PathCode::Sites(path.iter().map(|s| s.coords().to_vec()).collect()));
    }
    let mut runs: Vec<(u8, u32)> = Vec::new();
    for pair in path.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let mut dir = None;
        for axis in 0..a.dim() {
            match b.coord(axis) - a.coord(axis) {
                0 => continue,
                1 if dir.is_none() => dir = Some(2 * axis as u8),
                -1 if dir.is_none() => dir = Some(2 * axis as u8 + 1),
                _ => {
                    return Err(ModelError::Serialization(
                        "path step is not a unit lattice move".into(),
                    ))
                }
            }
        }
        let d = dir.ok_or_else(|| {
            ModelError::Serialization("repeated site in path encoding".into())
        })?;
        match runs.last_mut() {
            Some((last, n)) if *last == d => *n += 1,
            _ => runs.push((d, 1)),
        }
    }
    Ok(PathCode::Steps(runs))
}

fn decode_path(entry: &Site, code: &PathCode) -> Result<Vec<Site>> {
    match code {
        PathCode::Sites(list) => Ok(list.iter().map(|c| Site::new(c)).collect()),
        PathCode::Steps(runs) => {
            let mut path = vec![*entry];
            let mut current = *entry;
            for &(dir, n) in runs {
                let axis = (dir / 2) as usize;
                let delta = if dir % 2 == 0 { 1 } else { -1 };
                if axis >= entry.dim() {
                    return Err(ModelError::Serialization(format!("bad direction {dir}")));
                }
                for _ in 0..n {
                    current = current.offset(axis, delta);
                    path.push(current);
                }
            }
            Ok(path)
        }
    }
}

/// JSON serialization of a sample (schema version 1, run-length step lists).
pub fn sample_to_json(g: &GraphSpec, sample: &InterlacementSample) -> Result<String> {
    let trajectories = sample
        .trajectories
        .iter()
        .map(|t| {
            Ok(TrajectoryCode {
                label: t.label,
                entry: t.entry.coords().to_vec(),
                forward: encode_path(g, &t.forward)?,
                backward: encode_path(g, &t.backward)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let code = SampleCode {
        schema_version: SCHEMA_VERSION,
        u: sample.u,
        kill_radius: sample.kill_radius,
        truncation_bias_bound: sample.truncation_bias_bound,
        window: sample.window.iter().map(|s| s.coords().to_vec()).collect(),
        trajectories,
    };
    serde_json::to_string(&code).map_err(|e| ModelError::Serialization(e.to_string()))
}

/// Inverse of [`sample_to_json`]; recomputes the occupied set from the
/// decoded traces.
pub fn sample_from_json(json: &str) -> Result<InterlacementSample> {
    let code: SampleCode =
        serde_json::from_str(json).map_err(|e| ModelError::Serialization(e.to_string()))?;
    if code.schema_version != SCHEMA_VERSION {
        return Err(ModelError::Serialization(format!(
            "unsupported schema version {}",
            code.schema_version
        )));
    }
    let window = SiteSet::from_sites(code.window.iter().map(|c| Site::new(c)).collect());
    let mut occupied_sites = Vec::new();
    let mut trajectories = Vec::with_capacity(code.trajectories.len());
    for t in &code.trajectories {
        let entry = Site::new(&t.entry);
        let forward = decode_path(&entry, &t.forward)?;
        let backward = decode_path(&entry, &t.backward)?;
        for s in &forward {
            if window.contains(s) {
                occupied_sites.push(*s);
            }
        }
        trajectories.push(Trajectory { label: t.label, entry, forward, backward });
    }
    Ok(InterlacementSample {
        window,
        u: code.u,
        trajectories,
        occupied: SiteSet::from_sites(occupied_sites),
        kill_radius: code.kill_radius,
        truncation_bias_bound: code.truncation_bias_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_lattice, DistanceKind};
    use crate::potential::{equilibrium_and_capacity, Method};

    fn z3() -> GraphSpec {
        make_lattice(3, DistanceKind::Euclidean).unwrap()
    }

    fn cap_of(g: &GraphSpec, w: &SiteSet, rho: f64) -> CapacityEstimate {
        let mut rng = stream(0, &[stream_id::CALIBRATION, 1]);
        equilibrium_and_capacity(g, w, &Method::exact(rho), &mut rng).unwrap()
    }

    #[test]
    fn count_moments_poissonian() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let cap = cap_of(&g, &w, 30.0);
        let u = 0.1;
        let mut rng = stream(1, &[stream_id::COUNT]);
        let n = 100_000u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut zero = 0u64;
        for _ in 0..n {
            let c = sample_count(&cap, u, &mut rng).unwrap() as f64;
            sum += c;
            sum_sq += c * c;
            if c == 0.0 {
                zero += 1;
            }
        }
        let lam = u * cap.bracket.midpoint();
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se_mean = (lam / n as f64).sqrt();
        assert!((mean - lam).abs() < 3.0 * se_mean, "mean {mean} vs {lam}");
        // Var of the sample variance of Poisson ~ (2 lam^2 + lam) / n.
        let se_var = ((2.0 * lam * lam + lam) / n as f64).sqrt();
        assert!((var - lam).abs() < 4.0 * se_var, "var {var} vs {lam}");
        // Emptiness identity restated.
        let p0 = zero as f64 / n as f64;
        let target = (-lam).exp();
        let se0 = (target * (1.0 - target) / n as f64).sqrt();
        assert!((p0 - target).abs() < 3.0 * se0, "p0 {p0} vs {target}");
        // u = 0 gives count 0.
        assert_eq!(sample_count(&cap, 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn singleton_entry_is_certain() {
        let g = z3();
        let a = SiteSet::singleton(Site::origin(3));
        let cap = cap_of(&g, &a, 30.0);
        let mut rng = stream(2, &[stream_id::ENTRY]);
        for _ in 0..20 {
            let (fwd, bwd, entry) = sample_trajectory(&g, &a, &cap, 30.0, &mut rng).unwrap();
            assert_eq!(entry, Site::origin(3));
            assert_eq!(fwd[0], entry);
            assert_eq!(bwd[0], entry);
            // Backward never returns to A after time 0.
            for s in bwd.iter().skip(1) {
                assert!(!a.contains(s));
            }
        }
    }

    #[test]
    fn entry_frequencies_match_equilibrium() {
        let g = z3();
        let a = g.ball(&Site::origin(3), 3.0);
        let cap = cap_of(&g, &a, 40.0);
        let eq = cap.equilibrium.as_ref().unwrap();
        let mut rng = stream(3, &[stream_id::ENTRY, 1]);
        let n = 100_000u64;
        let mut counts: std::collections::HashMap<Site, u64> = Default::default();
        let (sites, cdf) = entry_tables(&cap).unwrap();
        for _ in 0..n {
            *counts.entry(sample_entry(&sites, &cdf, &mut rng)).or_insert(0) += 1;
        }
        // Chi-square against e_A / cap over the support.
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for &(s, w) in eq {
            if w <= 0.0 {
                continue;
            }
            let expect = w / cap.value * n as f64;
            let got = *counts.get(&s).unwrap_or(&0) as f64;
            chi2 += (got - expect).powi(2) / expect;
            dof += 1;
        }
        // p > 0.001 band: chi2_{dof} < dof + 3.1 sqrt(2 dof) roughly.
        let limit = dof as f64 + 3.5 * (2.0 * dof as f64).sqrt();
        assert!(chi2 < limit, "chi2 {chi2} over {dof} cells (limit {limit})");
    }

    #[test]
    fn backward_rejection_rate_consistent_with_escape() {
        // Fraction of accepted first-try candidates ~ sum_x (e(x)/cap) P_x(escape).
        let g = z3();
        let a = g.ball(&Site::origin(3), 2.0);
        let rho = 30.0;
        let cap = cap_of(&g, &a, rho);
        let mut expected = 0.0;
        for &(s, w) in cap.equilibrium.as_ref().unwrap() {
            // P_x(H-tilde > T_rho) = e_kill(x) / lambda_x.
            expected += (w / cap.value) * (w / g.lambda(&s));
        }
        let mut rng = stream(4, &[stream_id::ENTRY, 2]);
        let (sites, cdf) = entry_tables(&cap).unwrap();
        let n = 30_000u64;
        let mut accepted = 0u64;
        for _ in 0..n {
            let entry = sample_entry(&sites, &cdf, &mut rng);
            if crate::walk::escape_sample(&g, &entry, &a, &a.center(), rho, &mut rng).unwrap() {
                accepted += 1;
            }
        }
        let p = accepted as f64 / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((p - expected).abs() < 3.0 * se + 1e-3, "acceptance {p} vs {expected}");
    }

    #[test]
    fn empty_window_sample() {
        let g = z3();
        let w = SiteSet::empty(3);
        let cap = CapacityEstimate {
            value: 0.0,
            bracket: crate::bracket::Bracket::exact(0.0),
            method: crate::potential::MethodTag::ExactKilledSolve,
            equilibrium: Some(vec![]),
            extrapolated: None,
            kill_radius: 10.0,
            n_samples: None,
        };
        let mut rng = stream(5, &[0]);
        let s = sample_window(&g, &w, 0.5, 10.0, &cap, &mut rng).unwrap();
        assert!(s.occupied.is_empty());
        assert!(s.trajectories.is_empty());
        let lt = local_times(&g, &s, 7);
        assert!(lt.times.is_empty());
    }

    #[test]
    fn sample_invariants_and_occupied_reconstruction() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 3.0);
        let cap = cap_of(&g, &w, 40.0);
        let mut rng = stream(6, &[1]);
        let mut nonempty = 0;
        for _ in 0..30 {
            let s = sample_window(&g, &w, 0.4, 40.0, &cap, &mut rng).unwrap();
            let mut expect = Vec::new();
            for t in &s.trajectories {
                assert!(w.contains(&t.entry), "entry in window");
                assert_eq!(t.forward[0], t.entry);
                // entry is the first window site of the forward trace.
                assert!(t.forward.iter().find(|s| w.contains(s)) == Some(&t.entry));
                assert!(t.label > 0.0 && t.label <= s.u);
                for x in &t.forward {
                    if w.contains(x) {
                        expect.push(*x);
                    }
                }
                // Backward halves cannot touch the window after time 0.
                for x in t.backward.iter().skip(1) {
                    assert!(!w.contains(x));
                }
            }
            let expect = SiteSet::from_sites(expect);
            assert_eq!(expect.len(), s.occupied.len());
            assert!(expect.is_subset_of(&s.occupied));
            if !s.occupied.is_empty() {
                nonempty += 1;
            }
            // Local-time positivity iff occupied.
            let lt = local_times(&g, &s, 99);
            for x in w.iter() {
                assert_eq!(lt.get(x) > 0.0, s.occupied.contains(x), "at {:?}", x);
            }
        }
        assert!(nonempty > 5);
    }

    #[test]
    fn coupled_levels_nested_and_exact_at_top() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let cap = cap_of(&g, &w, 30.0);
        let mut rng = stream(7, &[2]);
        for _ in 0..50 {
            let s = sample_window(&g, &w, 0.6, 30.0, &cap, &mut rng).unwrap();
            let levels = [0.15, 0.3, 0.6];
            let sets = coupled_levels(&s, &levels).unwrap();
            assert!(sets[0].is_subset_of(&sets[1]));
            assert!(sets[1].is_subset_of(&sets[2]));
            assert_eq!(sets[2].len(), s.occupied.len());
            assert!(coupled_levels(&s, &[0.7]).is_err());
        }
    }

    #[test]
    fn local_time_levels_monotone() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let cap = cap_of(&g, &w, 30.0);
        let mut rng = stream(8, &[3]);
        for _ in 0..20 {
            let s = sample_window(&g, &w, 0.8, 30.0, &cap, &mut rng).unwrap();
            let lo = local_times_at_level(&g, &s, 55, 0.4);
            let hi = local_times_at_level(&g, &s, 55, 0.8);
            for x in w.iter() {
                assert!(lo.get(x) <= hi.get(x) + 1e-15, "local times not monotone");
            }
        }
    }

    #[test]
    fn mean_local_time_is_u() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let rho = 60.0;
        let cap = cap_of(&g, &w, rho);
        let u = 1.0;
        let mut rng = stream(9, &[4]);
        let n = 4_000;
        let o = Site::origin(3);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for k in 0..n {
            let s = sample_window(&g, &w, u, rho, &cap, &mut rng).unwrap();
            let lt = local_times(&g, &s, 1000 + k);
            let v = lt.get(&o);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        // Truncation bias is O(cap / rho); include it alongside 3 SE.
        let bias = 0.05;
        assert!((mean - u).abs() < 3.0 * se + bias, "mean {mean} vs {u} (se {se})");
    }

    #[test]
    fn occupied_sampler_matches_full_sampler_law() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let rho = 30.0;
        let cap = cap_of(&g, &w, rho);
        let sampler = OccupiedSampler::new(&g, &w, &cap, rho).unwrap();
        let u = 0.3;
        let n = 4_000;
        let mut buf = PackedSet::default();
        let mut rng_a = stream(10, &[5]);
        let mut rng_b = stream(11, &[6]);
        let (mut sum_a, mut sum_b) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let (_, _) = sampler.sample_occupied(&g, u, &mut rng_a, &mut buf).unwrap();
            sum_a += buf.len() as f64;
            let s = sample_window(&g, &w, u, rho, &cap, &mut rng_b).unwrap();
            sum_b += s.occupied.len() as f64;
        }
        let (ma, mb) = (sum_a / n as f64, sum_b / n as f64);
        // Two-sample comparison of mean occupied size.
        let se = (ma.max(mb) * w.len() as f64 / n as f64).sqrt() / 2.0;
        assert!((ma - mb).abs() < 3.0 * se, "lean {ma} vs full {mb}");
    }

    #[test]
    fn decomposition_into_thinned_levels() {
        // Union of two independent samples at u/2 vs one sample at u: compare
        // the mean occupied size.
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let rho = 30.0;
        let cap = cap_of(&g, &w, rho);
        let u = 0.4;
        let sampler = OccupiedSampler::new(&g, &w, &cap, rho).unwrap();
        let n = 4_000;
        let mut rng = stream(12, &[7]);
        let mut buf = PackedSet::default();
        let mut buf2 = PackedSet::default();
        let (mut sum_one, mut sum_two) = (0.0f64, 0.0f64);
        for _ in 0..n {
            sampler.sample_occupied(&g, u, &mut rng, &mut buf).unwrap();
            sum_one += buf.len() as f64;
            sampler.sample_occupied(&g, u / 2.0, &mut rng, &mut buf).unwrap();
            sampler.sample_occupied(&g, u / 2.0, &mut rng, &mut buf2).unwrap();
            for k in buf2.iter() {
                buf.insert(*k);
            }
            sum_two += buf.len() as f64;
        }
        let (m1, m2) = (sum_one / n as f64, sum_two / n as f64);
        let se = (m1 * w.len() as f64 / n as f64).sqrt() / 2.0;
        assert!((m1 - m2).abs() < 3.0 * se, "one-shot {m1} vs thinned union {m2}");
    }

    #[test]
    fn json_round_trip() {
        let g = z3();
        let w = g.ball(&Site::origin(3), 2.0);
        let cap = cap_of(&g, &w, 30.0);
        let mut rng = stream(13, &[8]);
        let s = sample_window(&g, &w, 0.5, 30.0, &cap, &mut rng).unwrap();
        let json = sample_to_json(&g, &s).unwrap();
        let back = sample_from_json(&json).unwrap();
        assert_eq!(back.trajectories.len(), s.trajectories.len());
        for (a, b) in back.trajectories.iter().zip(&s.trajectories) {
            assert_eq!(a, b);
        }
        assert_eq!(back.occupied.len(), s.occupied.len());
        assert!(back.occupied.is_subset_of(&s.occupied));
        assert_eq!(back.u, s.u);
    }
}

//! The lambda-weighted random walk: single steps, exit traces, and escape
//! probability estimates with explicit truncation brackets.
//!
//! Every "escape to infinity" event is realized as "escape past a kill radius
//! rho" plus a return-correction term bounded through the declared Green and
//! capacity constants, so all reported brackets are honest about truncation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bracket::Bracket;
use crate::error::{ModelError, Result};
use crate::graph::{GraphKind, GraphSpec, SiteSet};
use crate::rng::{stream, stream_id};
use crate::site::Site;

/// Default per-walk step budget; exceeding it sets a truncation flag.
pub const DEFAULT_MAX_STEPS: u64 = 100_000_000;

/// A walk run until exiting a domain.  `path` ends with the exit site when the
/// walk exited; on truncation `exit_site` is `None` and `truncated` is set.
#[derive(Clone, Debug)]
pub struct Trace {
    pub path: Vec<Site>,
    pub visited: SiteSet,
    pub exit_site: Option<Site>,
    pub steps: u64,
    pub truncated: bool,
}

/// Escape-probability estimate with a truncation-aware bracket.
#[derive(Clone, Debug)]
pub struct EscapeEstimate {
    pub point_estimate: f64,
    pub bracket: Bracket,
    pub n_samples: u64,
    pub kill_radius: f64,
}

/// One step of the walk from `x`: neighbor `y` with probability w_{xy}/lambda_x.
#[inline]
pub fn step(g: &GraphSpec, x: &Site, rng: &mut impl Rng) -> Result<Site> {
    match &g.kind {
        GraphKind::Lattice { d, .. } => {
            let r: usize = rng.gen_range(0..2 * *d);
            let axis = r >> 1;
            let delta = if r & 1 == 0 { 1 } else { -1 };
            Ok(x.offset(axis, delta))
        }
        GraphKind::Table(t) => {
            let Some(&i) = t.id_of.get(&x.packed()) else {
                return Err(ModelError::UnknownSite(format!("{:?}", x.coords())));
            };
            let lambda = t.lambda[i as usize];
            if lambda <= 0.0 {
                return Err(ModelError::IsolatedSite(format!("{:?}", x.coords())));
            }
            let mut target = rng.gen_range(0.0..lambda);
            let adj = &t.adj[i as usize];
            for &(j, w) in adj {
                if target < w {
                    return Ok(t.coords[j as usize]);
                }
                target -= w;
            }
            // Floating-point edge: fall back to the last neighbor.
            Ok(t.coords[adj.last().unwrap().0 as usize])
        }
    }
}

/// Runs the walk from `x` until the first exit from `domain`, recording the
/// full path.  The exit site is appended to the path.
pub fn run_until_exit(
    g: &GraphSpec,
    x: &Site,
    domain: &SiteSet,
    rng: &mut impl Rng,
    max_steps: u64,
) -> Result<Trace> {
    if !domain.contains(x) {
        return Err(ModelError::StartOutsideDomain);
    }
    let mut path = vec![*x];
    let mut current = *x;
    let mut steps = 0u64;
    let mut exit_site = None;
    let mut truncated = false;
    loop {
        if steps >= max_steps {
            truncated = true;
            break;
        }
        let next = step(g, &current, rng)?;
        steps += 1;
        path.push(next);
        if !domain.contains(&next) {
            exit_site = Some(next);
            break;
        }
        current = next;
    }
    let visited = SiteSet::from_sites(path.clone());
    Ok(Trace { path, visited, exit_site, steps, truncated })
}

/// Outcome of a killed walk driven by a visitor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KilledOutcome {
    /// The visitor requested a stop.
    Stopped,
    /// The walk left the kill ball.
    Killed,
    /// The step budget ran out.
    Truncated,
}

/// Runs the walk from `start` until it exits the closed ball
/// B(kill_center, kill_radius), the visitor returns `false`, or `max_steps`
/// elapse.  The visitor sees every in-ball site including the start.
pub fn walk_killed(
    g: &GraphSpec,
    start: &Site,
    kill_center: &Site,
    kill_radius: f64,
    max_steps: u64,
    rng: &mut impl Rng,
    mut visit: impl FnMut(&Site) -> bool,
) -> Result<(KilledOutcome, u64)> {
    let rho2 = kill_radius * kill_radius + 1e-9;
    if (start.dist2(kill_center) as f64) > rho2 {
        return Err(ModelError::StartOutsideDomain);
    }
    let mut current = *start;
    let mut steps = 0u64;
    if !visit(&current) {
        return Ok((KilledOutcome::Stopped, steps));
    }
    while steps < max_steps {
        current = step(g, &current, rng)?;
        steps += 1;
        if (current.dist2(kill_center) as f64) > rho2 {
            return Ok((KilledOutcome::Killed, steps));
        }
        if !visit(&current) {
            return Ok((KilledOutcome::Stopped, steps));
        }
    }
    Ok((KilledOutcome::Truncated, steps))
}

/// Return correction: sup over the kill sphere of P_y(H_A < infinity),
/// bounded by 2^nu C_G C_cap / K^nu with K = kill_radius / radius(A).
pub fn return_correction(g: &GraphSpec, radius: f64, kill_radius: f64) -> f64 {
    let c = g.constants();
    let r = radius.max(1.0);
    let k = kill_radius / r;
    (2f64.powf(c.nu) * c.c_g_upper * c.c_cap_upper / k.powf(c.nu)).min(1.0)
}

/// Monte Carlo estimate of P_x(H-tilde_A = infinity): walks killed on exiting
/// B(center(A), kill_radius); escaping the ball without re-entering A counts
/// as escape.  The bracket subtracts the return correction on the low side and
/// a 3-sigma statistical term on both sides.
pub fn escape_probability(
    g: &GraphSpec,
    x: &Site,
    a: &SiteSet,
    kill_radius: f64,
    n_samples: u64,
    rng: &mut impl Rng,
) -> Result<EscapeEstimate> {
    if a.is_empty() {
        return Err(ModelError::EmptySet);
    }
    if !a.contains(x) {
        return Err(ModelError::StartOutsideDomain);
    }
    let center = a.ball_meta().map(|(c, _)| c).unwrap_or_else(|| a.center());
    let radius = a.radius_about(g, &center);
    let min_rho = (2.0 * radius).max(2.0);
    if kill_radius <= min_rho {
        return Err(ModelError::KillRadiusTooSmall { rho: kill_radius, min: min_rho });
    }
    // Per-walk streams derived from one base seed, so common random numbers
    // across nested kill radii reuse identical paths.
    let base = rng.next_u64();
    let mut escapes = 0u64;
    for k in 0..n_samples {
        let mut walk_rng: ChaCha8Rng = stream(base, &[stream_id::WALK, k]);
        if escape_sample(g, x, a, &center, kill_radius, &mut walk_rng)? {
            escapes += 1;
        }
    }
    let p = escapes as f64 / n_samples as f64;
    let eps_ret = return_correction(g, radius, kill_radius);
    let eps_stat = 3.0 * (p * (1.0 - p) / n_samples as f64).sqrt().max(1.0 / n_samples as f64);
    let bracket = Bracket::new(p - eps_ret - eps_stat, p + eps_stat).clamp_unit();
    Ok(EscapeEstimate { point_estimate: p, bracket, n_samples, kill_radius })
}

/// One escape sample: true iff the walk from `x` leaves the kill ball before
/// returning to `a` (the start itself does not count as a return).
pub fn escape_sample(
    g: &GraphSpec,
    x: &Site,
    a: &SiteSet,
    kill_center: &Site,
    kill_radius: f64,
    rng: &mut impl Rng,
) -> Result<bool> {
    let first = step(g, x, rng)?;
    let rho2 = kill_radius * kill_radius + 1e-9;
    if (first.dist2(kill_center) as f64) > rho2 {
        return Ok(true);
    }
    if a.contains(&first) {
        return Ok(false);
    }
    let mut returned = false;
    let (outcome, _) = walk_killed(
        g,
        &first,
        kill_center,
        kill_radius,
        DEFAULT_MAX_STEPS,
        rng,
        |s| {
            if a.contains(s) {
                returned = true;
                false
            } else {
                true
            }
        },
    )?;
    match outcome {
        KilledOutcome::Stopped => Ok(!returned),
        KilledOutcome::Killed => Ok(true),
        KilledOutcome::Truncated => Err(ModelError::SolverStalled {
            tol: 0.0,
            max_iter: DEFAULT_MAX_STEPS as usize,
            residual: f64::NAN,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_lattice, DistanceKind};
    use crate::linalg::{csr_solve, killed_laplacian, Domain};
    use crate::rng::stream;

    #[test]
    fn step_uniform_chi_square() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        let mut rng = stream(7, &[stream_id::WALK, 0]);
        let mut counts = [0u64; 6];
        let n = 1_000_000u64;
        for _ in 0..n {
            let y = step(&g, &o, &mut rng).unwrap();
            let axis = (0..3).find(|&i| y.coord(i) != 0).unwrap();
            let idx = 2 * axis + if y.coord(axis) > 0 { 0 } else { 1 };
            counts[idx] += 1;
        }
        let expect = n as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 5 degrees of freedom; chi2 < 20.5 holds with p > 0.999.
        assert!(chi2 < 20.5, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn step_weighted_two_site() {
        let text = "\
dim 3
site 0 0 0 0
site 1 1 0 0
site 2 0 1 0
edge 0 1 2.0
edge 0 2 1.0
";
        let g = GraphSpec::from_description(text, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        let mut rng = stream(11, &[stream_id::WALK, 1]);
        let n = 300_000;
        let mut to_b = 0u64;
        for _ in 0..n {
            if step(&g, &o, &mut rng).unwrap() == Site::new(&[1, 0, 0]) {
                to_b += 1;
            }
        }
        let p = to_b as f64 / n as f64;
        assert!((p - 2.0 / 3.0).abs() < 0.005, "p = {p}");
    }

    #[test]
    fn step_empirical_kernel_random_graph() {
        // 5-site weighted graph; empirical kernel matches w_xy / lambda_x.
        let text = "\
dim 3
site 0 0 0 0
site 1 1 0 0
site 2 0 1 0
site 3 -1 0 0
site 4 0 0 1
edge 0 1 0.7
edge 0 2 1.9
edge 0 3 0.3
edge 0 4 2.1
edge 1 2 1.0
";
        let g = GraphSpec::from_description(text, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        let lambda = g.lambda(&o);
        let mut rng = stream(13, &[stream_id::WALK, 2]);
        let n = 400_000u64;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(step(&g, &o, &mut rng).unwrap()).or_insert(0u64) += 1;
        }
        for (y, w) in g.neighbors(&o) {
            let expect = w / lambda;
            let got = *counts.get(&y).unwrap_or(&0) as f64 / n as f64;
            assert!((got - expect).abs() < 4.0 * (expect / n as f64).sqrt() + 1e-3);
        }
    }

    #[test]
    fn singleton_domain_exits_in_one_step() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        let domain = SiteSet::singleton(o);
        let mut rng = stream(3, &[stream_id::WALK, 0]);
        let t = run_until_exit(&g, &o, &domain, &mut rng, 100).unwrap();
        assert_eq!(t.steps, 1);
        assert_eq!(t.path.len(), 2);
        assert_eq!(t.path[0], o);
        assert!(t.exit_site.is_some());
        assert!(!domain.contains(&t.exit_site.unwrap()));
        assert_eq!(t.exit_site.unwrap().l1(&o), 1);
    }

    #[test]
    fn trace_invariants() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let domain = g.ball(&Site::origin(3), 5.0);
        for k in 0..20 {
            let mut rng = stream(99, &[stream_id::WALK, k]);
            let t = run_until_exit(&g, &Site::origin(3), &domain, &mut rng, 1_000_000).unwrap();
            assert!(!t.truncated);
            // visited = distinct path sites.
            assert_eq!(t.visited.len(), {
                let mut v: Vec<Site> = t.path.clone();
                v.sort_unstable();
                v.dedup();
                v.len()
            });
            assert!(t.path.contains(&Site::origin(3)));
            let exit = t.exit_site.unwrap();
            assert!(!domain.contains(&exit));
            // exit adjacent to the last in-domain site.
            let last_in = t.path[t.path.len() - 2];
            assert_eq!(exit.l1(&last_in), 1);
            // everything else in the domain.
            for s in &t.path[..t.path.len() - 1] {
                assert!(domain.contains(s));
            }
        }
    }

    #[test]
    fn mean_exit_time_matches_poisson_solve() {
        // Oracle: E_x[T] solves (I - P) t = 1, i.e. L t = lambda * 1.
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let ball = g.ball(&Site::origin(3), 5.0);
        let domain = Domain::new(ball.sites().to_vec()).unwrap();
        let mat = killed_laplacian(&g, &domain).unwrap();
        let b = vec![6.0; mat.n];
        let t_exact = csr_solve(&mat, &b, 1e-11, 20_000).unwrap();
        let t0 = t_exact[domain.index(&Site::origin(3)).unwrap()];

        let n = 20_000u64;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for k in 0..n {
            let mut rng = stream(5, &[stream_id::WALK, k]);
            let tr = run_until_exit(&g, &Site::origin(3), &ball, &mut rng, 10_000_000).unwrap();
            let s = tr.steps as f64;
            sum += s;
            sum_sq += s * s;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - t0).abs() <= 3.0 * se,
            "mean {mean} vs exact {t0}, se {se}"
        );
    }

    #[test]
    fn trace_determinism() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let domain = g.ball(&Site::origin(3), 6.0);
        let run = || {
            let mut rng = stream(21, &[stream_id::WALK, 4]);
            run_until_exit(&g, &Site::origin(3), &domain, &mut rng, 1_000_000).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.path, b.path);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn escape_near_absorbing_is_tiny() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        // A = ball(0, rho/2 - 1) with a barely larger kill ball: escaping
        // requires threading the thin boundary layer without touching A.
        let a = g.ball(&Site::origin(3), 4.0);
        let est = escape_probability(&g, &Site::origin(3), &a, 9.0, 2_000, &mut stream(1, &[1]))
            .unwrap();
        assert!(est.point_estimate < 0.05, "escape {est:?}");
        assert!(est.bracket.lower <= est.point_estimate);
    }

    #[test]
    fn escape_from_origin_matches_killed_solve_oracle() {
        // Oracle: P_0(no return) = 1 / (lambda g(0,0)); g(0,0) by Richardson
        // extrapolation of killed solves at rho in {12, 24}.
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let g_killed = |rho: f64| -> f64 {
            let ball = g.ball(&Site::origin(3), rho);
            let domain = Domain::new(ball.sites().to_vec()).unwrap();
            let mat = killed_laplacian(&g, &domain).unwrap();
            let mut b = vec![0.0; mat.n];
            b[domain.index(&Site::origin(3)).unwrap()] = 1.0;
            let u = csr_solve(&mat, &b, 1e-11, 20_000).unwrap();
            u[domain.index(&Site::origin(3)).unwrap()]
        };
        let (g1, g2) = (g_killed(12.0), g_killed(24.0));
        let g_extrap = 2.0 * g2 - g1;
        // Frozen reference: G(0)/6 with G(0) = 1.5164 the expected visits.
        assert!((g_extrap - 0.2527).abs() < 0.002, "g(0,0) extrapolated {g_extrap}");
        let p_oracle = 1.0 / (6.0 * g_extrap);
        assert!((p_oracle - 0.6595).abs() < 0.005);

        let a = SiteSet::singleton(Site::origin(3));
        let est =
            escape_probability(&g, &Site::origin(3), &a, 30.0, 20_000, &mut stream(8, &[2]))
                .unwrap();
        assert!(est.bracket.contains(p_oracle), "bracket {:?} vs {p_oracle}", est.bracket);
        let se = (0.25f64 / 20_000.0).sqrt();
        let eps_ret = return_correction(&g, 1.0, 30.0);
        assert!((est.point_estimate - p_oracle).abs() <= 3.0 * se + eps_ret);
    }

    #[test]
    fn escape_two_adjacent_sites_matches_exact_solve() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let a = SiteSet::from_sites(vec![Site::origin(3), Site::new(&[1, 0, 0])]);
        let x = Site::origin(3);
        // Exact oracle on the radius-30 killed ball: solve
        // phi(y) = P_y(H_A < T_ball) on ball \ A, then
        // P_x(no return before kill) = sum_y p(x,y) (1 - phi(y)), phi = 1 on A.
        let rho = 30.0;
        let ball = g.ball(&a.center(), rho);
        let solve_sites: Vec<Site> =
            ball.iter().filter(|s| !a.contains(s)).copied().collect();
        let domain = Domain::new(solve_sites).unwrap();
        let mat = killed_laplacian(&g, &domain).unwrap();
        let mut b = vec![0.0; mat.n];
        for (i, s) in domain.sites().iter().enumerate() {
            g.for_each_neighbor(s, |y, w| {
                if a.contains(&y) {
                    b[i] += w;
                }
            });
        }
        let phi = csr_solve(&mat, &b, 1e-11, 40_000).unwrap();
        let mut p_exact = 0.0;
        g.for_each_neighbor(&x, |y, w| {
            let phi_y = if a.contains(&y) {
                1.0
            } else {
                domain.index(&y).map(|i| phi[i]).unwrap_or(0.0)
            };
            p_exact += (w / g.lambda(&x)) * (1.0 - phi_y);
        });
        let est = escape_probability(&g, &x, &a, rho, 20_000, &mut stream(17, &[3])).unwrap();
        assert!(
            est.bracket.contains(p_exact),
            "bracket {:?} vs exact {p_exact}",
            est.bracket
        );
    }

    #[test]
    fn killed_escape_monotone_in_rho_with_crn() {
        // Common random numbers: the per-walk escape indicator is
        // nonincreasing in rho on the same path, so the estimates are ordered.
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let a = SiteSet::singleton(Site::origin(3));
        let radii = [8.0, 16.0, 32.0];
        let mut prev: Option<EscapeEstimate> = None;
        for &rho in &radii {
            let est =
                escape_probability(&g, &Site::origin(3), &a, rho, 4_000, &mut stream(42, &[9]))
                    .unwrap();
            if let Some(p) = &prev {
                assert!(
                    est.point_estimate <= p.point_estimate + 1e-12,
                    "estimate not monotone: {} then {}",
                    p.point_estimate,
                    est.point_estimate
                );
                assert!(est.bracket.width() <= p.bracket.width() + 3.0 * (0.25f64 / 4000.0).sqrt());
            }
            prev = Some(est);
        }
    }

    #[test]
    fn kill_radius_too_small_rejected() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let a = g.ball(&Site::origin(3), 5.0);
        let r = escape_probability(&g, &Site::origin(3), &a, 8.0, 10, &mut stream(0, &[0]));
        assert!(matches!(r, Err(ModelError::KillRadiusTooSmall { .. })));
    }
}

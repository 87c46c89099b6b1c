//! Discrete potential theory: Green functions, equilibrium measures,
//! capacities, hitting probabilities, the F_nu scaling function, and the exact
//! Laplace-functional predictions for interlacement local times.
//!
//! Exact quantities are computed on a killed ball B = B(center, rho).  Killing
//! biases Green values down and capacities up; every result carries a bracket
//! built from the declared far-field constants, and a Richardson-style
//! extrapolation in 1/rho refines the point value where two radii fit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::bracket::Bracket;
use crate::error::{ModelError, Result};
use crate::graph::{GraphSpec, ScalingConstants, SiteSet};
use crate::linalg::{csr_solve, killed_laplacian, BallGrid3, Domain};
use crate::site::Site;
use crate::walk::{walk_killed, KilledOutcome, DEFAULT_MAX_STEPS};

/// Computation method shared by Green and capacity estimators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Linear solve on the killed ball; `tol` is the relative CG residual.
    ExactKilledSolve { kill_radius: f64, tol: f64 },
    /// Killed-walk Monte Carlo with `n_samples` total walks.
    MonteCarlo { kill_radius: f64, n_samples: u64 },
}

impl Method {
    pub fn exact(kill_radius: f64) -> Self {
        Method::ExactKilledSolve { kill_radius, tol: 1e-12 }
    }

    pub fn monte_carlo(kill_radius: f64, n_samples: u64) -> Self {
        Method::MonteCarlo { kill_radius, n_samples }
    }

    pub fn kill_radius(&self) -> f64 {
        match self {
            Method::ExactKilledSolve { kill_radius, .. } => *kill_radius,
            Method::MonteCarlo { kill_radius, .. } => *kill_radius,
        }
    }

    fn tag(&self) -> MethodTag {
        match self {
            Method::ExactKilledSolve { .. } => MethodTag::ExactKilledSolve,
            Method::MonteCarlo { .. } => MethodTag::MonteCarlo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum MethodTag {
    ExactKilledSolve,
    MonteCarlo,
}

/// A scalar estimate with its truncation/statistics bracket.
#[derive(Clone, Copy, Debug)]
pub struct GreenValue {
    pub value: f64,
    pub bracket: Bracket,
    pub kill_radius: Option<f64>,
}

const MAX_CG_ITER: usize = 200_000;

/// A solved killed-Green field: values of y -> g_B(., y) readable anywhere.
enum Field {
    Csr { domain: Domain, u: Vec<f64> },
    Grid { grid: BallGrid3, u: Vec<f64> },
}

impl Field {
    fn at(&self, s: &Site) -> f64 {
        match self {
            Field::Csr { domain, u } => domain.index(s).map(|i| u[i]).unwrap_or(0.0),
            Field::Grid { grid, u } => {
                grid.index_site(s).map(|i| u[i]).unwrap_or(0.0)
            }
        }
    }
}

/// Solves L u = b_fn over the closed ball B(center, rho) with Dirichlet
/// outside; routes big Z^3 balls through the matrix-free stencil.
fn solve_on_ball(
    g: &GraphSpec,
    center: &Site,
    rho: f64,
    tol: f64,
    b_fn: impl Fn(&Site) -> f64,
) -> Result<Field> {
    let use_grid = match g.as_lattice() {
        Some((3, _)) => rho >= 25.0,
        _ => false,
    };
    if use_grid {
        let (_, w) = g.as_lattice().unwrap();
        let grid = BallGrid3::new(center, rho)?;
        let mut b = vec![0.0; grid.len()];
        grid_fill(&grid, center, rho, &mut b, &b_fn);
        if b.iter().all(|&v| v == 0.0) {
            return Ok(Field::Grid { grid, u: b });
        }
        let u = grid.solve(w, &b, tol, MAX_CG_ITER)?;
        Ok(Field::Grid { grid, u })
    } else {
        let ball = g.ball(center, rho);
        let domain = Domain::new(ball.sites().to_vec())?;
        let mat = killed_laplacian(g, &domain)?;
        let b: Vec<f64> = domain.sites().iter().map(&b_fn).collect();
        if b.iter().all(|&v| v == 0.0) {
            return Ok(Field::Csr { domain, u: b });
        }
        let u = csr_solve(&mat, &b, tol, MAX_CG_ITER)?;
        Ok(Field::Csr { domain, u })
    }
}

fn grid_fill(
    grid: &BallGrid3,
    center: &Site,
    rho: f64,
    b: &mut [f64],
    b_fn: &impl Fn(&Site) -> f64,
) {
    let r = rho.ceil() as i32;
    for z in center.coord(2) - r..=center.coord(2) + r {
        for y in center.coord(1) - r..=center.coord(1) + r {
            for x in center.coord(0) - r..=center.coord(0) + r {
                if let Some(i) = grid.index(x, y, z) {
                    let v = b_fn(&Site::new(&[x, y, z]));
                    if v != 0.0 {
                        b[i] = v;
                    }
                }
            }
        }
    }
}

fn midpoint(x: &Site, y: &Site) -> Site {
    let d = x.dim();
    let cs: Vec<i32> = (0..d).map(|i| (x.coord(i) + y.coord(i)).div_euclid(2)).collect();
    Site::new(&cs)
}

/// Additive truncation bound: g(x,y) - g_B(x,y) <= C_G / (rho - r_y)^nu where
/// r_y is the distance from y to the ball center.
fn green_truncation_bound(g: &GraphSpec, rho: f64, r_y: f64) -> f64 {
    let c = g.constants();
    let gap = (rho - r_y).max(1.0);
    c.c_g_upper / gap.powf(c.nu)
}

/// Green function g(x, y), the expected visits to y divided by lambda_y;
/// solves L g(., y) = delta_y.
pub fn green(
    g: &GraphSpec,
    x: &Site,
    y: &Site,
    method: &Method,
    rng: &mut impl Rng,
) -> Result<GreenValue> {
    match *method {
        Method::ExactKilledSolve { kill_radius, tol } => green_exact(g, x, y, kill_radius, tol),
        Method::MonteCarlo { kill_radius, n_samples } => {
            green_mc(g, x, y, kill_radius, n_samples, rng)
        }
    }
}

/// Exact killed solves at rho/2 and rho around the midpoint of (x, y); the
/// bracket is [g_rho, g_rho + truncation bound] and the point value is the
/// 1/rho Richardson extrapolation clamped into the bracket.
pub fn green_exact(g: &GraphSpec, x: &Site, y: &Site, rho: f64, tol: f64) -> Result<GreenValue> {
    let center = midpoint(x, y);
    let r_max = g.distance(&center, x).max(g.distance(&center, y));
    if rho / 2.0 <= r_max + 2.0 {
        return Err(ModelError::KillRadiusTooSmall { rho, min: 2.0 * (r_max + 2.0) });
    }
    let solve = |radius: f64| -> Result<f64> {
        let field = solve_on_ball(g, &center, radius, tol, |s| if s == y { 1.0 } else { 0.0 })?;
        Ok(field.at(x))
    };
    let g_half = solve(rho / 2.0)?;
    let g_full = solve(rho)?;
    let bound = green_truncation_bound(g, rho, g.distance(&center, y));
    let bracket = Bracket::new(g_full - tol.max(1e-12), g_full + bound);
    let extrap = (2.0 * g_full - g_half).clamp(bracket.lower, bracket.upper);
    Ok(GreenValue { value: extrap, bracket, kill_radius: Some(rho) })
}

/// Monte Carlo Green estimate: visits to y by the walk from x killed at
/// B(x, rho), divided by lambda_y.
pub fn green_mc(
    g: &GraphSpec,
    x: &Site,
    y: &Site,
    rho: f64,
    n_samples: u64,
    rng: &mut impl Rng,
) -> Result<GreenValue> {
    let dist = g.distance(x, y);
    if rho <= dist + 2.0 {
        return Err(ModelError::KillRadiusTooSmall { rho, min: dist + 2.0 });
    }
    if n_samples == 0 {
        return Err(ModelError::BadParameter("n_samples must be positive".into()));
    }
    let lambda_y = g.lambda(y);
    if lambda_y <= 0.0 {
        return Err(ModelError::IsolatedSite(format!("{:?}", y.coords())));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let mut visits = 0u64;
        let (outcome, _) = walk_killed(g, x, x, rho, DEFAULT_MAX_STEPS, rng, |s| {
            if s == y {
                visits += 1;
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
        let v = visits as f64 / lambda_y;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n_samples as f64;
    let var = (sum_sq / n_samples as f64 - mean * mean).max(0.0);
    let se = (var / n_samples as f64).sqrt();
    let bound = green_truncation_bound(g, rho, dist);
    let bracket = Bracket::new(mean - 3.0 * se, mean + 3.0 * se + bound);
    Ok(GreenValue { value: mean, bracket, kill_radius: Some(rho) })
}

/// Pairwise Green values on a finite domain.
///
/// Exact tables hold the *raw* killed values g_B(x, y) at the stated kill
/// radius (no extrapolation), so killed-ball identities like
/// energy(equilibrium) * capacity = 1 hold to solver accuracy; `bias_upper`
/// bounds the uniform downward truncation bias.
#[derive(Clone, Debug)]
pub struct GreenTable {
    sites: Vec<Site>,
    index: crate::site::PackedMap<u32>,
    values: Vec<f64>,
    pub method: MethodTag,
    pub kill_radius: Option<f64>,
    pub bias_upper: f64,
}

impl GreenTable {
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, x: &Site, y: &Site) -> Result<f64> {
        let i = self
            .index
            .get(&x.packed())
            .ok_or_else(|| ModelError::UnknownSite(format!("{:?}", x.coords())))?;
        let j = self
            .index
            .get(&y.packed())
            .ok_or_else(|| ModelError::UnknownSite(format!("{:?}", y.coords())))?;
        Ok(self.values[*i as usize * self.sites.len() + *j as usize])
    }
}

/// Builds the Green table over `sites`; the kill ball is centered at the
/// bounding-box center of the domain and must leave a margin of 2.
pub fn green_table(
    g: &GraphSpec,
    sites: &SiteSet,
    method: &Method,
    rng: &mut impl Rng,
) -> Result<GreenTable> {
    if sites.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let center = sites.center();
    let r_dom = sites.radius_about(g, &center);
    let rho = method.kill_radius();
    if rho <= r_dom + 2.0 {
        return Err(ModelError::KillRadiusTooSmall { rho, min: r_dom + 2.0 });
    }
    let n = sites.len();
    let site_list: Vec<Site> = sites.sites().to_vec();
    let mut index = crate::site::PackedMap::default();
    for (i, s) in site_list.iter().enumerate() {
        index.insert(s.packed(), i as u32);
    }
    let mut values = vec![0.0; n * n];
    match *method {
        Method::ExactKilledSolve { tol, .. } => {
            for (j, y) in site_list.iter().enumerate() {
                let field =
                    solve_on_ball(g, &center, rho, tol, |s| if s == y { 1.0 } else { 0.0 })?;
                for (i, x) in site_list.iter().enumerate() {
                    values[i * n + j] = field.at(x);
                }
            }
        }
        Method::MonteCarlo { n_samples, .. } => {
            let per_site = (n_samples / n as u64).max(1);
            for (i, x) in site_list.iter().enumerate() {
                let mut visit_counts = vec![0u64; n];
                for _ in 0..per_site {
                    walk_killed(g, x, &center, rho, DEFAULT_MAX_STEPS, rng, |s| {
                        if let Some(&j) = index.get(&s.packed()) {
                            visit_counts[j as usize] += 1;
                        }
                        true
                    })?;
                }
                for (j, y) in site_list.iter().enumerate() {
                    values[i * n + j] =
                        visit_counts[j] as f64 / (per_site as f64 * g.lambda(y));
                }
            }
        }
    }
    Ok(GreenTable {
        sites: site_list,
        index,
        values,
        method: method.tag(),
        kill_radius: Some(rho),
        bias_upper: green_truncation_bound(g, rho, r_dom),
    })
}

/// Capacity estimate with equilibrium measure.
///
/// `value` is the killed-ball capacity (an upper-biased exact functional of
/// the kill radius); `extrapolated` refines it by Richardson extrapolation
/// when a half-radius computation fits.  The equilibrium weights sum to
/// `value` and are supported on A.
#[derive(Clone, Debug)]
pub struct CapacityEstimate {
    pub value: f64,
    pub bracket: Bracket,
    pub method: MethodTag,
    pub equilibrium: Option<Vec<(Site, f64)>>,
    pub extrapolated: Option<f64>,
    pub kill_radius: f64,
    pub n_samples: Option<u64>,
}

impl CapacityEstimate {
    /// The probability measure e_A / cap(A).
    pub fn normalized_equilibrium(&self) -> Result<Vec<(Site, f64)>> {
        let eq = self.equilibrium.as_ref().ok_or(ModelError::MissingEquilibrium)?;
        if self.value <= 0.0 {
            return Err(ModelError::BadMeasure("zero capacity".into()));
        }
        Ok(eq.iter().map(|&(s, w)| (s, w / self.value)).collect())
    }
}

/// Relative return bias of the killed capacity: cap >= cap_kill (1 - eps)
/// with eps = sup over the kill sphere of P(H_A < infinity).  The product
/// C_G * cap is scale-invariant (Green values scale like 1/w, capacities
/// like w), so no weight normalization is needed.
fn capacity_bias(g: &GraphSpec, cap_kill: f64, radius: f64, rho: f64) -> f64 {
    let c = g.constants();
    let gap = (rho - radius).max(1.0);
    (c.c_g_upper * cap_kill / gap.powf(c.nu)).min(1.0)
}

/// Equilibrium measure and capacity of a finite set A.
pub fn equilibrium_and_capacity(
    g: &GraphSpec,
    a: &SiteSet,
    method: &Method,
    rng: &mut impl Rng,
) -> Result<CapacityEstimate> {
    if a.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let center = a.ball_meta().map(|(c, _)| c).unwrap_or_else(|| a.center());
    let radius = a.radius_about(g, &center);
    let rho = method.kill_radius();
    if rho <= radius + 2.0 {
        return Err(ModelError::KillRadiusTooSmall { rho, min: radius + 2.0 });
    }
    match *method {
        Method::ExactKilledSolve { tol, .. } => {
            let (cap_full, eq) = exact_killed_capacity(g, a, &center, rho, tol)?;
            let extrapolated = if rho / 2.0 > radius + 2.0 {
                let (cap_half, _) = exact_killed_capacity(g, a, &center, rho / 2.0, tol)?;
                Some((2.0 * cap_full - cap_half).max(0.0))
            } else {
                None
            };
            let eps = capacity_bias(g, cap_full, radius, rho);
            Ok(CapacityEstimate {
                value: cap_full,
                bracket: Bracket::new((cap_full * (1.0 - eps)).max(0.0), cap_full),
                method: MethodTag::ExactKilledSolve,
                equilibrium: Some(eq),
                extrapolated,
                kill_radius: rho,
                n_samples: None,
            })
        }
        Method::MonteCarlo { n_samples, .. } => {
            mc_capacity(g, a, &center, radius, rho, n_samples, rng)
        }
    }
}

/// Killed capacity by one boundary-value solve: phi = P_.(H_A < T_B) on
/// B \ A, then e(a) = sum_{y not in A} w(a,y) (1 - phi(y)).
fn exact_killed_capacity(
    g: &GraphSpec,
    a: &SiteSet,
    center: &Site,
    rho: f64,
    tol: f64,
) -> Result<(f64, Vec<(Site, f64)>)> {
    let ball = g.ball(center, rho);
    let solve_sites: Vec<Site> = ball.iter().filter(|s| !a.contains(s)).copied().collect();
    let domain = Domain::new(solve_sites)?;
    let mat = killed_laplacian(g, &domain)?;
    let mut b = vec![0.0; mat.n];
    for (i, s) in domain.sites().iter().enumerate() {
        g.for_each_neighbor(s, |y, w| {
            if a.contains(&y) {
                b[i] += w;
            }
        });
    }
    let phi = csr_solve(&mat, &b, tol, MAX_CG_ITER)?;
    let mut eq = Vec::with_capacity(a.len());
    let mut cap = 0.0;
    for s in a.iter() {
        let mut e = 0.0;
        g.for_each_neighbor(s, |y, w| {
            if !a.contains(&y) {
                let phi_y = domain.index(&y).map(|i| phi[i]).unwrap_or(0.0);
                e += w * (1.0 - phi_y);
            }
        });
        e = e.max(0.0);
        cap += e;
        eq.push((*s, e));
    }
    Ok((cap, eq))
}

/// Stratified Monte Carlo capacity: k walks from each site of A, killed at
/// rho, with the rho/2 crossing recorded on the same path for the Richardson
/// refinement (common random numbers).
fn mc_capacity(
    g: &GraphSpec,
    a: &SiteSet,
    center: &Site,
    radius: f64,
    rho: f64,
    n_samples: u64,
    rng: &mut impl Rng,
) -> Result<CapacityEstimate> {
    let k = (n_samples / a.len() as u64).max(1);
    let rho_half = rho / 2.0;
    let use_half = rho_half > radius + 2.0;
    let half2 = rho_half * rho_half + 1e-9;
    let mut cap_full = 0.0;
    let mut cap_half = 0.0;
    let mut var_sum = 0.0;
    let mut eq = Vec::with_capacity(a.len());
    for s in a.iter() {
        let lambda = g.lambda(s);
        if lambda <= 0.0 {
            return Err(ModelError::IsolatedSite(format!("{:?}", s.coords())));
        }
        let mut esc_full = 0u64;
        let mut esc_half = 0u64;
        for _ in 0..k {
            let first = crate::walk::step(g, s, rng)?;
            if a.contains(&first) {
                continue;
            }
            let mut hit = false;
            let mut crossed_half = (first.dist2(center) as f64) > half2;
            let (outcome, _) =
                walk_killed(g, &first, center, rho, DEFAULT_MAX_STEPS, rng, |y| {
                    if a.contains(y) {
                        hit = true;
                        return false;
                    }
                    if (y.dist2(center) as f64) > half2 {
                        crossed_half = true;
                    }
                    true
                })?;
            match outcome {
                KilledOutcome::Stopped => {}
                KilledOutcome::Killed => {
                    esc_full += 1;
                    crossed_half = true;
                }
                KilledOutcome::Truncated => {
                    return Err(ModelError::SolverStalled {
                        tol: 0.0,
                        max_iter: DEFAULT_MAX_STEPS as usize,
                        residual: f64::NAN,
                    })
                }
            }
            // Crossing rho/2 before returning to A is exactly the half-radius
            // escape event, whether or not the walk later returned.
            if crossed_half {
                esc_half += 1;
            }
        }
        let p_full = esc_full as f64 / k as f64;
        let p_half = esc_half as f64 / k as f64;
        cap_full += lambda * p_full;
        cap_half += lambda * p_half;
        var_sum += lambda * lambda * p_full * (1.0 - p_full) / k as f64;
        eq.push((*s, lambda * p_full));
    }
    let se = var_sum.sqrt();
    let eps = capacity_bias(g, cap_full, radius, rho);
    let extrapolated = if use_half { Some((2.0 * cap_full - cap_half).max(0.0)) } else { None };
    Ok(CapacityEstimate {
        value: cap_full,
        bracket: Bracket::new(
            (cap_full * (1.0 - eps) - 3.0 * se).max(0.0),
            cap_full + 3.0 * se,
        ),
        method: MethodTag::MonteCarlo,
        equilibrium: Some(eq),
        extrapolated,
        kill_radius: rho,
        n_samples: Some(k * a.len() as u64),
    })
}

/// Dirichlet energy of a probability measure against a Green table:
/// sum_{x,y} g(x,y) mu(x) mu(y).
pub fn energy(mu: &[(Site, f64)], table: &GreenTable) -> Result<f64> {
    let total: f64 = mu.iter().map(|&(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(ModelError::BadMeasure(format!("mass {total} != 1")));
    }
    if mu.iter().any(|&(_, w)| w < -1e-12) {
        return Err(ModelError::BadMeasure("negative weight".into()));
    }
    let mut acc = 0.0;
    for &(x, wx) in mu {
        for &(y, wy) in mu {
            acc += table.get(&x, &y)? * wx * wy;
        }
    }
    Ok(acc)
}

/// Hitting probability P_x(H_A < infinity) via the equilibrium identity
/// sum_y g(x,y) e_A(y), evaluated with the same kill radius as the capacity
/// estimate so the interior identity (= 1 on A) is exact.
pub fn hitting_probability(
    g: &GraphSpec,
    x: &Site,
    a: &SiteSet,
    cap_est: &CapacityEstimate,
) -> Result<GreenValue> {
    let eq = cap_est.equilibrium.as_ref().ok_or(ModelError::MissingEquilibrium)?;
    let center = a.ball_meta().map(|(c, _)| c).unwrap_or_else(|| a.center());
    let rho = cap_est.kill_radius;
    if g.distance(&center, x) >= rho {
        return Err(ModelError::StartOutsideDomain);
    }
    let mut src = crate::site::PackedMap::default();
    for &(s, w) in eq {
        src.insert(s.packed(), w);
    }
    let field = solve_on_ball(g, &center, rho, 1e-12, |s| {
        src.get(&s.packed()).copied().unwrap_or(0.0)
    })?;
    let v = field.at(x);
    // Bias: the un-killed identity adds sum_y (g - g_B)(x,y) e(y), at most the
    // uniform Green gap times the capacity (a scale-invariant product).
    let bias = green_truncation_bound(g, rho, a.radius_about(g, &center)) * cap_est.value;
    let bracket = Bracket::new((v - 1e-9).max(0.0), (v + bias).min(1.0 + 1e-9));
    Ok(GreenValue { value: v, bracket, kill_radius: Some(rho) })
}

/// The scaling function F_nu(x, y) from the tube-capacity asymptotics.
pub fn f_nu(x: f64, y: f64, nu: f64) -> f64 {
    assert!(x > 0.0 && y > 0.0, "f_nu needs positive arguments");
    if nu < 1.0 {
        x.powf(nu)
    } else if nu == 1.0 {
        x / (x / y).ln().max(1.0)
    } else {
        x * y.powf(nu - 1.0)
    }
}

/// F_nu(x) = F_nu(x, 1).
pub fn f_nu1(x: f64, nu: f64) -> f64 {
    f_nu(x, 1.0, nu)
}

/// Tube-capacity report: the measured capacity of R_{N,p}, its normalized
/// ratio against the asymptotic formula, and both sides of the union-of-balls
/// capacity bounds evaluated on the axis decomposition.
#[derive(Clone, Debug)]
pub struct TubeReport {
    pub n: i64,
    pub p: i64,
    pub eta: f64,
    pub cap: CapacityEstimate,
    /// d=3: cap * 3 log(N/p) / (pi N lambda); d>=4: cap / (N p^{d-3} lambda).
    pub ratio: f64,
    pub ratio_bracket: Bracket,
    /// Lower bound from the union of P balls of radius p/4 along the axis.
    pub union_lower_bound: f64,
    /// Matching upper envelope C_beta (1+eta) F_nu(N, N/P).
    pub union_upper_envelope: Option<f64>,
    pub kappa: f64,
    pub n_balls: i64,
    pub d3_branch: bool,
}

/// Computes cap(R_{N,p}) and evaluates the tube-capacity asymptotics and the
/// union-of-balls bracket.
pub fn tube_capacity_check(
    g: &GraphSpec,
    n: i64,
    p: i64,
    eta: f64,
    method: &Method,
    rng: &mut impl Rng,
) -> Result<TubeReport> {
    if eta < 0.0 {
        return Err(ModelError::BadParameter("eta must be nonnegative".into()));
    }
    if n < 8 * p.max(1) {
        return Err(ModelError::WindowTooSmall(format!("need N >= 8p, got N={n}, p={p}")));
    }
    let tube = crate::graph::tube_sites(g, n, p)?;
    let cap = equilibrium_and_capacity(g, &tube, method, rng)?;
    let d = g.dim();
    let lambda = g.lambda(&Site::origin(d));
    let cap_point = cap.extrapolated.unwrap_or(cap.value);
    let (ratio, ratio_bracket, d3_branch) = if d == 3 {
        let norm = 3.0 * ((n as f64) / (p.max(1) as f64)).ln() / (std::f64::consts::PI * n as f64);
        (
            cap_point * norm / lambda,
            cap.bracket.scale(norm / lambda),
            true,
        )
    } else {
        let norm = 1.0 / (n as f64 * (p.max(1) as f64).powi(d as i32 - 3));
        (cap_point * norm / lambda, cap.bracket.scale(norm / lambda), false)
    };
    // Union-of-balls lower bound: P balls of radius p/4 spaced p along the
    // axis, kappa their common capacity, c_kappa = 1.
    let ball_r = (p as f64 / 4.0).max(1.0);
    let n_balls = (n / p.max(1) - 1).max(1);
    let kappa_est = equilibrium_and_capacity(
        g,
        &g.ball(&Site::origin(d), ball_r),
        &Method::exact((8.0 * ball_r).max(12.0)),
        rng,
    )?;
    let kappa = kappa_est.bracket.lower / lambda;
    let c = g.constants();
    let nu = c.nu;
    let f = f_nu(n as f64, n as f64 / n_balls as f64, nu);
    let union_lower = match c.c_beta {
        // c_beta carries the weight scale; divide by lambda since the bound is
        // assembled in normalized units and scaled back at the end.
        Some(c_beta) => {
            let denom = 1.0 / (kappa * n_balls as f64) + (1.0 + eta) / (c_beta / lambda * f);
            lambda / denom
        }
        // nu > 1: the log-free branch; only the kappa term is available.
        None => lambda * kappa * n_balls as f64 / (1.0 + eta),
    };
    let union_upper = c.c_beta_upper.map(|cb| lambda * cb * (1.0 + eta) * f);
    Ok(TubeReport {
        n,
        p,
        eta,
        cap,
        ratio,
        ratio_bracket,
        union_lower_bound: union_lower,
        union_upper_envelope: union_upper,
        kappa: kappa * lambda,
        n_balls,
        d3_branch,
    })
}

/// Exact Laplace-functional prediction for interlacement local times:
/// E[exp(sum_x V(x) l_{x,u})].
///
/// For V with a positive part the Neumann condition ||GV||_inf < 1 is checked
/// on the support and the prediction is exp(u <V, (I - GV)^{-1} 1>).  For
/// V = -W <= 0 the always-convergent form
/// exp(-u <sqrt(W), (I + sqrt(W) G sqrt(W))^{-1} sqrt(W)>) is used after
/// verifying positive definiteness.
pub fn laplace_functional_prediction(
    table: &GreenTable,
    v: &[(Site, f64)],
    u: f64,
) -> Result<f64> {
    if u < 0.0 {
        return Err(ModelError::BadParameter("intensity u must be nonnegative".into()));
    }
    let support: Vec<(Site, f64)> = v.iter().copied().filter(|&(_, w)| w != 0.0).collect();
    if support.is_empty() {
        return Ok(1.0);
    }
    let n = support.len();
    let all_nonpositive = support.iter().all(|&(_, w)| w < 0.0);
    if all_nonpositive {
        // M = I + S G S with S = diag(sqrt(-V)); prediction
        // exp(-u <s, M^{-1} s>).
        let mut m = DMatrix::zeros(n, n);
        let s: Vec<f64> = support.iter().map(|&(_, w)| (-w).sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                let gij = table.get(&support[i].0, &support[j].0)?;
                m[(i, j)] = s[i] * gij * s[j] + if i == j { 1.0 } else { 0.0 };
            }
        }
        let eig = m.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
            return Err(ModelError::SpectralPrecondition(
                "I + sqrt(W) G sqrt(W) is not positive definite".into(),
            ));
        }
        let rhs = DVector::from_vec(s.clone());
        let sol = crate::linalg::dense_solve(m, rhs)?;
        let quad: f64 = s.iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
        Ok((-u * quad).exp())
    } else {
        // Check ||GV||_inf < 1 on the support (the row sums of |G V| are
        // maximized there: g(., y) is largest near y).
        let mut max_row = 0.0f64;
        for &(x, _) in &support {
            let mut row = 0.0;
            for &(y, wy) in &support {
                row += table.get(&x, &y)?.abs() * wy.abs();
            }
            max_row = max_row.max(row);
        }
        if max_row >= 1.0 {
            return Err(ModelError::SpectralPrecondition(format!(
                "||GV||_inf = {max_row:.4} >= 1"
            )));
        }
        // Solve (I - GV) w = 1 on the support.
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let gij = table.get(&support[i].0, &support[j].0)?;
                m[(i, j)] = if i == j { 1.0 } else { 0.0 } - gij * support[j].1;
            }
        }
        let sol = crate::linalg::dense_solve(m, DVector::from_element(n, 1.0))?;
        let inner: f64 = support.iter().zip(sol.iter()).map(|(&(_, w), &x)| w * x).sum();
        Ok((u * inner).exp())
    }
}

/// Empirically calibrated scaling constants: ball capacities at small radii
/// tighten the declared c_cap/C_cap window.
pub fn calibrated_constants(g: &GraphSpec) -> Result<ScalingConstants> {
    let mut c = g.constants().clone();
    let d = g.dim();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let radii: &[f64] = if d == 3 { &[2.0, 3.0, 4.0, 6.0] } else { &[2.0, 3.0, 4.0] };
    let mut dummy = crate::rng::stream(0, &[crate::rng::stream_id::CALIBRATION]);
    for &r in radii {
        let ball = g.ball(&Site::origin(d), r);
        let est = equilibrium_and_capacity(g, &ball, &Method::exact(6.0 * r), &mut dummy)?;
        // Graph-weight units throughout, matching the declared constants.
        lo = lo.min(est.bracket.lower / r.powf(c.nu));
        hi = hi.max(est.bracket.upper / r.powf(c.nu));
    }
    // Margin for radii outside the calibration window.
    c.c_cap_lower = 0.6 * lo;
    c.c_cap_upper = 1.6 * hi;
    c.calibrated = true;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_lattice, DistanceKind};
    use crate::rng::{stream, stream_id};

    fn z3() -> GraphSpec {
        make_lattice(3, DistanceKind::Euclidean).unwrap()
    }

    #[test]
    fn f_nu_piecewise() {
        assert!((f_nu(std::f64::consts::E, 1.0, 1.0) - std::f64::consts::E).abs() < 1e-12);
        assert!((f_nu(4.0, 1.0, 0.5) - 2.0).abs() < 1e-12);
        assert!((f_nu(3.0, 5.0, 2.0) - 15.0).abs() < 1e-12);
        assert!((f_nu1(10.0, 1.0) - 10.0 / 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn green_origin_value() {
        let g = z3();
        let mut rng = stream(0, &[0]);
        let o = Site::origin(3);
        let est = green(&g, &o, &o, &Method::exact(48.0), &mut rng).unwrap();
        // G(0)/6 with G(0) = 1.5164 expected visits to the origin.
        assert!((est.value - 0.25273).abs() < 5e-4, "g(0,0) = {}", est.value);
        assert!(est.bracket.contains(0.25273), "bracket {:?}", est.bracket);
    }

    #[test]
    fn green_symmetry_random_pairs() {
        let g = z3();
        let sites = SiteSet::from_sites(vec![
            Site::new(&[0, 0, 0]),
            Site::new(&[2, 1, 0]),
            Site::new(&[-1, 2, 2]),
            Site::new(&[3, -2, 1]),
        ]);
        let mut rng = stream(0, &[1]);
        let table = green_table(&g, &sites, &Method::exact(30.0), &mut rng).unwrap();
        for x in sites.iter() {
            for y in sites.iter() {
                let a = table.get(x, y).unwrap();
                let b = table.get(y, x).unwrap();
                assert!((a - b).abs() < 1e-10, "asymmetry {a} vs {b}");
                assert!(table.get(x, x).unwrap() >= a - 1e-12, "diagonal dominance");
            }
        }
    }

    #[test]
    fn green_mc_agrees_with_exact() {
        let g = z3();
        let o = Site::origin(3);
        let y = Site::new(&[2, 0, 0]);
        let exact = green_exact(&g, &o, &y, 40.0, 1e-12).unwrap();
        let mut rng = stream(5, &[stream_id::WALK]);
        let mc = green_mc(&g, &o, &y, 40.0, 40_000, &mut rng).unwrap();
        assert!(
            mc.bracket.intersects(&exact.bracket),
            "mc {:?} vs exact {:?}",
            mc.bracket,
            exact.bracket
        );
    }

    #[test]
    fn capacity_origin() {
        let g = z3();
        let a = SiteSet::singleton(Site::origin(3));
        let mut rng = stream(0, &[2]);
        let est = equilibrium_and_capacity(&g, &a, &Method::exact(40.0), &mut rng).unwrap();
        // cap({0}) = 6 P_0(no return) = 1/g(0,0) ~ 3.9564 in unit weights.
        let target = 3.9564;
        assert!(est.bracket.contains(target), "bracket {:?}", est.bracket);
        assert!((est.extrapolated.unwrap() - target).abs() < 0.01);
        // equilibrium sums to value, supported on A.
        let eq = est.equilibrium.as_ref().unwrap();
        assert_eq!(eq.len(), 1);
        assert!((eq[0].1 - est.value).abs() < 1e-12);
        let norm = est.normalized_equilibrium().unwrap();
        let mass: f64 = norm.iter().map(|&(_, w)| w).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_mc_brackets_exact() {
        let g = z3();
        let a = g.ball(&Site::origin(3), 2.0);
        let mut rng = stream(9, &[3]);
        let exact = equilibrium_and_capacity(&g, &a, &Method::exact(40.0), &mut rng).unwrap();
        let mc = equilibrium_and_capacity(
            &g,
            &a,
            &Method::monte_carlo(40.0, 40_000),
            &mut rng,
        )
        .unwrap();
        assert!(
            mc.bracket.intersects(&exact.bracket),
            "mc {:?} vs exact {:?}",
            mc.bracket,
            exact.bracket
        );
    }

    #[test]
    fn capacity_monotone_and_subadditive() {
        let g = z3();
        let mut rng = stream(0, &[4]);
        let m = Method::exact(30.0);
        let a = g.ball(&Site::origin(3), 2.0);
        let a2 = g.ball(&Site::origin(3), 3.5);
        let ca = equilibrium_and_capacity(&g, &a, &m, &mut rng).unwrap();
        let ca2 = equilibrium_and_capacity(&g, &a2, &m, &mut rng).unwrap();
        assert!(ca.bracket.lower <= ca2.bracket.upper + 1e-12);
        assert!(ca.value <= ca2.value + 1e-9, "killed capacity monotone");
        // Subadditivity on a disjoint pair.
        let b = SiteSet::from_sites(
            g.ball(&Site::new(&[6, 0, 0]), 2.0).sites().to_vec(),
        );
        let cb = equilibrium_and_capacity(&g, &b, &m, &mut rng).unwrap();
        let union = a.union(&b);
        let cu = equilibrium_and_capacity(&g, &union, &Method::exact(40.0), &mut rng).unwrap();
        assert!(cu.bracket.lower <= ca.bracket.upper + cb.bracket.upper + 1e-9);
    }

    #[test]
    fn energy_and_variational_identities() {
        let g = z3();
        let mut rng = stream(0, &[5]);
        let a = g.ball(&Site::origin(3), 2.0);
        let rho = 30.0;
        let cap = equilibrium_and_capacity(&g, &a, &Method::exact(rho), &mut rng).unwrap();
        let table = green_table(&g, &a, &Method::exact(rho), &mut rng).unwrap();
        // Killed-ball identity: energy(normalized equilibrium) * cap = 1.
        let eq = cap.normalized_equilibrium().unwrap();
        let en = energy(&eq, &table).unwrap();
        assert!((en * cap.value - 1.0).abs() < 1e-6, "energy * cap = {}", en * cap.value);
        // Singleton: energy(delta_0) = g(0,0) and 1/g(0,0) = cap({0}).
        let o = Site::origin(3);
        let single = SiteSet::singleton(o);
        let cap0 = equilibrium_and_capacity(&g, &single, &Method::exact(rho), &mut rng).unwrap();
        let t0 = green_table(&g, &single, &Method::exact(rho), &mut rng).unwrap();
        let e0 = energy(&[(o, 1.0)], &t0).unwrap();
        assert!((e0 - t0.get(&o, &o).unwrap()).abs() < 1e-14);
        assert!((1.0 / e0 - cap0.value).abs() < 1e-6);
        // Variational bound: 1/energy(mu) <= cap for random measures.
        let mut seed = 7u64;
        for _ in 0..25 {
            let mut weights: Vec<f64> = Vec::new();
            let mut total = 0.0;
            for _ in a.iter() {
                seed = crate::rng::splitmix64(seed);
                let w = (seed % 1000) as f64 + 1.0;
                weights.push(w);
                total += w;
            }
            let mu: Vec<(Site, f64)> =
                a.iter().zip(&weights).map(|(s, &w)| (*s, w / total)).collect();
            let e = energy(&mu, &table).unwrap();
            assert!(1.0 / e <= cap.value + 1e-9, "variational bound violated");
        }
        // Unnormalized measures rejected.
        assert!(energy(&[(o, 0.5)], &t0).is_err());
    }

    #[test]
    fn hitting_probability_identities() {
        let g = z3();
        let mut rng = stream(0, &[6]);
        let a = g.ball(&Site::origin(3), 2.0);
        let cap = equilibrium_and_capacity(&g, &a, &Method::exact(30.0), &mut rng).unwrap();
        // Interior: exactly 1.
        for x in [Site::origin(3), Site::new(&[1, 1, 0])] {
            let h = hitting_probability(&g, &x, &a, &cap).unwrap();
            assert!((h.value - 1.0).abs() < 1e-6, "interior hitting {}", h.value);
            assert!(h.bracket.contains(1.0));
        }
        // Far field bound.
        let c = g.constants();
        let x_far = Site::new(&[20, 0, 0]);
        let h = hitting_probability(&g, &x_far, &a, &cap).unwrap();
        let k: f64 = 10.0;
        let bound = 2f64.powf(c.nu) * c.c_g_upper * c.c_cap_upper / k.powf(c.nu);
        assert!(h.value <= bound, "far-field {} > {bound}", h.value);
        // Missing equilibrium rejected.
        let mut stripped = cap.clone();
        stripped.equilibrium = None;
        assert!(hitting_probability(&g, &x_far, &a, &stripped).is_err());
    }

    #[test]
    fn laplace_prediction_basics() {
        let g = z3();
        let mut rng = stream(0, &[7]);
        let o = Site::origin(3);
        let supp = SiteSet::singleton(o);
        let table = green_table(&g, &supp, &Method::exact(40.0), &mut rng).unwrap();
        // V = 0.
        assert_eq!(laplace_functional_prediction(&table, &[], 0.3).unwrap(), 1.0);
        assert_eq!(laplace_functional_prediction(&table, &[(o, 0.0)], 0.3).unwrap(), 1.0);
        // Negative delta: exp(-u theta / (1 + theta g(0,0))).
        let g00 = table.get(&o, &o).unwrap();
        let (theta, u) = (1.0, 0.3);
        let pred = laplace_functional_prediction(&table, &[(o, -theta)], u).unwrap();
        let closed = (-u * theta / (1.0 + theta * g00)).exp();
        assert!((pred - closed).abs() < 1e-12, "{pred} vs {closed}");
        // Positive delta small enough: exp(u t / (1 - t g(0,0))).
        let t = 1.0;
        assert!(t * g00 < 1.0);
        let pred_pos = laplace_functional_prediction(&table, &[(o, t)], u).unwrap();
        let closed_pos = (u * t / (1.0 - t * g00)).exp();
        assert!((pred_pos - closed_pos).abs() < 1e-10);
        // First-order derivative at 0 equals u: (f(eps) - 1)/eps -> u.
        let eps = 1e-7;
        let f_eps = laplace_functional_prediction(&table, &[(o, eps)], u).unwrap();
        assert!(((f_eps - 1.0) / eps - u).abs() < 1e-4);
        // Spectral rejection for large positive V.
        let too_big = 1.0 / g00 + 0.5;
        assert!(matches!(
            laplace_functional_prediction(&table, &[(o, too_big)], u),
            Err(ModelError::SpectralPrecondition(_))
        ));
    }

    #[test]
    fn tube_check_small() {
        let g = z3();
        let mut rng = stream(3, &[8]);
        let rep = tube_capacity_check(
            &g,
            48,
            2,
            0.2,
            &Method::monte_carlo(160.0, 200_000),
            &mut rng,
        )
        .unwrap();
        assert!(rep.d3_branch);
        assert!(rep.ratio > 0.5 && rep.ratio < 1.6, "ratio {}", rep.ratio);
        assert!(
            rep.union_lower_bound <= rep.cap.bracket.upper,
            "union bound {} vs cap {:?}",
            rep.union_lower_bound,
            rep.cap.bracket
        );
        assert!(rep.union_lower_bound > 0.0);
    }

    #[test]
    fn tube_p_equals_n_sandwiched_by_balls() {
        let g = z3();
        let mut rng = stream(4, &[9]);
        let n = 8i64;
        let tube = crate::graph::tube_sites(&g, n, n).unwrap();
        let cap_t =
            equilibrium_and_capacity(&g, &tube, &Method::exact(40.0), &mut rng).unwrap();
        let inner = equilibrium_and_capacity(
            &g,
            &g.ball(&Site::new(&[n as i32 / 2, 0, 0]), n as f64 / 2.0),
            &Method::exact(40.0),
            &mut rng,
        )
        .unwrap();
        let outer = equilibrium_and_capacity(
            &g,
            &g.ball(&Site::new(&[n as i32 / 2, 0, 0]), n as f64 * 1.8),
            &Method::exact(40.0),
            &mut rng,
        )
        .unwrap();
        assert!(inner.bracket.lower <= cap_t.bracket.upper + 1e-9);
        assert!(cap_t.bracket.lower <= outer.bracket.upper + 1e-9);
    }

    #[test]
    fn calibration_tightens_cap_constants() {
        let g = z3();
        let c = calibrated_constants(&g).unwrap();
        assert!(c.calibrated);
        let declared = g.constants();
        assert!(c.c_cap_lower >= declared.c_cap_lower * 0.5);
        assert!(c.c_cap_upper <= declared.c_cap_upper * 2.0);
        assert!(c.c_cap_lower < c.c_cap_upper);
        // Calibrated window contains the continuum ratio 1/c_asymp.
        let cont = 1.0 / declared.c_asymp.unwrap();
        assert!(
            c.c_cap_lower <= cont && cont <= c.c_cap_upper,
            "continuum ratio {cont} outside [{}, {}]",
            c.c_cap_lower,
            c.c_cap_upper
        );
    }
}

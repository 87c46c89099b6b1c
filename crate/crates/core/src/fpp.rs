//! First-passage percolation over the renormalized lattice: monotone weight
//! families built from interlacement samples, node-weighted shortest paths,
//! local-uniqueness indicators, walk-trace capacities, and tube confinement.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::bracket::Bracket;
use crate::error::{ModelError, Result};
use crate::graph::{GraphSpec, RenormLattice, SiteSet};
use crate::interlacements::InterlacementSample;
use crate::potential::{equilibrium_and_capacity, CapacityEstimate, Method};
use crate::site::{BBox, PackedMap, Site};
use crate::unionfind::UnionFind;
use crate::walk::{run_until_exit, step, DEFAULT_MAX_STEPS};

/// Weight functional applied per renormalized site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightKind {
    /// t_z = 1{z occupied} (stride-1 lattice).
    OccupiedIndicator,
    /// t_z = 1{occupied set meets the half-open cell of z}.
    BoxNonempty,
    /// t_z = 1{some nearest-neighbor cluster of the occupied set inside
    /// B(z, R) has capacity >= kappa}.
    BoxCapacityThreshold { kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monotonicity {
    /// Weights nondecreasing in the level u.
    Increasing,
    /// Complemented indicators, nonincreasing in u.
    Decreasing,
}

/// An immutable node-weight assignment over a renormalized lattice window.
#[derive(Clone, Debug)]
pub struct FppWeights {
    pub r: f64,
    pub lattice: RenormLattice,
    pub kind: WeightKind,
    pub monotonicity: Monotonicity,
    sites: Vec<Site>,
    index: PackedMap<u32>,
    weights: Vec<f64>,
}

impl FppWeights {
    /// Builds weights from explicit (site, value) pairs; every site must lie
    /// on the lattice and every value must be nonnegative.
    pub fn with_values(
        lattice: RenormLattice,
        kind: WeightKind,
        monotonicity: Monotonicity,
        values: Vec<(Site, f64)>,
    ) -> Result<Self> {
        let mut sites = Vec::with_capacity(values.len());
        let mut weights = Vec::with_capacity(values.len());
        let mut index = PackedMap::default();
        for (s, v) in values {
            if !lattice.contains(&s) {
                return Err(ModelError::BadParameter(format!(
                    "site {:?} is not on the renormalized lattice",
                    s.coords()
                )));
            }
            if !(v >= 0.0) {
                return Err(ModelError::BadParameter("negative node weight".into()));
            }
            let id = sites.len() as u32;
            if index.insert(s.packed(), id).is_some() {
                return Err(ModelError::BadParameter("duplicate weight site".into()));
            }
            sites.push(s);
            weights.push(v);
        }
        Ok(FppWeights { r: lattice.spacing, lattice, kind, monotonicity, sites, index, weights })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn weight(&self, z: &Site) -> Option<f64> {
        self.index.get(&z.packed()).map(|&i| self.weights[i as usize])
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// Integer points of the half-open cell z + (-s/2, s/2]^d.
fn cell_points(z: &Site, stride: i64) -> Vec<Site> {
    let s = stride as i32;
    let lo = (-s).div_euclid(2) + 1;
    let hi = s.div_euclid(2);
    let d = z.dim();
    let mut out = Vec::new();
    let mut offs = vec![lo; d];
    loop {
        let mut c = *z;
        for (axis, &o) in offs.iter().enumerate() {
            c = c.offset(axis, o);
        }
        out.push(c);
        let mut i = d;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if offs[i] < hi {
                offs[i] += 1;
                break;
            }
            offs[i] = lo;
        }
    }
}

/// Nearest-neighbor clusters of `sites`, as index groups.
fn nn_clusters(sites: &[Site]) -> Vec<Vec<usize>> {
    let mut index = PackedMap::default();
    for (i, s) in sites.iter().enumerate() {
        index.insert(s.packed(), i as u32);
    }
    let mut uf = UnionFind::new(sites.len());
    for (i, s) in sites.iter().enumerate() {
        for axis in 0..s.dim() {
            for delta in [-1, 1] {
                if let Some(&j) = index.get(&s.offset(axis, delta).packed()) {
                    uf.union(i, j as usize);
                }
            }
        }
    }
    let mut groups: PackedMap<Vec<usize>> = PackedMap::default();
    for i in 0..sites.len() {
        groups.entry(uf.find(i) as u64).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Builds the weight family of `kind` at scale `r` over `region` from an
/// interlacement sample.  The sample window must cover every cell (box
/// kinds) or every renormalized site (indicator kind) of the lattice.
pub fn build_weights(
    g: &GraphSpec,
    sample: &InterlacementSample,
    kind: WeightKind,
    r: f64,
    monotonicity: Monotonicity,
    region: BBox,
    rng: &mut impl Rng,
) -> Result<FppWeights> {
    let lattice = RenormLattice::new(g.dim(), r, region)?;
    let stride = lattice.stride;
    let mut values = Vec::new();
    for z in lattice.sites() {
        let raw = match kind {
            WeightKind::OccupiedIndicator => {
                if !sample.window.contains(&z) {
                    return Err(ModelError::CoverageInsufficient);
                }
                sample.occupied.contains(&z) as u8 as f64
            }
            WeightKind::BoxNonempty => {
                let mut hit = false;
                for c in cell_points(&z, stride) {
                    if !sample.window.contains(&c) {
                        return Err(ModelError::CoverageInsufficient);
                    }
                    hit |= sample.occupied.contains(&c);
                }
                hit as u8 as f64
            }
            WeightKind::BoxCapacityThreshold { kappa } => {
                let ball = g.ball(&z, r);
                let mut local = Vec::new();
                for c in ball.iter() {
                    if !sample.window.contains(c) {
                        return Err(ModelError::CoverageInsufficient);
                    }
                    if sample.occupied.contains(c) {
                        local.push(*c);
                    }
                }
                let mut hit = false;
                for group in nn_clusters(&local) {
                    let cluster =
                        SiteSet::from_sites(group.iter().map(|&i| local[i]).collect());
                    let rho = 4.0 * r + 8.0;
                    let est = equilibrium_and_capacity(g, &cluster, &Method::exact(rho), rng)?;
                    if est.value >= kappa {
                        hit = true;
                        break;
                    }
                }
                hit as u8 as f64
            }
        };
        let v = match monotonicity {
            Monotonicity::Increasing => raw,
            Monotonicity::Decreasing => 1.0 - raw,
        };
        values.push((z, v));
    }
    FppWeights::with_values(lattice, kind, monotonicity, values)
}

/// Target of a shortest-path query.
#[derive(Clone, Copy, Debug)]
pub enum FppTarget {
    /// A single renormalized site.
    Site(Site),
    /// Reach any lattice site outside ball(x, outer), starting from the
    /// lattice sites inside ball(x, inner).
    ExitBall { inner: f64, outer: f64 },
}

#[derive(Clone, Debug)]
pub struct FppResult {
    pub distance: f64,
    pub path: Option<Vec<Site>>,
    pub source: Site,
    pub target: Site,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapKey {
    dist: f64,
    lex: u64,
    id: u32,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.lex.cmp(&other.lex))
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn lex_key(s: &Site) -> u64 {
    // Order sites lexicographically by shifting signed coords to unsigned.
    let mut k = 0u64;
    for i in 0..s.dim() {
        k = (k << 21) | ((s.coord(i) as i64 + (1 << 20)) as u64 & 0x1f_ffff);
    }
    k
}

/// Node-weighted Dijkstra over the renormalized lattice.  The weight of a
/// path is the sum of node weights over its distinct visited sites, entry
/// node included; ties are broken by lexicographic site order.
pub fn fpp_distance(w: &FppWeights, x: &Site, target: &FppTarget) -> Result<FppResult> {
    let n = w.sites.len();
    if n == 0 {
        return Err(ModelError::EmptyDomain);
    }
    let mut is_target = vec![false; n];
    let mut sources: Vec<u32> = Vec::new();
    match target {
        FppTarget::Site(t) => {
            let tid = *w.index.get(&t.packed()).ok_or(ModelError::Unreachable)?;
            is_target[tid as usize] = true;
            let z = w.lattice.cell_of(x);
            let sid = *w.index.get(&z.packed()).ok_or(ModelError::StartOutsideDomain)?;
            sources.push(sid);
        }
        FppTarget::ExitBall { inner, outer } => {
            if *inner >= *outer {
                return Err(ModelError::BadParameter("inner radius must be < outer".into()));
            }
            let inner2 = inner * inner + 1e-9;
            let outer2 = outer * outer + 1e-9;
            let mut any_target = false;
            for (i, z) in w.sites.iter().enumerate() {
                let d2 = z.dist2(x) as f64;
                if d2 <= inner2 {
                    sources.push(i as u32);
                } else if d2 > outer2 {
                    is_target[i] = true;
                    any_target = true;
                }
            }
            if sources.is_empty() {
                let z = w.lattice.cell_of(x);
                let sid = *w.index.get(&z.packed()).ok_or(ModelError::StartOutsideDomain)?;
                sources.push(sid);
            }
            if !any_target {
                return Err(ModelError::Unreachable);
            }
        }
    }

    let offsets = w.lattice.neighbor_offsets();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent: Vec<u32> = vec![u32::MAX; n];
    let mut settled = vec![false; n];
    let mut heap: BinaryHeap<Reverse<HeapKey>> = BinaryHeap::new();
    let mut by_lex: Vec<u32> = sources.clone();
    by_lex.sort_by_key(|&i| lex_key(&w.sites[i as usize]));
    for &i in &by_lex {
        let d0 = w.weights[i as usize];
        if d0 < dist[i as usize] {
            dist[i as usize] = d0;
            heap.push(Reverse(HeapKey { dist: d0, lex: lex_key(&w.sites[i as usize]), id: i }));
        }
    }
    let source_set: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &sources {
            v[i as usize] = true;
        }
        v
    };
    while let Some(Reverse(HeapKey { dist: d, id, .. })) = heap.pop() {
        let i = id as usize;
        if settled[i] || d > dist[i] {
            continue;
        }
        settled[i] = true;
        if is_target[i] {
            let mut path = vec![w.sites[i]];
            let mut cur = i;
            while parent[cur] != u32::MAX {
                cur = parent[cur] as usize;
                path.push(w.sites[cur]);
            }
            path.reverse();
            return Ok(FppResult {
                distance: d,
                path: Some(path.clone()),
                source: path[0],
                target: w.sites[i],
            });
        }
        for off in &offsets {
            let mut nb = w.sites[i];
            for (axis, &o) in off.iter().take(nb.dim()).enumerate() {
                nb = nb.offset(axis, o);
            }
            if let Some(&j) = w.index.get(&nb.packed()) {
                let j = j as usize;
                if settled[j] || source_set[j] {
                    continue;
                }
                let nd = d + w.weights[j];
                if nd < dist[j] {
                    dist[j] = nd;
                    parent[j] = i as u32;
                    heap.push(Reverse(HeapKey { dist: nd, lex: lex_key(&w.sites[j]), id: j as u32 }));
                }
            }
        }
    }
    Err(ModelError::Unreachable)
}

/// True iff all occupied sites in ball(x, n) lie in one nearest-neighbor
/// component of the occupied set restricted to ball(x, xi*n); vacuously true
/// when ball(x, n) holds at most one occupied site.  Assumes `occupied`
/// covers ball(x, xi*n).
pub fn local_uniqueness_sites(occupied: &[Site], x: &Site, n: f64, xi: f64) -> bool {
    let big2 = (xi * n) * (xi * n) + 1e-9;
    let inner2 = n * n + 1e-9;
    let local: Vec<Site> =
        occupied.iter().copied().filter(|s| (s.dist2(x) as f64) <= big2).collect();
    let inner: Vec<usize> = local
        .iter()
        .enumerate()
        .filter(|(_, s)| (s.dist2(x) as f64) <= inner2)
        .map(|(i, _)| i)
        .collect();
    if inner.len() <= 1 {
        return true;
    }
    let mut index = PackedMap::default();
    for (i, s) in local.iter().enumerate() {
        index.insert(s.packed(), i as u32);
    }
    let mut uf = UnionFind::new(local.len());
    for (i, s) in local.iter().enumerate() {
        for axis in 0..s.dim() {
            for delta in [-1, 1] {
                if let Some(&j) = index.get(&s.offset(axis, delta).packed()) {
                    uf.union(i, j as usize);
                }
            }
        }
    }
    let root = uf.find(inner[0]);
    inner.iter().all(|&i| uf.find(i) == root)
}

/// Window-checked local uniqueness on a full sample.
pub fn local_uniqueness(
    g: &GraphSpec,
    sample: &InterlacementSample,
    x: &Site,
    n: f64,
    xi: f64,
) -> Result<bool> {
    if xi <= 1.0 {
        return Err(ModelError::BadParameter("xi must exceed 1".into()));
    }
    for s in g.ball(x, xi * n).iter() {
        if !sample.window.contains(s) {
            return Err(ModelError::WindowTooSmall(format!(
                "window does not cover ball of radius {:.1} about {:?}",
                xi * n,
                x.coords()
            )));
        }
    }
    let occupied: Vec<Site> = sample.occupied.iter().copied().collect();
    Ok(local_uniqueness_sites(&occupied, x, n, xi))
}

/// Trace of a walk from `x` stopped on exiting the open ball of radius `n`,
/// together with the capacity of the visited set.
pub fn walk_trace_capacity(
    g: &GraphSpec,
    x: &Site,
    n: f64,
    method: &Method,
    rng: &mut impl Rng,
) -> Result<(SiteSet, CapacityEstimate)> {
    let domain = g.ball(x, n - 1e-6);
    let trace = run_until_exit(g, x, &domain, rng, DEFAULT_MAX_STEPS)?;
    if trace.truncated {
        return Err(ModelError::SolverStalled {
            tol: 0.0,
            max_iter: DEFAULT_MAX_STEPS as usize,
            residual: f64::NAN,
        });
    }
    let inside: Vec<Site> =
        trace.path.iter().copied().filter(|s| domain.contains(s)).collect();
    let visited = SiteSet::from_sites(inside);
    let cap = equilibrium_and_capacity(g, &visited, method, rng)?;
    Ok((visited, cap))
}

/// MC estimate of a probability with a 3-sigma binomial bracket.
#[derive(Clone, Copy, Debug)]
pub struct ProbabilityEstimate {
    pub value: f64,
    pub bracket: Bracket,
    pub n_samples: u64,
}

/// The axis-aligned tube of p overlapping balls of radius 2s (s ~ n/p)
/// whose centers step along e1, together with an MC estimate of the
/// probability that a walk from `x` reaches the far ball B(x + p*s*e1, s/2)
/// before exiting the tube.
pub fn tube_confinement(
    g: &GraphSpec,
    x: &Site,
    n: i64,
    p: i64,
    n_samples: u64,
    rng: &mut impl Rng,
) -> Result<(SiteSet, ProbabilityEstimate)> {
    if p < 1 || p > n {
        return Err(ModelError::TubeTooWide { p, n });
    }
    let s = (n / p).max(1) as i32;
    let centers: Vec<Site> = (1..=p as i32).map(|j| x.translate(&[j * s])).collect();
    let far = *centers.last().unwrap();
    let wide = 2.0 * s as f64;
    let mut tube = SiteSet::empty(g.dim());
    for c in &centers {
        tube = tube.union(&g.ball(c, wide));
    }
    let wide2 = wide * wide + 1e-9;
    let small = s as f64 / 2.0;
    let small2 = small * small + 1e-9;
    let in_tube = |y: &Site| centers.iter().any(|c| (y.dist2(c) as f64) <= wide2);
    if !in_tube(x) {
        return Err(ModelError::StartOutsideDomain);
    }
    let mut hits = 0u64;
    for _ in 0..n_samples {
        let mut cur = *x;
        loop {
            if (cur.dist2(&far) as f64) <= small2 {
                hits += 1;
                break;
            }
            cur = step(g, &cur, rng)?;
            if !in_tube(&cur) {
                break;
            }
        }
    }
    let phat = hits as f64 / n_samples as f64;
    let se = (phat * (1.0 - phat) / n_samples as f64).sqrt();
    let est = ProbabilityEstimate {
        value: phat,
        bracket: Bracket::new(phat - 3.0 * se, phat + 3.0 * se).clamp_unit(),
        n_samples,
    };
    Ok((tube, est))
}

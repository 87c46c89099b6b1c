//! Weighted graphs, distances, balls, and the renormalized lattice.
//!
//! Two graph families are supported: lazily generated Z^d lattices (d in
//! {3,4,5}) with a uniform edge weight, and finite user-supplied weighted
//! graphs loaded from an adjacency table.  Lattices get closed-form neighbor
//! and ball queries; table graphs fall back to explicit adjacency.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::site::{BBox, PackedMap, PackedSet, Site, MAX_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    /// |x - y|_2 on coordinates.
    Euclidean,
    /// l1 path distance on the lattice; hop distance on table graphs.
    Graph,
}

/// Lattice visits-Green asymptotic constant a_d = (d/2) Gamma(d/2 - 1) pi^{-d/2}.
fn lattice_green_constant(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    half * gamma(half - 1.0) * PI.powf(-half)
}

/// Lanczos approximation; ample accuracy for the half-integer arguments used here.
pub(crate) fn gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        PI / ((PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        let t = x + G + 0.5;
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

/// Declared scaling exponents and constants of a graph.
///
/// For lattices the asymptotic Green constant is exact
/// (`c_asymp = C_asymp = a_d / (2 d w)` where `w` is the uniform edge weight)
/// and `C_beta * c_asymp = 1/2` when `nu = 1`.  Ball-capacity constants are
/// generous declared defaults; `potential::calibrated_constants` tightens them
/// empirically and flips `calibrated`.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingConstants {
    pub alpha: f64,
    pub nu: f64,
    /// Lower/upper asymptotic Green constants (g ~ c / dist^nu); equal on lattices.
    pub c_asymp: Option<f64>,
    pub c_asymp_upper: Option<f64>,
    /// Global upper bound constant C_G with g(x,y) <= C_G / dist^nu for x != y.
    pub c_g_upper: f64,
    /// cap(B(x,R)) in [c_cap R^nu, C_cap R^nu].
    pub c_cap_lower: f64,
    pub c_cap_upper: f64,
    /// Tube constants; only defined for nu <= 1.
    pub c_beta: Option<f64>,
    pub c_beta_upper: Option<f64>,
    pub calibrated: bool,
}

impl ScalingConstants {
    fn for_lattice(d: usize, weight: f64) -> Self {
        let nu = (d - 2) as f64;
        let a_d = lattice_green_constant(d);
        let c_asymp = a_d / (2.0 * d as f64 * weight);
        // Near-diagonal Green values exceed the asymptote by < 9% on Z^3
        // and less in higher d; 1.35 is a safe declared margin.
        let c_g_upper = 1.35 * c_asymp;
        // Continuum ball capacity R^nu / c_asymp, with generous declared margins.
        let cap_ratio = 1.0 / c_asymp;
        let (c_beta, c_beta_upper) = if nu <= 1.0 + 1e-12 {
            // C_beta * c_asymp = c_beta * C_asymp = 1/2 when nu = 1.
            let v = 0.5 / c_asymp;
            (Some(v), Some(v))
        } else {
            (None, None)
        };
        let sc = ScalingConstants {
            alpha: d as f64,
            nu,
            c_asymp: Some(c_asymp),
            c_asymp_upper: Some(c_asymp),
            c_g_upper,
            c_cap_lower: 0.4 * cap_ratio,
            c_cap_upper: 2.0 * cap_ratio,
            c_beta,
            c_beta_upper,
            calibrated: false,
        };
        if d == 3 && (2.0 * d as f64 * weight - 1.0).abs() < 1e-12 {
            // Normalized Z^3: the tube constant is pi/3 exactly.
            let cb = sc.c_beta.unwrap();
            assert!(
                (cb - PI / 3.0).abs() < 1e-12,
                "Z^3 tube constant must be pi/3, got {cb}"
            );
        }
        sc
    }

    fn for_table(nu: f64, alpha: f64) -> Self {
        ScalingConstants {
            alpha,
            nu,
            c_asymp: None,
            c_asymp_upper: None,
            c_g_upper: 1.0,
            c_cap_lower: 0.1,
            c_cap_upper: 10.0,
            c_beta: None,
            c_beta_upper: None,
            calibrated: false,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TableGraph {
    pub coords: Vec<Site>,
    pub id_of: PackedMap<u32>,
    pub adj: Vec<Vec<(u32, f64)>>,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum GraphKind {
    Lattice { d: usize, weight: f64 },
    Table(TableGraph),
}

/// A weighted locally finite graph with a distance function.
#[derive(Clone, Debug)]
pub struct GraphSpec {
    pub(crate) kind: GraphKind,
    pub distance_kind: DistanceKind,
    constants: ScalingConstants,
}

impl GraphSpec {
    /// Z^d with unit edge weights (lambda_x = 2d).
    pub fn lattice(d: usize, distance_kind: DistanceKind) -> Result<Self> {
        Self::lattice_scaled(d, distance_kind, 1.0)
    }

    /// Z^d with edge weights 1/(2d), so lambda_x = 1.  In this normalization
    /// the classical lattice constants hold: |x| g(0,x) -> a_d and the Z^3
    /// tube constant is pi/3.
    pub fn lattice_normalized(d: usize, distance_kind: DistanceKind) -> Result<Self> {
        let w = 1.0 / (2.0 * d as f64);
        Self::lattice_scaled(d, distance_kind, w)
    }

    pub fn lattice_scaled(d: usize, distance_kind: DistanceKind, weight: f64) -> Result<Self> {
        if !(3..=MAX_DIM).contains(&d) {
            return Err(ModelError::BadDimension(d));
        }
        if !(weight > 0.0) {
            return Err(ModelError::BadParameter("edge weight must be positive".into()));
        }
        Ok(GraphSpec {
            kind: GraphKind::Lattice { d, weight },
            distance_kind,
            constants: ScalingConstants::for_lattice(d, weight),
        })
    }

    /// Parses the graph description format documented in the README:
    /// `dim D`, optional `exponents ALPHA NU`, `site ID C1 .. CD`,
    /// `edge ID1 ID2 WEIGHT` lines; `#` comments.
    pub fn from_description(text: &str, distance_kind: DistanceKind) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut exponents: Option<(f64, f64)> = None;
        let mut coords: Vec<Site> = Vec::new();
        let mut raw_ids: Vec<u64> = Vec::new();
        let mut id_index: std::collections::HashMap<u64, u32> = std::collections::HashMap::new();
        let mut edges: Vec<(u32, u32, f64)> = Vec::new();

        let err = |line: usize, msg: &str| ModelError::Parse { line, msg: msg.into() };
        for (ln, raw) in text.lines().enumerate() {
            let line_no = ln + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut tok = line.split_whitespace();
            match tok.next().unwrap() {
                "dim" => {
                    let d: usize = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "dim needs an integer"))?;
                    if d == 0 || d > MAX_DIM {
                        return Err(err(line_no, "dim out of range"));
                    }
                    dim = Some(d);
                }
                "exponents" => {
                    let a: f64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "exponents needs alpha nu"))?;
                    let n: f64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "exponents needs alpha nu"))?;
                    exponents = Some((a, n));
                }
                "site" => {
                    let d = dim.ok_or_else(|| err(line_no, "dim must come before site lines"))?;
                    let id: u64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "site needs an id"))?;
                    let cs: Vec<i32> = tok.filter_map(|t| t.parse().ok()).collect();
                    if cs.len() != d {
                        return Err(err(line_no, "site needs exactly dim coordinates"));
                    }
                    if id_index.contains_key(&id) {
                        return Err(err(line_no, "duplicate site id"));
                    }
                    id_index.insert(id, coords.len() as u32);
                    raw_ids.push(id);
                    coords.push(Site::new(&cs));
                }
                "edge" => {
                    let a: u64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "edge needs two ids and a weight"))?;
                    let b: u64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "edge needs two ids and a weight"))?;
                    let w: f64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err(line_no, "edge needs two ids and a weight"))?;
                    if !(w >= 0.0) || a == b {
                        return Err(err(line_no, "edge weight must be >= 0 and ids distinct"));
                    }
                    let ia = *id_index.get(&a).ok_or_else(|| err(line_no, "unknown site id"))?;
                    let ib = *id_index.get(&b).ok_or_else(|| err(line_no, "unknown site id"))?;
                    edges.push((ia, ib, w));
                }
                other => return Err(err(line_no, &format!("unknown directive '{other}'"))),
            }
        }
        if coords.is_empty() {
            return Err(ModelError::EmptyDomain);
        }
        let n = coords.len();
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (a, b, w) in edges {
            if w == 0.0 {
                continue;
            }
            adj[a as usize].push((b, w));
            adj[b as usize].push((a, w));
        }
        let lambda: Vec<f64> = adj.iter().map(|nb| nb.iter().map(|&(_, w)| w).sum()).collect();
        let mut id_of = PackedMap::default();
        for (i, s) in coords.iter().enumerate() {
            if id_of.insert(s.packed(), i as u32).is_some() {
                return Err(ModelError::Parse { line: 0, msg: "duplicate site coordinates".into() });
            }
        }
        let (alpha, nu) = exponents.unwrap_or((3.0, 1.0));
        Ok(GraphSpec {
            kind: GraphKind::Table(TableGraph { coords, id_of, adj, lambda }),
            distance_kind,
            constants: ScalingConstants::for_table(nu, alpha),
        })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            GraphKind::Lattice { d, .. } => *d,
            GraphKind::Table(t) => t.coords.first().map(|s| s.dim()).unwrap_or(3),
        }
    }

    /// Lattice fast path: (dimension, uniform edge weight).
    pub fn as_lattice(&self) -> Option<(usize, f64)> {
        match &self.kind {
            GraphKind::Lattice { d, weight } => Some((*d, *weight)),
            GraphKind::Table(_) => None,
        }
    }

    pub fn constants(&self) -> &ScalingConstants {
        &self.constants
    }

    pub fn with_constants(mut self, constants: ScalingConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn nu(&self) -> f64 {
        self.constants.nu
    }

    pub fn alpha(&self) -> f64 {
        self.constants.alpha
    }

    pub fn lambda(&self, x: &Site) -> f64 {
        match &self.kind {
            GraphKind::Lattice { d, weight } => 2.0 * *d as f64 * weight,
            GraphKind::Table(t) => {
                t.id_of.get(&x.packed()).map(|&i| t.lambda[i as usize]).unwrap_or(0.0)
            }
        }
    }

    pub fn weight(&self, x: &Site, y: &Site) -> f64 {
        match &self.kind {
            GraphKind::Lattice { d, weight } => {
                if x.l1(y) == 1 && x.dim() == *d {
                    *weight
                } else {
                    0.0
                }
            }
            GraphKind::Table(t) => {
                let (Some(&i), Some(&j)) = (t.id_of.get(&x.packed()), t.id_of.get(&y.packed()))
                else {
                    return 0.0;
                };
                t.adj[i as usize]
                    .iter()
                    .find(|&&(k, _)| k == j)
                    .map(|&(_, w)| w)
                    .unwrap_or(0.0)
            }
        }
    }

    pub fn neighbors(&self, x: &Site) -> Vec<(Site, f64)> {
        let mut out = Vec::new();
        self.for_each_neighbor(x, |y, w| out.push((y, w)));
        out
    }

    #[inline]
    pub fn for_each_neighbor(&self, x: &Site, mut f: impl FnMut(Site, f64)) {
        match &self.kind {
            GraphKind::Lattice { d, weight } => {
                for axis in 0..*d {
                    f(x.offset(axis, 1), *weight);
                    f(x.offset(axis, -1), *weight);
                }
            }
            GraphKind::Table(t) => {
                if let Some(&i) = t.id_of.get(&x.packed()) {
                    for &(j, w) in &t.adj[i as usize] {
                        f(t.coords[j as usize], w);
                    }
                }
            }
        }
    }

    pub fn contains(&self, x: &Site) -> bool {
        match &self.kind {
            GraphKind::Lattice { d, .. } => x.dim() == *d,
            GraphKind::Table(t) => t.id_of.contains_key(&x.packed()),
        }
    }

    pub fn distance(&self, x: &Site, y: &Site) -> f64 {
        match self.distance_kind {
            DistanceKind::Euclidean => x.euclid(y),
            DistanceKind::Graph => match &self.kind {
                GraphKind::Lattice { .. } => x.l1(y) as f64,
                GraphKind::Table(_) => self.hop_distance(x, y),
            },
        }
    }

    fn hop_distance(&self, x: &Site, y: &Site) -> f64 {
        if x == y {
            return 0.0;
        }
        let mut frontier = vec![*x];
        let mut seen = PackedSet::default();
        seen.insert(x.packed());
        let mut depth = 0f64;
        while !frontier.is_empty() {
            depth += 1.0;
            let mut next = Vec::new();
            for s in frontier {
                let mut hit = false;
                self.for_each_neighbor(&s, |n, _| {
                    if n == *y {
                        hit = true;
                    }
                    if seen.insert(n.packed()) {
                        next.push(n);
                    }
                });
                if hit {
                    return depth;
                }
            }
            frontier = next;
        }
        f64::INFINITY
    }

    /// Closed ball {y : d(x,y) <= r}.
    pub fn ball(&self, x: &Site, r: f64) -> SiteSet {
        assert!(r >= 0.0, "ball radius must be nonnegative");
        match &self.kind {
            GraphKind::Lattice { d, .. } => {
                let ri = r.floor() as i32;
                let mut sites = Vec::new();
                let lo: Vec<i32> = x.coords().iter().map(|&c| c - ri).collect();
                let hi: Vec<i32> = x.coords().iter().map(|&c| c + ri).collect();
                let bbox = BBox {
                    lo: {
                        let mut a = [0; MAX_DIM];
                        a[..*d].copy_from_slice(&lo);
                        a
                    },
                    hi: {
                        let mut a = [0; MAX_DIM];
                        a[..*d].copy_from_slice(&hi);
                        a
                    },
                    d: *d as u8,
                };
                match self.distance_kind {
                    DistanceKind::Euclidean => {
                        let r2 = r * r;
                        for s in bbox.iter_sites() {
                            if (s.dist2(x) as f64) <= r2 + 1e-9 {
                                sites.push(s);
                            }
                        }
                    }
                    DistanceKind::Graph => {
                        let rl = r.floor() as i64;
                        for s in bbox.iter_sites() {
                            if s.l1(x) <= rl {
                                sites.push(s);
                            }
                        }
                    }
                }
                SiteSet::from_sorted_unique(sites).with_ball_meta(*x, r)
            }
            GraphKind::Table(t) => {
                let sites: Vec<Site> = t
                    .coords
                    .iter()
                    .filter(|s| self.distance(x, s) <= r + 1e-9)
                    .copied()
                    .collect();
                SiteSet::from_sites(sites).with_ball_meta(*x, r)
            }
        }
    }
}

/// A finite set of sites with membership and boundary extraction.
#[derive(Clone, Debug)]
pub struct SiteSet {
    sites: Vec<Site>,
    index: PackedSet,
    bbox: BBox,
    /// Present when the set was constructed as a metric ball.
    ball_meta: Option<(Site, f64)>,
}

impl SiteSet {
    pub fn empty(d: usize) -> Self {
        SiteSet {
            sites: Vec::new(),
            index: PackedSet::default(),
            bbox: BBox::empty(d),
            ball_meta: None,
        }
    }

    /// Builds from arbitrary sites, deduplicating.
    pub fn from_sites(mut sites: Vec<Site>) -> Self {
        sites.sort_unstable();
        sites.dedup();
        Self::from_sorted_unique(sites)
    }

    fn from_sorted_unique(sites: Vec<Site>) -> Self {
        let d = sites.first().map(|s| s.dim()).unwrap_or(3);
        let mut index = PackedSet::default();
        index.reserve(sites.len());
        let mut bbox = BBox::empty(d);
        for s in &sites {
            index.insert(s.packed());
            bbox.absorb(s);
        }
        SiteSet { sites, index, bbox, ball_meta: None }
    }

    pub fn singleton(s: Site) -> Self {
        Self::from_sites(vec![s])
    }

    fn with_ball_meta(mut self, center: Site, r: f64) -> Self {
        self.ball_meta = Some((center, r));
        self
    }

    pub fn ball_meta(&self) -> Option<(Site, f64)> {
        self.ball_meta
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    #[inline]
    pub fn contains(&self, s: &Site) -> bool {
        self.index.contains(&s.packed())
    }

    #[inline]
    pub fn contains_key(&self, packed: u64) -> bool {
        self.index.contains(&packed)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Site> {
        self.sites.iter()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn dim(&self) -> usize {
        self.bbox.d as usize
    }

    /// Coordinate-wise center of the bounding box, rounded down.
    pub fn center(&self) -> Site {
        let d = self.dim();
        let cs: Vec<i32> = (0..d)
            .map(|i| {
                if self.bbox.is_empty() {
                    0
                } else {
                    self.bbox.lo[i] + (self.bbox.hi[i] - self.bbox.lo[i]) / 2
                }
            })
            .collect();
        Site::new(&cs)
    }

    /// Max distance from `center` to a member, under the graph metric.
    pub fn radius_about(&self, g: &GraphSpec, center: &Site) -> f64 {
        self.sites.iter().map(|s| g.distance(center, s)).fold(0.0, f64::max)
    }

    /// Internal boundary: members with a neighbor outside the set.
    pub fn boundary(&self, g: &GraphSpec) -> SiteSet {
        let mut out = Vec::new();
        for s in &self.sites {
            let mut outside = false;
            g.for_each_neighbor(s, |n, _| {
                if !self.contains(&n) {
                    outside = true;
                }
            });
            if outside {
                out.push(*s);
            }
        }
        SiteSet::from_sites(out)
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        let mut sites = self.sites.clone();
        sites.extend(other.sites.iter().copied());
        SiteSet::from_sites(sites)
    }

    pub fn is_subset_of(&self, other: &SiteSet) -> bool {
        self.sites.iter().all(|s| other.contains(s))
    }
}

/// The renormalized lattice Lambda(L): a stride-s sublattice whose L-balls
/// cover the window.
#[derive(Clone, Debug)]
pub struct RenormLattice {
    pub spacing: f64,
    pub stride: i64,
    pub window: BBox,
    d: usize,
}

impl RenormLattice {
    pub fn new(d: usize, spacing: f64, window: BBox) -> Result<Self> {
        if spacing < 1.0 {
            return Err(ModelError::BadParameter("renorm spacing must be >= 1".into()));
        }
        let stride = ((spacing / (d as f64).sqrt()).floor() as i64).max(1);
        Ok(RenormLattice { spacing, stride, window, d })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// All stride multiples whose cell can meet the window: the window box
    /// grown by ceil(s/2), which guarantees the covering property.
    pub fn sites(&self) -> Vec<Site> {
        let s = self.stride as i32;
        let grow = (s + 1) / 2;
        let b = self.window.grown(grow);
        let mut ranges = Vec::new();
        for i in 0..self.d {
            let lo = div_ceil(b.lo[i], s);
            let hi = div_floor(b.hi[i], s);
            ranges.push((lo, hi));
        }
        let mut out = Vec::new();
        let mut cursor: Vec<i32> = ranges.iter().map(|&(lo, _)| lo).collect();
        if ranges.iter().any(|&(lo, hi)| lo > hi) {
            return out;
        }
        loop {
            let coords: Vec<i32> = cursor.iter().map(|&k| k * s).collect();
            out.push(Site::new(&coords));
            let mut i = self.d;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if cursor[i] < ranges[i].1 {
                    cursor[i] += 1;
                    break;
                }
                cursor[i] = ranges[i].0;
            }
        }
    }

    #[inline]
    pub fn contains(&self, z: &Site) -> bool {
        let s = self.stride as i32;
        let grow = (s + 1) / 2;
        z.coords().iter().all(|&c| c.rem_euclid(s) == 0) && self.window.grown(grow).contains(z)
    }

    /// Neighbor offsets: delta in {-s,0,s}^d \ {0} with |delta|_2 <= spacing.
    /// For spacing 1 this is the 2d axis offsets; for spacing >= sqrt(d) * s
    /// it includes the diagonals.
    pub fn neighbor_offsets(&self) -> Vec<[i32; MAX_DIM]> {
        let s = self.stride as i32;
        let mut out = Vec::new();
        let n = 3usize.pow(self.d as u32);
        for code in 0..n {
            let mut c = code;
            let mut delta = [0i32; MAX_DIM];
            let mut norm2 = 0i64;
            for item in delta.iter_mut().take(self.d) {
                let t = (c % 3) as i32 - 1;
                c /= 3;
                *item = t * s;
                norm2 += (*item as i64) * (*item as i64);
            }
            if norm2 > 0 && (norm2 as f64) <= self.spacing * self.spacing + 1e-9 {
                out.push(delta);
            }
        }
        out
    }

    /// The lattice site whose half-open cell z + (-s/2, s/2]^d contains x.
    pub fn cell_of(&self, x: &Site) -> Site {
        let s = self.stride as i64;
        let cs: Vec<i32> = x
            .coords()
            .iter()
            .map(|&c| {
                let k = (2 * c as i64 + s - 1).div_euclid(2 * s);
                (k * s) as i32
            })
            .collect();
        Site::new(&cs)
    }
}

fn div_ceil(a: i32, b: i32) -> i32 {
    (a as i64 + b as i64 - 1).div_euclid(b as i64) as i32
}

fn div_floor(a: i32, b: i32) -> i32 {
    (a as i64).div_euclid(b as i64) as i32
}

/// Spec operation: the lattice constructor.
pub fn make_lattice(d: usize, distance_kind: DistanceKind) -> Result<GraphSpec> {
    GraphSpec::lattice(d, distance_kind)
}

/// Spec operation: the renormalized lattice over a window.
pub fn renorm_sites(g: &GraphSpec, spacing: f64, window: &SiteSet) -> Result<RenormLattice> {
    RenormLattice::new(g.dim(), spacing, *window.bbox())
}

/// Spec operation: the tube R_{N,p} = ([0,N] x [-p,p]^{d-1}) cap Z^d.
pub fn tube_sites(g: &GraphSpec, n: i64, p: i64) -> Result<SiteSet> {
    if p > n {
        return Err(ModelError::TubeTooWide { p, n });
    }
    if n < 1 || p < 0 {
        return Err(ModelError::BadParameter("tube needs N >= 1 and p >= 0".into()));
    }
    let d = g.dim();
    let mut lo = [0i32; MAX_DIM];
    let mut hi = [0i32; MAX_DIM];
    hi[0] = n as i32;
    for i in 1..d {
        lo[i] = -(p as i32);
        hi[i] = p as i32;
    }
    let bbox = BBox { lo, hi, d: d as u8 };
    Ok(SiteSet::from_sites(bbox.iter_sites().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_neighbors_and_lambda() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        let nb = g.neighbors(&o);
        assert_eq!(nb.len(), 6);
        for (s, w) in &nb {
            assert_eq!(o.l1(s), 1);
            assert_eq!(*w, 1.0);
        }
        assert_eq!(g.lambda(&o), 6.0);
        assert_eq!(g.lambda(&Site::new(&[5, -3, 2])), 6.0);
    }

    #[test]
    fn low_dimension_rejected() {
        assert!(make_lattice(2, DistanceKind::Euclidean).is_err());
        assert!(make_lattice(1, DistanceKind::Euclidean).is_err());
    }

    #[test]
    fn normalized_lattice_lambda_is_one() {
        let g = GraphSpec::lattice_normalized(3, DistanceKind::Euclidean).unwrap();
        assert!((g.lambda(&Site::origin(3)) - 1.0).abs() < 1e-15);
    }

    /// Oracle: brute-force enumeration of {x : |x|_2 <= r} over a box scan
    /// done with independent integer arithmetic.
    fn brute_force_ball_count(r: f64) -> usize {
        let ri = r.ceil() as i32;
        let mut count = 0usize;
        for x in -ri..=ri {
            for y in -ri..=ri {
                for z in -ri..=ri {
                    let d2 = (x * x + y * y + z * z) as f64;
                    if d2.sqrt() <= r + 1e-9 {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn ball_counts_match_brute_force() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        assert_eq!(g.ball(&o, 0.0).len(), 1);
        assert_eq!(g.ball(&o, 1.0).len(), 7);
        // Frozen from the oracle: |ball(0, 2.5)| = 81, |ball(0, 10)| = 4169.
        assert_eq!(brute_force_ball_count(2.5), 81);
        assert_eq!(g.ball(&o, 2.5).len(), 81);
        assert_eq!(brute_force_ball_count(10.0), 4169);
        assert_eq!(g.ball(&o, 10.0).len(), 4169);
    }

    #[test]
    fn ball_monotone_in_radius() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let o = Site::new(&[2, -1, 3]);
        let mut prev = 0;
        for r in [0.0, 1.0, 1.5, 2.0, 3.3, 5.0] {
            let b = g.ball(&o, r);
            assert!(b.len() >= prev);
            assert!(b.contains(&o));
            prev = b.len();
        }
    }

    #[test]
    fn graph_distance_ball_is_l1() {
        let g = make_lattice(3, DistanceKind::Graph).unwrap();
        let b = g.ball(&Site::origin(3), 2.0);
        // l1 ball of radius 2 in Z^3: 1 + 6 + 18 = 25 sites.
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn boundary_is_subset() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let b = g.ball(&Site::origin(3), 4.0);
        let bd = b.boundary(&g);
        assert!(!bd.is_empty());
        assert!(bd.is_subset_of(&b));
    }

    #[test]
    fn renorm_spacing_one_is_full_lattice() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let w = g.ball(&Site::origin(3), 6.0);
        let lat = renorm_sites(&g, 1.0, &w).unwrap();
        assert_eq!(lat.stride, 1);
        // Every window site is itself a lattice site.
        for s in w.iter() {
            assert!(lat.contains(s));
        }
        assert_eq!(lat.neighbor_offsets().len(), 6);
    }

    #[test]
    fn renorm_sqrt_d_is_stride_one() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let w = g.ball(&Site::origin(3), 5.0);
        let lat = renorm_sites(&g, (3.0f64).sqrt(), &w).unwrap();
        assert_eq!(lat.stride, 1);
    }

    #[test]
    fn renorm_covering_exhaustive() {
        // L=10, d=3: stride 5; every site of a 40^3 window is within
        // distance L of some lattice site.
        let mut lo = [0i32; MAX_DIM];
        let mut hi = [0i32; MAX_DIM];
        for i in 0..3 {
            lo[i] = -20;
            hi[i] = 19;
        }
        let window = BBox { lo, hi, d: 3 };
        let lat = RenormLattice::new(3, 10.0, window).unwrap();
        assert_eq!(lat.stride, 5);
        let sites = lat.sites();
        for x in window.iter_sites() {
            let covered = sites.iter().any(|z| (z.dist2(&x) as f64).sqrt() <= 10.0);
            assert!(covered, "site {:?} not covered", x);
        }
    }

    #[test]
    fn renorm_cell_partition() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let w = g.ball(&Site::origin(3), 8.0);
        let lat = renorm_sites(&g, 4.0, &w).unwrap();
        // Every window site maps to exactly one cell, and the cell center is a
        // lattice site within the grown window.
        for s in w.iter() {
            let z = lat.cell_of(s);
            let half = lat.stride;
            for i in 0..3 {
                let t = (s.coord(i) - z.coord(i)) as i64;
                assert!(t > -half.div_euclid(2) - half % 2 && t <= half.div_euclid(2) + half % 2);
            }
            assert!(lat.contains(&z), "cell center {:?} of {:?} outside lattice", z, s);
        }
    }

    #[test]
    fn renorm_density_bound() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        for &(l, n) in &[(4.0, 3i32), (6.0, 4), (10.0, 2)] {
            let w = g.ball(&o, l * n as f64);
            let lat = renorm_sites(&g, l, &w).unwrap();
            let in_ball = lat
                .sites()
                .iter()
                .filter(|z| (z.dist2(&o) as f64).sqrt() <= l * n as f64)
                .count();
            // |Lambda(L) cap B(x, LN)| <= C N^alpha with C = (2 sqrt(d) + 2)^d.
            let c = (2.0 * 3f64.sqrt() + 2.0).powi(3);
            assert!((in_ball as f64) <= c * (n as f64).powi(3));
        }
    }

    #[test]
    fn tube_counts() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let t = tube_sites(&g, 2, 0).unwrap();
        assert_eq!(t.len(), 3);
        for &(n, p) in &[(10i64, 2i64), (7, 3), (20, 1)] {
            let t = tube_sites(&g, n, p).unwrap();
            assert_eq!(t.len() as i64, (n + 1) * (2 * p + 1) * (2 * p + 1));
        }
        assert!(tube_sites(&g, 3, 4).is_err());
    }

    #[test]
    fn tube_boundary_matches_brute_force() {
        let g = make_lattice(3, DistanceKind::Euclidean).unwrap();
        let t = tube_sites(&g, 10, 2).unwrap();
        let bd = t.boundary(&g);
        // Oracle: direct neighbor scan with independent membership logic.
        let inside = |x: i32, y: i32, z: i32| (0..=10).contains(&x) && (-2..=2).contains(&y) && (-2..=2).contains(&z);
        let mut expected = 0usize;
        for s in t.iter() {
            let (x, y, z) = (s.coord(0), s.coord(1), s.coord(2));
            let nbs = [
                (x + 1, y, z),
                (x - 1, y, z),
                (x, y + 1, z),
                (x, y - 1, z),
                (x, y, z + 1),
                (x, y, z - 1),
            ];
            if nbs.iter().any(|&(a, b, c)| !inside(a, b, c)) {
                expected += 1;
            }
        }
        assert_eq!(bd.len(), expected);
    }

    #[test]
    fn table_graph_round_trip() {
        let text = "\
# tiny weighted graph
dim 3
site 0 0 0 0
site 1 1 0 0
site 2 0 1 0
edge 0 1 2.0
edge 0 2 1.0
";
        let g = GraphSpec::from_description(text, DistanceKind::Euclidean).unwrap();
        let o = Site::origin(3);
        assert_eq!(g.lambda(&o), 3.0);
        assert_eq!(g.weight(&o, &Site::new(&[1, 0, 0])), 2.0);
        assert_eq!(g.neighbors(&o).len(), 2);
        assert!(!g.contains(&Site::new(&[5, 5, 5])));
    }

    #[test]
    fn weight_symmetry_random_pairs() {
        let g = make_lattice(4, DistanceKind::Euclidean).unwrap();
        let a = Site::new(&[1, 2, 3, 4]);
        for (b, w) in g.neighbors(&a) {
            assert_eq!(g.weight(&b, &a), w);
        }
        assert_eq!(g.weight(&a, &a), 0.0);
    }

    #[test]
    fn z3_constants() {
        let g = GraphSpec::lattice_normalized(3, DistanceKind::Euclidean).unwrap();
        let c = g.constants();
        assert!((c.c_beta.unwrap() - std::f64::consts::PI / 3.0).abs() < 1e-12);
        assert!((c.c_asymp.unwrap() - 3.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-6);
        assert!((c.c_beta.unwrap() * c.c_asymp.unwrap() - 0.5).abs() < 1e-9);
        let unit = make_lattice(3, DistanceKind::Euclidean).unwrap();
        // Same consistency relation in the unit-weight normalization.
        let cu = unit.constants();
        assert!((cu.c_beta.unwrap() * cu.c_asymp.unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gamma_values() {
        assert!((gamma(0.5) - std::f64::consts::PI.sqrt()).abs() < 1e-10);
        assert!((gamma(1.0) - 1.0).abs() < 1e-10);
        assert!((gamma(1.5) - 0.5 * std::f64::consts::PI.sqrt()).abs() < 1e-10);
        assert!((gamma(4.0) - 6.0).abs() < 1e-8);
    }
}

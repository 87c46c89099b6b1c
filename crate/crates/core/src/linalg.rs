//! Linear algebra for killed-walk potential theory.
//!
//! All exact computations reduce to SPD systems in the killed graph Laplacian
//! L = D - W with Dirichlet conditions outside the solve domain.  Three tiers:
//!
//! * [`CsrMatrix`] + [`pcg`]: general graphs and moderate domains.
//! * [`BallGrid3`]: matrix-free 7-point stencil on a masked euclidean ball in
//!   Z^3 with a symmetric Gauss-Seidel preconditioner, for domains in the
//!   millions of sites.
//! * [`OctantBallGrid`]: the same stencil folded by the reflection group
//!   {+-1}^3 for origin-centered sources, an 8-fold reduction.

use nalgebra::{DMatrix, DVector};

use crate::error::{ModelError, Result};
use crate::graph::GraphSpec;
use crate::site::{PackedMap, Site};

/// An indexed finite site domain.
#[derive(Clone, Debug)]
pub struct Domain {
    sites: Vec<Site>,
    id: PackedMap<u32>,
}

impl Domain {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return Err(ModelError::EmptyDomain);
        }
        let mut id = PackedMap::default();
        id.reserve(sites.len());
        for (i, s) in sites.iter().enumerate() {
            if id.insert(s.packed(), i as u32).is_some() {
                return Err(ModelError::BadParameter("duplicate site in solve domain".into()));
            }
        }
        Ok(Domain { sites, id })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    #[inline]
    pub fn index(&self, s: &Site) -> Option<usize> {
        self.id.get(&s.packed()).map(|&i| i as usize)
    }

    pub fn site(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<u32>,
    pub val: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.val[k] * x[self.col[k] as usize];
            }
            out[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col[k] as usize == i {
                    d[i] = self.val[k];
                }
            }
        }
        d
    }
}

/// L = D - W restricted to `domain` (rows and columns), i.e. the generator of
/// the walk killed on exiting the domain.  Fails on isolated sites.
pub fn killed_laplacian(g: &GraphSpec, domain: &Domain) -> Result<CsrMatrix> {
    let n = domain.len();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col = Vec::new();
    let mut val = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let x = *domain.site(i);
        let lambda = g.lambda(&x);
        if lambda <= 0.0 {
            return Err(ModelError::IsolatedSite(format!("{:?}", x.coords())));
        }
        col.push(i as u32);
        val.push(lambda);
        g.for_each_neighbor(&x, |y, w| {
            if let Some(j) = domain.index(&y) {
                col.push(j as u32);
                val.push(-w);
            }
        });
        row_ptr.push(col.len());
    }
    Ok(CsrMatrix { n, row_ptr, col, val })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients for an SPD operator.
///
/// `apply_a` computes `out = A x`; `apply_m` computes `out = M^{-1} x` and must
/// itself be SPD.  Converges when ||r|| <= tol * ||b||.
pub fn pcg(
    n: usize,
    mut apply_a: impl FnMut(&[f64], &mut [f64]),
    mut apply_m: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    apply_m(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(ModelError::SpectralPrecondition(
                "operator not positive definite in cg".into(),
            ));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        apply_m(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = dot(&r, &r).sqrt();
    Err(ModelError::SolverStalled { tol, max_iter, residual: rnorm / bnorm })
}

/// Jacobi-preconditioned CG solve of `mat x = b`.
pub fn csr_solve(mat: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let diag = mat.diagonal();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(ModelError::SpectralPrecondition("nonpositive diagonal".into()));
    }
    pcg(
        mat.n,
        |x, out| mat.matvec(x, out),
        |r, out| {
            for i in 0..mat.n {
                out[i] = r[i] / diag[i];
            }
        },
        b,
        tol,
        max_iter,
    )
}

/// Dense LU solve for small systems (Laplace-functional predictions).
pub fn dense_solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.lu();
    lu.solve(&b).ok_or(ModelError::EmptyDomain)
}

/// Row-ranged storage for the closed euclidean ball {x : |x - center| <= rho}
/// in Z^3 (same membership as `GraphSpec::ball`): for each (y, z) column of the
/// bounding box, the contiguous x-extent and its offset into the value array.
/// Sites outside are Dirichlet (value 0).
#[derive(Clone, Debug)]
pub struct BallGrid3 {
    center: [i32; 3],
    lo: [i32; 3],
    ny: i32,
    nz: i32,
    /// (x_lo, len, offset) per row id (z - lo_z) * ny + (y - lo_y); len 0 = empty.
    rows: Vec<(i32, u32, usize)>,
    len: usize,
}

impl BallGrid3 {
    pub fn new(center: &Site, rho: f64) -> Result<Self> {
        if rho < 2.0 {
            return Err(ModelError::KillRadiusTooSmall { rho, min: 2.0 });
        }
        let c = [center.coord(0), center.coord(1), center.coord(2)];
        let r = rho.ceil() as i32;
        let lo = [c[0] - r, c[1] - r, c[2] - r];
        let ny = 2 * r + 1;
        let nz = 2 * r + 1;
        let rho2 = rho * rho;
        let mut rows = Vec::with_capacity((ny * nz) as usize);
        let mut len = 0usize;
        for dz in -r..=r {
            for dy in -r..=r {
                let rem = rho2 - (dz as f64 * dz as f64 + dy as f64 * dy as f64);
                if rem < 0.0 {
                    rows.push((0, 0, 0));
                    continue;
                }
                let half = (rem.sqrt() + 1e-9).floor() as i32;
                let x_lo = c[0] - half;
                let n = (2 * half + 1) as u32;
                rows.push((x_lo, n, len));
                len += n as usize;
            }
        }
        Ok(BallGrid3 { center: c, lo, ny, nz, rows, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn row_id(&self, y: i32, z: i32) -> Option<usize> {
        let ry = y - self.lo[1];
        let rz = z - self.lo[2];
        if ry < 0 || ry >= self.ny || rz < 0 || rz >= self.nz {
            return None;
        }
        Some((rz * self.ny + ry) as usize)
    }

    #[inline]
    pub fn index(&self, x: i32, y: i32, z: i32) -> Option<usize> {
        let rid = self.row_id(y, z)?;
        let (x_lo, n, off) = self.rows[rid];
        let dx = x - x_lo;
        if dx < 0 || dx >= n as i32 {
            return None;
        }
        Some(off + dx as usize)
    }

    pub fn index_site(&self, s: &Site) -> Option<usize> {
        self.index(s.coord(0), s.coord(1), s.coord(2))
    }

    /// out = (lambda I - w * adjacency) v with Dirichlet outside the ball.
    pub fn laplacian_matvec(&self, w: f64, v: &[f64], out: &mut [f64]) {
        let lambda = 6.0 * w;
        let r = (self.ny - 1) / 2;
        for dz in -r..=r {
            let z = self.center[2] + dz;
            for dy in -r..=r {
                let y = self.center[1] + dy;
                let rid = self.row_id(y, z).unwrap();
                let (x_lo, n, off) = self.rows[rid];
                if n == 0 {
                    continue;
                }
                let ym = self.row_id(y - 1, z).map(|i| self.rows[i]);
                let yp = self.row_id(y + 1, z).map(|i| self.rows[i]);
                let zm = self.row_id(y, z - 1).map(|i| self.rows[i]);
                let zp = self.row_id(y, z + 1).map(|i| self.rows[i]);
                for k in 0..n as i32 {
                    let x = x_lo + k;
                    let i = off + k as usize;
                    let mut acc = lambda * v[i];
                    if k > 0 {
                        acc -= w * v[i - 1];
                    }
                    if k + 1 < n as i32 {
                        acc -= w * v[i + 1];
                    }
                    for row in [ym, yp, zm, zp].iter().flatten() {
                        let dx = x - row.0;
                        if dx >= 0 && dx < row.1 as i32 {
                            acc -= w * v[row.2 + dx as usize];
                        }
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// Symmetric Gauss-Seidel preconditioner: z = (D+L) D^{-1} (D+U) \ r for
    /// the stencil matrix, with constant diagonal lambda = 6w.
    pub fn sgs_apply(&self, w: f64, r: &[f64], z: &mut [f64]) {
        let lambda = 6.0 * w;
        let rad = (self.ny - 1) / 2;
        // Forward sweep: (D + L) y = r, lower = x-1, y-1, z-1 in data order.
        for dz in -rad..=rad {
            let zc = self.center[2] + dz;
            for dy in -rad..=rad {
                let yc = self.center[1] + dy;
                let rid = self.row_id(yc, zc).unwrap();
                let (x_lo, n, off) = self.rows[rid];
                if n == 0 {
                    continue;
                }
                let ym = self.row_id(yc - 1, zc).map(|i| self.rows[i]);
                let zm = self.row_id(yc, zc - 1).map(|i| self.rows[i]);
                for k in 0..n as i32 {
                    let x = x_lo + k;
                    let i = off + k as usize;
                    let mut acc = r[i];
                    if k > 0 {
                        acc += w * z[i - 1];
                    }
                    for row in [ym, zm].iter().flatten() {
                        let dx = x - row.0;
                        if dx >= 0 && dx < row.1 as i32 {
                            acc += w * z[row.2 + dx as usize];
                        }
                    }
                    z[i] = acc / lambda;
                }
            }
        }
        // Scale by D, then backward sweep (D + U) z = y.
        for v in z.iter_mut() {
            *v *= lambda;
        }
        for dz in (-rad..=rad).rev() {
            let zc = self.center[2] + dz;
            for dy in (-rad..=rad).rev() {
                let yc = self.center[1] + dy;
                let rid = self.row_id(yc, zc).unwrap();
                let (x_lo, n, off) = self.rows[rid];
                if n == 0 {
                    continue;
                }
                let yp = self.row_id(yc + 1, zc).map(|i| self.rows[i]);
                let zp = self.row_id(yc, zc + 1).map(|i| self.rows[i]);
                for k in (0..n as i32).rev() {
                    let x = x_lo + k;
                    let i = off + k as usize;
                    let mut acc = z[i];
                    if k + 1 < n as i32 {
                        acc += w * z[i + 1];
                    }
                    for row in [yp, zp].iter().flatten() {
                        let dx = x - row.0;
                        if dx >= 0 && dx < row.1 as i32 {
                            acc += w * z[row.2 + dx as usize];
                        }
                    }
                    z[i] = acc / lambda;
                }
            }
        }
    }

    /// Solves L u = b on the ball with uniform edge weight w.
    pub fn solve(&self, w: f64, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        pcg(
            self.len,
            |x, out| self.laplacian_matvec(w, x, out),
            |r, out| self.sgs_apply(w, r, out),
            b,
            tol,
            max_iter,
        )
    }
}

/// The ball grid folded by coordinate reflections: domain
/// {x >= 0, y >= 0, z >= 0, |x| < rho}, valid for sources fixed by the
/// reflection group (the origin).  Works in the similarity-transformed
/// variables v = sqrt(m) u where m(x) = 2^{#nonzero coords} is the orbit size,
/// which makes the folded stencil symmetric: an edge crossing from coordinate
/// value 0 to 1 along any axis carries weight sqrt(2) w instead of w.
#[derive(Clone, Debug)]
pub struct OctantBallGrid {
    n_side: i32,
    /// (len, offset) for row id z * n_side + y; x always starts at 0.
    rows: Vec<(u32, usize)>,
    len: usize,
}

impl OctantBallGrid {
    pub fn new(rho: f64) -> Result<Self> {
        if rho < 2.0 {
            return Err(ModelError::KillRadiusTooSmall { rho, min: 2.0 });
        }
        let r = rho.ceil() as i32;
        let n_side = r + 1;
        let rho2 = rho * rho;
        let mut rows = Vec::with_capacity((n_side * n_side) as usize);
        let mut len = 0usize;
        for z in 0..n_side {
            for y in 0..n_side {
                let rem = rho2 - (z as f64 * z as f64 + y as f64 * y as f64);
                if rem < 0.0 {
                    rows.push((0, 0));
                    continue;
                }
                let n = ((rem.sqrt() + 1e-9).floor() as i32 + 1) as u32;
                rows.push((n, len));
                len += n as usize;
            }
        }
        Ok(OctantBallGrid { n_side, rows, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn row(&self, y: i32, z: i32) -> Option<(u32, usize)> {
        if y < 0 || z < 0 || y >= self.n_side || z >= self.n_side {
            return None;
        }
        let r = self.rows[(z * self.n_side + y) as usize];
        if r.0 == 0 {
            None
        } else {
            Some(r)
        }
    }

    #[inline]
    pub fn index(&self, x: i32, y: i32, z: i32) -> Option<usize> {
        let (n, off) = self.row(y.abs(), z.abs())?;
        let xa = x.abs();
        if xa >= n as i32 {
            return None;
        }
        Some(off + xa as usize)
    }

    /// Folded stencil matvec in the symmetrized variables.
    pub fn matvec(&self, w: f64, v: &[f64], out: &mut [f64]) {
        let lambda = 6.0 * w;
        let s2w = std::f64::consts::SQRT_2 * w;
        for z in 0..self.n_side {
            for y in 0..self.n_side {
                let Some((n, off)) = self.row(y, z) else { continue };
                let ym = if y > 0 { self.row(y - 1, z) } else { None };
                let yp = self.row(y + 1, z);
                let zm = if z > 0 { self.row(y, z - 1) } else { None };
                let zp = self.row(y, z + 1);
                let wy_m = if y == 1 { s2w } else { w };
                let wy_p = if y == 0 { s2w } else { w };
                let wz_m = if z == 1 { s2w } else { w };
                let wz_p = if z == 0 { s2w } else { w };
                for x in 0..n as i32 {
                    let i = off + x as usize;
                    let mut acc = lambda * v[i];
                    if x > 0 {
                        let wx = if x == 1 { s2w } else { w };
                        acc -= wx * v[i - 1];
                    }
                    if x + 1 < n as i32 {
                        let wx = if x == 0 { s2w } else { w };
                        acc -= wx * v[i + 1];
                    }
                    if let Some((nm, om)) = ym {
                        if x < nm as i32 {
                            acc -= wy_m * v[om + x as usize];
                        }
                    }
                    if let Some((np, op)) = yp {
                        if x < np as i32 {
                            acc -= wy_p * v[op + x as usize];
                        }
                    }
                    if let Some((nm, om)) = zm {
                        if x < nm as i32 {
                            acc -= wz_m * v[om + x as usize];
                        }
                    }
                    if let Some((np, op)) = zp {
                        if x < np as i32 {
                            acc -= wz_p * v[op + x as usize];
                        }
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// SGS preconditioner for the folded stencil (constant diagonal 6w).
    pub fn sgs_apply(&self, w: f64, r: &[f64], z_out: &mut [f64]) {
        let lambda = 6.0 * w;
        let s2w = std::f64::consts::SQRT_2 * w;
        for z in 0..self.n_side {
            for y in 0..self.n_side {
                let Some((n, off)) = self.row(y, z) else { continue };
                let ym = if y > 0 { self.row(y - 1, z) } else { None };
                let zm = if z > 0 { self.row(y, z - 1) } else { None };
                let wy = if y == 1 { s2w } else { w };
                let wz = if z == 1 { s2w } else { w };
                for x in 0..n as i32 {
                    let i = off + x as usize;
                    let mut acc = r[i];
                    if x > 0 {
                        let wx = if x == 1 { s2w } else { w };
                        acc += wx * z_out[i - 1];
                    }
                    if let Some((nm, om)) = ym {
                        if x < nm as i32 {
                            acc += wy * z_out[om + x as usize];
                        }
                    }
                    if let Some((nm, om)) = zm {
                        if x < nm as i32 {
                            acc += wz * z_out[om + x as usize];
                        }
                    }
                    z_out[i] = acc / lambda;
                }
            }
        }
        for v in z_out.iter_mut() {
            *v *= lambda;
        }
        for z in (0..self.n_side).rev() {
            for y in (0..self.n_side).rev() {
                let Some((n, off)) = self.row(y, z) else { continue };
                let yp = self.row(y + 1, z);
                let zp = self.row(y, z + 1);
                let wy = if y == 0 { s2w } else { w };
                let wz = if z == 0 { s2w } else { w };
                for x in (0..n as i32).rev() {
                    let i = off + x as usize;
                    let mut acc = z_out[i];
                    if x + 1 < n as i32 {
                        let wx = if x == 0 { s2w } else { w };
                        acc += wx * z_out[i + 1];
                    }
                    if let Some((np, op)) = yp {
                        if x < np as i32 {
                            acc += wy * z_out[op + x as usize];
                        }
                    }
                    if let Some((np, op)) = zp {
                        if x < np as i32 {
                            acc += wz * z_out[op + x as usize];
                        }
                    }
                    z_out[i] = acc / lambda;
                }
            }
        }
    }

    /// Solves L g(., 0) = delta_0 on the ball of radius rho around the origin
    /// with uniform edge weight w, exploiting the 8-fold symmetry.  Returns
    /// the Green values in folded layout; read with [`Self::value`].
    pub fn green_at_origin(&self, w: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        let mut b = vec![0.0; self.len];
        let i0 = self.index(0, 0, 0).ok_or(ModelError::EmptyDomain)?;
        // sqrt(m) at the origin is 1, so the folded right-hand side is delta.
        b[i0] = 1.0;
        let v = pcg(
            self.len,
            |x, out| self.matvec(w, x, out),
            |r, out| self.sgs_apply(w, r, out),
            &b,
            tol,
            max_iter,
        )?;
        Ok(v)
    }

    /// Green value g(0, (x,y,z)) from a folded solution vector: divide out the
    /// sqrt(m) similarity factor.  Returns 0 outside the ball.
    pub fn value(&self, v: &[f64], x: i32, y: i32, z: i32) -> f64 {
        let Some(i) = self.index(x, y, z) else { return 0.0 };
        let nonzero = (x != 0) as i32 + (y != 0) as i32 + (z != 0) as i32;
        v[i] / 2f64.powi(nonzero).sqrt()
    }
}

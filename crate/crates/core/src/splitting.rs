//! Invariant stable/center/unstable splittings of the linearized cocycle
//! `θ ↦ DF(K(θ))` over the rotation `θ ↦ θ + ω`.
//!
//! Every bundle is the graph of a linear map over a constant reference frame
//! built from the uncoupled fixed-point eigenvectors. The stable and
//! center-unstable graphs are fixed points of forward graph transforms, the
//! unstable and center-stable graphs of transforms of the inverse cocycle; the
//! center bundle is their intersection, solved in closed form.

use crate::error::{Error, Result};
use crate::fourier::{Grid, GridField};
use crate::lattice_model::ModelConfig;
use crate::pointwise::{apply_j, inverse, lowdin, max_abs, neg, shift_field, spectral_norm, MatrixField};
use crate::scalar::{f64_of, from_usize, lit, Real};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Stable,
    Center,
    Unstable,
}

/// Growth rates of the restricted cocycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    /// Forward contraction on the stable bundle.
    pub mu1: f64,
    /// Backward contraction on the unstable bundle.
    pub mu2: f64,
    /// Growth (forward or backward) on the center bundle.
    pub mu3: f64,
    /// Largest overshoot `g_n / μ^n` over all bundles and `n`.
    pub c_h: f64,
}

impl Rates {
    pub fn dichotomy(&self) -> bool {
        self.mu1 * self.mu3 < 1.0 && self.mu2 * self.mu3 < 1.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RefineOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    /// Starting cocycle power; doubled (up to 8) when the one-step transform fails to contract.
    pub npower: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { tol: 1e-14, max_sweeps: 200, npower: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct SplittingBundle<T: Real> {
    pub ns: usize,
    pub nc: usize,
    pub nu: usize,
    /// Constant reference frame, columns `[S | C | U]`.
    pub frame: DMatrix<T>,
    pub frame_inv: DMatrix<T>,
    pub omega: Vec<T>,
    /// `(n-ns) × ns`: stable bundle over the frame.
    pub stable_graph: MatrixField<T>,
    /// `ns × (n-ns)`: center-unstable bundle.
    pub cu_graph: MatrixField<T>,
    /// `(n-nu) × nu`, rows ordered (center, stable): unstable bundle.
    pub unstable_graph: MatrixField<T>,
    /// `nu × (n-nu)`, columns ordered (center, stable): center-stable bundle.
    pub cs_graph: MatrixField<T>,
    /// Per grid point, `[B^s | B^c | B^u]` with orthonormal blocks.
    pub basis: MatrixField<T>,
    pub basis_inv: MatrixField<T>,
    /// The same at `θ + ω`.
    pub basis_ahead: MatrixField<T>,
    pub basis_ahead_inv: MatrixField<T>,
    pub rates: Option<Rates>,
    /// Invariance defect of (stable, center, unstable).
    pub defect: [f64; 3],
    pub npower: usize,
    pub sweeps: usize,
}

/// Stable and unstable unit eigenvectors of a hyperbolic 2×2 matrix.
fn hyperbolic_eigenvectors<T: Real>(m: [[T; 2]; 2], site: usize) -> Result<([T; 2], [T; 2])> {
    let tr = m[0][0] + m[1][1];
    if tr.abs() <= lit(2.0) {
        return Err(Error::NonHyperbolic { site, trace: f64_of(tr) });
    }
    let disc = (tr * tr - lit(4.0)).sqrt();
    let two: T = lit(2.0);
    let (lu, ls) = if tr > T::zero() { ((tr + disc) / two, (tr - disc) / two) } else { ((tr - disc) / two, (tr + disc) / two) };
    let vec_for = |l: T| {
        let a = [m[0][1], l - m[0][0]];
        let b = [l - m[1][1], m[1][0]];
        let v = if a[0].abs() + a[1].abs() >= b[0].abs() + b[1].abs() { a } else { b };
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    };
    Ok((vec_for(ls), vec_for(lu)))
}

fn sub<T: Real>(m: &DMatrix<T>, r0: usize, c0: usize, nr: usize, nc: usize) -> DMatrix<T> {
    m.view((r0, c0), (nr, nc)).into_owned()
}

fn permute<T: Real>(m: &DMatrix<T>, perm: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

impl<T: Real> SplittingBundle<T> {
    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.basis.len()
    }

    fn range(&self, part: Part) -> (usize, usize) {
        match part {
            Part::Stable => (0, self.ns),
            Part::Center => (self.ns, self.nc),
            Part::Unstable => (self.ns + self.nc, self.nu),
        }
    }

    /// Orthonormal basis of one sub-bundle at grid point `g`.
    pub fn part_basis(&self, g: usize, part: Part) -> DMatrix<T> {
        let (c0, k) = self.range(part);
        sub(&self.basis[g], 0, c0, self.dim(), k)
    }

    pub fn part_basis_ahead(&self, g: usize, part: Part) -> DMatrix<T> {
        let (c0, k) = self.range(part);
        sub(&self.basis_ahead[g], 0, c0, self.dim(), k)
    }

    /// `Π^σ` at grid point `g`.
    pub fn projection(&self, g: usize, part: Part) -> DMatrix<T> {
        let (c0, k) = self.range(part);
        sub(&self.basis[g], 0, c0, self.dim(), k) * sub(&self.basis_inv[g], c0, 0, k, self.dim())
    }

    pub fn projection_ahead(&self, g: usize, part: Part) -> DMatrix<T> {
        let (c0, k) = self.range(part);
        sub(&self.basis_ahead[g], 0, c0, self.dim(), k) * sub(&self.basis_ahead_inv[g], c0, 0, k, self.dim())
    }

    /// Splits a tangent field into its three components.
    pub fn project(&self, field: &GridField<T>) -> [GridField<T>; 3] {
        let n = self.dim();
        let mut out = [GridField::zeros(n, field.ncols()), GridField::zeros(n, field.ncols()), GridField::zeros(n, field.ncols())];
        for g in 0..field.ncols() {
            let v = field.columns(g, 1).into_owned();
            let y = &self.basis_inv[g] * &v;
            for (i, part) in [Part::Stable, Part::Center, Part::Unstable].into_iter().enumerate() {
                let (c0, k) = self.range(part);
                let comp = sub(&self.basis[g], 0, c0, n, k) * y.rows(c0, k);
                out[i].set_column(g, &comp.column(0));
            }
        }
        out
    }

    /// Largest `|Ω(u, v)|` for unit `u ∈ E^s, v ∈ E^s ⊕ E^c` and `u ∈ E^u, v ∈ E^u ⊕ E^c`.
    pub fn symplectic_residual(&self) -> T {
        let mut worst = T::zero();
        for g in 0..self.grid_len() {
            let bs = self.part_basis(g, Part::Stable);
            let bc = self.part_basis(g, Part::Center);
            let bu = self.part_basis(g, Part::Unstable);
            for (x, y) in [(&bs, &bs), (&bs, &bc), (&bu, &bu), (&bu, &bc)] {
                if x.ncols() * y.ncols() > 0 {
                    worst = worst.max(max_abs(&(x.transpose() * apply_j(y))));
                }
            }
        }
        worst
    }
}

/// Uncoupled splitting: hyperbolic eigenvectors at quiescent sites, the full
/// tangent plane at the excited (center) sites.
pub fn initial_splitting<T: Real>(cfg: &ModelConfig<T>, centers: &[usize], grid_len: usize, omega: &[T]) -> Result<SplittingBundle<T>> {
    let sites = cfg.sites();
    let n = 2 * sites;
    let quiet: Vec<usize> = (0..sites).filter(|i| !centers.contains(i)).collect();
    let ns = quiet.len();
    let nc = 2 * centers.len();
    let mut frame = DMatrix::zeros(n, n);
    if ns > 0 {
        let m = cfg.single_site_map_matrix();
        for (k, &i) in quiet.iter().enumerate() {
            let (vs, vu) = hyperbolic_eigenvectors(m, i)?;
            frame[(2 * i, k)] = vs[0];
            frame[(2 * i + 1, k)] = vs[1];
            frame[(2 * i, ns + nc + k)] = vu[0];
            frame[(2 * i + 1, ns + nc + k)] = vu[1];
        }
    }
    for (k, &c) in centers.iter().enumerate() {
        frame[(2 * c, ns + 2 * k)] = T::one();
        frame[(2 * c + 1, ns + 2 * k + 1)] = T::one();
    }
    let frame_inv = inverse(&frame)?;
    let mut basis = DMatrix::zeros(n, n);
    for (c0, k) in [(0, ns), (ns, nc), (ns + nc, ns)] {
        let b = lowdin(&sub(&frame, 0, c0, n, k))?;
        basis.view_mut((0, c0), (n, k)).copy_from(&b);
    }
    let basis_inv = inverse(&basis)?;
    Ok(SplittingBundle {
        ns,
        nc,
        nu: ns,
        frame,
        frame_inv,
        omega: omega.to_vec(),
        stable_graph: vec![DMatrix::zeros(n - ns, ns); grid_len],
        cu_graph: vec![DMatrix::zeros(ns, n - ns); grid_len],
        unstable_graph: vec![DMatrix::zeros(n - ns, ns); grid_len],
        cs_graph: vec![DMatrix::zeros(ns, n - ns); grid_len],
        basis: vec![basis.clone(); grid_len],
        basis_inv: vec![basis_inv.clone(); grid_len],
        basis_ahead: vec![basis; grid_len],
        basis_ahead_inv: vec![basis_inv; grid_len],
        rates: None,
        defect: [f64::NAN; 3],
        npower: 1,
        sweeps: 0,
    })
}

struct Sweeper {
    last: f64,
    growth: usize,
    sweeps: usize,
}

impl Sweeper {
    fn new() -> Self {
        Self { last: f64::INFINITY, growth: 0, sweeps: 0 }
    }

    /// Records one sweep; `Ok(true)` once converged.
    fn record(&mut self, update: f64, scale: f64, tol: f64, max_sweeps: usize) -> Result<bool> {
        self.sweeps += 1;
        if !update.is_finite() {
            return Err(Error::ContractionFailure { update, sweeps: self.sweeps });
        }
        if update <= tol * (1.0 + scale) {
            return Ok(true);
        }
        if update > self.last {
            self.growth += 1;
            if self.growth >= 3 {
                return Err(Error::ContractionFailure { update, sweeps: self.sweeps });
            }
        } else {
            self.growth = 0;
        }
        self.last = update;
        if self.sweeps >= max_sweeps {
            return Err(Error::ContractionFailure { update, sweeps: self.sweeps });
        }
        Ok(false)
    }
}

fn field_diff<T: Real>(a: &[DMatrix<T>], b: &[DMatrix<T>]) -> (f64, f64) {
    let mut d = T::zero();
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        d = d.max(max_abs(&(x - y)));
        s = s.max(max_abs(x));
    }
    (f64_of(d), f64_of(s))
}

struct Graphs<T: Real> {
    stable: MatrixField<T>,
    cu: MatrixField<T>,
    unstable: MatrixField<T>,
    cs: MatrixField<T>,
    sweeps: usize,
}

fn iterate_graphs<T: Real>(
    bundle: &SplittingBundle<T>,
    grid: &Grid<T>,
    cocycle: &[DMatrix<T>],
    rot: &[T],
    opts: &RefineOptions,
) -> Result<Graphs<T>> {
    let n = bundle.dim();
    let (ns, nc, nu) = (bundle.ns, bundle.nc, bundle.nu);
    let no = n - ns;
    let tol = opts.tol;
    let back = neg(rot);
    let mut stable = bundle.stable_graph.clone();
    let mut cu = bundle.cu_graph.clone();
    let mut unstable = bundle.unstable_graph.clone();
    let mut cs = bundle.cs_graph.clone();
    let mut total = 0;
    if ns == 0 {
        return Ok(Graphs { stable, cu, unstable, cs, sweeps: 0 });
    }

    // forward blocks in frame order (s | c u)
    let a11: MatrixField<T> = cocycle.iter().map(|a| sub(a, 0, 0, ns, ns)).collect();
    let a12: MatrixField<T> = cocycle.iter().map(|a| sub(a, 0, ns, ns, no)).collect();
    let a21: MatrixField<T> = cocycle.iter().map(|a| sub(a, ns, 0, no, ns)).collect();
    let a22: MatrixField<T> = cocycle.iter().map(|a| sub(a, ns, ns, no, no)).collect();
    let a22inv = a22.iter().map(inverse).collect::<Result<MatrixField<T>>>()?;

    let mut sw = Sweeper::new();
    loop {
        let ahead = shift_field(grid, &stable, rot);
        let next: MatrixField<T> = (0..stable.len())
            .map(|g| &a22inv[g] * (&ahead[g] * (&a11[g] + &a12[g] * &stable[g]) - &a21[g]))
            .collect();
        let (d, s) = field_diff(&next, &stable);
        stable = next;
        if sw.record(d, s, tol, opts.max_sweeps)? {
            break;
        }
    }
    total += sw.sweeps;

    let mut sw = Sweeper::new();
    loop {
        let image = (0..cu.len())
            .map(|g| Ok((&a11[g] * &cu[g] + &a12[g]) * inverse(&(&a21[g] * &cu[g] + &a22[g]))?))
            .collect::<Result<MatrixField<T>>>()?;
        let next = shift_field(grid, &image, &back);
        let (d, s) = field_diff(&next, &cu);
        cu = next;
        if sw.record(d, s, tol, opts.max_sweeps)? {
            break;
        }
    }
    total += sw.sweeps;

    // inverse cocycle in the order (u | c s)
    let perm: Vec<usize> = (ns + nc..n).chain(ns..ns + nc).chain(0..ns).collect();
    let binv = cocycle.iter().map(|a| Ok(permute(&inverse(a)?, &perm))).collect::<Result<MatrixField<T>>>()?;
    let nv = n - nu;
    let b11: MatrixField<T> = binv.iter().map(|b| sub(b, 0, 0, nu, nu)).collect();
    let b12: MatrixField<T> = binv.iter().map(|b| sub(b, 0, nu, nu, nv)).collect();
    let b21: MatrixField<T> = binv.iter().map(|b| sub(b, nu, 0, nv, nu)).collect();
    let b22: MatrixField<T> = binv.iter().map(|b| sub(b, nu, nu, nv, nv)).collect();
    let b22inv = b22.iter().map(inverse).collect::<Result<MatrixField<T>>>()?;

    let mut sw = Sweeper::new();
    loop {
        let ahead = shift_field(grid, &unstable, rot);
        let image: MatrixField<T> = (0..unstable.len())
            .map(|g| &b22inv[g] * (&unstable[g] * (&b11[g] + &b12[g] * &ahead[g]) - &b21[g]))
            .collect();
        let next = shift_field(grid, &image, &back);
        let (d, s) = field_diff(&next, &unstable);
        unstable = next;
        if sw.record(d, s, tol, opts.max_sweeps)? {
            break;
        }
    }
    total += sw.sweeps;

    let mut sw = Sweeper::new();
    loop {
        let ahead = shift_field(grid, &cs, rot);
        let next = (0..cs.len())
            .map(|g| Ok((&b11[g] * &ahead[g] + &b12[g]) * inverse(&(&b21[g] * &ahead[g] + &b22[g]))?))
            .collect::<Result<MatrixField<T>>>()?;
        let (d, s) = field_diff(&next, &cs);
        cs = next;
        if sw.record(d, s, tol, opts.max_sweeps)? {
            break;
        }
    }
    total += sw.sweeps;
    Ok(Graphs { stable, cu, unstable, cs, sweeps: total })
}

/// Bundle bases (in phase coordinates) from graph values at one point.
fn assemble<T: Real>(
    frame: &DMatrix<T>,
    (ns, nc, nu): (usize, usize, usize),
    u: &DMatrix<T>,
    w: &DMatrix<T>,
    v: &DMatrix<T>,
    z: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let n = frame.nrows();
    let mut cols = DMatrix::zeros(n, n);
    // stable: [I; u]
    for k in 0..ns {
        cols[(k, k)] = T::one();
    }
    if ns > 0 {
        cols.view_mut((ns, 0), (n - ns, ns)).copy_from(u);
    }
    // center: intersection of the center-unstable and center-stable graphs
    let c0 = ns;
    if ns > 0 {
        let (wc, wu) = (sub(w, 0, 0, ns, nc), sub(w, 0, nc, ns, nu));
        let (zc, zs) = (sub(z, 0, 0, nu, nc), sub(z, 0, nc, nu, ns));
        let lhs = DMatrix::identity(ns, ns) - &wu * &zs;
        let s = inverse(&lhs)? * (&wc + &wu * &zc);
        let uu = &zc + &zs * &s;
        cols.view_mut((0, c0), (ns, nc)).copy_from(&s);
        cols.view_mut((ns + nc, c0), (nu, nc)).copy_from(&uu);
    }
    for k in 0..nc {
        cols[(ns + k, c0 + k)] = T::one();
    }
    // unstable: v rows are (center, stable)
    let u0 = ns + nc;
    if nu > 0 {
        cols.view_mut((ns, u0), (nc, nu)).copy_from(&sub(v, 0, 0, nc, nu));
        cols.view_mut((0, u0), (ns, nu)).copy_from(&sub(v, nc, 0, ns, nu));
    }
    for k in 0..nu {
        cols[(u0 + k, u0 + k)] = T::one();
    }
    let raw = frame * cols;
    let mut out = DMatrix::zeros(n, n);
    for (a, k) in [(0, ns), (ns, nc), (u0, nu)] {
        out.view_mut((0, a), (n, k)).copy_from(&lowdin(&sub(&raw, 0, a, n, k))?);
    }
    Ok(out)
}

fn assemble_all<T: Real>(bundle: &SplittingBundle<T>, u: &[DMatrix<T>], w: &[DMatrix<T>], v: &[DMatrix<T>], z: &[DMatrix<T>]) -> Result<(MatrixField<T>, MatrixField<T>)> {
    let dims = (bundle.ns, bundle.nc, bundle.nu);
    let basis = (0..u.len())
        .map(|g| assemble(&bundle.frame, dims, &u[g], &w[g], &v[g], &z[g]))
        .collect::<Result<MatrixField<T>>>()?;
    let inv = basis.iter().map(inverse).collect::<Result<MatrixField<T>>>()?;
    Ok((basis, inv))
}

/// Cocycle in frame coordinates, raised to the `npower`-th iterate.
fn frame_cocycle<T: Real>(bundle: &SplittingBundle<T>, grid: &Grid<T>, cocycle: &[DMatrix<T>], omega: &[T], npower: usize) -> MatrixField<T> {
    let one: MatrixField<T> = cocycle.iter().map(|a| &bundle.frame_inv * a * &bundle.frame).collect();
    let mut prod = one.clone();
    for k in 1..npower {
        let shift: Vec<T> = omega.iter().map(|&w| w * from_usize::<T>(k)).collect();
        let ahead = shift_field(grid, &one, &shift);
        prod = ahead.iter().zip(&prod).map(|(a, p)| a * p).collect();
    }
    prod
}

/// Graph-transform refinement of `bundle` to the invariant splitting of `cocycle`.
pub fn graph_refine<T: Real>(
    bundle: &SplittingBundle<T>,
    grid: &Grid<T>,
    cocycle: &[DMatrix<T>],
    omega: &[T],
    opts: &RefineOptions,
) -> Result<SplittingBundle<T>> {
    if cocycle.len() != grid.len || bundle.grid_len() != grid.len {
        return Err(Error::LengthMismatch { expected: grid.len, got: cocycle.len() });
    }
    let mut npower = opts.npower.max(1);
    let graphs = loop {
        let rot: Vec<T> = omega.iter().map(|&w| w * from_usize::<T>(npower)).collect();
        let a = frame_cocycle(bundle, grid, cocycle, omega, npower);
        match iterate_graphs(bundle, grid, &a, &rot, opts) {
            Ok(g) => break g,
            Err(Error::ContractionFailure { .. }) | Err(Error::SingularSystem) if npower < 8 => npower *= 2,
            Err(e) => return Err(e),
        }
    };
    let mut out = bundle.clone();
    out.omega = omega.to_vec();
    out.npower = npower;
    out.sweeps = graphs.sweeps;
    let (basis, basis_inv) = assemble_all(bundle, &graphs.stable, &graphs.cu, &graphs.unstable, &graphs.cs)?;
    let sh = |f: &MatrixField<T>| shift_field(grid, f, omega);
    let (ahead, ahead_inv) = assemble_all(bundle, &sh(&graphs.stable), &sh(&graphs.cu), &sh(&graphs.unstable), &sh(&graphs.cs))?;
    out.stable_graph = graphs.stable;
    out.cu_graph = graphs.cu;
    out.unstable_graph = graphs.unstable;
    out.cs_graph = graphs.cs;
    out.basis = basis;
    out.basis_inv = basis_inv;
    out.basis_ahead = ahead;
    out.basis_ahead_inv = ahead_inv;
    out.defect = invariance_defect(&out, cocycle);
    out.rates = None;
    Ok(out)
}

/// `sup_θ ∥(I - Π^σ(θ+ω)) DF B^σ(θ)∥ / ∥DF B^σ(θ)∥` for each part.
pub fn invariance_defect<T: Real>(bundle: &SplittingBundle<T>, cocycle: &[DMatrix<T>]) -> [f64; 3] {
    let mut out = [0.0f64; 3];
    for (i, part) in [Part::Stable, Part::Center, Part::Unstable].into_iter().enumerate() {
        let (c0, k) = bundle.range(part);
        if k == 0 {
            continue;
        }
        for g in 0..bundle.grid_len() {
            let img = &cocycle[g] * bundle.part_basis(g, part);
            let coords = sub(&bundle.basis_ahead_inv[g], c0, 0, k, bundle.dim()) * &img;
            let off = &img - sub(&bundle.basis_ahead[g], 0, c0, bundle.dim(), k) * coords;
            let r = f64_of(spectral_norm(&off) / spectral_norm(&img));
            out[i] = out[i].max(r);
        }
    }
    out
}

/// Restricted cocycle `B^σ(θ+ω)ᵀ DF B^σ(θ)` in orthonormal coordinates.
pub fn restricted_cocycle<T: Real>(bundle: &SplittingBundle<T>, cocycle: &[DMatrix<T>], part: Part) -> MatrixField<T> {
    (0..bundle.grid_len())
        .map(|g| bundle.part_basis_ahead(g, part).transpose() * &cocycle[g] * bundle.part_basis(g, part))
        .collect()
}

/// Least-squares geometric rate and overshoot of a sequence `g_1..g_n` (with `g_0 = 1`).
fn fit_rate(norms: &[f64]) -> (f64, f64) {
    let n = norms.len() as f64;
    let xs: Vec<f64> = (1..=norms.len()).map(|i| i as f64).collect();
    let ys: Vec<f64> = norms.iter().map(|v| v.max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { my };
    let mu = slope.exp();
    let ch = norms.iter().enumerate().fold(1.0f64, |a, (i, g)| a.max(g / mu.powi(i as i32 + 1)));
    (mu, ch)
}

/// `sup_θ ∥Φ_n(θ)∥` for `n = 1..nmax` where `Φ_n` is the forward product of `a`
/// (or of `a^{-1}` backwards when `backward`).
fn product_norms<T: Real>(grid: &Grid<T>, a: &[DMatrix<T>], omega: &[T], nmax: usize, backward: bool) -> Result<Vec<f64>> {
    let step: MatrixField<T> = if backward { a.iter().map(inverse).collect::<Result<_>>()? } else { a.to_vec() };
    let mut prod = step.clone();
    let mut out = Vec::with_capacity(nmax);
    for n in 1..=nmax {
        if n > 1 {
            let ahead = shift_field(grid, &prod, omega);
            prod = if backward {
                step.iter().zip(&ahead).map(|(s, p)| s * p).collect()
            } else {
                ahead.iter().zip(&step).map(|(p, s)| p * s).collect()
            };
        }
        out.push(prod.iter().fold(0.0f64, |m, p| m.max(f64_of(spectral_norm(p)))));
    }
    Ok(out)
}

/// Power-iterates the restricted cocycles and fits geometric rates.
pub fn measure_rates<T: Real>(bundle: &SplittingBundle<T>, grid: &Grid<T>, cocycle: &[DMatrix<T>], omega: &[T], nmax: usize) -> Result<Rates> {
    let nmax = nmax.max(1);
    let mut c_h = 1.0f64;
    let mut rate = |part: Part, backward: bool| -> Result<f64> {
        let a = restricted_cocycle(bundle, cocycle, part);
        if a.first().map(|m| m.ncols()).unwrap_or(0) == 0 {
            return Ok(0.0);
        }
        let (mu, ch) = fit_rate(&product_norms(grid, &a, omega, nmax, backward)?);
        c_h = c_h.max(ch);
        Ok(mu)
    };
    let mu1 = rate(Part::Stable, false)?;
    let mu2 = rate(Part::Unstable, true)?;
    let mu3 = rate(Part::Center, false)?.max(rate(Part::Center, true)?);
    Ok(Rates { mu1, mu2, mu3, c_h })
}

/// Phase-space Jacobians along the grid values of an embedding.
pub fn cocycle_along<T: Real>(cfg: &ModelConfig<T>, values: &GridField<T>) -> MatrixField<T> {
    (0..values.ncols())
        .map(|g| {
            let x: Vec<T> = values.column(g).iter().copied().collect();
            cfg.map_with_jacobian(&x).1
        })
        .collect()
}

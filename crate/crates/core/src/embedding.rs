//! Fourier representation of torus embeddings `K: T^l → phase space`.
//!
//! Rows are phase coordinates in site-major order (`q_i` then `p_i` for every
//! window site). The `q` rows may carry an integer winding: the lift is
//! `q_i(θ) = 2π w_i·θ + periodic part`.

use crate::decay_spaces::Site;
use crate::error::{Error, Result};
use crate::fourier::{phase, Grid, GridField};
use crate::scalar::{cabs, from_i64, Real};
use nalgebra::DMatrix;
use num_complex::Complex;

#[derive(Clone, Debug, PartialEq)]
pub struct TorusEmbedding<T: Real> {
    pub l: usize,
    pub kmax: Vec<usize>,
    pub grid: Vec<usize>,
    pub sites: Vec<Site>,
    pub centers: Vec<Site>,
    /// Per row, coefficients over the box `|k_a| ≤ kmax_a` (row-major, last angle fastest).
    pub coeffs: Vec<Vec<Complex<T>>>,
    /// Winding vector of each site's `q` row.
    pub winding: Vec<Vec<i64>>,
}

/// Iterates the wave vectors of the box `|k_a| ≤ kmax_a` in storage order.
pub fn box_modes(kmax: &[usize]) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for &k in kmax {
        let k = k as i64;
        let mut next = Vec::with_capacity(out.len() * (2 * k as usize + 1));
        for v in &out {
            for x in -k..=k {
                let mut w = v.clone();
                w.push(x);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Storage index of `k` inside the box, if it lies there.
pub fn box_index(kmax: &[usize], k: &[i64]) -> Option<usize> {
    let mut idx = 0;
    for (a, &km) in kmax.iter().enumerate() {
        if k[a].unsigned_abs() as usize > km {
            return None;
        }
        idx = idx * (2 * km + 1) + (k[a] + km as i64) as usize;
    }
    Some(idx)
}

impl<T: Real> TorusEmbedding<T> {
    /// Zero embedding (every site at the fixed point).
    pub fn zeros(l: usize, kmax: Vec<usize>, grid: Vec<usize>, sites: Vec<Site>, centers: Vec<Site>) -> Self {
        let nbox = kmax.iter().map(|k| 2 * k + 1).product();
        let rows = 2 * sites.len();
        Self {
            l,
            kmax,
            grid,
            winding: vec![vec![0; l]; sites.len()],
            sites,
            centers,
            coeffs: vec![vec![Complex::new(T::zero(), T::zero()); nbox]; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.coeffs.len()
    }

    pub fn make_grid(&self) -> Grid<T> {
        Grid::new(&self.grid)
    }

    pub fn site_index(&self, site: &[i64]) -> Option<usize> {
        self.sites.iter().position(|s| s.as_slice() == site)
    }

    pub fn coefficient(&self, row: usize, k: &[i64]) -> Complex<T> {
        box_index(&self.kmax, k)
            .map(|i| self.coeffs[row][i])
            .unwrap_or_else(|| Complex::new(T::zero(), T::zero()))
    }

    pub fn set_coefficient(&mut self, row: usize, k: &[i64], value: Complex<T>) {
        if let Some(i) = box_index(&self.kmax, k) {
            self.coeffs[row][i] = value;
        }
    }

    /// Largest `|c_{-k} - conj(c_k)|` over all rows and modes.
    pub fn reality_defect(&self) -> T {
        let modes = box_modes(&self.kmax);
        let mut worst = T::zero();
        for row in &self.coeffs {
            for (i, k) in modes.iter().enumerate() {
                let neg: Vec<i64> = k.iter().map(|x| -x).collect();
                let j = box_index(&self.kmax, &neg).unwrap();
                worst = worst.max(cabs(row[j] - row[i].conj()));
            }
        }
        worst
    }

    /// Periodic part on the grid (winding excluded).
    fn periodic_grid(&self, grid: &Grid<T>) -> Result<GridField<T>> {
        grid.check_band(&self.kmax)?;
        let modes = box_modes(&self.kmax);
        let slots: Vec<usize> = modes.iter().map(|k| grid.slot_of(k)).collect();
        let mut out = DMatrix::zeros(self.rows(), grid.len);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); grid.len];
        for (r, row) in self.coeffs.iter().enumerate() {
            buf.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
            for (c, &s) in row.iter().zip(&slots) {
                buf[s] = *c;
            }
            let vals = grid.synthesize(&buf);
            for g in 0..grid.len {
                out[(r, g)] = vals[g];
            }
        }
        Ok(out)
    }

    /// Values of the lift at every grid point.
    pub fn evaluate_grid(&self) -> Result<GridField<T>> {
        self.evaluate_on(&self.make_grid())
    }

    pub fn evaluate_on(&self, grid: &Grid<T>) -> Result<GridField<T>> {
        let mut out = self.periodic_grid(grid)?;
        let two_pi = T::two_pi();
        for (s, w) in self.winding.iter().enumerate() {
            if w.iter().all(|&x| x == 0) {
                continue;
            }
            for g in 0..grid.len {
                let th = grid.theta(g);
                let lin = w.iter().zip(&th).fold(T::zero(), |a, (&wi, &t)| a + from_i64::<T>(wi) * t);
                out[(2 * s, g)] += two_pi * lin;
            }
        }
        Ok(out)
    }

    /// Inverse of [`evaluate_grid`](Self::evaluate_grid): the winding is removed
    /// before the transform and the result is truncated to `kmax`.
    pub fn from_grid(&self, values: &GridField<T>, kmax: &[usize]) -> Result<Self> {
        let grid = self.make_grid();
        from_grid_with(&grid, values, kmax, self)
    }

    /// `K ∘ T_ω`.
    pub fn rotate(&self, omega: &[T]) -> Self {
        let modes = box_modes(&self.kmax);
        let phases: Vec<Complex<T>> = modes.iter().map(|k| phase(k, omega)).collect();
        let mut out = self.clone();
        for row in out.coeffs.iter_mut() {
            for (c, p) in row.iter_mut().zip(&phases) {
                *c = *c * *p;
            }
        }
        let zero = box_index(&self.kmax, &vec![0; self.l]).unwrap();
        for (s, w) in self.winding.iter().enumerate() {
            let lin = w.iter().zip(omega).fold(T::zero(), |a, (&wi, &o)| a + from_i64::<T>(wi) * o);
            out.coeffs[2 * s][zero].re += T::two_pi() * lin;
        }
        out
    }

    /// Spectral derivative: one field per angle, each `rows × grid points`.
    pub fn derivative(&self) -> Result<Vec<GridField<T>>> {
        self.derivative_on(&self.make_grid())
    }

    pub fn derivative_on(&self, grid: &Grid<T>) -> Result<Vec<GridField<T>>> {
        let mut out = Vec::with_capacity(self.l);
        let two_pi = T::two_pi();
        for a in 0..self.l {
            let mut d = self.clone();
            let modes = box_modes(&self.kmax);
            for row in d.coeffs.iter_mut() {
                for (c, k) in row.iter_mut().zip(&modes) {
                    *c = *c * Complex::new(T::zero(), two_pi * from_i64::<T>(k[a]));
                }
            }
            let mut f = d.periodic_grid(grid)?;
            for (s, w) in self.winding.iter().enumerate() {
                if w[a] != 0 {
                    let add = two_pi * from_i64::<T>(w[a]);
                    for g in 0..grid.len {
                        f[(2 * s, g)] += add;
                    }
                }
            }
            out.push(f);
        }
        Ok(out)
    }

    /// `Σ_k |K̂_{i,k}| e^{2πρ|k|_1}` for site index `site` (Euclidean norm over `(q,p)`).
    pub fn majorant_norm(&self, site: usize, rho: T) -> T {
        let modes = box_modes(&self.kmax);
        let mut s = T::zero();
        for (i, k) in modes.iter().enumerate() {
            let a = cabs(self.coeffs[2 * site][i]);
            let b = cabs(self.coeffs[2 * site + 1][i]);
            let k1: i64 = k.iter().map(|x| x.abs()).sum();
            s += (a * a + b * b).sqrt() * (T::two_pi() * rho * from_i64::<T>(k1)).exp();
        }
        s
    }

    /// Fraction of ℓ¹ coefficient mass in modes with `|k_a| > kmax_a - band` for some `a`.
    pub fn tail_fraction(&self, band: usize) -> T {
        let modes = box_modes(&self.kmax);
        let top: Vec<bool> = modes
            .iter()
            .map(|k| k.iter().zip(&self.kmax).any(|(&ka, &km)| ka.unsigned_abs() as usize + band > km))
            .collect();
        let (mut total, mut tail) = (T::zero(), T::zero());
        for row in &self.coeffs {
            for (c, &t) in row.iter().zip(&top) {
                total += cabs(*c);
                if t {
                    tail += cabs(*c);
                }
            }
        }
        if total == T::zero() {
            T::zero()
        } else {
            tail / total
        }
    }

    /// Copy with a different Fourier box; modes outside the new box are dropped.
    pub fn with_band(&self, kmax: Vec<usize>) -> Self {
        let mut out = Self::zeros(self.l, kmax.clone(), self.grid.clone(), self.sites.clone(), self.centers.clone());
        out.winding = self.winding.clone();
        for (i, k) in box_modes(&kmax).iter().enumerate() {
            if let Some(j) = box_index(&self.kmax, k) {
                for r in 0..self.rows() {
                    out.coeffs[r][i] = self.coeffs[r][j];
                }
            }
        }
        out
    }

    /// Copy on a larger window; new sites carry zero coefficients.
    pub fn with_sites(&self, sites: Vec<Site>) -> Self {
        let mut out = Self::zeros(self.l, self.kmax.clone(), self.grid.clone(), sites, self.centers.clone());
        for (s, site) in out.sites.clone().iter().enumerate() {
            if let Some(old) = self.site_index(site) {
                out.coeffs[2 * s] = self.coeffs[2 * old].clone();
                out.coeffs[2 * s + 1] = self.coeffs[2 * old + 1].clone();
                out.winding[s] = self.winding[old].clone();
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.sites != other.sites || self.kmax != other.kmax || self.l != other.l {
            return Err(Error::WindowMismatch);
        }
        let mut out = self.clone();
        for (r, row) in out.coeffs.iter_mut().enumerate() {
            for (c, d) in row.iter_mut().zip(&other.coeffs[r]) {
                *c = *c + *d;
            }
        }
        for (w, v) in out.winding.iter_mut().zip(&other.winding) {
            for (a, b) in w.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Maximum coefficient difference to another embedding on the same box.
    pub fn max_coeff_diff(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for (a, b) in self.coeffs.iter().zip(&other.coeffs) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max(cabs(*x - *y));
            }
        }
        worst
    }

    pub fn mean_value(&self, row: usize) -> T {
        self.coefficient(row, &vec![0; self.l]).re
    }

    pub fn nbox(&self) -> usize {
        self.coeffs.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Number of collocation points.
    pub fn grid_points(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Builds an embedding with the metadata of `like` from grid values.
pub fn from_grid_with<T: Real>(
    grid: &Grid<T>,
    values: &GridField<T>,
    kmax: &[usize],
    like: &TorusEmbedding<T>,
) -> Result<TorusEmbedding<T>> {
    grid.check_band(kmax)?;
    if values.nrows() != like.rows() || values.ncols() != grid.len {
        return Err(Error::LengthMismatch { expected: like.rows(), got: values.nrows() });
    }
    let mut out = TorusEmbedding::zeros(like.l, kmax.to_vec(), grid.dims.clone(), like.sites.clone(), like.centers.clone());
    out.winding = like.winding.clone();
    let modes = box_modes(kmax);
    let slots: Vec<usize> = modes.iter().map(|k| grid.slot_of(k)).collect();
    let two_pi = T::two_pi();
    let mut row = vec![T::zero(); grid.len];
    for r in 0..values.nrows() {
        for g in 0..grid.len {
            row[g] = values[(r, g)];
        }
        if r % 2 == 0 {
            let w = &like.winding[r / 2];
            if w.iter().any(|&x| x != 0) {
                for g in 0..grid.len {
                    let th = grid.theta(g);
                    let lin = w.iter().zip(&th).fold(T::zero(), |a, (&wi, &t)| a + from_i64::<T>(wi) * t);
                    row[g] -= two_pi * lin;
                }
            }
        }
        let c = grid.analyze(&row);
        for (i, &s) in slots.iter().enumerate() {
            out.coeffs[r][i] = c[s];
        }
    }
    Ok(out)
}

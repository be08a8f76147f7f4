//! Collocation grids on `T^l` and the FFT plumbing behind them.
//!
//! Grid point `g` sits at `θ = (i_0/M_0, ..., i_{l-1}/M_{l-1})` in row-major
//! order (last angle fastest). Fields are matrices with one column per grid
//! point. Grid sizes are odd so every mode has a conjugate partner.

use crate::error::{Error, Result};
use crate::scalar::{from_i64, from_usize, Real};
use nalgebra::DMatrix;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Field sampled on a grid: rows are components, columns are grid points.
pub type GridField<T> = DMatrix<T>;

#[derive(Clone)]
pub struct Grid<T: Real> {
    pub dims: Vec<usize>,
    pub len: usize,
    forward: Vec<Arc<dyn Fft<T>>>,
    inverse: Vec<Arc<dyn Fft<T>>>,
}

impl<T: Real> std::fmt::Debug for Grid<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("dims", &self.dims).finish()
    }
}

/// Signed wave number of FFT slot `m` on an odd grid of size `n`.
#[inline]
pub fn wave_number(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

#[inline]
fn slot(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

impl<T: Real> Grid<T> {
    /// Builds a grid; even sizes are bumped to the next odd size.
    pub fn new(dims: &[usize]) -> Self {
        let dims: Vec<usize> = dims.iter().map(|&m| if m % 2 == 0 { m + 1 } else { m.max(1) }).collect();
        let mut planner = FftPlanner::new();
        let forward = dims.iter().map(|&m| planner.plan_fft_forward(m)).collect();
        let inverse = dims.iter().map(|&m| planner.plan_fft_inverse(m)).collect();
        let len = dims.iter().product();
        Self { dims, len, forward, inverse }
    }

    /// Default grid resolving modes up to `kmax` with a factor-two margin.
    pub fn for_band(kmax: &[usize]) -> Self {
        let dims: Vec<usize> = kmax.iter().map(|&k| 4 * k + 1).collect();
        Self::new(&dims)
    }

    pub fn l(&self) -> usize {
        self.dims.len()
    }

    /// Largest mode resolved without aliasing along each angle.
    pub fn band(&self) -> Vec<usize> {
        self.dims.iter().map(|m| m / 2).collect()
    }

    pub fn check_band(&self, kmax: &[usize]) -> Result<()> {
        for (&k, &m) in kmax.iter().zip(&self.dims) {
            if m < 2 * k + 1 {
                return Err(Error::Aliasing { grid: m, kmax: k });
            }
        }
        Ok(())
    }

    /// Multi-index of grid point `g`.
    pub fn index(&self, mut g: usize) -> Vec<usize> {
        let mut idx = vec![0; self.l()];
        for a in (0..self.l()).rev() {
            idx[a] = g % self.dims[a];
            g /= self.dims[a];
        }
        idx
    }

    pub fn theta(&self, g: usize) -> Vec<T> {
        self.index(g)
            .iter()
            .zip(&self.dims)
            .map(|(&i, &m)| from_usize::<T>(i) / from_usize::<T>(m))
            .collect()
    }

    /// Signed wave vector of FFT slot `g`.
    pub fn mode(&self, g: usize) -> Vec<i64> {
        self.index(g).iter().zip(&self.dims).map(|(&i, &m)| wave_number(i, m)).collect()
    }

    /// FFT slot of wave vector `k` (taken modulo the grid).
    pub fn slot_of(&self, k: &[i64]) -> usize {
        let mut g = 0;
        for a in 0..self.l() {
            g = g * self.dims[a] + slot(k[a], self.dims[a]);
        }
        g
    }

    fn transform(&self, data: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>]) {
        let l = self.l();
        let mut stride = 1;
        let mut line = Vec::new();
        for a in (0..l).rev() {
            let m = self.dims[a];
            if m > 1 {
                let outer = self.len / (m * stride);
                line.resize(m, Complex::new(T::zero(), T::zero()));
                for o in 0..outer {
                    for s in 0..stride {
                        let base = o * m * stride + s;
                        for (i, v) in line.iter_mut().enumerate() {
                            *v = data[base + i * stride];
                        }
                        plans[a].process(&mut line);
                        for (i, v) in line.iter().enumerate() {
                            data[base + i * stride] = *v;
                        }
                    }
                }
            }
            stride *= m;
        }
    }

    /// Fourier coefficients `c_k` with `f(θ) = Σ_k c_k e^{2πi k·θ}`, in FFT slot order.
    pub fn analyze(&self, values: &[T]) -> Vec<Complex<T>> {
        let mut data: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut data, &self.forward);
        let scale = T::one() / from_usize::<T>(self.len);
        for v in data.iter_mut() {
            *v = *v * scale;
        }
        data
    }

    /// Real part of `Σ_k c_k e^{2πi k·θ}` at the grid points.
    pub fn synthesize(&self, coeffs: &[Complex<T>]) -> Vec<T> {
        let mut data = coeffs.to_vec();
        self.transform(&mut data, &self.inverse);
        data.iter().map(|c| c.re).collect()
    }

    /// Applies `c_k ↦ m(k) c_k` to every row of a field.
    pub fn multiply_modes<F>(&self, field: &GridField<T>, mut multiplier: F) -> GridField<T>
    where
        F: FnMut(&[i64]) -> Complex<T>,
    {
        let modes: Vec<Complex<T>> = (0..self.len).map(|g| multiplier(&self.mode(g))).collect();
        let mut out = field.clone();
        let mut row = vec![T::zero(); self.len];
        for r in 0..field.nrows() {
            for g in 0..self.len {
                row[g] = field[(r, g)];
            }
            let mut c = self.analyze(&row);
            for (v, m) in c.iter_mut().zip(&modes) {
                *v = *v * *m;
            }
            let back = self.synthesize(&c);
            for g in 0..self.len {
                out[(r, g)] = back[g];
            }
        }
        out
    }

    /// `f(θ + ω)` by trigonometric interpolation.
    pub fn shift(&self, field: &GridField<T>, omega: &[T]) -> GridField<T> {
        self.multiply_modes(field, |k| phase(k, omega))
    }

    /// Derivative along angle `a` (in units where the period is 1).
    pub fn derivative(&self, field: &GridField<T>, a: usize) -> GridField<T> {
        let two_pi = T::two_pi();
        self.multiply_modes(field, |k| Complex::new(T::zero(), two_pi * from_i64::<T>(k[a])))
    }

    /// Row averages (the zero mode).
    pub fn average(&self, field: &GridField<T>) -> nalgebra::DVector<T> {
        let inv = T::one() / from_usize::<T>(self.len);
        nalgebra::DVector::from_iterator(
            field.nrows(),
            (0..field.nrows()).map(|r| field.row(r).iter().fold(T::zero(), |a, &b| a + b) * inv),
        )
    }

    /// Keeps only modes with `|k_a| ≤ kmax_a`.
    pub fn truncate(&self, field: &GridField<T>, kmax: &[usize]) -> GridField<T> {
        self.multiply_modes(field, |k| {
            if k.iter().zip(kmax).all(|(&ka, &km)| ka.unsigned_abs() as usize <= km) {
                Complex::new(T::one(), T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            }
        })
    }
}

/// `e^{2πi k·ω}`.
pub fn phase<T: Real>(k: &[i64], omega: &[T]) -> Complex<T> {
    let arg = k
        .iter()
        .zip(omega)
        .fold(T::zero(), |s, (&ki, &wi)| s + from_i64::<T>(ki) * wi)
        * T::two_pi();
    Complex::new(arg.cos(), arg.sin())
}

/// Sup norm of a field.
pub fn sup_norm<T: Real>(field: &GridField<T>) -> T {
    field.iter().fold(T::zero(), |a, &b| a.max(b.abs()))
}

/// Frac part reduction used when comparing rotation numbers.
pub fn wrap_unit<T: Real>(x: T) -> T {
    let f = x - x.floor();
    if f >= T::one() {
        f - T::one()
    } else {
        f
    }
}

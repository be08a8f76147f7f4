//! Fields of small matrices, one per grid point, and the dense kernels
//! applied to them.

use crate::error::{Error, Result};
use crate::fourier::{Grid, GridField};
use crate::scalar::Real;
use nalgebra::DMatrix;

pub type MatrixField<T> = Vec<DMatrix<T>>;

/// Packs a matrix field into a grid field with `rows·cols` components (column-major).
pub fn pack<T: Real>(field: &[DMatrix<T>], rows: usize, cols: usize) -> GridField<T> {
    let mut out = GridField::zeros(rows * cols, field.len());
    for (g, m) in field.iter().enumerate() {
        for (i, v) in m.iter().enumerate() {
            out[(i, g)] = *v;
        }
    }
    out
}

pub fn unpack<T: Real>(packed: &GridField<T>, rows: usize, cols: usize) -> MatrixField<T> {
    (0..packed.ncols())
        .map(|g| DMatrix::from_iterator(rows, cols, packed.column(g).iter().copied()))
        .collect()
}

/// `θ ↦ M(θ + ω)` by trigonometric interpolation.
pub fn shift_field<T: Real>(grid: &Grid<T>, field: &[DMatrix<T>], omega: &[T]) -> MatrixField<T> {
    let (r, c) = field.first().map(|m| m.shape()).unwrap_or((0, 0));
    if r * c == 0 {
        return field.to_vec();
    }
    unpack(&grid.shift(&pack(field, r, c), omega), r, c)
}

pub fn neg<T: Real>(omega: &[T]) -> Vec<T> {
    omega.iter().map(|&w| -w).collect()
}

/// `J∞ M` for the interleaved standard symplectic structure.
pub fn apply_j<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() / 2 {
        for c in 0..m.ncols() {
            out[(2 * i, c)] = m[(2 * i + 1, c)];
            out[(2 * i + 1, c)] = -m[(2 * i, c)];
        }
    }
    out
}

pub fn inverse<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    m.clone().lu().try_inverse().ok_or(Error::SingularSystem)
}

/// Löwdin orthonormalization `B (BᵀB)^{-1/2}`: the orthonormal basis of the
/// same span closest to `B`.
pub fn lowdin<T: Real>(b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if b.ncols() == 0 {
        return Ok(b.clone());
    }
    let gram = b.transpose() * b;
    let eig = gram.symmetric_eigen();
    let smallest = eig.eigenvalues.iter().fold(T::max_value().unwrap(), |a, &v| a.min(v));
    if !(smallest > T::zero()) {
        return Err(Error::SingularSystem);
    }
    let mut d = eig.eigenvectors.clone();
    for (j, &v) in eig.eigenvalues.iter().enumerate() {
        let s = T::one() / v.sqrt();
        for i in 0..d.nrows() {
            d[(i, j)] *= s;
        }
    }
    Ok(b * d * eig.eigenvectors.transpose())
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone().singular_values().iter().fold(T::zero(), |a, &v| a.max(v))
}

pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |a, v| a.max(v.abs()))
}

/// Columns of grid field `f` as a matrix field of column vectors.
pub fn columns<T: Real>(f: &GridField<T>) -> MatrixField<T> {
    (0..f.ncols()).map(|g| f.columns(g, 1).into_owned()).collect()
}

/// Stacks per-point `rows × l` matrices from `l` grid fields (one per angle).
pub fn tangent_field<T: Real>(derivs: &[GridField<T>]) -> MatrixField<T> {
    let g = derivs[0].ncols();
    let n = derivs[0].nrows();
    (0..g)
        .map(|p| {
            let mut m = DMatrix::zeros(n, derivs.len());
            for (a, d) in derivs.iter().enumerate() {
                m.set_column(a, &d.column(p));
            }
            m
        })
        .collect()
}

/// Reassembles a grid field from per-point column vectors.
pub fn from_columns<T: Real>(cols: &[DMatrix<T>]) -> GridField<T> {
    let n = cols.first().map(|c| c.nrows()).unwrap_or(0);
    let mut out = GridField::zeros(n, cols.len());
    for (g, c) in cols.iter().enumerate() {
        out.set_column(g, &c.column(0));
    }
    out
}

/// Grid average of a matrix field.
pub fn average<T: Real>(field: &[DMatrix<T>]) -> DMatrix<T> {
    let (r, c) = field[0].shape();
    let mut s = DMatrix::zeros(r, c);
    for m in field {
        s += m;
    }
    s / crate::scalar::from_usize::<T>(field.len())
}

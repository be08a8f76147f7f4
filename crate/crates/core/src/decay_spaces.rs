//! Decay functions on `Z^N`, weighted norms and block operators.
//!
//! A decay function `Γ(i) = a |i|^{-α} e^{-rate |i|}` (with `Γ(0) = a`, `|i|` the
//! 1-norm) must satisfy `Σ_j Γ(j) ≤ 1` and `Σ_j Γ(i-j) Γ(j-k) ≤ Γ(i-k)`. Infinite
//! sums are truncated and closed with rigorous tail bounds.

use crate::embedding::TorusEmbedding;
use crate::error::{Error, Result};
use crate::scalar::{f64_of, from_usize, lit, Real};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A lattice site in `Z^N`.
pub type Site = Vec<i64>;

/// 1-norm of the displacement `a - b`.
pub fn distance(a: &[i64], b: &[i64]) -> usize {
    a.iter().zip(b).map(|(x, y)| (x - y).unsigned_abs() as usize).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFunction<T> {
    pub alpha: T,
    pub rate: T,
    pub prefactor: T,
    pub dim: usize,
}

/// Outcome of a decay-axiom scan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AxiomReport {
    pub sum_total: f64,
    pub worst_convolution_ratio: f64,
    pub pass: bool,
}

/// Number of points of `Z^N` with 1-norm exactly `r`.
fn shell_count(dim: usize, r: usize) -> f64 {
    if r == 0 {
        return 1.0;
    }
    // Σ_k 2^k C(N,k) C(r-1,k-1)
    let mut total = 0.0;
    for k in 1..=dim.min(r) {
        total += 2f64.powi(k as i32) * binomial(dim, k) * binomial(r - 1, k - 1);
    }
    total
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut b = 1.0;
    for i in 0..k {
        b = b * (n - i) as f64 / (i + 1) as f64;
    }
    b
}

/// Upper bound of `Σ_{|m|>radius} |m|^{-alpha} e^{-rate |m|}` over `Z^dim`.
fn tail_bound(alpha: f64, rate: f64, dim: usize, radius: usize) -> f64 {
    if alpha <= dim as f64 {
        return f64::INFINITY;
    }
    let j = radius.max(1) as f64;
    let n = dim as f64;
    // shell_count(r) ≤ 2^N (N r)^{N-1} / (N-1)!
    let mut fact = 1.0;
    for i in 1..dim {
        fact *= i as f64;
    }
    let shell = 2f64.powi(dim as i32) * n.powi(dim as i32 - 1) / fact;
    let algebraic = j.powf(n - alpha) / (alpha - n);
    let exponential = if rate > 0.0 {
        j.powf(n - 1.0 - alpha) * (-rate * j).exp() / rate
    } else {
        f64::INFINITY
    };
    // the integrand also carries e^{-rate r} ≤ e^{-rate J} in the algebraic bound
    shell * (algebraic * (-rate * j).exp()).min(exponential)
}

impl<T: Real> DecayFunction<T> {
    pub fn new(alpha: T, rate: T, prefactor: T, dim: usize) -> Result<Self> {
        if dim == 0 || !(prefactor > T::zero()) || rate < T::zero() || alpha < T::zero() {
            return Err(Error::Config(format!(
                "invalid decay function (alpha {alpha}, rate {rate}, prefactor {prefactor}, dim {dim})"
            )));
        }
        Ok(Self { alpha, rate, prefactor, dim })
    }

    /// The member of the ordered family with the same `alpha` and prefactor.
    pub fn with_rate(&self, rate: T) -> Self {
        Self { rate, ..*self }
    }

    /// Γ as a function of the 1-norm of the displacement.
    pub fn at_distance(&self, r: usize) -> T {
        if r == 0 {
            return self.prefactor;
        }
        let rr: T = from_usize(r);
        self.prefactor * rr.powf(-self.alpha) * (-self.rate * rr).exp()
    }

    pub fn evaluate(&self, i: &[i64]) -> T {
        self.at_distance(i.iter().map(|x| x.unsigned_abs() as usize).sum())
    }

    pub fn between(&self, i: &[i64], j: &[i64]) -> T {
        self.at_distance(distance(i, j))
    }

    /// Rigorous upper bound of `Σ_{|m|>radius} Γ(m)`.
    pub fn tail(&self, radius: usize) -> f64 {
        f64_of(self.prefactor)
            * tail_bound(f64_of(self.alpha), f64_of(self.rate), self.dim, radius)
    }

    /// Truncated sum over `|m| ≤ radius` plus the tail bound.
    pub fn total_sum(&self, radius: usize) -> f64 {
        let mut s = 0.0;
        for r in 0..=radius {
            s += shell_count(self.dim, r) * f64_of(self.at_distance(r));
        }
        s + self.tail(radius)
    }
}

/// `a0(α) = (2^{α+1} K_{N,α} + 2)^{-1}` with `K_{N,α}` bounded from above.
pub fn prefactor_bound(alpha: f64, dim: usize, radius: usize) -> Result<f64> {
    if alpha <= dim as f64 {
        return Err(Error::NonconvergentSum { alpha, dim });
    }
    let mut k = 0.0;
    for r in 1..=radius {
        k += shell_count(dim, r) * (r as f64).powf(-alpha);
    }
    k += tail_bound(alpha, 0.0, dim, radius);
    Ok(1.0 / (2f64.powf(alpha + 1.0) * k + 2.0))
}

/// Safe prefactor `min(a0(α), a0(2α))`, valid for every rate of the family.
pub fn max_prefactor<T: Real>(alpha: T, rate: T, dim: usize, radius: usize) -> Result<T> {
    let _ = rate;
    let a = f64_of(alpha);
    let p = prefactor_bound(a, dim, radius)?.min(prefactor_bound(2.0 * a, dim, radius)?);
    Ok(lit(p))
}

/// Decay function with the safe prefactor.
pub fn safe_decay<T: Real>(alpha: T, rate: T, dim: usize) -> Result<DecayFunction<T>> {
    let a = max_prefactor(alpha, rate, dim, 1000)?;
    DecayFunction::new(alpha, rate, a, dim)
}

/// Enumerates all displacements with 1-norm at most `r`.
fn ball(dim: usize, r: usize) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for v in &out {
            let used: usize = v.iter().map(|x: &i64| x.unsigned_abs() as usize).sum();
            let left = (r - used) as i64;
            for x in -left..=left {
                let mut w = v.clone();
                w.push(x);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Scans both decay axioms.
///
/// The convolution ratio is taken over displacements `|d| ≤ radius`; each sum
/// runs over `|j| ≤ |d| + radius`, and the remainder is bounded by
/// `Γ(d) · tail(radius)` because `|j| > |d|` there.
pub fn check_axioms<T: Real>(gamma: &DecayFunction<T>, radius: usize) -> AxiomReport {
    let radius = radius.max(10);
    let sum_total = gamma.total_sum(radius);
    let tail = gamma.tail(radius);
    let dim = gamma.dim;
    let reach = 3 * radius;
    let table: Vec<f64> = (0..=reach).map(|r| f64_of(gamma.at_distance(r))).collect();
    let mut worst: f64 = 0.0;
    if dim == 1 {
        for d in 0..=radius as i64 {
            let lim = d + radius as i64;
            let mut s = 0.0;
            for j in -lim..=lim {
                s += table[j.unsigned_abs() as usize] * table[(d - j).unsigned_abs() as usize];
            }
            worst = worst.max(s / table[d as usize] + tail);
        }
    } else if dim == 2 {
        // Γ depends on |d| only, so one symmetry sector of displacements suffices
        for d0 in 0..=radius as i64 {
            for d1 in 0..=d0.min(radius as i64 - d0) {
                let nd = (d0 + d1) as usize;
                let lim = (nd + radius) as i64;
                let mut s = 0.0;
                for j0 in -lim..=lim {
                    let rest = lim - j0.abs();
                    for j1 in -rest..=rest {
                        let a = (j0.abs() + j1.abs()) as usize;
                        let b = ((d0 - j0).abs() + (d1 - j1).abs()) as usize;
                        s += table[a] * table[b];
                    }
                }
                worst = worst.max(s / table[nd] + tail);
            }
        }
    } else {
        for d in ball(dim, radius) {
            let sorted = d.windows(2).all(|w| w[0] >= w[1]) && d.iter().all(|&x| x >= 0);
            if !sorted {
                continue;
            }
            let nd: usize = d.iter().map(|x| *x as usize).sum();
            let mut s = 0.0;
            for j in ball(dim, nd + radius) {
                let a: usize = j.iter().map(|x| x.unsigned_abs() as usize).sum();
                s += table[a] * table[distance(&d, &j)];
            }
            worst = worst.max(s / table[nd] + tail);
        }
    }
    AxiomReport {
        sum_total,
        worst_convolution_ratio: worst,
        pass: sum_total <= 1.0 && worst <= 1.0,
    }
}

/// Operator 2-norm of a small dense block.
pub fn block_norm<T: Real>(b: &DMatrix<T>) -> T {
    if b.nrows() == 2 && b.ncols() == 2 {
        let (p, q, r, s) = (b[(0, 0)], b[(0, 1)], b[(1, 0)], b[(1, 1)]);
        let fro = p * p + q * q + r * r + s * s;
        let det = p * s - q * r;
        let disc = (fro * fro - lit::<T>(4.0) * det * det).max(T::zero()).sqrt();
        return ((fro + disc) / lit(2.0)).sqrt();
    }
    if b.is_empty() {
        return T::zero();
    }
    b.clone().singular_values().max()
}

/// Block operator over a window of lattice sites.
///
/// The matrix is stored densely; block `(i, j)` couples site `window[i]` to
/// `window[j]` and has size `block × block`.
#[derive(Clone, Debug)]
pub struct DecayOperator<T: Real> {
    pub window: Vec<Site>,
    pub block: usize,
    pub matrix: DMatrix<T>,
    gamma: DecayFunction<T>,
    gamma_norm: T,
}

impl<T: Real> DecayOperator<T> {
    pub fn new(window: Vec<Site>, matrix: DMatrix<T>, gamma: DecayFunction<T>) -> Result<Self> {
        let n = window.len();
        if n == 0 || matrix.nrows() != matrix.ncols() || matrix.nrows() % n != 0 {
            return Err(Error::LengthMismatch { expected: n, got: matrix.nrows() });
        }
        let block = matrix.nrows() / n;
        let mut op = Self { window, block, matrix, gamma, gamma_norm: T::zero() };
        op.gamma_norm = op.norm_with(&gamma);
        Ok(op)
    }

    pub fn identity(window: Vec<Site>, block: usize, gamma: DecayFunction<T>) -> Self {
        let n = window.len() * block;
        Self::new(window, DMatrix::identity(n, n), gamma).expect("consistent identity")
    }

    pub fn zeros(window: Vec<Site>, block: usize, gamma: DecayFunction<T>) -> Self {
        let n = window.len() * block;
        Self::new(window, DMatrix::zeros(n, n), gamma).expect("consistent zero")
    }

    pub fn gamma(&self) -> &DecayFunction<T> {
        &self.gamma
    }

    /// Cached `sup_{ij} |A_ij| / Γ(i-j)` for the operator's own decay function.
    pub fn gamma_norm(&self) -> T {
        self.gamma_norm
    }

    pub fn block_at(&self, i: usize, j: usize) -> DMatrix<T> {
        let b = self.block;
        self.matrix.view((i * b, j * b), (b, b)).into_owned()
    }

    /// `sup_{ij} |A_ij| / Γ(i-j)` for an arbitrary decay function.
    pub fn norm_with(&self, gamma: &DecayFunction<T>) -> T {
        let n = self.window.len();
        let mut best = T::zero();
        for i in 0..n {
            for j in 0..n {
                let w = gamma.between(&self.window[i], &self.window[j]);
                best = best.max(block_norm(&self.block_at(i, j)) / w);
            }
        }
        best
    }

    /// Localized norm `max(‖A‖_Γ, sup_{ij} min_k |A_ij| / Γ(i - c_k))`.
    pub fn localized_norm(&self, centers: &[Site], gamma: &DecayFunction<T>) -> Result<T> {
        if centers.is_empty() {
            return Err(Error::EmptyCenters);
        }
        let n = self.window.len();
        let mut loc = T::zero();
        for i in 0..n {
            let near = centers
                .iter()
                .map(|c| gamma.between(&self.window[i], c))
                .fold(T::zero(), |a, b| a.max(b));
            for j in 0..n {
                loc = loc.max(block_norm(&self.block_at(i, j)) / near);
            }
        }
        Ok(loc.max(self.norm_with(gamma)))
    }

    /// Zeroes blocks beyond `bandwidth` whose norm is below `drop`.
    pub fn sparsify(&mut self, bandwidth: usize, drop: T) {
        let n = self.window.len();
        let b = self.block;
        for i in 0..n {
            for j in 0..n {
                if distance(&self.window[i], &self.window[j]) > bandwidth
                    && block_norm(&self.block_at(i, j)) < drop
                {
                    self.matrix.view_mut((i * b, j * b), (b, b)).fill(T::zero());
                }
            }
        }
        self.gamma_norm = self.norm_with(&self.gamma);
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.window != other.window || self.block != other.block {
            return Err(Error::WindowMismatch);
        }
        Self::new(self.window.clone(), &self.matrix + &other.matrix, self.gamma)
    }
}

pub fn operator_norm<T: Real>(a: &DecayOperator<T>, gamma: &DecayFunction<T>) -> T {
    a.norm_with(gamma)
}

/// Blockwise product over the shared window.
pub fn compose<T: Real>(a: &DecayOperator<T>, b: &DecayOperator<T>) -> Result<DecayOperator<T>> {
    if a.window != b.window || a.block != b.block {
        return Err(Error::WindowMismatch);
    }
    DecayOperator::new(a.window.clone(), &a.matrix * &b.matrix, a.gamma)
}

/// `sup_i min_j Γ^{-1}(i - c_j) ‖K_i‖_ρ` with the Fourier majorant per site.
pub fn embedding_norm<T: Real>(
    k: &TorusEmbedding<T>,
    centers: &[Site],
    gamma: &DecayFunction<T>,
    rho: T,
) -> Result<T> {
    if centers.is_empty() {
        return Err(Error::EmptyCenters);
    }
    let mut best = T::zero();
    for (s, site) in k.sites.iter().enumerate() {
        let near = centers
            .iter()
            .map(|c| gamma.between(site, c))
            .fold(T::zero(), |a, b| a.max(b));
        best = best.max(k.majorant_norm(s, rho) / near);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shell_counts() {
        assert_eq!(shell_count(1, 5), 2.0);
        assert_eq!(shell_count(2, 3), 12.0);
        assert_eq!(shell_count(3, 1), 6.0);
        let b = ball(2, 3);
        assert_eq!(b.len(), 1 + 4 + 8 + 12);
    }

    #[test]
    fn tail_bound_dominates_partial_sums() {
        let g = DecayFunction::new(2.0, 0.25, 0.01, 1).unwrap();
        let exact: f64 = (11..20000).map(|r| 2.0 * g.at_distance(r)).sum();
        assert!(g.tail(10) >= exact);
        let g2 = DecayFunction::new(3.0, 0.0, 0.01, 2).unwrap();
        let exact2: f64 = (21..3000).map(|r| 4.0 * r as f64 * g2.at_distance(r)).sum();
        assert!(g2.tail(20) >= exact2);
    }

    #[test]
    fn block_norm_matches_svd() {
        let m = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0]);
        let svd = m.clone().singular_values().max();
        assert!((block_norm(&m) - svd).abs() < 1e-14);
    }
}

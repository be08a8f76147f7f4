//! Klein–Gordon lattice: onsite potential, pair couplings, the Verlet map
//! `F`, its Jacobian, the momentum-translation family `F_λ`, and a continuous
//! flow integrator for initial guesses.
//!
//! Phase vectors are interleaved per site: `x = (q_0, p_0, q_1, p_1, ...)`.
//! Sites outside the window are frozen at the fixed point `(0, 0)` but still
//! exert coupling forces on window sites.

use crate::decay_spaces::{distance, DecayFunction, DecayOperator, Site};
use crate::error::{Error, Result};
use crate::scalar::{f64_of, from_usize, lit, Real};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Onsite<T> {
    /// `W(q) = cos q - 1`.
    Pendulum,
    /// `W(q) = Σ_n c_n q^n`.
    Polynomial(Vec<T>),
}

/// Pair potential `V_d(s) = Σ_m c_m s^{2m}` (`c_0` multiplies `s^2`) acting on
/// sites at 1-norm distance `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling<T> {
    pub distance: usize,
    pub even_coeffs: Vec<T>,
}

impl<T: Real> Coupling<T> {
    /// `V(s) = γ s² / 2`.
    pub fn quadratic(distance: usize, gamma: T) -> Self {
        Self { distance, even_coeffs: vec![gamma / lit(2.0)] }
    }

    pub fn value(&self, s: T) -> T {
        let s2 = s * s;
        let mut pw = s2;
        let mut v = T::zero();
        for &c in &self.even_coeffs {
            v += c * pw;
            pw *= s2;
        }
        v
    }

    pub fn d1(&self, s: T) -> T {
        let s2 = s * s;
        let mut pw = s;
        let mut v = T::zero();
        for (m, &c) in self.even_coeffs.iter().enumerate() {
            v += c * from_usize::<T>(2 * m + 2) * pw;
            pw *= s2;
        }
        v
    }

    pub fn d2(&self, s: T) -> T {
        let s2 = s * s;
        let mut pw = T::one();
        let mut v = T::zero();
        for (m, &c) in self.even_coeffs.iter().enumerate() {
            let e = 2 * m + 2;
            v += c * from_usize::<T>(e * (e - 1)) * pw;
            pw *= s2;
        }
        v
    }

    /// Bound of `|V''|` on `|s| ≤ 1`, used for the decay check.
    pub fn strength(&self) -> T {
        self.even_coeffs
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (m, &c)| a + c.abs() * from_usize::<T>((2 * m + 2) * (2 * m + 1)))
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig<T: Real> {
    pub onsite: Onsite<T>,
    pub couplings: Vec<Coupling<T>>,
    pub epsilon: T,
    pub step: T,
    pub substeps: usize,
    pub window: Vec<Site>,
    pub dim: usize,
    /// Decay function used to measure the Jacobian and the coupling profile.
    pub decay: DecayFunction<T>,
    pairs: Vec<(usize, usize, usize)>,
    frozen: Vec<Vec<(usize, usize)>>,
}

/// Number of lattice sites at 1-norm distance `d` from the origin.
fn shell(dim: usize, d: usize) -> usize {
    if dim == 1 {
        2
    } else {
        let mut total = 0usize;
        for k in 1..=dim.min(d) {
            total += (1usize << k) * binom(dim, k) * binom(d - 1, k - 1);
        }
        total
    }
}

fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut b = 1usize;
    for i in 0..k {
        b = b * (n - i) / (i + 1);
    }
    b
}

/// Contiguous 1-D window `[-radius, radius]`.
pub fn centered_window(radius: usize) -> Vec<Site> {
    (-(radius as i64)..=radius as i64).map(|i| vec![i]).collect()
}

/// Contiguous 1-D window `[lo, hi]`.
pub fn span_window(lo: i64, hi: i64) -> Vec<Site> {
    (lo..=hi).map(|i| vec![i]).collect()
}

impl<T: Real> ModelConfig<T> {
    pub fn new(
        onsite: Onsite<T>,
        couplings: Vec<Coupling<T>>,
        epsilon: T,
        step: T,
        substeps: usize,
        window: Vec<Site>,
        decay: DecayFunction<T>,
    ) -> Result<Self> {
        if window.is_empty() || substeps == 0 || !(step > T::zero()) {
            return Err(Error::Config("window, step and substeps must be nonempty/positive".into()));
        }
        let dim = window[0].len();
        let mut cfg = Self {
            onsite,
            couplings,
            epsilon,
            step,
            substeps,
            window,
            dim,
            decay,
            pairs: vec![],
            frozen: vec![],
        };
        cfg.validate()?;
        cfg.index_pairs();
        Ok(cfg)
    }

    /// Pendulum with a nearest-neighbour quadratic coupling of strength `gamma`.
    pub fn pendulum_nearest(epsilon: T, gamma: T, step: T, substeps: usize, window: Vec<Site>) -> Result<Self> {
        let decay = crate::decay_spaces::safe_decay(lit(2.0), lit(0.5), window[0].len())?;
        Self::new(Onsite::Pendulum, vec![Coupling::quadratic(1, gamma)], epsilon, step, substeps, window, decay)
    }

    /// Pendulum with quadratic couplings `γ_d = γ Γ(d)/Γ(1)` for `d ≤ range`.
    pub fn pendulum_decaying(
        epsilon: T,
        gamma: T,
        profile: DecayFunction<T>,
        range: usize,
        step: T,
        substeps: usize,
        window: Vec<Site>,
    ) -> Result<Self> {
        let g1 = profile.at_distance(1);
        let couplings = (1..=range).map(|d| Coupling::quadratic(d, gamma * profile.at_distance(d) / g1)).collect();
        Self::new(Onsite::Pendulum, couplings, epsilon, step, substeps, window, profile)
    }

    fn validate(&self) -> Result<()> {
        let small: T = lit(1e-12);
        if self.onsite_d1(T::zero()).abs() > small {
            return Err(Error::Config("onsite potential must have W'(0) = 0".into()));
        }
        if !(self.onsite_d2(T::zero()) < T::zero()) {
            return Err(Error::Config("onsite potential must have W''(0) < 0".into()));
        }
        for c in &self.couplings {
            if c.distance == 0 {
                return Err(Error::Config("coupling distance must be positive".into()));
            }
            if c.d1(T::zero()).abs() > small {
                return Err(Error::Config("coupling must satisfy V'(0) = 0".into()));
            }
        }
        Ok(())
    }

    /// Smallest `C_V` with `|V_d| ≤ C_V Γ(d)` for the configured decay function.
    pub fn coupling_decay_constant(&self) -> T {
        self.couplings
            .iter()
            .fold(T::zero(), |a, c| a.max(c.strength() / self.decay.at_distance(c.distance)))
    }

    fn index_pairs(&mut self) {
        let n = self.window.len();
        self.pairs.clear();
        self.frozen = vec![vec![]; n];
        for (ci, c) in self.couplings.iter().enumerate() {
            let mut inside = vec![0usize; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if distance(&self.window[i], &self.window[j]) == c.distance {
                        self.pairs.push((i, j, ci));
                        inside[i] += 1;
                        inside[j] += 1;
                    }
                }
            }
            for i in 0..n {
                let out = shell(self.dim, c.distance) - inside[i];
                if out > 0 {
                    self.frozen[i].push((ci, out));
                }
            }
        }
    }

    pub fn sites(&self) -> usize {
        self.window.len()
    }

    pub fn phase_dim(&self) -> usize {
        2 * self.window.len()
    }

    pub fn site_index(&self, site: &[i64]) -> Option<usize> {
        self.window.iter().position(|s| s.as_slice() == site)
    }

    /// Copy with another window and/or coupling strength.
    pub fn with_window(&self, window: Vec<Site>) -> Result<Self> {
        Self::new(
            self.onsite.clone(),
            self.couplings.clone(),
            self.epsilon,
            self.step,
            self.substeps,
            window,
            self.decay,
        )
    }

    pub fn with_epsilon(&self, epsilon: T) -> Self {
        let mut c = self.clone();
        c.epsilon = epsilon;
        c
    }

    pub fn map_time(&self) -> T {
        self.step * from_usize::<T>(self.substeps)
    }

    pub fn onsite_value(&self, q: T) -> T {
        match &self.onsite {
            Onsite::Pendulum => q.cos() - T::one(),
            Onsite::Polynomial(c) => c.iter().rev().fold(T::zero(), |a, &b| a * q + b),
        }
    }

    pub fn onsite_d1(&self, q: T) -> T {
        match &self.onsite {
            Onsite::Pendulum => -q.sin(),
            Onsite::Polynomial(c) => {
                let mut v = T::zero();
                for (n, &cn) in c.iter().enumerate().skip(1).rev() {
                    v = v * q + cn * from_usize::<T>(n);
                }
                v
            }
        }
    }

    pub fn onsite_d2(&self, q: T) -> T {
        match &self.onsite {
            Onsite::Pendulum => -q.cos(),
            Onsite::Polynomial(c) => {
                let mut v = T::zero();
                for (n, &cn) in c.iter().enumerate().skip(2).rev() {
                    v = v * q + cn * from_usize::<T>(n * (n - 1));
                }
                v
            }
        }
    }

    /// `ṗ_i = -W'(q_i) - ε Σ_j V'(q_i - q_j)`, frozen neighbours read as 0.
    pub fn force(&self, q: &[T]) -> Vec<T> {
        let mut f: Vec<T> = q.iter().map(|&x| -self.onsite_d1(x)).collect();
        let eps = self.epsilon;
        for &(i, j, ci) in &self.pairs {
            let v = eps * self.couplings[ci].d1(q[i] - q[j]);
            f[i] -= v;
            f[j] += v;
        }
        for (i, list) in self.frozen.iter().enumerate() {
            for &(ci, count) in list {
                f[i] -= eps * from_usize::<T>(count) * self.couplings[ci].d1(q[i]);
            }
        }
        f
    }

    /// Hessian of the force as (diagonal, off-diagonal pairs).
    fn force_hessian(&self, q: &[T]) -> (Vec<T>, Vec<(usize, usize, T)>) {
        let eps = self.epsilon;
        let mut diag: Vec<T> = q.iter().map(|&x| -self.onsite_d2(x)).collect();
        let mut off = Vec::with_capacity(self.pairs.len());
        for &(i, j, ci) in &self.pairs {
            let v = eps * self.couplings[ci].d2(q[i] - q[j]);
            diag[i] -= v;
            diag[j] -= v;
            off.push((i, j, v));
        }
        for (i, list) in self.frozen.iter().enumerate() {
            for &(ci, count) in list {
                diag[i] -= eps * from_usize::<T>(count) * self.couplings[ci].d2(q[i]);
            }
        }
        (diag, off)
    }

    /// Total energy of the continuous system.
    pub fn energy(&self, x: &[T]) -> T {
        let n = self.sites();
        let mut e = T::zero();
        for i in 0..n {
            e += x[2 * i + 1] * x[2 * i + 1] / lit(2.0) + self.onsite_value(x[2 * i]);
        }
        for &(i, j, ci) in &self.pairs {
            e += self.epsilon * self.couplings[ci].value(x[2 * i] - x[2 * j]);
        }
        for (i, list) in self.frozen.iter().enumerate() {
            for &(ci, count) in list {
                e += self.epsilon * from_usize::<T>(count) * self.couplings[ci].value(x[2 * i]);
            }
        }
        e
    }

    /// The Verlet map `F` on an interleaved phase vector.
    pub fn map(&self, x: &[T]) -> Vec<T> {
        let n = self.sites();
        let (mut q, mut p) = split(x, n);
        let h = self.step;
        let hh = h / lit(2.0);
        let mut f = self.force(&q);
        for _ in 0..self.substeps {
            for i in 0..n {
                p[i] += hh * f[i];
                q[i] += h * p[i];
            }
            f = self.force(&q);
            for i in 0..n {
                p[i] += hh * f[i];
            }
        }
        join(&q, &p)
    }

    /// `F(x)` together with the exact Jacobian of the Verlet composition.
    pub fn map_with_jacobian(&self, x: &[T]) -> (Vec<T>, DMatrix<T>) {
        let n = self.sites();
        let dimx = 2 * n;
        let (mut q, mut p) = split(x, n);
        // jq, jp: derivatives of q and p (n rows each) w.r.t. the interleaved input
        let mut jq = DMatrix::<T>::zeros(n, dimx);
        let mut jp = DMatrix::<T>::zeros(n, dimx);
        for i in 0..n {
            jq[(i, 2 * i)] = T::one();
            jp[(i, 2 * i + 1)] = T::one();
        }
        let h = self.step;
        let hh = h / lit(2.0);
        let mut f = self.force(&q);
        let mut hess = self.force_hessian(&q);
        for _ in 0..self.substeps {
            kick_jacobian(&mut jp, &jq, &hess, hh);
            for i in 0..n {
                p[i] += hh * f[i];
                q[i] += h * p[i];
            }
            jq += &jp * h;
            f = self.force(&q);
            hess = self.force_hessian(&q);
            kick_jacobian(&mut jp, &jq, &hess, hh);
            for i in 0..n {
                p[i] += hh * f[i];
            }
        }
        let mut jac = DMatrix::<T>::zeros(dimx, dimx);
        for i in 0..n {
            jac.row_mut(2 * i).copy_from(&jq.row(i));
            jac.row_mut(2 * i + 1).copy_from(&jp.row(i));
        }
        (join(&q, &p), jac)
    }

    /// Jacobian as a block operator measured against the configured decay function.
    pub fn jacobian_operator(&self, x: &[T]) -> DecayOperator<T> {
        let (_, jac) = self.map_with_jacobian(x);
        DecayOperator::new(self.window.clone(), jac, self.decay).expect("square jacobian")
    }

    /// `F_λ`: apply `F`, then add `λ_j` to the momentum at center `j`.
    pub fn map_lambda(&self, centers: &[usize], lambda: &[T], x: &[T]) -> Result<Vec<T>> {
        if centers.len() != lambda.len() {
            return Err(Error::LengthMismatch { expected: centers.len(), got: lambda.len() });
        }
        let mut y = self.map(x);
        for (&c, &l) in centers.iter().zip(lambda) {
            y[2 * c + 1] += l;
        }
        Ok(y)
    }

    /// Window indices of the given sites.
    pub fn center_indices(&self, centers: &[Site]) -> Result<Vec<usize>> {
        centers
            .iter()
            .map(|c| self.site_index(c).ok_or_else(|| Error::Config(format!("center {c:?} outside window"))))
            .collect()
    }

    /// Linearization of one uncoupled Verlet step at the fixed point.
    pub fn single_site_step_matrix(&self) -> [[T; 2]; 2] {
        let a = -self.onsite_d2(T::zero());
        let h = self.step;
        let hh = h / lit(2.0);
        // kick · drift · kick
        let k = [[T::one(), T::zero()], [hh * a, T::one()]];
        let d = [[T::one(), h], [T::zero(), T::one()]];
        mat2(mat2(k, d), k)
    }

    /// Uncoupled single-site linearization of the full map at the fixed point.
    pub fn single_site_map_matrix(&self) -> [[T; 2]; 2] {
        let s = self.single_site_step_matrix();
        let mut m = [[T::one(), T::zero()], [T::zero(), T::one()]];
        for _ in 0..self.substeps {
            m = mat2(s, m);
        }
        m
    }

    /// Continuous vector field `(q̇, ṗ) = (p, force(q))`.
    pub fn vector_field(&self, x: &[T]) -> Vec<T> {
        let n = self.sites();
        let (q, p) = split(x, n);
        let f = self.force(&q);
        join(&p, &f)
    }

    /// Jacobian of the vector field.
    fn vector_field_jacobian(&self, x: &[T]) -> DMatrix<T> {
        let n = self.sites();
        let (q, _) = split(x, n);
        let (diag, off) = self.force_hessian(&q);
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            m[(2 * i, 2 * i + 1)] = T::one();
            m[(2 * i + 1, 2 * i)] = diag[i];
        }
        for &(i, j, v) in &off {
            m[(2 * i + 1, 2 * j)] += v;
            m[(2 * j + 1, 2 * i)] += v;
        }
        m
    }

    /// Flow of the continuous system for time `t`.
    pub fn flow(&self, x: &[T], t: T, opts: &FlowOptions) -> Result<Vec<T>> {
        Ok(self.integrate(x, t, opts, false)?.0)
    }

    /// Flow together with its derivative `DS_t(x)`.
    pub fn flow_with_jacobian(&self, x: &[T], t: T, opts: &FlowOptions) -> Result<(Vec<T>, DMatrix<T>)> {
        let (y, j) = self.integrate(x, t, opts, true)?;
        Ok((y, j.expect("variational flow requested")))
    }

    fn integrate(&self, x: &[T], t: T, opts: &FlowOptions, variational: bool) -> Result<(Vec<T>, Option<DMatrix<T>>)> {
        if t.abs() > lit(opts.horizon) {
            return Err(Error::Config(format!("flow time {t} beyond horizon {}", opts.horizon)));
        }
        let n = x.len();
        let mut y = x.to_vec();
        let mut phi = if variational { Some(DMatrix::identity(n, n)) } else { None };
        let sign = if t < T::zero() { -T::one() } else { T::one() };
        let total = t.abs();
        let mut done = T::zero();
        let mut h: T = lit::<T>(opts.initial_step).min(total);
        let tol: T = lit(opts.tol);
        while done < total {
            if h < lit::<T>(1e-14) * (T::one() + done) {
                return Err(Error::StepUnderflow { t: f64_of(done) });
            }
            let h_try = h.min(total - done);
            let full = gauss_step(self, &y, sign * h_try);
            let half1 = gauss_step(self, &y, sign * h_try / lit(2.0));
            let half2 = gauss_step(self, &half1, sign * h_try / lit(2.0));
            let err = full
                .iter()
                .zip(&half2)
                .fold(T::zero(), |a, (u, v)| a.max((*u - *v).abs() / (T::one() + v.abs())))
                / lit(63.0);
            if err <= tol {
                if let Some(p) = phi.as_mut() {
                    let a = gauss_variational(self, &y, &half1, sign * h_try / lit(2.0));
                    let b = gauss_variational(self, &half1, &half2, sign * h_try / lit(2.0));
                    *p = &b * &a * &*p;
                }
                y = half2;
                done += h_try;
            }
            let factor = if err == T::zero() {
                lit(2.0)
            } else {
                (lit::<T>(0.9) * (tol / err).powf(lit(1.0 / 7.0))).min(lit(2.0)).max(lit(0.2))
            };
            h = h_try * factor;
        }
        Ok((y, phi))
    }
}

/// Phase point on the window, one `(q, p)` pair per site.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField<T> {
    pub q: Vec<T>,
    pub p: Vec<T>,
}

impl<T: Real> PhaseField<T> {
    pub fn zeros(sites: usize) -> Self {
        Self { q: vec![T::zero(); sites], p: vec![T::zero(); sites] }
    }

    pub fn from_interleaved(x: &[T]) -> Self {
        let (q, p) = split(x, x.len() / 2);
        Self { q, p }
    }

    pub fn interleaved(&self) -> Vec<T> {
        join(&self.q, &self.p)
    }

    pub fn sup_norm(&self) -> T {
        self.q.iter().chain(&self.p).fold(T::zero(), |a, v| a.max(v.abs()))
    }
}

/// Options of the continuous flow integrator.
#[derive(Clone, Debug)]
pub struct FlowOptions {
    pub tol: f64,
    pub horizon: f64,
    pub initial_step: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { tol: 1e-14, horizon: 1e6, initial_step: 0.05 }
    }
}

fn mat2<T: Real>(a: [[T; 2]; 2], b: [[T; 2]; 2]) -> [[T; 2]; 2] {
    let mut c = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn split<T: Real>(x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    ((0..n).map(|i| x[2 * i]).collect(), (0..n).map(|i| x[2 * i + 1]).collect())
}

fn join<T: Real>(q: &[T], p: &[T]) -> Vec<T> {
    let mut x = Vec::with_capacity(2 * q.len());
    for (a, b) in q.iter().zip(p) {
        x.push(*a);
        x.push(*b);
    }
    x
}

fn kick_jacobian<T: Real>(jp: &mut DMatrix<T>, jq: &DMatrix<T>, hess: &(Vec<T>, Vec<(usize, usize, T)>), hh: T) {
    let (diag, off) = hess;
    let cols = jq.ncols();
    for (i, &d) in diag.iter().enumerate() {
        let c = hh * d;
        if c != T::zero() {
            for k in 0..cols {
                jp[(i, k)] += c * jq[(i, k)];
            }
        }
    }
    for &(i, j, v) in off {
        let c = hh * v;
        for k in 0..cols {
            jp[(i, k)] += c * jq[(j, k)];
            jp[(j, k)] += c * jq[(i, k)];
        }
    }
}

/// Butcher table of the three-stage Gauss–Legendre method.
fn gauss_table<T: Real>() -> ([[T; 3]; 3], [T; 3]) {
    let s15 = 15f64.sqrt();
    let a = [
        [5.0 / 36.0, 2.0 / 9.0 - s15 / 15.0, 5.0 / 36.0 - s15 / 30.0],
        [5.0 / 36.0 + s15 / 24.0, 2.0 / 9.0, 5.0 / 36.0 - s15 / 24.0],
        [5.0 / 36.0 + s15 / 30.0, 2.0 / 9.0 + s15 / 15.0, 5.0 / 36.0],
    ];
    let b = [5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0];
    (a.map(|r| r.map(lit)), b.map(lit))
}

fn gauss_stages<T: Real>(cfg: &ModelConfig<T>, y: &[T], h: T) -> Vec<Vec<T>> {
    let (a, _) = gauss_table::<T>();
    let n = y.len();
    let f0 = cfg.vector_field(y);
    let mut k = vec![f0.clone(), f0.clone(), f0];
    for _ in 0..100 {
        let mut change = T::zero();
        let mut next = Vec::with_capacity(3);
        for i in 0..3 {
            let z: Vec<T> = (0..n)
                .map(|c| y[c] + h * (a[i][0] * k[0][c] + a[i][1] * k[1][c] + a[i][2] * k[2][c]))
                .collect();
            next.push(cfg.vector_field(&z));
        }
        for i in 0..3 {
            for c in 0..n {
                change = change.max((next[i][c] - k[i][c]).abs());
            }
        }
        k = next;
        if change <= lit::<T>(1e-15) * (T::one() + k[0].iter().fold(T::zero(), |m, v| m.max(v.abs()))) {
            break;
        }
    }
    k
}

fn gauss_step<T: Real>(cfg: &ModelConfig<T>, y: &[T], h: T) -> Vec<T> {
    let (_, b) = gauss_table::<T>();
    let k = gauss_stages(cfg, y, h);
    (0..y.len()).map(|c| y[c] + h * (b[0] * k[0][c] + b[1] * k[1][c] + b[2] * k[2][c])).collect()
}

/// Derivative of one Gauss–Legendre step, by differentiating the stage equations.
fn gauss_variational<T: Real>(cfg: &ModelConfig<T>, y: &[T], _y1: &[T], h: T) -> DMatrix<T> {
    let (a, b) = gauss_table::<T>();
    let n = y.len();
    let k = gauss_stages(cfg, y, h);
    let zs: Vec<Vec<T>> = (0..3)
        .map(|i| (0..n).map(|c| y[c] + h * (a[i][0] * k[0][c] + a[i][1] * k[1][c] + a[i][2] * k[2][c])).collect())
        .collect();
    let js: Vec<DMatrix<T>> = zs.iter().map(|z| cfg.vector_field_jacobian(z)).collect();
    // dK_i = J_i (I + h Σ_j a_ij dK_j): solve the 3n×3n linear system
    let mut sys = DMatrix::<T>::identity(3 * n, 3 * n);
    let mut rhs = DMatrix::<T>::zeros(3 * n, n);
    for i in 0..3 {
        for j in 0..3 {
            let blk = &js[i] * (h * a[i][j]);
            let mut v = sys.view_mut((i * n, j * n), (n, n));
            v -= blk;
        }
        rhs.view_mut((i * n, 0), (n, n)).copy_from(&js[i]);
    }
    let dk = sys.lu().solve(&rhs).expect("stage system invertible for small steps");
    let mut out = DMatrix::<T>::identity(n, n);
    for i in 0..3 {
        out += dk.view((i * n, 0), (n, n)) * (h * b[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(radius: usize, eps: f64) -> ModelConfig<f64> {
        ModelConfig::pendulum_nearest(eps, 1.0, 0.5, 8, centered_window(radius)).unwrap()
    }

    #[test]
    fn nearest_neighbour_force_matches_closed_form() {
        let cfg = chain(3, 0.3);
        let q: Vec<f64> = (0..7).map(|i| 0.1 * i as f64 - 0.2).collect();
        let f = cfg.force(&q);
        for i in 0..7 {
            let l = if i > 0 { q[i - 1] } else { 0.0 };
            let r = if i < 6 { q[i + 1] } else { 0.0 };
            let want = q[i].sin() + 0.3 * (l + r - 2.0 * q[i]);
            assert!((f[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let cfg = chain(2, 0.2);
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() * 0.4).collect();
        let (_, jac) = cfg.map_with_jacobian(&x);
        let h = 1e-5;
        for c in 0..10 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (cfg.map(&a), cfg.map(&b));
            for r in 0..10 {
                assert!((jac[(r, c)] - (fa[r] - fb[r]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn polynomial_onsite_matches_pendulum_taylor() {
        let poly = Onsite::Polynomial(vec![0.0, 0.0, -0.5, 0.0, 1.0 / 24.0]);
        let decay = crate::decay_spaces::safe_decay(2.0, 0.5, 1).unwrap();
        let cfg = ModelConfig::new(poly, vec![], 0.0, 0.5, 1, centered_window(0), decay).unwrap();
        let q: f64 = 0.01;
        assert!((cfg.force(&[q])[0] - q.sin()).abs() < 1e-10);
        assert!(ModelConfig::new(Onsite::Polynomial(vec![0.0, 0.0, 0.5]), vec![], 0.0, 0.5, 1, centered_window(0), decay).is_err());
    }

    #[test]
    fn flow_conserves_energy_and_composes() {
        let cfg = chain(0, 0.0);
        let x = vec![2.0, 0.3];
        let opts = FlowOptions::default();
        let y = cfg.flow(&x, 1000.0, &opts).unwrap();
        assert!((cfg.energy(&y) - cfg.energy(&x)).abs() < 1e-10);
        let a = cfg.flow(&cfg.flow(&x, 1.3, &opts).unwrap(), 2.1, &opts).unwrap();
        let b = cfg.flow(&x, 3.4, &opts).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        assert_eq!(cfg.flow(&[0.0, 0.0], 50.0, &opts).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn variational_flow_matches_differences() {
        let cfg = chain(1, 0.1);
        let x = vec![0.4, 0.1, 2.0, -0.2, 0.1, 0.3];
        let opts = FlowOptions::default();
        let (_, j) = cfg.flow_with_jacobian(&x, 2.0, &opts).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[c] += h;
            b[c] -= h;
            let (fa, fb) = (cfg.flow(&a, 2.0, &opts).unwrap(), cfg.flow(&b, 2.0, &opts).unwrap());
            for r in 0..6 {
                assert!((j[(r, c)] - (fa[r] - fb[r]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fixed_point_multipliers_have_unit_product() {
        let cfg = chain(0, 0.0);
        let m = cfg.single_site_map_matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!((det - 1.0).abs() < 1e-12);
        assert!((m[0][0] + m[1][1]).abs() > 2.0);
    }
}

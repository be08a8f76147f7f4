//! Quasi-Newton correction of an approximately invariant whiskered torus.
//!
//! One step linearizes `F_λ ∘ K - K ∘ T_ω = E` around `(K, λ)`, splits the
//! correction along the invariant bundles, solves the hyperbolic parts by
//! contracting series and the center part by the triangular pair of
//! difference equations in the symplectic frame `M̃ = [Π^c DK, (J^c)^{-1} DK N]`.

use crate::cohomology::{solve_difference, SolveOptions};
use crate::decay_spaces::{embedding_norm, DecayFunction};
use crate::embedding::{from_grid_with, TorusEmbedding};
use crate::error::{Error, Result};
use crate::fourier::{sup_norm, Grid, GridField};
use crate::lattice_model::ModelConfig;
use crate::pointwise::{
    apply_j, average, columns, from_columns, inverse, max_abs, neg, shift_field, spectral_norm, tangent_field, MatrixField,
};
use crate::scalar::{f64_of, lit, Real};
use crate::splitting::{graph_refine, initial_splitting, measure_rates, Part, Rates, RefineOptions, SplittingBundle};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Scalar diagnostics of one state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Diagnostics {
    /// Grid sup norm of the invariance error.
    pub error_norm: f64,
    /// Decay-weighted analytic norm of the invariance error.
    pub weighted_error: f64,
    pub lambda_norm: f64,
    /// Sup of the isotropy defect `DKᵀ J DK`.
    pub isotropy: f64,
    /// Sup of `∥(DKᵀDK)^{-1}∥`.
    pub n_norm: f64,
    /// `∥avg(A)^{-1}∥`.
    pub twist_inv: f64,
    /// `∥avg(Q)^{-1}∥`, infinite when the torus is contractible.
    pub parameter_inv: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub c_h: f64,
    /// Average of the second center equation removed without a counterterm.
    pub obstruction: f64,
    pub bundle_defect: f64,
    /// Share of coefficient mass in the top two Fourier shells.
    pub tail: f64,
}

#[derive(Clone, Debug)]
pub struct KamState<T: Real> {
    pub k: TorusEmbedding<T>,
    pub lambda: Vec<T>,
    pub omega: Vec<T>,
    pub bundle: Option<SplittingBundle<T>>,
    pub diagnostics: Diagnostics,
    /// Diagnostics of every state visited by the solver, oldest first.
    pub history: Vec<Diagnostics>,
}

impl<T: Real> KamState<T> {
    pub fn new(k: TorusEmbedding<T>, omega: Vec<T>) -> Self {
        let m = k.centers.len();
        Self { k, lambda: vec![T::zero(); m], omega, bundle: None, diagnostics: Diagnostics::default(), history: vec![] }
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions<T: Real> {
    pub tol: f64,
    pub max_iter: usize,
    pub refine: RefineOptions,
    pub cohomology: SolveOptions,
    pub series_tol: f64,
    pub rate_steps: usize,
    pub twist_floor: f64,
    /// Decay function and strip width of the weighted error norm.
    pub weight: Option<(DecayFunction<T>, T)>,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 12,
            refine: RefineOptions::default(),
            cohomology: SolveOptions::default(),
            series_tol: 1e-15,
            rate_steps: 6,
            twist_floor: 1e-12,
            weight: None,
        }
    }
}

/// Everything the step needs, sampled on the collocation grid.
pub struct Linearization<T: Real> {
    pub grid: Grid<T>,
    pub omega: Vec<T>,
    pub centers: Vec<usize>,
    /// `K(θ)`.
    pub values: GridField<T>,
    /// `DF_λ(K(θ))`.
    pub cocycle: MatrixField<T>,
    /// `E(θ) = F_λ(K(θ)) - K(θ + ω)`.
    pub error: GridField<T>,
    pub dk: MatrixField<T>,
    pub dk_ahead: MatrixField<T>,
    pub bundle: SplittingBundle<T>,
    pub contractible: bool,
}

/// Evaluates `F_λ ∘ K - K ∘ T_ω` on the grid of `state.k`.
pub fn invariance_error<T: Real>(cfg: &ModelConfig<T>, state: &KamState<T>) -> Result<GridField<T>> {
    let grid = state.k.make_grid();
    let centers = cfg.center_indices(&state.k.centers)?;
    let x = state.k.evaluate_on(&grid)?;
    let ahead = state.k.rotate(&state.omega).evaluate_on(&grid)?;
    let mut e = GridField::zeros(x.nrows(), grid.len);
    for g in 0..grid.len {
        let col: Vec<T> = x.column(g).iter().copied().collect();
        let y = cfg.map_lambda(&centers, &state.lambda, &col)?;
        for (r, v) in y.into_iter().enumerate() {
            e[(r, g)] = v - ahead[(r, g)];
        }
    }
    Ok(e)
}

/// Decay-weighted norm of a grid error field, on the Fourier box of `like`.
pub fn weighted_norm<T: Real>(grid: &Grid<T>, e: &GridField<T>, like: &TorusEmbedding<T>, gamma: &DecayFunction<T>, rho: T) -> Result<T> {
    let mut periodic = like.clone();
    periodic.winding.iter_mut().for_each(|w| w.iter_mut().for_each(|x| *x = 0));
    let band = grid.band();
    let f = from_grid_with(grid, e, &band, &periodic)?;
    embedding_norm(&f, &like.centers, gamma, rho)
}

/// Samples the linearization and refines the splitting around `state`.
pub fn linearize<T: Real>(cfg: &ModelConfig<T>, state: &KamState<T>, opts: &SolverOptions<T>) -> Result<Linearization<T>> {
    let grid = state.k.make_grid();
    let centers = cfg.center_indices(&state.k.centers)?;
    if centers.is_empty() {
        return Err(Error::EmptyCenters);
    }
    let values = state.k.evaluate_on(&grid)?;
    let rotated = state.k.rotate(&state.omega);
    let ahead = rotated.evaluate_on(&grid)?;
    let n = values.nrows();
    let mut error = GridField::zeros(n, grid.len);
    let mut cocycle = Vec::with_capacity(grid.len);
    for g in 0..grid.len {
        let col: Vec<T> = values.column(g).iter().copied().collect();
        let (mut y, jac) = cfg.map_with_jacobian(&col);
        for (&c, &l) in centers.iter().zip(&state.lambda) {
            y[2 * c + 1] += l;
        }
        for (r, v) in y.into_iter().enumerate() {
            error[(r, g)] = v - ahead[(r, g)];
        }
        cocycle.push(jac);
    }
    let dk = tangent_field(&state.k.derivative_on(&grid)?);
    let dk_ahead = tangent_field(&rotated.derivative_on(&grid)?);
    let start = match &state.bundle {
        Some(b) if b.grid_len() == grid.len && b.dim() == n => b.clone(),
        _ => initial_splitting(cfg, &centers, grid.len, &state.omega)?,
    };
    let bundle = graph_refine(&start, &grid, &cocycle, &state.omega, &opts.refine)?;
    let contractible = centers
        .iter()
        .all(|&c| state.k.winding[c].iter().all(|&w| w == 0));
    Ok(Linearization { grid, omega: state.omega.clone(), centers, values, cocycle, error, dk, dk_ahead, bundle, contractible })
}

/// Center frame quantities at one set of points.
#[derive(Clone, Debug)]
pub struct CenterFrame<T: Real> {
    /// `Π^c DK`.
    pub dkc: MatrixField<T>,
    /// `N = (DKᵀDK)^{-1}`.
    pub n: MatrixField<T>,
    /// `P = DK N`.
    pub p: MatrixField<T>,
    /// Restriction of the symplectic form to an orthonormal center basis.
    pub jc: MatrixField<T>,
    /// `(J^c)^{-1} P`.
    pub y: MatrixField<T>,
    /// `X = -Pᵀ (J^c)^{-1} P`.
    pub x: MatrixField<T>,
    /// `Π^c`.
    pub proj: MatrixField<T>,
}

/// Full center geometry on the grid.
#[derive(Clone, Debug)]
pub struct CenterGeometry<T: Real> {
    pub here: CenterFrame<T>,
    pub ahead: CenterFrame<T>,
    /// Twist field `A(θ) = P(θ+ω)ᵀ [DF Y(θ) - Y(θ+ω)]`.
    pub a: MatrixField<T>,
    /// Parameter field `Q(θ) = DKc(θ+ω)ᵀ J Π^c(θ+ω) ∂_λF`.
    pub q: MatrixField<T>,
    /// Isotropy defect `L(θ) = DKᵀ J DK`.
    pub l: MatrixField<T>,
    pub avg_a: DMatrix<T>,
    pub avg_q: DMatrix<T>,
}

impl<T: Real> CenterGeometry<T> {
    /// `M̃(θ) = [Π^c DK, (J^c)^{-1} P]`.
    pub fn mtilde(&self, g: usize) -> DMatrix<T> {
        let f = &self.here;
        let l = f.dkc[g].ncols();
        let mut m = DMatrix::zeros(f.dkc[g].nrows(), 2 * l);
        m.view_mut((0, 0), (f.dkc[g].nrows(), l)).copy_from(&f.dkc[g]);
        m.view_mut((0, l), (f.dkc[g].nrows(), l)).copy_from(&f.y[g]);
        m
    }

    /// `sup |(M̃ᵀ J M̃) V^{-1} - I|` with `V = [[0, I], [-I, X]]`.
    pub fn inverse_defect(&self) -> T {
        let mut worst = T::zero();
        for g in 0..self.a.len() {
            let m = self.mtilde(g);
            let l = m.ncols() / 2;
            let prod = m.transpose() * apply_j(&m);
            let mut vinv = DMatrix::zeros(2 * l, 2 * l);
            vinv.view_mut((0, 0), (l, l)).copy_from(&self.here.x[g]);
            vinv.view_mut((0, l), (l, l)).copy_from(&(-DMatrix::<T>::identity(l, l)));
            vinv.view_mut((l, 0), (l, l)).copy_from(&DMatrix::<T>::identity(l, l));
            worst = worst.max(max_abs(&(prod * vinv - DMatrix::<T>::identity(2 * l, 2 * l))));
        }
        worst
    }
}

fn center_frame<T: Real>(
    bundle: &SplittingBundle<T>,
    dk: &[DMatrix<T>],
    ahead: bool,
) -> Result<CenterFrame<T>> {
    let g_len = dk.len();
    let mut f = CenterFrame { dkc: vec![], n: vec![], p: vec![], jc: vec![], y: vec![], x: vec![], proj: vec![] };
    for g in 0..g_len {
        let (c, proj) = if ahead {
            (bundle.part_basis_ahead(g, Part::Center), bundle.projection_ahead(g, Part::Center))
        } else {
            (bundle.part_basis(g, Part::Center), bundle.projection(g, Part::Center))
        };
        let d = &dk[g];
        let gram = d.transpose() * d;
        let n = gram.clone().lu().try_inverse().ok_or(Error::DegenerateEmbedding)?;
        if !n.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateEmbedding);
        }
        let p = d * &n;
        let j = c.transpose() * apply_j(&c);
        let jinv = inverse(&j)?;
        let y = &c * (&jinv * (c.transpose() * &p));
        let x = -(p.transpose() * &y);
        f.dkc.push(&proj * d);
        f.n.push(n);
        f.p.push(p);
        f.jc.push(j);
        f.y.push(y);
        f.x.push(x);
        f.proj.push(proj);
    }
    Ok(f)
}

/// Momentum unit vectors at the centers (`∂F_λ/∂λ`).
fn parameter_directions<T: Real>(n: usize, centers: &[usize]) -> DMatrix<T> {
    let mut e = DMatrix::zeros(n, centers.len());
    for (j, &c) in centers.iter().enumerate() {
        e[(2 * c + 1, j)] = T::one();
    }
    e
}

pub fn center_geometry<T: Real>(lin: &Linearization<T>) -> Result<CenterGeometry<T>> {
    let here = center_frame(&lin.bundle, &lin.dk, false)?;
    let ahead = center_frame(&lin.bundle, &lin.dk_ahead, true)?;
    let y_ahead = shift_field(&lin.grid, &here.y, &lin.omega);
    let ep = parameter_directions::<T>(lin.values.nrows(), &lin.centers);
    let mut a = Vec::with_capacity(lin.grid.len);
    let mut q = Vec::with_capacity(lin.grid.len);
    let mut l = Vec::with_capacity(lin.grid.len);
    for g in 0..lin.grid.len {
        a.push(ahead.p[g].transpose() * (&lin.cocycle[g] * &here.y[g] - &y_ahead[g]));
        q.push(ahead.dkc[g].transpose() * apply_j(&(&ahead.proj[g] * &ep)));
        l.push(lin.dk[g].transpose() * apply_j(&lin.dk[g]));
    }
    let avg_a = average(&a);
    let avg_q = average(&q);
    Ok(CenterGeometry { here, ahead, a, q, l, avg_a, avg_q })
}

fn sup_field<T: Real>(f: &[DMatrix<T>]) -> T {
    f.iter().fold(T::zero(), |m, x| m.max(max_abs(x)))
}

/// Result of the center solve.
#[derive(Clone, Debug)]
pub struct CenterSolution<T: Real> {
    pub delta: GridField<T>,
    pub lambda: Vec<T>,
    /// Average of the second equation removed without a counterterm.
    pub obstruction: T,
}

/// Solves the center-projected linearized equation for the right-hand side
/// `rhs` (the negated error) and chooses the counterterm.
pub fn solve_center<T: Real>(
    lin: &Linearization<T>,
    geo: &CenterGeometry<T>,
    rhs: &GridField<T>,
    opts: &SolverOptions<T>,
) -> Result<CenterSolution<T>> {
    let glen = lin.grid.len;
    let l = lin.dk[0].ncols();
    let ep = parameter_directions::<T>(rhs.nrows(), &lin.centers);
    // T2 before the counterterm, and the projected right-hand side
    let mut rc = Vec::with_capacity(glen);
    let mut t2 = Vec::with_capacity(glen);
    for g in 0..glen {
        let r = &geo.ahead.proj[g] * rhs.columns(g, 1);
        t2.push(geo.ahead.dkc[g].transpose() * apply_j(&r));
        rc.push(r);
    }
    let m = lin.centers.len();
    let mut lambda = vec![T::zero(); m];
    if !lin.contractible {
        let det = geo.avg_q.clone().lu().determinant();
        if geo.avg_q.nrows() != geo.avg_q.ncols() || det.abs() < lit(opts.twist_floor) {
            return Err(Error::DegenerateParameter { det: f64_of(det) });
        }
        let sol = inverse(&geo.avg_q)? * average(&t2);
        for j in 0..m {
            lambda[j] = sol[(j, 0)];
        }
        let lam = DMatrix::from_column_slice(m, 1, &lambda);
        for g in 0..glen {
            rc[g] -= &geo.ahead.proj[g] * (&ep * &lam);
            t2[g] -= &geo.q[g] * &lam;
        }
    }
    let t1: MatrixField<T> = (0..glen)
        .map(|g| &geo.ahead.x[g] * &t2[g] + geo.ahead.p[g].transpose() * &rc[g])
        .collect();
    let avg_t2 = average(&t2);
    let obstruction = max_abs(&avg_t2);
    let detach = |f: &MatrixField<T>, avg: &DMatrix<T>| from_columns(&f.iter().map(|x| x - avg).collect::<Vec<_>>());
    // v2(θ+ω) - v2(θ) = -T2
    let v2_perp = solve_difference(&lin.grid, &(-detach(&t2, &avg_t2)), &lin.omega, &opts.cohomology)?;
    let v2p = columns(&v2_perp);
    let det = geo.avg_a.clone().lu().determinant();
    if det.abs() < lit(opts.twist_floor) {
        return Err(Error::DegenerateTwist { det: f64_of(det) });
    }
    let av2: MatrixField<T> = (0..glen).map(|g| &geo.a[g] * &v2p[g]).collect();
    let mean_v2 = inverse(&geo.avg_a)? * (average(&t1) - average(&av2));
    let v2: MatrixField<T> = v2p.iter().map(|v| v + &mean_v2).collect();
    // v1(θ+ω) - v1(θ) = A v2 - T1
    let h1: MatrixField<T> = (0..glen).map(|g| &geo.a[g] * &v2[g] - &t1[g]).collect();
    let avg_h1 = average(&h1);
    let v1 = columns(&solve_difference(&lin.grid, &detach(&h1, &avg_h1), &lin.omega, &opts.cohomology)?);
    let mut delta = GridField::zeros(rhs.nrows(), glen);
    for g in 0..glen {
        let d = &geo.here.dkc[g] * &v1[g] + &geo.here.y[g] * &v2[g];
        delta.set_column(g, &d.column(0));
    }
    debug_assert_eq!(v1[0].nrows(), l);
    Ok(CenterSolution { delta, lambda, obstruction })
}

fn block<T: Real>(m: &DMatrix<T>, r0: usize, c0: usize, nr: usize, nc: usize) -> DMatrix<T> {
    m.view((r0, c0), (nr, nc)).into_owned()
}

/// Solves the stable and unstable projections of `DF Δ - Δ∘T_ω = rhs` by
/// their convergent series.
pub fn solve_hyperbolic<T: Real>(lin: &Linearization<T>, rhs: &GridField<T>, opts: &SolverOptions<T>) -> Result<(GridField<T>, GridField<T>)> {
    let b = &lin.bundle;
    let n = b.dim();
    let glen = lin.grid.len;
    let mut ds = GridField::zeros(n, glen);
    let mut du = GridField::zeros(n, glen);
    if b.ns == 0 {
        return Ok((ds, du));
    }
    let (ns, nc, nu) = (b.ns, b.nc, b.nu);
    let u0 = ns + nc;
    let mut ys = Vec::with_capacity(glen);
    let mut yu = Vec::with_capacity(glen);
    let mut a_s = Vec::with_capacity(glen);
    let mut a_u_inv = Vec::with_capacity(glen);
    for g in 0..glen {
        let y = &b.basis_ahead_inv[g] * rhs.columns(g, 1);
        ys.push(y.rows(0, ns).into_owned());
        yu.push(y.rows(u0, nu).into_owned());
        let full = &b.basis_ahead_inv[g] * &lin.cocycle[g] * &b.basis[g];
        a_s.push(block(&full, 0, 0, ns, ns));
        a_u_inv.push(inverse(&block(&full, u0, u0, nu, nu))?);
    }
    let back = neg(&lin.omega);
    let scale = ys.iter().chain(&yu).fold(T::zero(), |m, y| m.max(max_abs(y)));
    let tol = lit::<T>(opts.series_tol) * (T::one() + scale);
    let run = |step: &dyn Fn(&MatrixField<T>) -> MatrixField<T>| -> Result<MatrixField<T>> {
        let mut x: MatrixField<T> = vec![DMatrix::zeros(ys[0].nrows(), 1); glen];
        let mut last = T::max_value().unwrap();
        let mut growth = 0;
        for _ in 0..500 {
            let next = step(&x);
            let d = next.iter().zip(&x).fold(T::zero(), |m, (a, b)| m.max(max_abs(&(a - b))));
            x = next;
            if d <= tol {
                return Ok(x);
            }
            if d > last {
                growth += 1;
                if growth >= 3 {
                    return Err(Error::SeriesDivergence { rate: f64_of(d / last) });
                }
            }
            last = d;
        }
        Err(Error::SeriesDivergence { rate: 1.0 })
    };
    // x_s(θ+ω) = a_s x_s(θ) - y_s(θ)
    let xs = run(&|x: &MatrixField<T>| {
        let img: MatrixField<T> = (0..glen).map(|g| &a_s[g] * &x[g] - &ys[g]).collect();
        shift_field(&lin.grid, &img, &back)
    })?;
    // x_u(θ) = a_u^{-1} (x_u(θ+ω) + y_u(θ))
    let xu = run(&|x: &MatrixField<T>| {
        let ahead = shift_field(&lin.grid, x, &lin.omega);
        (0..glen).map(|g| &a_u_inv[g] * (&ahead[g] + &yu[g])).collect()
    })?;
    for g in 0..glen {
        ds.set_column(g, &(b.part_basis(g, Part::Stable) * &xs[g]).column(0));
        du.set_column(g, &(b.part_basis(g, Part::Unstable) * &xu[g]).column(0));
    }
    Ok((ds, du))
}

/// `DF Δ - Δ∘T_ω + ∂_λF Λ + E`: residual of the linearized equation.
pub fn linearized_residual<T: Real>(lin: &Linearization<T>, delta: &GridField<T>, lambda: &[T]) -> GridField<T> {
    let ahead = lin.grid.shift(delta, &lin.omega);
    let mut out = lin.error.clone() - ahead;
    for g in 0..lin.grid.len {
        let d = &lin.cocycle[g] * delta.columns(g, 1);
        for r in 0..delta.nrows() {
            out[(r, g)] += d[(r, 0)];
        }
        for (&c, &l) in lin.centers.iter().zip(lambda) {
            out[(2 * c + 1, g)] += l;
        }
    }
    out
}

/// The structured solution `(Δ, Λ)` of the linearized equation.
pub fn structured_correction<T: Real>(lin: &Linearization<T>, geo: &CenterGeometry<T>, opts: &SolverOptions<T>) -> Result<(GridField<T>, Vec<T>, T)> {
    let rhs = -lin.error.clone();
    let center = solve_center(lin, geo, &rhs, opts)?;
    let mut rhs_l = rhs;
    for g in 0..lin.grid.len {
        for (&c, &l) in lin.centers.iter().zip(&center.lambda) {
            rhs_l[(2 * c + 1, g)] -= l;
        }
    }
    let (ds, du) = solve_hyperbolic(lin, &rhs_l, opts)?;
    Ok((center.delta + ds + du, center.lambda, center.obstruction))
}

fn diagnostics_of<T: Real>(
    lin: &Linearization<T>,
    geo: &CenterGeometry<T>,
    rates: Option<Rates>,
    state: &KamState<T>,
    opts: &SolverOptions<T>,
) -> Result<Diagnostics> {
    let n_norm = geo.here.n.iter().fold(T::zero(), |m, x| m.max(spectral_norm(x)));
    let twist_inv = spectral_norm(&inverse(&geo.avg_a)?);
    let parameter_inv = if lin.contractible {
        f64::INFINITY
    } else {
        inverse(&geo.avg_q).map(|m| f64_of(spectral_norm(&m))).unwrap_or(f64::INFINITY)
    };
    let weighted = match &opts.weight {
        Some((gamma, rho)) => f64_of(weighted_norm(&lin.grid, &lin.error, &state.k, gamma, *rho)?),
        None => f64::NAN,
    };
    let r = rates.unwrap_or(Rates { mu1: f64::NAN, mu2: f64::NAN, mu3: f64::NAN, c_h: f64::NAN });
    Ok(Diagnostics {
        error_norm: f64_of(sup_norm(&lin.error)),
        weighted_error: weighted,
        lambda_norm: state.lambda.iter().fold(0.0f64, |m, v| m.max(f64_of(v.abs()))),
        isotropy: f64_of(sup_field(&geo.l)),
        n_norm: f64_of(n_norm),
        twist_inv: f64_of(twist_inv),
        parameter_inv,
        mu1: r.mu1,
        mu2: r.mu2,
        mu3: r.mu3,
        c_h: r.c_h,
        obstruction: 0.0,
        bundle_defect: lin.bundle.defect.iter().fold(0.0f64, |a, &b| a.max(b)),
        tail: f64_of(state.k.tail_fraction(2)),
    })
}

/// Recomputes every diagnostic of `state` from scratch.
pub fn diagnose<T: Real>(cfg: &ModelConfig<T>, state: &KamState<T>, opts: &SolverOptions<T>) -> Result<(KamState<T>, Linearization<T>, CenterGeometry<T>)> {
    let lin = linearize(cfg, state, opts)?;
    let geo = center_geometry(&lin)?;
    let rates = measure_rates(&lin.bundle, &lin.grid, &lin.cocycle, &lin.omega, opts.rate_steps)?;
    let mut out = state.clone();
    out.diagnostics = diagnostics_of(&lin, &geo, Some(rates), state, opts)?;
    let mut bundle = lin.bundle.clone();
    bundle.rates = Some(rates);
    out.bundle = Some(bundle);
    Ok((out, lin, geo))
}

/// One quasi-Newton step. The returned state carries the diagnostics of the
/// input state in its history and the bundle refined around the input.
pub fn newton_step<T: Real>(cfg: &ModelConfig<T>, state: &KamState<T>, opts: &SolverOptions<T>) -> Result<KamState<T>> {
    let lin = linearize(cfg, state, opts)?;
    let geo = center_geometry(&lin)?;
    let rates = if opts.rate_steps > 0 {
        Some(measure_rates(&lin.bundle, &lin.grid, &lin.cocycle, &lin.omega, opts.rate_steps)?)
    } else {
        None
    };
    let mut diag = diagnostics_of(&lin, &geo, rates, state, opts)?;
    let (delta, lambda, obstruction) = structured_correction(&lin, &geo, opts)?;
    diag.obstruction = f64_of(obstruction);
    let updated = lin.values.clone() + delta;
    let k = from_grid_with(&lin.grid, &updated, &state.k.kmax, &state.k)?;
    let mut bundle = lin.bundle;
    bundle.rates = rates;
    let mut next = KamState {
        k,
        lambda: state.lambda.iter().zip(&lambda).map(|(a, b)| *a + *b).collect(),
        omega: state.omega.clone(),
        bundle: Some(bundle),
        diagnostics: diag,
        history: state.history.clone(),
    };
    next.history.push(diag);
    Ok(next)
}

/// Newton iteration until the grid error drops below `opts.tol`.
pub fn solve<T: Real>(cfg: &ModelConfig<T>, state: &KamState<T>, opts: &SolverOptions<T>) -> Result<KamState<T>> {
    let first = sup_norm(&invariance_error(cfg, state)?);
    if f64_of(first) < opts.tol || !opts.tol.is_finite() {
        let mut out = state.clone();
        out.diagnostics.error_norm = f64_of(first);
        return Ok(out);
    }
    let mut current = state.clone();
    current.history.clear();
    let mut errors = vec![f64_of(first)];
    let mut increases = 0;
    for _ in 0..opts.max_iter {
        let next = newton_step(cfg, &current, opts)?;
        let e = f64_of(sup_norm(&invariance_error(cfg, &next)?));
        if e >= *errors.last().unwrap() || !e.is_finite() {
            increases += 1;
            if increases >= 2 || !e.is_finite() {
                errors.push(e);
                return Err(Error::NoConvergence { history: errors });
            }
        } else {
            increases = 0;
        }
        errors.push(e);
        current = next;
        if e < opts.tol {
            let (mut done, _, _) = diagnose(cfg, &current, opts)?;
            done.history = current.history.clone();
            done.history.push(done.diagnostics);
            return Ok(done);
        }
    }
    Err(Error::NoConvergence { history: errors })
}

/// Dense least-squares solution of the full linearized system with gauge
/// rows, for cross-checking the structured step on small instances.
pub fn direct_newton_oracle<T: Real>(lin: &Linearization<T>) -> Result<(GridField<T>, Vec<T>)> {
    let n = lin.values.nrows();
    let glen = lin.grid.len;
    let m = lin.centers.len();
    let l = lin.dk[0].ncols();
    let unknowns = n * glen + m;
    if unknowns > 4000 {
        return Err(Error::Config(format!("oracle instance too large ({unknowns} unknowns)")));
    }
    let pins = if lin.contractible { m } else { 0 };
    let rows = n * glen + l + pins;
    // shift matrix: (S f)(g) = Σ S[g, h] f(h)
    let ident = DMatrix::<T>::identity(glen, glen);
    let shifted = lin.grid.shift(&ident, &lin.omega);
    let mut a = DMatrix::<T>::zeros(rows, unknowns);
    let mut b = DMatrix::<T>::zeros(rows, 1);
    for g in 0..glen {
        for i in 0..n {
            let r = g * n + i;
            for j in 0..n {
                a[(r, g * n + j)] += lin.cocycle[g][(i, j)];
            }
            for h in 0..glen {
                a[(r, h * n + i)] -= shifted[(h, g)];
            }
            b[(r, 0)] = -lin.error[(i, g)];
        }
        for (k, &c) in lin.centers.iter().enumerate() {
            a[(g * n + 2 * c + 1, n * glen + k)] = T::one();
        }
    }
    // zero average of the tangential component
    let frame = center_frame(&lin.bundle, &lin.dk, false)?;
    for g in 0..glen {
        for t in 0..l {
            for j in 0..n {
                a[(n * glen + t, g * n + j)] = frame.p[g][(j, t)];
            }
        }
    }
    for k in 0..pins {
        a[(n * glen + l + k, n * glen + k)] = T::one();
    }
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, lit(1e-13)).map_err(|_| Error::SingularSystem)?;
    let mut delta = GridField::zeros(n, glen);
    for g in 0..glen {
        for i in 0..n {
            delta[(i, g)] = sol[(g * n + i, 0)];
        }
    }
    let lambda = (0..m).map(|k| sol[(n * glen + k, 0)]).collect();
    Ok((delta, lambda))
}

/// `min_α sup |a - b - DK α|` (least squares in α), returning the residual field.
pub fn remove_tangent<T: Real>(lin: &Linearization<T>, diff: &GridField<T>) -> GridField<T> {
    let l = lin.dk[0].ncols();
    let mut gram = DMatrix::<T>::zeros(l, l);
    let mut rhs = DMatrix::<T>::zeros(l, 1);
    for g in 0..lin.grid.len {
        gram += lin.dk[g].transpose() * &lin.dk[g];
        rhs += lin.dk[g].transpose() * diff.columns(g, 1);
    }
    let alpha = gram.lu().solve(&rhs).unwrap_or_else(|| DMatrix::zeros(l, 1));
    let mut out = diff.clone();
    for g in 0..lin.grid.len {
        let t = &lin.dk[g] * &alpha;
        for r in 0..out.nrows() {
            out[(r, g)] -= t[(r, 0)];
        }
    }
    out
}

/// Phase `τ` minimizing `sup_θ |K1(θ + τ) - K2(θ)|` and the minimal distance.
pub fn phase_alignment<T: Real>(k1: &TorusEmbedding<T>, k2: &TorusEmbedding<T>) -> Result<(Vec<T>, T)> {
    let grid = k2.make_grid();
    let target = k2.evaluate_on(&grid)?;
    let dist = |tau: &[T]| -> Result<T> { Ok(sup_norm(&(k1.rotate(tau).evaluate_on(&grid)? - &target))) };
    let l = k1.l;
    let mut tau = vec![T::zero(); l];
    let samples = 64;
    // coarse scan per angle, then golden-section refinement, cycling over angles
    for _round in 0..3 {
        for a in 0..l {
            let mut best = (dist(&tau)?, tau[a]);
            for s in 0..samples {
                let mut t = tau.clone();
                t[a] = crate::scalar::from_usize::<T>(s) / crate::scalar::from_usize::<T>(samples);
                let d = dist(&t)?;
                if d < best.0 {
                    best = (d, t[a]);
                }
            }
            let h = T::one() / crate::scalar::from_usize::<T>(samples);
            let (mut lo, mut hi) = (best.1 - h, best.1 + h);
            let phi: T = lit(0.618_033_988_749_894_9);
            for _ in 0..80 {
                let m1 = hi - phi * (hi - lo);
                let m2 = lo + phi * (hi - lo);
                let mut t1 = tau.clone();
                t1[a] = m1;
                let mut t2 = tau.clone();
                t2[a] = m2;
                if dist(&t1)? < dist(&t2)? {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            tau[a] = (lo + hi) / lit(2.0);
        }
    }
    let d = dist(&tau)?;
    Ok((tau, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice_model::centered_window;
    use num_complex::Complex;

    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    pub(crate) fn librating_guess(window: usize, amp: f64, kmax: usize) -> TorusEmbedding<f64> {
        let sites = centered_window(window);
        let mut k = TorusEmbedding::zeros(1, vec![kmax], vec![4 * kmax + 1], sites, vec![vec![0]]);
        let c = window;
        k.set_coefficient(2 * c, &[0], Complex::new(std::f64::consts::PI, 0.0));
        k.set_coefficient(2 * c, &[1], Complex::new(amp / 2.0, 0.0));
        k.set_coefficient(2 * c, &[-1], Complex::new(amp / 2.0, 0.0));
        k.set_coefficient(2 * c + 1, &[1], Complex::new(0.0, amp / 2.0));
        k.set_coefficient(2 * c + 1, &[-1], Complex::new(0.0, -amp / 2.0));
        k
    }

    #[test]
    fn single_pendulum_converges_quadratically() {
        let cfg = ModelConfig::pendulum_nearest(0.0, 1.0, 0.5, 8, centered_window(0)).unwrap();
        let state = KamState::new(librating_guess(0, 0.79, 32), vec![GOLDEN]);
        let opts = SolverOptions { tol: 1e-12, ..Default::default() };
        let out = solve(&cfg, &state, &opts).unwrap();
        let errs: Vec<f64> = out.history.iter().map(|d| d.error_norm).collect();
        assert!(out.diagnostics.error_norm < 1e-12, "{errs:?}");
        assert!(out.lambda[0] == 0.0);
    }
}

//! Experiment orchestration: configuration, the single-site initial guess,
//! continuation in the coupling, superposition and cascade runs, state files
//! and diagnostic export.
//!
//! Every run is single threaded and uses fixed reduction orders, so the same
//! configuration and seed reproduce state files bit for bit.

use crate::cohomology::{check_sequence, measure_diophantine, DiophantineReport, Flavor};
use crate::coupling::{
    cascade, compact_grid, coupling_scan, superpose_states, CascadePlan, CascadeStage, ScanReport,
};
use crate::decay_spaces::{check_axioms, safe_decay, AxiomReport, DecayFunction, Site};
use crate::embedding::{box_index, box_modes, from_grid_with, TorusEmbedding};
use crate::error::{Error, Result};
use crate::fourier::{sup_norm, Grid, GridField};
use crate::kam_step::{diagnose, invariance_error, solve, Diagnostics, KamState, SolverOptions};
use crate::lattice_model::{centered_window, Coupling, FlowOptions, ModelConfig, Onsite};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `"pendulum"` or `"polynomial"`.
    #[serde(default = "default_onsite")]
    pub onsite: String,
    /// Coefficients `c_n` of `W(q) = Σ c_n q^n` for the polynomial onsite potential.
    #[serde(default)]
    pub polynomial: Vec<f64>,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub window_radius: usize,
    /// `"nearest"` or `"decaying"` (strengths follow the decay profile).
    #[serde(default = "default_coupling")]
    pub coupling: String,
    #[serde(default = "one_usize")]
    pub coupling_range: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecaySection {
    #[serde(default = "two")]
    pub alpha: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Weaker rate used to measure superposition errors.
    #[serde(default = "default_weak_rate")]
    pub weak_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_kmax")]
    pub kmax: usize,
    /// Grid points per angle; defaults to `4 kmax + 1`.
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_series_tol")]
    pub series_tol: f64,
    #[serde(default = "default_divisor_floor")]
    pub divisor_floor: f64,
    #[serde(default = "default_rate_steps")]
    pub rate_steps: usize,
    /// Size of the seeded random perturbation applied to the initial guess.
    #[serde(default)]
    pub guess_perturbation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum FrequencySpec {
    Value(f64),
    Preset(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrequencySection {
    #[serde(default = "default_omega")]
    pub omega: Vec<FrequencySpec>,
    /// Per frequency: build the torus from the orbit of rotation `1 - ω`
    /// traversed backwards.
    #[serde(default)]
    pub reversed: Vec<bool>,
    #[serde(default = "default_nu")]
    pub nu: Vec<f64>,
    #[serde(default = "default_dio_kmax")]
    pub diophantine_kmax: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSection {
    #[serde(default)]
    pub eps_schedule: Vec<f64>,
    /// Smallest step tried after halving before giving up.
    #[serde(default = "default_min_step")]
    pub min_step: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CoupleSection {
    #[serde(default = "default_separations")]
    pub separations: Vec<i64>,
    #[serde(default = "default_newton_sep")]
    pub newton_separation: i64,
    /// Per-factor Fourier band of the product torus.
    #[serde(default = "default_couple_band")]
    pub band: Vec<usize>,
    #[serde(default = "default_couple_tol")]
    pub tol: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    pub separations: Vec<i64>,
    pub decay_schedule: Vec<f64>,
    pub band_schedule: Vec<usize>,
    pub tol_schedule: Vec<f64>,
    #[serde(default = "default_smallness")]
    pub smallness: f64,
    #[serde(default = "default_doublings")]
    pub max_doublings: usize,
    /// Site whose stage increments are recorded.
    #[serde(default)]
    pub watch: i64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub decay: DecaySection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub frequency: FrequencySection,
    #[serde(default)]
    pub continuation: ContinuationSection,
    #[serde(default)]
    pub couple: CoupleSection,
    #[serde(default)]
    pub cascade: Option<CascadeSection>,
    /// Seed of every random perturbation; set from the command line.
    #[serde(skip)]
    pub seed: u64,
}

fn default_onsite() -> String {
    "pendulum".into()
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn two() -> f64 {
    2.0
}
fn default_step() -> f64 {
    0.5
}
fn default_substeps() -> usize {
    8
}
fn default_coupling() -> String {
    "nearest".into()
}
fn default_rate() -> f64 {
    0.25
}
fn default_weak_rate() -> f64 {
    0.22
}
fn default_tol() -> f64 {
    1e-11
}
fn default_max_iter() -> usize {
    12
}
fn default_kmax() -> usize {
    64
}
fn default_rho() -> f64 {
    0.05
}
fn default_series_tol() -> f64 {
    1e-15
}
fn default_divisor_floor() -> f64 {
    1e-13
}
fn default_rate_steps() -> usize {
    6
}
fn default_omega() -> Vec<FrequencySpec> {
    vec![FrequencySpec::Preset("golden".into())]
}
fn default_nu() -> Vec<f64> {
    vec![1.5, 2.5, 3.5, 4.5]
}
fn default_dio_kmax() -> usize {
    200
}
fn default_min_step() -> f64 {
    1e-4
}
fn default_separations() -> Vec<i64> {
    vec![8, 16, 24, 32]
}
fn default_newton_sep() -> i64 {
    24
}
fn default_couple_band() -> Vec<usize> {
    vec![16, 20]
}
fn default_couple_tol() -> f64 {
    1e-9
}
fn default_smallness() -> f64 {
    1e-2
}
fn default_doublings() -> usize {
    3
}

macro_rules! default_via_toml {
    ($t:ty) => {
        impl Default for $t {
            fn default() -> Self {
                toml::from_str("").expect("defaults parse")
            }
        }
    };
}
default_via_toml!(DecaySection);
default_via_toml!(SolverSection);
default_via_toml!(FrequencySection);
default_via_toml!(ContinuationSection);
default_via_toml!(CoupleSection);

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        match self.model.onsite.as_str() {
            "pendulum" => {}
            "polynomial" if self.model.polynomial.len() >= 3 => {}
            other => return Err(Error::Config(format!("unknown onsite potential {other:?}"))),
        }
        if !matches!(self.model.coupling.as_str(), "nearest" | "decaying") {
            return Err(Error::Config(format!("unknown coupling {:?}", self.model.coupling)));
        }
        if !(self.decay.weak_rate < self.decay.rate) {
            return Err(Error::Config("weak_rate must be below rate".into()));
        }
        self.frequencies()?;
        Ok(())
    }

    /// Numeric frequencies with presets resolved.
    pub fn frequencies(&self) -> Result<Vec<f64>> {
        self.frequency.omega.iter().map(resolve_frequency).collect()
    }

    pub fn reversed(&self, r: usize) -> bool {
        self.frequency.reversed.get(r).copied().unwrap_or(false)
    }

    /// Decay profile `Γ_β` with the safe prefactor.
    pub fn decay_function(&self) -> Result<DecayFunction<f64>> {
        safe_decay(self.decay.alpha, self.decay.rate, 1)
    }

    pub fn weak_decay(&self) -> Result<DecayFunction<f64>> {
        safe_decay(self.decay.alpha, self.decay.weak_rate, 1)
    }

    pub fn model(&self, epsilon: f64, window: Vec<Site>) -> Result<ModelConfig<f64>> {
        let m = &self.model;
        let onsite = match m.onsite.as_str() {
            "pendulum" => Onsite::Pendulum,
            _ => Onsite::Polynomial(m.polynomial.clone()),
        };
        let profile = self.decay_function()?;
        let couplings = match m.coupling.as_str() {
            "nearest" => vec![Coupling::quadratic(1, m.gamma)],
            _ => {
                let g1 = profile.at_distance(1);
                (1..=m.coupling_range).map(|d| Coupling::quadratic(d, m.gamma * profile.at_distance(d) / g1)).collect()
            }
        };
        ModelConfig::new(onsite, couplings, epsilon, m.step, m.substeps, window, profile)
    }

    pub fn solver_options(&self) -> Result<SolverOptions<f64>> {
        let s = &self.solver;
        let mut o = SolverOptions::<f64> { tol: s.tol, max_iter: s.max_iter, series_tol: s.series_tol, rate_steps: s.rate_steps, ..Default::default() };
        o.cohomology.divisor_floor = s.divisor_floor;
        o.weight = Some((self.decay_function()?, s.rho));
        Ok(o)
    }

    pub fn grid_size(&self) -> usize {
        self.solver.grid.unwrap_or(4 * self.solver.kmax + 1)
    }
}

pub fn resolve_frequency(f: &FrequencySpec) -> Result<f64> {
    match f {
        FrequencySpec::Value(v) => Ok(*v),
        FrequencySpec::Preset(name) => match name.as_str() {
            "golden" => Ok((5f64.sqrt() - 1.0) / 2.0),
            "silver" => Ok(2f64.sqrt() - 1.0),
            other => Err(Error::Config(format!("unknown frequency preset {other:?}"))),
        },
    }
}

// ---------------------------------------------------------------- single site

/// Elliptic equilibrium of the onsite potential and the lowest barrier
/// energy that bounds the libration well.
fn libration_well(model: &ModelConfig<f64>) -> Result<(f64, f64, f64)> {
    let (qe, lo, hi) = match model.onsite {
        Onsite::Pendulum => (std::f64::consts::PI, 0.0, std::f64::consts::TAU),
        Onsite::Polynomial(_) => {
            // scan for a minimum of W to the right of the hyperbolic point at 0
            let w1 = |q: f64| model.onsite_d1(q);
            let mut grid: Vec<f64> = (1..4000).map(|i| i as f64 * 0.005).collect();
            grid.retain(|&q| w1(q) < 0.0 && w1(q + 0.005) >= 0.0);
            let q0 = *grid.first().ok_or_else(|| Error::Config("onsite potential has no libration well".into()))?;
            let (mut a, mut b) = (q0, q0 + 0.005);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                if w1(m) < 0.0 {
                    a = m
                } else {
                    b = m
                }
            }
            let qe = 0.5 * (a + b);
            // right barrier: next sign change of W' back to negative
            let mut right = qe;
            while right < qe + 20.0 && w1(right + 0.005) >= 0.0 {
                right += 0.005;
            }
            (qe, 0.0, right)
        }
    };
    let e_max = model.onsite_value(lo).min(model.onsite_value(hi));
    Ok((qe, e_max, hi))
}

/// Turning point `q > q_e` of the libration at energy `e`.
fn turning_point(model: &ModelConfig<f64>, qe: f64, right: f64, e: f64) -> f64 {
    let (mut a, mut b) = (qe, right);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if model.onsite_value(m) < e {
            a = m
        } else {
            b = m
        }
    }
    0.5 * (a + b)
}

/// Rotation number of the single-site map around the elliptic point, from
/// `iterations` steps starting at `x0`.
pub fn rotation_number(model: &ModelConfig<f64>, qe: f64, x0: [f64; 2], iterations: usize) -> f64 {
    let angle = |x: &[f64]| (-x[1]).atan2(x[0] - qe);
    let mut x = x0.to_vec();
    let mut a = angle(&x);
    let mut total = 0.0;
    for _ in 0..iterations {
        x = model.map(&x);
        let b = angle(&x);
        total += (b - a).rem_euclid(std::f64::consts::TAU);
        a = b;
    }
    total / (std::f64::consts::TAU * iterations as f64)
}

/// Invariant curve guess: the continuous-flow orbit at the energy where the
/// single-site map has rotation number `rotation`, parametrized by time.
pub fn flow_orbit_guess(model: &ModelConfig<f64>, rotation: f64, kmax: usize, grid_size: usize) -> Result<(Vec<f64>, GridField<f64>)> {
    if model.sites() != 1 {
        return Err(Error::Config("the flow-orbit guess needs a single-site model".into()));
    }
    let (qe, e_max, right) = libration_well(model)?;
    let e_min = model.onsite_value(qe);
    let iterations = 20000;
    let rho_at = |e: f64| {
        let q = turning_point(model, qe, right, e);
        rotation_number(model, qe, [q, 0.0], iterations)
    };
    let (mut lo, mut hi) = (e_min + 1e-10 * (e_max - e_min), e_max - 1e-6 * (e_max - e_min));
    let (r_lo, r_hi) = (rho_at(lo), rho_at(hi));
    if !(rotation < r_lo && rotation > r_hi) {
        return Err(Error::UnattainableRotation { target: rotation });
    }
    for _ in 0..60 {
        let m = 0.5 * (lo + hi);
        if rho_at(m) > rotation {
            lo = m
        } else {
            hi = m
        }
    }
    let e = 0.5 * (lo + hi);
    let x0 = [turning_point(model, qe, right, e), 0.0];
    // half period: first return of p to zero after leaving the turning point
    let opts = FlowOptions::default();
    let p_at = |t: f64| -> Result<f64> { Ok(model.flow(&x0, t, &opts)?[1]) };
    let dt = 0.05;
    let mut t = dt;
    while p_at(t)? < 0.0 {
        t += dt;
        if t > 1e4 {
            return Err(Error::UnattainableRotation { target: rotation });
        }
    }
    let (mut a, mut b) = (t - dt, t);
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if p_at(m)? < 0.0 {
            a = m
        } else {
            b = m
        }
    }
    let period = a + b;
    let grid = Grid::<f64>::new(&[grid_size]);
    let mut values = GridField::zeros(2, grid.len);
    let mut x = x0.to_vec();
    let mut last = 0.0;
    for g in 0..grid.len {
        let tg = grid.theta(g)[0] * period;
        x = model.flow(&x, tg - last, &opts)?;
        last = tg;
        values[(0, g)] = x[0];
        values[(1, g)] = x[1];
    }
    let _ = kmax;
    Ok((x0.to_vec(), values))
}

/// `K(θ) ↦ K(-θ)`.
pub fn reflect_angles(k: &TorusEmbedding<f64>) -> TorusEmbedding<f64> {
    let mut out = k.clone();
    for (i, m) in box_modes(&k.kmax).iter().enumerate() {
        let neg: Vec<i64> = m.iter().map(|x| -x).collect();
        let j = box_index(&k.kmax, &neg).unwrap();
        for r in 0..k.rows() {
            out.coeffs[r][i] = k.coeffs[r][j];
        }
    }
    for w in out.winding.iter_mut() {
        w.iter_mut().for_each(|x| *x = -*x);
    }
    out
}

/// Initial single-site torus for frequency `omega`, on the one-site window.
pub fn single_site_guess(cfg: &ExperimentConfig, omega: f64, reversed: bool) -> Result<TorusEmbedding<f64>> {
    let model = cfg.model(0.0, vec![vec![0]])?;
    let kmax = cfg.solver.kmax;
    let gsize = cfg.grid_size();
    let target = if reversed { 1.0 - omega } else { omega };
    let (_, values) = flow_orbit_guess(&model, target, kmax, gsize)?;
    let like = TorusEmbedding::zeros(1, vec![kmax], vec![gsize], vec![vec![0]], vec![vec![0]]);
    let k = from_grid_with(&Grid::new(&[gsize]), &values, &[kmax], &like)?;
    Ok(if reversed { reflect_angles(&k) } else { k })
}

/// Solver run of [`single_site_guess`] at zero coupling.
pub fn single_site(cfg: &ExperimentConfig, r: usize) -> Result<(ModelConfig<f64>, KamState<f64>)> {
    let omega = cfg.frequencies()?[r];
    let mut k = single_site_guess(cfg, omega, cfg.reversed(r))?;
    if cfg.solver.guess_perturbation > 0.0 {
        k = perturb(&k, cfg.solver.guess_perturbation, cfg.seed.wrapping_add(r as u64));
    }
    let model = cfg.model(0.0, vec![vec![0]])?;
    let state = KamState::new(k, vec![omega]);
    let out = solve(&model, &state, &cfg.solver_options()?)?;
    Ok((model, out))
}

/// Random analytic perturbation: mode `k` moves by at most `size e^{-|k|_1}`.
/// The embedding stays real.
pub fn perturb(k: &TorusEmbedding<f64>, size: f64, seed: u64) -> TorusEmbedding<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = k.clone();
    let modes = box_modes(&k.kmax);
    for r in 0..k.rows() {
        for (i, m) in modes.iter().enumerate() {
            let neg: Vec<i64> = m.iter().map(|x| -x).collect();
            let j = box_index(&k.kmax, &neg).unwrap();
            if j < i {
                continue;
            }
            let d = Complex::new(rng.random_range(-1.0..1.0), if j == i { 0.0 } else { rng.random_range(-1.0..1.0) });
            let d = d * size * (-(m.iter().map(|x| x.abs()).sum::<i64>() as f64)).exp();
            out.coeffs[r][i] += d;
            if j != i {
                out.coeffs[r][j] += d.conj();
            }
        }
    }
    out
}

// ---------------------------------------------------------------- continuation

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContinuationPoint {
    pub epsilon: f64,
    pub iterations: usize,
    pub error_norm: f64,
    pub twist_inv: f64,
    /// Slope of `-log |K_i|` against the distance to the center.
    pub decay_slope: f64,
}

/// Log-linear fit of the site amplitudes against the distance to the first center.
pub fn spatial_decay_slope(k: &TorusEmbedding<f64>) -> f64 {
    let c = &k.centers[0];
    let pts: Vec<(f64, f64)> = k
        .sites
        .iter()
        .enumerate()
        .filter(|(_, s)| *s != c)
        .map(|(i, s)| (crate::decay_spaces::distance(s, c) as f64, k.majorant_norm(i, 0.0)))
        .filter(|p| p.1 > 0.0)
        .map(|(d, a)| (d, a.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}

/// Continues `state` through `schedule`, halving the step when a solve
/// fails. Returns the state at every scheduled coupling.
pub fn continue_in_eps(
    cfg: &ExperimentConfig,
    state: &KamState<f64>,
    window: Vec<Site>,
    schedule: &[f64],
    opts: &SolverOptions<f64>,
) -> Result<Vec<(f64, KamState<f64>, ContinuationPoint)>> {
    let mut current = state.clone();
    current.k = current.k.with_sites(window.clone());
    current.bundle = None;
    // the input state solves the uncoupled problem
    let mut eps = 0.0;
    let mut solved = false;
    let mut out = Vec::with_capacity(schedule.len());
    for &target in schedule {
        let mut step = target - eps;
        while (target - eps).abs() > 0.0 {
            let next = if (target - eps).abs() <= step.abs() { target } else { eps + step };
            let model = cfg.model(next, window.clone())?;
            match solve(&model, &current, opts) {
                Ok(s) => {
                    current = s;
                    solved = true;
                    eps = next;
                    step *= 1.5;
                }
                Err(e) => {
                    step /= 2.0;
                    if step.abs() < cfg.continuation.min_step {
                        return Err(Error::ContinuationBreakdown { last_good: eps, reason: e.to_string() });
                    }
                }
            }
        }
        if !solved {
            // the window changed, so the state still has to be solved once
            current = solve(&cfg.model(target, window.clone())?, &current, opts)?;
            solved = true;
        }
        let point = ContinuationPoint {
            epsilon: target,
            iterations: current.history.len(),
            error_norm: current.diagnostics.error_norm,
            twist_inv: current.diagnostics.twist_inv,
            decay_slope: spatial_decay_slope(&current.k),
        };
        out.push((target, current.clone(), point));
    }
    Ok(out)
}

/// A converged single breather of frequency `r` at the configured coupling
/// and window.
pub fn breather(cfg: &ExperimentConfig, r: usize, epsilon: f64) -> Result<(ModelConfig<f64>, KamState<f64>)> {
    let (_, single) = single_site(cfg, r)?;
    let window = centered_window(cfg.model.window_radius);
    let opts = cfg.solver_options()?;
    let steps = [0.25, 0.5, 0.75, 1.0].map(|s| s * epsilon);
    let path = continue_in_eps(cfg, &single, window.clone(), &steps, &opts)?;
    let (_, st, _) = path.into_iter().last().expect("nonempty schedule");
    Ok((cfg.model(epsilon, window)?, st))
}

// ---------------------------------------------------------------- coupling

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CoupleReport {
    pub scan: ScanReport,
    pub diophantine: Vec<DiophantineReport>,
    pub factors: Vec<Diagnostics>,
    pub coupled: Diagnostics,
    pub coupled_history: Vec<Diagnostics>,
    /// Largest off-diagonal entry of `avg(A)` relative to the diagonal scale.
    pub twist_offdiag_ratio: f64,
}

/// Two-breather experiment: the separation scan and a Newton solve of the
/// product torus at `couple.newton_separation`.
pub fn couple_run(cfg: &ExperimentConfig) -> Result<(CoupleReport, ModelConfig<f64>, KamState<f64>)> {
    let eps = cfg.model.epsilon;
    let (model, a) = breather(cfg, 0, eps)?;
    let (_, b) = breather(cfg, 1, eps)?;
    let omegas = cfg.frequencies()?;
    let dio = check_sequence(&[vec![omegas[0]], vec![omegas[1]]], &cfg.frequency.nu, &[cfg.frequency.diophantine_kmax; 2])?;
    let scan_opts = SolverOptions { rate_steps: 0, ..cfg.solver_options()? };
    let scan = coupling_scan(&model, &a, &b, &cfg.couple.separations, &cfg.weak_decay()?, cfg.solver.rho, &scan_opts)?;
    let mut fa = a.clone();
    let mut fb = b.clone();
    fa.k = fa.k.with_band(vec![cfg.couple.band[0]]);
    fb.k = fb.k.with_band(vec![cfg.couple.band[1]]);
    let mut st = superpose_states(&fa, &fb, &[-cfg.couple.newton_separation]);
    st.k.grid = compact_grid(&st.k.kmax);
    let pair_model = model.with_window(st.k.sites.clone())?;
    let opts = SolverOptions { tol: cfg.couple.tol, ..cfg.solver_options()? };
    let coupled = solve(&pair_model, &st, &opts)?;
    let (_, _, geo) = diagnose(&pair_model, &coupled, &opts)?;
    let avg = &geo.avg_a;
    let diag = avg[(0, 0)].abs().max(avg[(1, 1)].abs());
    let off = avg[(0, 1)].abs().max(avg[(1, 0)].abs());
    let report = CoupleReport {
        scan,
        diophantine: dio,
        factors: vec![a.diagnostics, b.diagnostics],
        coupled: coupled.diagnostics,
        coupled_history: coupled.history.clone(),
        twist_offdiag_ratio: off / diag,
    };
    Ok((report, pair_model, coupled))
}

/// Cascade of `R` single breathers from the `[cascade]` section.
pub fn cascade_run(cfg: &ExperimentConfig) -> Result<Vec<CascadeStage<f64>>> {
    let section = cfg.cascade.as_ref().ok_or_else(|| Error::Config("missing [cascade] section".into()))?;
    let omegas = cfg.frequencies()?;
    let plan = CascadePlan {
        frequencies: omegas.clone(),
        separations: section.separations.clone(),
        decay_schedule: section.decay_schedule.clone(),
        band_schedule: section.band_schedule.clone(),
        tol_schedule: section.tol_schedule.clone(),
        nu_schedule: cfg.frequency.nu.clone(),
        diophantine_kmax: cfg.frequency.diophantine_kmax,
        smallness: section.smallness,
        max_doublings: section.max_doublings,
    };
    plan.validate()?;
    let eps = cfg.model.epsilon;
    let mut singles = Vec::with_capacity(omegas.len());
    for r in 0..omegas.len() {
        singles.push(breather(cfg, r, eps)?.1);
    }
    let model = cfg.model(eps, centered_window(cfg.model.window_radius))?;
    cascade(&model, &plan, &singles, &cfg.solver_options()?, &[section.watch])
}

// ---------------------------------------------------------------- persistence

mod hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(x: f64) -> String {
        format!("{:016x}", x.to_bits())
    }

    pub fn decode(s: &str) -> Result<f64, String> {
        u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|e| format!("bad hex float {s:?}: {e}"))
    }

    pub fn ser<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(*x))
    }

    pub fn de<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn ser<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(x.iter().map(|v| super::encode(*v)))
        }

        pub fn de<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v = Vec::<String>::deserialize(d)?;
            v.iter().map(|s| super::decode(s).map_err(serde::de::Error::custom)).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CouplingRecord {
    pub distance: usize,
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub even_coeffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ModelRecord {
    pub onsite: String,
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub polynomial: Vec<f64>,
    pub couplings: Vec<CouplingRecord>,
    #[serde(serialize_with = "hex::ser", deserialize_with = "hex::de")]
    pub epsilon: f64,
    #[serde(serialize_with = "hex::ser", deserialize_with = "hex::de")]
    pub step: f64,
    pub substeps: usize,
    pub window: Vec<Site>,
    #[serde(serialize_with = "hex::ser", deserialize_with = "hex::de")]
    pub decay_alpha: f64,
    #[serde(serialize_with = "hex::ser", deserialize_with = "hex::de")]
    pub decay_rate: f64,
    #[serde(serialize_with = "hex::ser", deserialize_with = "hex::de")]
    pub decay_prefactor: f64,
}

impl ModelRecord {
    pub fn of(m: &ModelConfig<f64>) -> Self {
        let (onsite, polynomial) = match &m.onsite {
            Onsite::Pendulum => ("pendulum".to_string(), vec![]),
            Onsite::Polynomial(c) => ("polynomial".to_string(), c.clone()),
        };
        Self {
            onsite,
            polynomial,
            couplings: m.couplings.iter().map(|c| CouplingRecord { distance: c.distance, even_coeffs: c.even_coeffs.clone() }).collect(),
            epsilon: m.epsilon,
            step: m.step,
            substeps: m.substeps,
            window: m.window.clone(),
            decay_alpha: m.decay.alpha,
            decay_rate: m.decay.rate,
            decay_prefactor: m.decay.prefactor,
        }
    }

    pub fn model(&self) -> Result<ModelConfig<f64>> {
        let onsite = match self.onsite.as_str() {
            "pendulum" => Onsite::Pendulum,
            "polynomial" => Onsite::Polynomial(self.polynomial.clone()),
            other => return Err(Error::CorruptState(format!("unknown onsite {other:?}"))),
        };
        let couplings = self.couplings.iter().map(|c| Coupling { distance: c.distance, even_coeffs: c.even_coeffs.clone() }).collect();
        let decay = DecayFunction::new(self.decay_alpha, self.decay_rate, self.decay_prefactor, self.window.first().map(|s| s.len()).unwrap_or(1))?;
        ModelConfig::new(onsite, couplings, self.epsilon, self.step, self.substeps, self.window.clone(), decay)
    }
}

/// Versioned on-disk form of a solver state; floats are stored as the hex
/// digits of their bit patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StateFile {
    pub schema_version: u32,
    pub model: ModelRecord,
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub omega: Vec<f64>,
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub lambda: Vec<f64>,
    pub l: usize,
    pub kmax: Vec<usize>,
    pub grid: Vec<usize>,
    pub sites: Vec<Site>,
    pub centers: Vec<Site>,
    pub winding: Vec<Vec<i64>>,
    /// Row-major `rows × box` real parts.
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub coeffs_re: Vec<f64>,
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub coeffs_im: Vec<f64>,
    /// Diagnostics in declaration order, see [`diagnostics_to_vec`].
    #[serde(serialize_with = "hex::vec::ser", deserialize_with = "hex::vec::de")]
    pub diagnostics: Vec<f64>,
}

/// Field values of `d` in declaration order.
pub fn diagnostics_to_vec(d: &Diagnostics) -> Vec<f64> {
    vec![
        d.error_norm,
        d.weighted_error,
        d.lambda_norm,
        d.isotropy,
        d.n_norm,
        d.twist_inv,
        d.parameter_inv,
        d.mu1,
        d.mu2,
        d.mu3,
        d.c_h,
        d.obstruction,
        d.bundle_defect,
        d.tail,
    ]
}

pub fn diagnostics_from_vec(v: &[f64]) -> Result<Diagnostics> {
    let &[error_norm, weighted_error, lambda_norm, isotropy, n_norm, twist_inv, parameter_inv, mu1, mu2, mu3, c_h, obstruction, bundle_defect, tail] = v
    else {
        return Err(Error::CorruptState(format!("expected 14 diagnostics, found {}", v.len())));
    };
    Ok(Diagnostics { error_norm, weighted_error, lambda_norm, isotropy, n_norm, twist_inv, parameter_inv, mu1, mu2, mu3, c_h, obstruction, bundle_defect, tail })
}

impl StateFile {
    pub fn of(model: &ModelConfig<f64>, s: &KamState<f64>) -> Self {
        let flat = |f: fn(&Complex<f64>) -> f64| s.k.coeffs.iter().flat_map(|r| r.iter().map(f)).collect::<Vec<f64>>();
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelRecord::of(model),
            omega: s.omega.clone(),
            lambda: s.lambda.clone(),
            l: s.k.l,
            kmax: s.k.kmax.clone(),
            grid: s.k.grid.clone(),
            sites: s.k.sites.clone(),
            centers: s.k.centers.clone(),
            winding: s.k.winding.clone(),
            coeffs_re: flat(|c| c.re),
            coeffs_im: flat(|c| c.im),
            diagnostics: diagnostics_to_vec(&s.diagnostics),
        }
    }

    pub fn restore(&self) -> Result<(ModelConfig<f64>, KamState<f64>)> {
        let model = self.model.model()?;
        let mut k = TorusEmbedding::zeros(self.l, self.kmax.clone(), self.grid.clone(), self.sites.clone(), self.centers.clone());
        let nbox = k.nbox();
        let rows = k.rows();
        if self.coeffs_re.len() != rows * nbox || self.coeffs_im.len() != rows * nbox || self.winding.len() != self.sites.len() {
            return Err(Error::CorruptState("coefficient array sizes do not match the Fourier box".into()));
        }
        if self.kmax.len() != self.l || self.grid.len() != self.l || self.omega.len() != self.l {
            return Err(Error::CorruptState("torus dimension mismatch".into()));
        }
        for r in 0..rows {
            for i in 0..nbox {
                k.coeffs[r][i] = Complex::new(self.coeffs_re[r * nbox + i], self.coeffs_im[r * nbox + i]);
            }
        }
        k.winding = self.winding.clone();
        let mut st = KamState::new(k, self.omega.clone());
        st.lambda = self.lambda.clone();
        st.diagnostics = diagnostics_from_vec(&self.diagnostics)?;
        Ok((model, st))
    }
}

pub fn save_state(path: &Path, model: &ModelConfig<f64>, s: &KamState<f64>) -> Result<()> {
    let text = serde_json::to_string_pretty(&StateFile::of(model, s))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<(ModelConfig<f64>, KamState<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptState(e.to_string()))?;
    match value.get("schemaVersion").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(Error::VersionMismatch(v as u32)),
        None => return Err(Error::CorruptState("missing schemaVersion".into())),
    }
    let file: StateFile = serde_json::from_value(value).map_err(|e| Error::CorruptState(e.to_string()))?;
    file.restore()
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct HistoryRow {
    iteration: usize,
    error_norm: f64,
    weighted_error: f64,
    lambda_norm: f64,
    isotropy: f64,
    n_norm: f64,
    twist_inv: f64,
    parameter_inv: f64,
    mu1: f64,
    mu2: f64,
    mu3: f64,
}

/// Per-iteration diagnostics as CSV with a header row.
pub fn write_history(path: &Path, history: &[Diagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, d) in history.iter().enumerate() {
        w.serialize(HistoryRow {
            iteration: i,
            error_norm: d.error_norm,
            weighted_error: d.weighted_error,
            lambda_norm: d.lambda_norm,
            isotropy: d.isotropy,
            n_norm: d.n_norm,
            twist_inv: d.twist_inv,
            parameter_inv: d.parameter_inv,
            mu1: d.mu1,
            mu2: d.mu2,
            mu3: d.mu3,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

// ---------------------------------------------------------------- commands

/// `single-site`: converged single breather at zero coupling.
pub fn cmd_single_site(cfg: &ExperimentConfig, out: &Path) -> Result<KamState<f64>> {
    std::fs::create_dir_all(out)?;
    let (model, st) = single_site(cfg, 0)?;
    save_state(&out.join("single_site.json"), &model, &st)?;
    write_history(&out.join("single_site_history.csv"), &st.history)?;
    Ok(st)
}

/// `continue`: single breather continued through `continuation.eps_schedule`.
pub fn cmd_continue(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ContinuationPoint>> {
    std::fs::create_dir_all(out)?;
    let (_, single) = single_site(cfg, 0)?;
    let window = centered_window(cfg.model.window_radius);
    let schedule = if cfg.continuation.eps_schedule.is_empty() { vec![cfg.model.epsilon] } else { cfg.continuation.eps_schedule.clone() };
    let path = continue_in_eps(cfg, &single, window.clone(), &schedule, &cfg.solver_options()?)?;
    let mut points = Vec::with_capacity(path.len());
    for (i, (eps, st, p)) in path.into_iter().enumerate() {
        save_state(&out.join(format!("continue_{i:03}.json")), &cfg.model(eps, window.clone())?, &st)?;
        points.push(p);
    }
    write_csv(&out.join("continuation.csv"), &points)?;
    Ok(points)
}

/// `couple`: separation scan and the coupled two-frequency torus.
pub fn cmd_couple(cfg: &ExperimentConfig, out: &Path) -> Result<CoupleReport> {
    std::fs::create_dir_all(out)?;
    let (report, model, st) = couple_run(cfg)?;
    write_csv(&out.join("coupling_scan.csv"), &report.scan.rows)?;
    write_history(&out.join("coupled_history.csv"), &st.history)?;
    save_state(&out.join("coupled.json"), &model, &st)?;
    write_json(&out.join("couple_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StageRow {
    pub stage: usize,
    pub separation: i64,
    pub initial_error: f64,
    pub error_norm: f64,
    pub increment: f64,
    pub mu1: f64,
    pub mu3: f64,
}

/// `cascade`: stage states and the per-stage increment table.
pub fn cmd_cascade(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StageRow>> {
    std::fs::create_dir_all(out)?;
    let stages = cascade_run(cfg)?;
    let mut rows = Vec::with_capacity(stages.len());
    for (r, s) in stages.iter().enumerate() {
        save_state(&out.join(format!("stage_{}.json", r + 1)), &s.model, &s.state)?;
        rows.push(StageRow {
            stage: r + 1,
            separation: s.separation,
            initial_error: s.initial_error,
            error_norm: s.state.diagnostics.error_norm,
            increment: s.increment,
            mu1: s.state.diagnostics.mu1,
            mu3: s.state.diagnostics.mu3,
        });
    }
    write_csv(&out.join("cascade.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DiagnosisReport {
    pub error_norm: f64,
    pub diagnostics: Option<Diagnostics>,
    pub diophantine: DiophantineReport,
    pub flags: Vec<String>,
    pub ok: bool,
}

/// Recomputes every diagnostic of a stored state.
pub fn diagnose_state(model: &ModelConfig<f64>, state: &KamState<f64>, opts: &SolverOptions<f64>) -> Result<DiagnosisReport> {
    let e = sup_norm(&invariance_error(model, state)?);
    let omega: Vec<f64> = state.omega.clone();
    let dio = measure_diophantine(&omega, omega.len() as f64 + 0.5, 200, Flavor::Map);
    let mut flags = Vec::new();
    if !(e <= opts.tol.max(1e-9)) {
        flags.push(format!("invariance error {e:e} above tolerance"));
    }
    if dio.resonant {
        flags.push("frequency is resonant".into());
    }
    let diagnostics = match diagnose(model, state, opts) {
        Ok((s, lin, geo)) => {
            let d = s.diagnostics;
            if d.isotropy > 1e-8 {
                flags.push(format!("isotropy defect {:e}", d.isotropy));
            }
            if !(d.mu1 * d.mu3 < 1.0 && d.mu2 * d.mu3 < 1.0) {
                flags.push("rates violate the dichotomy".into());
            }
            let sym = lin.bundle.symplectic_residual();
            if sym > 1e-8 {
                flags.push(format!("bundle symplectic residual {sym:e}"));
            }
            if geo.inverse_defect() > 1e-6 {
                flags.push(format!("center frame inverse defect {:e}", geo.inverse_defect()));
            }
            Some(d)
        }
        Err(Error::DegenerateEmbedding) => {
            flags.push("degenerate embedding: DK^T DK is singular".into());
            None
        }
        Err(err) => {
            flags.push(format!("diagnostics failed: {err}"));
            None
        }
    };
    Ok(DiagnosisReport { error_norm: e, diagnostics, diophantine: dio, ok: flags.is_empty(), flags })
}

/// `diagnose`: report for a state file.
pub fn cmd_diagnose(path: &Path) -> Result<DiagnosisReport> {
    let (model, st) = load_state(path)?;
    let opts = SolverOptions { weight: Some((model.decay.clone(), 0.0)), ..SolverOptions::default() };
    diagnose_state(&model, &st, &opts)
}

/// `check-frequency`: Diophantine scan of every truncation of the configured sequence.
pub fn cmd_check_frequency(cfg: &ExperimentConfig) -> Result<Vec<DiophantineReport>> {
    let omegas: Vec<Vec<f64>> = cfg.frequencies()?.into_iter().map(|w| vec![w]).collect();
    check_sequence(&omegas, &cfg.frequency.nu, &vec![cfg.frequency.diophantine_kmax; omegas.len()])
}

/// `check-decay`: axiom scan of the configured decay profile.
pub fn cmd_check_decay(cfg: &ExperimentConfig) -> Result<AxiomReport> {
    Ok(check_axioms(&cfg.decay_function()?, 1000))
}

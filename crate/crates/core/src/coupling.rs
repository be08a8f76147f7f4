//! Superposition of localized tori, the separation scan, spatial
//! non-resonance and the inductive multi-frequency cascade.

use crate::cohomology::{check_sequence, DiophantineReport};
use crate::decay_spaces::{distance, DecayFunction, Site};
use crate::embedding::{box_index, box_modes, TorusEmbedding};
use crate::error::{Error, Result};
use crate::fourier::sup_norm;
use crate::kam_step::{invariance_error, solve, weighted_norm, KamState, SolverOptions};
use crate::lattice_model::ModelConfig;
use crate::scalar::{f64_of, Real};
use serde::{Deserialize, Serialize};

/// Moves a torus by the lattice translation `x_i ↦ x_{i+m}`: sites and centers
/// shift by `-m`.
pub fn translate<T: Real>(k: &TorusEmbedding<T>, m: &[i64]) -> TorusEmbedding<T> {
    let shift = |s: &Site| -> Site { s.iter().zip(m).map(|(a, b)| a - b).collect() };
    let mut out = k.clone();
    out.sites = k.sites.iter().map(shift).collect();
    out.centers = k.centers.iter().map(shift).collect();
    out
}

fn union_sites(a: &[Site], b: &[Site]) -> Vec<Site> {
    let mut all: Vec<Site> = a.iter().chain(b).cloned().collect();
    all.sort();
    all.dedup();
    all
}

/// `K(θ₁, θ₂) = K₁(θ₁) + τ^m K₂(θ₂)` on the product torus and the union of
/// both windows.
pub fn superpose<T: Real>(k1: &TorusEmbedding<T>, k2: &TorusEmbedding<T>, m: &[i64]) -> TorusEmbedding<T> {
    let k2 = translate(k2, m);
    let sites = union_sites(&k1.sites, &k2.sites);
    let l = k1.l + k2.l;
    let kmax: Vec<usize> = k1.kmax.iter().chain(&k2.kmax).copied().collect();
    let grid: Vec<usize> = k1.grid.iter().chain(&k2.grid).copied().collect();
    let centers: Vec<Site> = k1.centers.iter().chain(&k2.centers).cloned().collect();
    let mut out = TorusEmbedding::zeros(l, kmax.clone(), grid, sites.clone(), centers);
    let zero1 = vec![0i64; k1.l];
    let zero2 = vec![0i64; k2.l];
    for (s, site) in sites.iter().enumerate() {
        let mut w = vec![0i64; l];
        if let Some(i) = k1.site_index(site) {
            for (idx, k) in box_modes(&k1.kmax).iter().enumerate() {
                let full: Vec<i64> = k.iter().chain(&zero2).copied().collect();
                let j = box_index(&kmax, &full).unwrap();
                for r in 0..2 {
                    out.coeffs[2 * s + r][j] = out.coeffs[2 * s + r][j] + k1.coeffs[2 * i + r][idx];
                }
            }
            w[..k1.l].copy_from_slice(&k1.winding[i]);
        }
        if let Some(i) = k2.site_index(site) {
            for (idx, k) in box_modes(&k2.kmax).iter().enumerate() {
                let full: Vec<i64> = zero1.iter().chain(k).copied().collect();
                let j = box_index(&kmax, &full).unwrap();
                for r in 0..2 {
                    out.coeffs[2 * s + r][j] = out.coeffs[2 * s + r][j] + k2.coeffs[2 * i + r][idx];
                }
            }
            w[k1.l..].copy_from_slice(&k2.winding[i]);
        }
        out.winding[s] = w;
    }
    out
}

/// Product state of two solver states (frequencies and counterterms concatenated).
pub fn superpose_states<T: Real>(a: &KamState<T>, b: &KamState<T>, m: &[i64]) -> KamState<T> {
    let k = superpose(&a.k, &b.k, m);
    let mut s = KamState::new(k, a.omega.iter().chain(&b.omega).copied().collect());
    s.lambda = a.lambda.iter().chain(&b.lambda).copied().collect();
    s
}

/// Per-angle grid sizes `2 kmax + 3` used for product tori.
pub fn compact_grid(kmax: &[usize]) -> Vec<usize> {
    kmax.iter().map(|k| 2 * k + 3).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScanRow {
    pub separation: i64,
    /// Error in the weighted norm with the weaker decay function.
    pub weighted_error: f64,
    pub sup_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    /// Exponential rate from the decay-family fit `log e = c - α log m - β m`.
    pub fitted_rate: f64,
    pub strictly_decreasing: bool,
}

/// Least-squares exponential rate of `errors` along `separations`, after
/// dividing out the algebraic factor `m^{-alpha}` of the decay family.
pub fn fit_decay_rate(separations: &[f64], errors: &[f64], alpha: f64) -> f64 {
    let pts: Vec<(f64, f64)> = separations
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > 0.0)
        .map(|(&m, &e)| (m, e.ln() + alpha * m.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}

/// Re-converges a breather on a larger window (extension by the fixed point).
pub fn extend_window<T: Real>(cfg: &ModelConfig<T>, state: &KamState<T>, sites: Vec<Site>, opts: &SolverOptions<T>) -> Result<KamState<T>> {
    let mut st = state.clone();
    st.k = st.k.with_sites(sites.clone());
    st.bundle = None;
    st.history.clear();
    solve(&cfg.with_window(sites)?, &st, opts)
}

/// Invariance error of the superposition of two breathers as the second is
/// moved away along the first lattice axis.
///
/// For every separation both factors are first re-converged on the union
/// window, so the error left is the interaction alone and not the cut-off of
/// either factor's tail at its own window edge.
pub fn coupling_scan<T: Real>(
    cfg: &ModelConfig<T>,
    a: &KamState<T>,
    b: &KamState<T>,
    separations: &[i64],
    weak: &DecayFunction<T>,
    rho: T,
    opts: &SolverOptions<T>,
) -> Result<ScanReport> {
    let mut rows = Vec::with_capacity(separations.len());
    for &m in separations {
        let mut shift = vec![0i64; cfg.dim];
        shift[0] = -m;
        let sites = union_sites(&a.k.sites, &translate(&b.k, &shift).sites);
        let back: Vec<i64> = shift.iter().map(|x| -x).collect();
        let fa = extend_window(cfg, a, sites.clone(), opts)?;
        // factor b lives on the union window seen from its own center
        let b_sites: Vec<Site> = sites.iter().map(|s| s.iter().zip(&back).map(|(x, y)| x - y).collect()).collect();
        let fb = extend_window(cfg, b, b_sites, opts)?;
        let mut st = superpose_states(&fa, &fb, &shift);
        st.k.grid = compact_grid(&st.k.kmax);
        let model = cfg.with_window(st.k.sites.clone())?;
        let e = invariance_error(&model, &st)?;
        let grid = st.k.make_grid();
        rows.push(ScanRow {
            separation: m,
            weighted_error: f64_of(weighted_norm(&grid, &e, &st.k, weak, rho)?),
            sup_error: f64_of(sup_norm(&e)),
        });
    }
    let ms: Vec<f64> = rows.iter().map(|r| r.separation as f64).collect();
    let es: Vec<f64> = rows.iter().map(|r| r.weighted_error).collect();
    let strictly_decreasing = es.windows(2).all(|w| w[1] < w[0]);
    Ok(ScanReport { fitted_rate: fit_decay_rate(&ms, &es, f64_of(weak.alpha)), strictly_decreasing, rows })
}

/// No lattice point in the scan box is equidistant from more than two centers.
pub fn check_nonresonant(centers: &[Site], margin: i64) -> bool {
    if centers.len() < 3 {
        return true;
    }
    let dim = centers[0].len();
    let lo: Vec<i64> = (0..dim).map(|a| centers.iter().map(|c| c[a]).min().unwrap() - margin).collect();
    let hi: Vec<i64> = (0..dim).map(|a| centers.iter().map(|c| c[a]).max().unwrap() + margin).collect();
    let mut point = lo.clone();
    loop {
        let mut d: Vec<usize> = centers.iter().map(|c| distance(c, &point)).collect();
        d.sort_unstable();
        let mut run = 1;
        for w in d.windows(2) {
            run = if w[0] == w[1] { run + 1 } else { 1 };
            if run > 2 {
                return false;
            }
        }
        // odometer over the box
        let mut a = dim;
        loop {
            if a == 0 {
                return true;
            }
            a -= 1;
            if point[a] < hi[a] {
                point[a] += 1;
                break;
            }
            point[a] = lo[a];
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CascadePlan {
    pub frequencies: Vec<f64>,
    /// Displacement of center `r` from center `r - 1` along the first axis.
    pub separations: Vec<i64>,
    /// Strictly decreasing decay rates of the stage norms.
    pub decay_schedule: Vec<f64>,
    /// Per-angle Fourier band of stage `r`.
    pub band_schedule: Vec<usize>,
    pub tol_schedule: Vec<f64>,
    pub nu_schedule: Vec<f64>,
    /// Largest `|k|_1` of the Diophantine scan.
    pub diophantine_kmax: usize,
    /// Superposition error above which the separation is doubled before solving.
    pub smallness: f64,
    pub max_doublings: usize,
}

impl CascadePlan {
    pub fn stages(&self) -> usize {
        self.frequencies.len()
    }

    /// Checks the plan invariants and returns the Diophantine reports of all truncations.
    pub fn validate(&self) -> Result<Vec<DiophantineReport>> {
        let r = self.stages();
        if self.separations.len() + 1 < r
            || self.decay_schedule.len() < r
            || self.band_schedule.len() < r
            || self.tol_schedule.len() < r
        {
            return Err(Error::Config("cascade schedules are shorter than the frequency list".into()));
        }
        if self.decay_schedule.windows(2).any(|w| !(w[1] < w[0])) || self.decay_schedule.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("decay schedule must be positive and strictly decreasing".into()));
        }
        let reports = check_sequence(
            &self.frequencies.iter().map(|&w| vec![w]).collect::<Vec<_>>(),
            &self.nu_schedule,
            &vec![self.diophantine_kmax; r],
        )?;
        if let Some(bad) = reports.iter().position(|x| x.resonant) {
            return Err(Error::Config(format!("truncation {} of the frequency sequence is resonant", bad + 1)));
        }
        if !check_nonresonant(&self.centers(), 8) {
            return Err(Error::Config("center sequence is spatially resonant".into()));
        }
        Ok(reports)
    }

    /// Center positions along the first axis implied by the separations.
    pub fn centers(&self) -> Vec<Site> {
        let mut c = vec![vec![0i64]];
        for &m in self.separations.iter().take(self.stages().saturating_sub(1)) {
            let last = c.last().unwrap()[0];
            c.push(vec![last + m]);
        }
        c
    }
}

/// One converged cascade stage.
#[derive(Clone, Debug)]
pub struct CascadeStage<T: Real> {
    pub state: KamState<T>,
    pub model: ModelConfig<T>,
    /// Separation actually used (after doublings).
    pub separation: i64,
    /// Superposition error before solving.
    pub initial_error: f64,
    /// Majorant norm of the change of the watched site's embedding.
    pub increment: f64,
}

/// Majorant norm at `site` of `K_new - K_old`, with `K_old` extended
/// constantly along the new angles.
pub fn site_increment<T: Real>(new: &TorusEmbedding<T>, old: Option<&TorusEmbedding<T>>, site: &[i64]) -> f64 {
    let Some(s) = new.site_index(site) else { return 0.0 };
    let modes = box_modes(&new.kmax);
    let mut total = 0.0;
    for (idx, k) in modes.iter().enumerate() {
        let mut d = [new.coeffs[2 * s][idx], new.coeffs[2 * s + 1][idx]];
        if let Some(o) = old {
            let tail_zero = k[o.l..].iter().all(|&x| x == 0);
            if let (true, Some(os)) = (tail_zero, o.site_index(site)) {
                if let Some(j) = box_index(&o.kmax, &k[..o.l]) {
                    d[0] = d[0] - o.coeffs[2 * os][j];
                    d[1] = d[1] - o.coeffs[2 * os + 1][j];
                }
            }
        }
        total += (f64_of(d[0].norm_sqr()) + f64_of(d[1].norm_sqr())).sqrt();
    }
    total
}

/// Builds the stage tori one frequency at a time. `breathers[r]` is a
/// converged single breather of frequency `plan.frequencies[r]`, centered at
/// the origin of its own window.
pub fn cascade<T: Real>(
    cfg: &ModelConfig<T>,
    plan: &CascadePlan,
    breathers: &[KamState<T>],
    opts: &SolverOptions<T>,
    watch: &[i64],
) -> Result<Vec<CascadeStage<T>>> {
    plan.validate()?;
    if breathers.len() < plan.stages() {
        return Err(Error::LengthMismatch { expected: plan.stages(), got: breathers.len() });
    }
    let mut stages: Vec<CascadeStage<T>> = Vec::with_capacity(plan.stages());
    let mut offset = 0i64;
    for r in 0..plan.stages() {
        let band = plan.band_schedule[r];
        let stage_opts = SolverOptions { tol: plan.tol_schedule[r], ..opts.clone() };
        let single = |b: &KamState<T>| {
            let mut b = b.clone();
            b.k = b.k.with_band(vec![band; b.k.l]);
            b.bundle = None;
            b
        };
        if r == 0 {
            let mut st = single(&breathers[0]);
            st.k.grid = crate::fourier::Grid::<T>::for_band(&st.k.kmax).dims;
            let model = cfg.with_window(st.k.sites.clone())?;
            let e0 = f64_of(sup_norm(&invariance_error(&model, &st)?));
            let st = solve(&model, &st, &stage_opts).map_err(|e| Error::StageFailure { stage: 1, reason: e.to_string() })?;
            let increment = site_increment(&st.k, None, watch);
            stages.push(CascadeStage { state: st, model, separation: 0, initial_error: e0, increment });
            continue;
        }
        let prev = &stages[r - 1];
        let mut base = prev.state.clone();
        base.k = base.k.with_band(vec![band; base.k.l]);
        let mut sep = plan.separations[r - 1];
        let mut last_reason = String::new();
        let mut done = None;
        for _attempt in 0..=plan.max_doublings {
            let mut shift = vec![0i64; cfg.dim];
            shift[0] = -(offset + sep);
            let mut st = superpose_states(&base, &single(&breathers[r]), &shift);
            st.k.grid = compact_grid(&st.k.kmax);
            let model = cfg.with_window(st.k.sites.clone())?;
            let e0 = f64_of(sup_norm(&invariance_error(&model, &st)?));
            if !(e0 <= plan.smallness) {
                last_reason = format!("superposition error {e0:e} at separation {sep}");
                sep *= 2;
                continue;
            }
            match solve(&model, &st, &stage_opts) {
                Ok(s) => {
                    done = Some((s, model, e0));
                    break;
                }
                Err(e) => {
                    last_reason = format!("{e} at separation {sep}");
                    sep *= 2;
                }
            }
        }
        let Some((st, model, e0)) = done else {
            return Err(Error::StageFailure { stage: r + 1, reason: last_reason });
        };
        offset += sep;
        let increment = site_increment(&st.k, Some(&prev.state.k), watch);
        stages.push(CascadeStage { state: st, model, separation: sep, initial_error: e0, increment });
    }
    Ok(stages)
}

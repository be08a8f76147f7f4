//! Small-divisor equations on the torus and Diophantine measurements.

use crate::error::{Error, Result};
use crate::fourier::{phase, Grid, GridField};
use crate::scalar::{f64_of, from_i64, lit, Real};
use num_complex::Complex;
use serde::{Deserialize, Serialize, Serializer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Distance of `k·ω` to the integers (maps).
    Map,
    /// Distance of `k·ω` to zero (flows).
    Flow,
}

fn finite_or_null<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DiophantineReport {
    pub omega: Vec<f64>,
    pub nu: f64,
    pub kmax: usize,
    /// `max_k [|k|^ν dist(k·ω)]^{-1}`; infinite at an exact resonance (serialized as null).
    #[serde(serialize_with = "finite_or_null")]
    pub kappa: f64,
    pub worst_mode: Vec<i64>,
    pub resonant: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub zero_avg_tol: f64,
    pub divisor_floor: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { zero_avg_tol: 1e-12, divisor_floor: 1e-13 }
    }
}

/// Calls `f` on every `k` with `0 < |k|_1 ≤ kmax` whose first nonzero entry
/// is positive, in lexicographic order.
fn for_each_half_mode(l: usize, kmax: usize, f: &mut dyn FnMut(&[i64])) {
    fn rec(k: &mut Vec<i64>, a: usize, left: i64, positive: bool, f: &mut dyn FnMut(&[i64])) {
        if a == k.len() {
            if positive {
                f(k);
            }
            return;
        }
        let lo = if positive { -left } else { 0 };
        for x in lo..=left {
            k[a] = x;
            rec(k, a + 1, left - x.abs(), positive || x > 0, f);
        }
        k[a] = 0;
    }
    let mut k = vec![0i64; l];
    rec(&mut k, 0, kmax as i64, false, f);
}

/// Exact scan of the Diophantine constant over `0 < |k|_1 ≤ kmax`.
pub fn measure_diophantine(omega: &[f64], nu: f64, kmax: usize, flavor: Flavor) -> DiophantineReport {
    let mut kappa = 0.0f64;
    let mut worst = vec![0i64; omega.len()];
    let mut resonant = false;
    for_each_half_mode(omega.len(), kmax.max(1), &mut |k| {
        if resonant {
            return;
        }
        let dot: f64 = k.iter().zip(omega).map(|(&a, &w)| a as f64 * w).sum();
        let d = match flavor {
            Flavor::Map => (dot - dot.round()).abs(),
            Flavor::Flow => dot.abs(),
        };
        let norm: i64 = k.iter().map(|x| x.abs()).sum();
        let q = (norm as f64).powf(nu) * d;
        if q == 0.0 {
            resonant = true;
            kappa = f64::INFINITY;
            worst = k.to_vec();
        } else if 1.0 / q > kappa {
            kappa = 1.0 / q;
            worst = k.to_vec();
        }
    });
    DiophantineReport { omega: omega.to_vec(), nu, kmax, kappa, worst_mode: worst, resonant }
}

/// Scans every truncation `(ω_1, ..., ω_r)` of a frequency sequence.
pub fn check_sequence(omegas: &[Vec<f64>], nu_schedule: &[f64], kmax_schedule: &[usize]) -> Result<Vec<DiophantineReport>> {
    if nu_schedule.len() < omegas.len() || kmax_schedule.len() < omegas.len() {
        return Err(Error::LengthMismatch { expected: omegas.len(), got: nu_schedule.len().min(kmax_schedule.len()) });
    }
    let mut out = Vec::with_capacity(omegas.len());
    let mut concat = Vec::new();
    for (r, w) in omegas.iter().enumerate() {
        concat.extend_from_slice(w);
        let need = ((r + 1) * w.len()) as f64;
        if !(nu_schedule[r] > need) {
            return Err(Error::Config(format!("exponent {} of truncation {} must exceed {need}", nu_schedule[r], r + 1)));
        }
        out.push(measure_diophantine(&concat, nu_schedule[r], kmax_schedule[r], Flavor::Map));
    }
    Ok(out)
}

fn check_averages<T: Real>(grid: &Grid<T>, h: &GridField<T>, opts: &SolveOptions) -> Result<()> {
    let avg = grid.average(h);
    let worst = avg.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if worst > lit(opts.zero_avg_tol) {
        return Err(Error::NonzeroAverage { average: f64_of(worst) });
    }
    Ok(())
}

fn divide<T: Real, D>(grid: &Grid<T>, h: &GridField<T>, opts: &SolveOptions, divisor: D) -> Result<GridField<T>>
where
    D: Fn(&[i64]) -> Complex<T>,
{
    check_averages(grid, h, opts)?;
    let floor: T = lit(opts.divisor_floor);
    let mut bad = None;
    for g in 1..grid.len {
        let k = grid.mode(g);
        let d = divisor(&k);
        if crate::scalar::cabs(d) < floor {
            bad = Some((k, f64_of(crate::scalar::cabs(d))));
            break;
        }
    }
    if let Some((mode, divisor)) = bad {
        return Err(Error::ResonantMode { mode, divisor });
    }
    Ok(grid.multiply_modes(h, |k| {
        if k.iter().all(|&x| x == 0) {
            Complex::new(T::zero(), T::zero())
        } else {
            Complex::new(T::one(), T::zero()) / divisor(k)
        }
    }))
}

/// Zero-average solution of `v(θ + ω) - v(θ) = h(θ)`, row by row.
pub fn solve_difference<T: Real>(grid: &Grid<T>, h: &GridField<T>, omega: &[T], opts: &SolveOptions) -> Result<GridField<T>> {
    divide(grid, h, opts, |k| phase(k, omega) - Complex::new(T::one(), T::zero()))
}

/// Zero-average solution of `Σ_j ω_j ∂_j v = h`.
pub fn solve_directional<T: Real>(grid: &Grid<T>, h: &GridField<T>, omega: &[T], opts: &SolveOptions) -> Result<GridField<T>> {
    divide(grid, h, opts, |k| {
        let dot = k.iter().zip(omega).fold(T::zero(), |s, (&a, &w)| s + from_i64::<T>(a) * w);
        Complex::new(T::zero(), T::two_pi() * dot)
    })
}

/// `v(θ + ω) - v(θ)`.
pub fn apply_difference<T: Real>(grid: &Grid<T>, v: &GridField<T>, omega: &[T]) -> GridField<T> {
    grid.shift(v, omega) - v
}

/// `Σ_j ω_j ∂_j v`.
pub fn apply_directional<T: Real>(grid: &Grid<T>, v: &GridField<T>, omega: &[T]) -> GridField<T> {
    let mut out = GridField::zeros(v.nrows(), v.ncols());
    for (a, &w) in omega.iter().enumerate() {
        out += grid.derivative(v, a) * w;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    #[test]
    fn resonant_frequency_is_flagged() {
        let r = measure_diophantine(&[0.5], 1.0, 10, Flavor::Map);
        assert!(r.resonant && r.kappa.is_infinite());
        assert_eq!(r.worst_mode, vec![2]);
    }

    #[test]
    fn golden_mean_worst_modes_are_fibonacci() {
        let fib = [1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233, 377, 610, 987];
        for kmax in [3usize, 20, 1000] {
            let r = measure_diophantine(&[GOLDEN], 1.0, kmax, Flavor::Map);
            assert!(r.kappa.is_finite());
            assert!(fib.contains(&r.worst_mode[0]));
        }
        // with the exponent 1 the largest ratio sits at the first Fibonacci denominator
        let r = measure_diophantine(&[GOLDEN], 1.0, 1000, Flavor::Map);
        assert!((r.kappa - 1.0 / (1.0 - GOLDEN)).abs() < 1e-12);
    }

    #[test]
    fn single_mode_difference_solution() {
        let grid = Grid::<f64>::new(&[33]);
        let mut h = DMatrix::zeros(1, 33);
        for g in 0..33 {
            h[(0, g)] = (std::f64::consts::TAU * grid.theta(g)[0]).cos();
        }
        let v = solve_difference(&grid, &h, &[GOLDEN], &SolveOptions::default()).unwrap();
        let back = apply_difference(&grid, &v, &[GOLDEN]);
        assert!((back - &h).amax() < 1e-13);
        let c = grid.analyze(&v.row(0).iter().copied().collect::<Vec<_>>());
        let want = Complex::new(0.5, 0.0) / (phase(&[1], &[GOLDEN]) - Complex::new(1.0, 0.0));
        assert!((c[1] - want).norm() < 1e-14);
    }

    #[test]
    fn constant_right_hand_side_is_rejected() {
        let grid = Grid::<f64>::new(&[9]);
        let h = DMatrix::from_element(1, 9, 0.3);
        assert!(matches!(solve_difference(&grid, &h, &[GOLDEN], &SolveOptions::default()), Err(Error::NonzeroAverage { .. })));
        assert!(matches!(solve_directional(&grid, &h, &[GOLDEN], &SolveOptions::default()), Err(Error::NonzeroAverage { .. })));
    }

    #[test]
    fn directional_solution_of_sine() {
        let grid = Grid::<f64>::new(&[17]);
        let w = 0.37;
        let mut h = DMatrix::zeros(1, 17);
        for g in 0..17 {
            h[(0, g)] = (std::f64::consts::TAU * grid.theta(g)[0]).sin();
        }
        let v = solve_directional(&grid, &h, &[w], &SolveOptions::default()).unwrap();
        for g in 0..17 {
            let want = -(std::f64::consts::TAU * grid.theta(g)[0]).cos() / (std::f64::consts::TAU * w);
            assert!((v[(0, g)] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn sequence_truncations() {
        let s2 = std::f64::consts::SQRT_2 - 1.0;
        let r = check_sequence(&[vec![GOLDEN], vec![s2]], &[1.5, 2.5], &[200, 200]).unwrap();
        assert!(r.iter().all(|x| x.kappa.is_finite()));
        let r = check_sequence(&[vec![GOLDEN], vec![GOLDEN]], &[1.5, 2.5], &[200, 200]).unwrap();
        assert!(r[1].resonant);
        assert_eq!(r[1].worst_mode, vec![1, -1]);
        let single = check_sequence(&[vec![GOLDEN]], &[1.5], &[50]).unwrap();
        assert_eq!(single[0], measure_diophantine(&[GOLDEN], 1.5, 50, Flavor::Map));
    }
}

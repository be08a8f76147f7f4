//! Property tests for the structural invariants of the library.

use breathers::cohomology::{apply_difference, solve_difference, SolveOptions};
use breathers::coupling::{superpose, translate};
use breathers::decay_spaces::{check_axioms, compose, operator_norm, safe_decay, DecayOperator};
use breathers::embedding::TorusEmbedding;
use breathers::fourier::{sup_norm, Grid, GridField};
use breathers::harness::{reflect_angles, ModelRecord, StateFile};
use breathers::kam_step::KamState;
use breathers::lattice_model::{centered_window, ModelConfig};
use nalgebra::DMatrix;
use num_complex::Complex;
use proptest::prelude::*;

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn embedding_from(values: &[f64], kmax: usize, sites: usize) -> TorusEmbedding<f64> {
    let mut k = TorusEmbedding::zeros(1, vec![kmax], vec![4 * kmax + 1], centered_window(sites / 2), vec![vec![0]]);
    let mut it = values.iter().cycle();
    for r in 0..k.rows() {
        for m in 0..=kmax as i64 {
            let (a, b) = (*it.next().unwrap(), *it.next().unwrap());
            if m == 0 {
                k.set_coefficient(r, &[0], Complex::new(a, 0.0));
            } else {
                k.set_coefficient(r, &[m], Complex::new(a, b));
                k.set_coefficient(r, &[-m], Complex::new(a, -b));
            }
        }
    }
    k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn safe_profiles_satisfy_the_axioms(alpha in 1.2f64..3.5, rate in 0.0f64..0.8) {
        let g = safe_decay(alpha, rate, 1).unwrap();
        let report = check_axioms(&g, 400);
        prop_assert!(report.pass, "{report:?}");
    }

    #[test]
    fn decay_norm_is_submultiplicative(entries in prop::collection::vec(-1.0f64..1.0, 2 * 16 * 16)) {
        let g = safe_decay(2.0, 0.25, 1).unwrap();
        let window = centered_window(4);
        let n = 2 * window.len();
        // entries scaled by the profile so both operators have finite, comparable norms
        let build = |off: usize| {
            DMatrix::from_fn(n, n, |i, j| {
                let d = (i as i64 / 2 - j as i64 / 2).unsigned_abs() as usize;
                entries[(off + i * n + j) % entries.len()] * g.at_distance(d)
            })
        };
        let a = DecayOperator::new(window.clone(), build(0), g.clone()).unwrap();
        let b = DecayOperator::new(window, build(n * n / 2 + 7), g.clone()).unwrap();
        let ab = compose(&a, &b).unwrap();
        let lhs = operator_norm(&ab, &g);
        let rhs = operator_norm(&a, &g) * operator_norm(&b, &g);
        prop_assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
    }

    #[test]
    fn difference_equation_round_trip(coeffs in prop::collection::vec(-1.0f64..1.0, 2 * 20)) {
        let grid = Grid::<f64>::for_band(&[20]);
        let k = embedding_from(&coeffs, 20, 1);
        let mut h = k.evaluate_on(&grid).unwrap();
        for r in 0..h.nrows() {
            let mean = h.row(r).sum() / grid.len as f64;
            h.row_mut(r).add_scalar_mut(-mean);
        }
        let v = solve_difference(&grid, &h, &[golden()], &SolveOptions::default()).unwrap();
        let back = apply_difference(&grid, &v, &[golden()]);
        prop_assert!(sup_norm(&(back - &h)) <= 1e-12 * sup_norm(&h).max(1.0));
    }

    #[test]
    fn grid_transform_round_trip(coeffs in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 9)) {
        let k = embedding_from(&coeffs, 8, 3);
        let values = k.evaluate_grid().unwrap();
        let back = k.from_grid(&values, &k.kmax).unwrap();
        prop_assert!(back.max_coeff_diff(&k) <= 1e-13);
    }

    #[test]
    fn rotation_composes(coeffs in prop::collection::vec(-1.0f64..1.0, 2 * 9), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let k = embedding_from(&coeffs, 8, 1);
        let twice = k.rotate(&[a]).rotate(&[b]);
        let once = k.rotate(&[a + b]);
        prop_assert!(twice.max_coeff_diff(&once) <= 1e-13);
        prop_assert!(k.rotate(&[a]).rotate(&[-a]).max_coeff_diff(&k) <= 1e-13);
    }

    #[test]
    fn angle_reflection_is_an_involution(coeffs in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 7)) {
        let k = embedding_from(&coeffs, 6, 3);
        prop_assert_eq!(reflect_angles(&reflect_angles(&k)), k);
    }

    #[test]
    fn verlet_map_is_symplectic_and_reversible(x in prop::collection::vec(-2.0f64..2.0, 2 * 9)) {
        let g = safe_decay(2.0, 0.25, 1).unwrap();
        let cfg = ModelConfig::pendulum_decaying(0.02, 1.0, g, 8, 0.5, 8, centered_window(4)).unwrap();
        let (y, dfm) = cfg.map_with_jacobian(&x);
        let n = x.len();
        let j = DMatrix::from_fn(n, n, |r, c| {
            if r % 2 == 0 && c == r + 1 { 1.0 } else if c % 2 == 0 && r == c + 1 { -1.0 } else { 0.0 }
        });
        let defect = (dfm.transpose() * &j * &dfm - &j).amax();
        prop_assert!(defect <= 1e-12, "symplectic defect {defect}");
        // time reversal: F(q', -p') = (q, -p)
        let flip = |v: &[f64]| v.iter().enumerate().map(|(i, &a)| if i % 2 == 1 { -a } else { a }).collect::<Vec<_>>();
        let back = flip(&cfg.map(&flip(&y)));
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12, "reversibility defect {err}");
    }

    #[test]
    fn translation_round_trip(shift in -40i64..40, coeffs in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 4)) {
        let k = embedding_from(&coeffs, 3, 5);
        prop_assert_eq!(translate(&translate(&k, &[shift]), &[-shift]), k);
    }

    #[test]
    fn superposition_keeps_far_factor(coeffs in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4), m in 5i64..30) {
        let a = embedding_from(&coeffs, 3, 3);
        let zero = TorusEmbedding::zeros(1, vec![2], vec![9], centered_window(1), vec![vec![0]]);
        let s = superpose(&a, &zero, &[-m]);
        for k in -3i64..=3 {
            for r in 0..a.rows() {
                prop_assert_eq!(s.coefficient(r, &[k, 0]), a.coefficient(r, &[k]));
            }
        }
    }

    #[test]
    fn state_file_round_trip_is_bit_exact(bits in prop::collection::vec(any::<u64>(), 2 * 3 * 7)) {
        // arbitrary bit patterns, including NaN payloads and infinities
        let vals: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let mut k = TorusEmbedding::zeros(1, vec![3], vec![13], centered_window(1), vec![vec![0]]);
        let nbox = k.nbox();
        for r in 0..k.rows() {
            for i in 0..nbox {
                k.coeffs[r][i] = Complex::new(vals[(r * nbox + i) % vals.len()], vals[(r * nbox + i + 5) % vals.len()]);
            }
        }
        let model = ModelConfig::pendulum_nearest(0.01, 1.0, 0.5, 8, centered_window(1)).unwrap();
        let mut st = KamState::new(k, vec![golden()]);
        st.lambda = vec![vals[0]];
        let file = StateFile::of(&model, &st);
        let text = serde_json::to_string(&file).unwrap();
        let parsed: StateFile = serde_json::from_str(&text).unwrap();
        let (m2, s2) = parsed.restore().unwrap();
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
        prop_assert!(same(s2.lambda[0], st.lambda[0]));
        for r in 0..st.k.rows() {
            for i in 0..nbox {
                prop_assert!(same(s2.k.coeffs[r][i].re, st.k.coeffs[r][i].re));
                prop_assert!(same(s2.k.coeffs[r][i].im, st.k.coeffs[r][i].im));
            }
        }
        prop_assert_eq!(ModelRecord::of(&m2), ModelRecord::of(&model));
    }
}

#[test]
fn nonsummable_profiles_are_rejected() {
    assert!(safe_decay(1.0f64, 0.25, 1).is_err());
    assert!(safe_decay(2.0f64, 0.25, 2).is_err());
}

#[test]
fn zero_field_solves_trivially() {
    let grid = Grid::<f64>::for_band(&[4]);
    let h = GridField::zeros(2, grid.len);
    let v = solve_difference(&grid, &h, &[golden()], &SolveOptions::default()).unwrap();
    assert_eq!(sup_norm(&v), 0.0);
}

use breathers::embedding::TorusEmbedding;
use breathers::harness::*;
use breathers::kam_step::{KamState, SolverOptions};
use breathers::lattice_model::ModelConfig;
use breathers::Error;
use num_complex::Complex;

fn config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!("[model]\n{extra}")).unwrap()
}

fn single_site_config() -> ExperimentConfig {
    ExperimentConfig::from_toml("[model]\n[solver]\nkmax = 32\n").unwrap()
}

#[test]
fn unknown_keys_are_rejected() {
    let err = ExperimentConfig::from_toml("[model]\nepsilonn = 0.1\n").unwrap_err();
    assert!(matches!(err, Error::Toml(_)), "{err}");
    let err = ExperimentConfig::from_toml("[model]\n[solver]\nkmax = 8\nbogus = 1\n").unwrap_err();
    assert!(matches!(err, Error::Toml(_)), "{err}");
    let err = ExperimentConfig::from_toml("[model]\ncoupling = \"sideways\"\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn presets_resolve() {
    let cfg = ExperimentConfig::from_toml("[model]\n[frequency]\nomega = [\"golden\", \"silver\", 0.3]\n").unwrap();
    let w = cfg.frequencies().unwrap();
    assert_eq!(w[0], (5f64.sqrt() - 1.0) / 2.0);
    assert_eq!(w[1], 2f64.sqrt() - 1.0);
    assert_eq!(w[2], 0.3);
    assert!(ExperimentConfig::from_toml("[model]\n[frequency]\nomega = [\"bronze\"]\n").is_err());
}

#[test]
fn small_amplitude_rotation_matches_linearization() {
    // h * substeps = 0.5; the linearized Verlet step rotates by acos(1 - h²/2)
    let cfg = config("step = 0.0625\nsubsteps = 8\n");
    let model = cfg.model(0.0, vec![vec![0]]).unwrap();
    let pi = std::f64::consts::PI;
    let rho = rotation_number(&model, pi, [pi + 1e-4, 0.0], 20000);
    let h: f64 = 0.0625;
    let oracle = 8.0 * (1.0 - h * h / 2.0).acos() / (2.0 * pi);
    assert!((rho - oracle).abs() < 1e-6, "{rho} vs {oracle}");
    assert!((rho - 0.5 / (2.0 * pi)).abs() < 1e-3 * 0.5 / (2.0 * pi));
}

#[test]
fn unattainable_rotation_is_reported() {
    let cfg = ExperimentConfig::from_toml("[model]\n[solver]\nkmax = 8\n[frequency]\nomega = [0.9]\n").unwrap();
    let err = single_site_guess(&cfg, 0.9, false).unwrap_err();
    assert!(matches!(err, Error::UnattainableRotation { .. }), "{err}");
}

#[test]
fn state_files_round_trip_and_reject_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = single_site_config();
    let st = cmd_single_site(&cfg, dir.path()).unwrap();
    assert!(st.diagnostics.error_norm <= 1e-11);
    let path = dir.path().join("single_site.json");
    let (model, loaded) = load_state(&path).unwrap();
    assert_eq!(loaded.k, st.k);
    assert_eq!(loaded.omega, st.omega);
    let again = dir.path().join("again.json");
    save_state(&again, &model, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let history = std::fs::read_to_string(dir.path().join("single_site_history.csv")).unwrap();
    assert!(history.starts_with("iteration,errorNorm,"));
    assert_eq!(history.lines().count(), st.history.len() + 1);

    let text = std::fs::read_to_string(&path).unwrap();
    let bumped = dir.path().join("bumped.json");
    std::fs::write(&bumped, text.replace("\"schemaVersion\": 1", "\"schemaVersion\": 7")).unwrap();
    assert!(matches!(load_state(&bumped), Err(Error::VersionMismatch(7))));
    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_state(&cut), Err(Error::CorruptState(_))));
}

#[test]
fn seeded_runs_are_bit_identical() {
    let mut cfg = ExperimentConfig::from_toml("[model]\n[solver]\nkmax = 24\nguess_perturbation = 1e-3\n").unwrap();
    cfg.seed = 11;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_single_site(&cfg, a.path()).unwrap();
    cmd_single_site(&cfg, b.path()).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("single_site.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    cfg.seed = 12;
    let c = tempfile::tempdir().unwrap();
    cmd_single_site(&cfg, c.path()).unwrap();
    assert_ne!(read(&a), read(&c));
}

#[test]
fn diagnose_flags() {
    let cfg = single_site_config();
    let (model, st) = single_site(&cfg, 0).unwrap();
    let opts = SolverOptions { weight: Some((model.decay.clone(), 0.0)), ..SolverOptions::default() };
    let good = diagnose_state(&model, &st, &opts).unwrap();
    assert!(good.ok, "{:?}", good.flags);

    // a torus at the hyperbolic equilibrium is invariant but not an embedding
    let zero = KamState::new(TorusEmbedding::zeros(1, vec![4], vec![17], vec![vec![0]], vec![vec![0]]), st.omega.clone());
    let report = diagnose_state(&model, &zero, &opts).unwrap();
    assert_eq!(report.error_norm, 0.0);
    assert!(report.flags.iter().any(|f| f.contains("degenerate embedding")), "{:?}", report.flags);

    let mut tampered = st.clone();
    tampered.k.coeffs[0][3] += Complex::new(1e-3, 0.0);
    let report = diagnose_state(&model, &tampered, &opts).unwrap();
    assert!(report.error_norm > 1e-5, "{}", report.error_norm);
    assert!(!report.ok && report.flags.iter().any(|f| f.contains("invariance error")));
}

#[test]
fn continuation_at_zero_coupling_reproduces_single_site() {
    let cfg = single_site_config();
    let (_, st) = single_site(&cfg, 0).unwrap();
    let opts = cfg.solver_options().unwrap();
    let path = continue_in_eps(&cfg, &st, vec![vec![0]], &[0.0], &opts).unwrap();
    assert_eq!(path[0].1.k, st.k);
}

#[test]
fn continued_breather_stays_localized() {
    let cfg = ExperimentConfig::from_toml("[model]\nwindow_radius = 24\n[solver]\nkmax = 20\n").unwrap();
    let (_, single) = single_site(&cfg, 0).unwrap();
    let window = breathers::lattice_model::centered_window(24);
    let path = continue_in_eps(&cfg, &single, window, &[0.0, 0.01, 0.02], &cfg.solver_options().unwrap()).unwrap();
    let (_, first, p0) = &path[0];
    let (_, last, p2) = &path[2];
    assert!(p2.error_norm <= 1e-11, "{}", p2.error_norm);
    let dev = |st: &KamState<f64>, s: i64| {
        let i = st.k.site_index(&[s]).unwrap();
        st.k.majorant_norm(i, 0.0)
    };
    for s in [-10, 10] {
        assert!(dev(last, s) <= 1e-6 * dev(last, 0), "site {s}: {}", dev(last, s));
    }
    assert!(p2.decay_slope > cfg.decay.rate, "slope {}", p2.decay_slope);
    // the twist diagnostic may drift by at most 10 %
    let drift = (last.diagnostics.twist_inv - first.diagnostics.twist_inv).abs() / first.diagnostics.twist_inv;
    assert!(drift <= 0.10, "twist drift {drift} ({} -> {})", p0.twist_inv, p2.twist_inv);
}

#[test]
fn model_record_restores_the_model() {
    let cfg = config("epsilon = 0.01\ncoupling = \"decaying\"\ncoupling_range = 6\nwindow_radius = 2\n");
    let m = cfg.model(0.01, breathers::lattice_model::centered_window(2)).unwrap();
    let back: ModelConfig<f64> = ModelRecord::of(&m).model().unwrap();
    let x: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
    assert_eq!(m.map(&x), back.map(&x));
}

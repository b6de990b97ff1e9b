use std::path::PathBuf;

use super::*;
use crate::scenario::TimeProfile;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

const MINIMAL: &str = r#"
id = "tiny"
initial_conditions = [[1.0]]

[dynamics]
a = [[0.0]]
b = [[1.0]]

[cost]
p = [[1.0]]
q = [[1.0]]
r = [[1.0]]

[grid]
horizon = 1.0
steps = 20

[basis]
kind = "fourier"
pairs = 1
"#;

#[test]
fn example2_loads_as_scalar_linear_plant() {
    let s = load_scenario(&shipped("example2_scalar.scn")).unwrap();
    let (a, b) = s.linear_at(0.0).unwrap();
    assert_eq!((a[(0, 0)], b[(0, 0)]), (1.0, 1.0));
    assert_eq!(s.initial_conditions(), &[vec![2.0]]);
    assert_eq!(s.basis().n_functions(), 10);
}

#[test]
fn singular_control_weight_is_rejected() {
    let text = MINIMAL.replace("r = [[1.0]]", "r = [[0.0]]");
    let err = parse_scenario(&text, &[]).unwrap().build().unwrap_err();
    assert_eq!(err.kind(), "validation");
    assert!(err.to_string().contains("R not positive definite"), "{err}");
}

#[test]
fn time_varying_forms_resolve() {
    let f = load_scenario_file(&shipped("timevarying_noisy.scn"), &[]).unwrap();
    assert_eq!(
        f.dynamics.a_profile,
        TimeProfile::Ramp {
            offset: 1.0,
            time_scale: 12000.0
        }
    );
    assert_eq!(
        f.dynamics.b_profile,
        TimeProfile::Sinusoid {
            offset: 1.0,
            amplitude: 0.25,
            period: 3000.0
        }
    );
    let s = f.build().unwrap();
    assert_eq!(s.noise().std_dev, 0.5);
    let t = 750.0;
    let (a, b) = s.linear_at(t).unwrap();
    assert!((a[(0, 0)] - (1.0 + t / 12000.0)).abs() < 1e-15);
    assert!((b[(0, 0)] - 1.25).abs() < 1e-15);
    assert_eq!(s.slow_time(7, 1e-4), 7.0);
}

#[test]
fn syntax_errors_report_the_line() {
    let text = MINIMAL.replace("steps = 20", "steps = = 20");
    match parse_scenario(&text, &[]).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 16),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = MINIMAL.replace("steps = 20", "steps = 20\nstep_size = 0.1");
    match parse_scenario(&text, &[]).unwrap_err() {
        Error::Parse { line, message } => {
            assert_eq!(line, 17);
            assert!(message.contains("step_size"), "{message}");
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn ragged_matrix_is_rejected() {
    let text = MINIMAL.replace("a = [[0.0]]", "a = [[0.0], [1.0, 2.0]]");
    let err = parse_scenario(&text, &[]).unwrap().build().unwrap_err();
    assert!(
        err.to_string().contains("rows of different lengths"),
        "{err}"
    );
}

#[test]
fn overrides_edit_nested_keys() {
    let f = parse_scenario(
        MINIMAL,
        &[
            "basis.pairs=3".into(),
            "noise.std_dev = 0.25".into(),
            "es.k=0.5".into(),
            "id=renamed".into(),
        ],
    );
    // es is incomplete after one key, so schema validation must fail.
    assert_eq!(f.unwrap_err().kind(), "validation");
    let f = parse_scenario(
        MINIMAL,
        &[
            "basis.pairs=3".into(),
            "noise.std_dev = 0.25".into(),
            "id=renamed".into(),
        ],
    )
    .unwrap();
    assert_eq!(
        f.basis,
        BasisSection::Fourier {
            pairs: 3,
            extension: 0.0
        }
    );
    assert_eq!(f.noise.std_dev, 0.25);
    assert_eq!(f.id, "renamed");
    assert_eq!(
        parse_scenario(MINIMAL, &["basis".into()])
            .unwrap_err()
            .kind(),
        "invalid-config"
    );
    assert_eq!(
        parse_scenario(MINIMAL, &["id.x=1".into()])
            .unwrap_err()
            .kind(),
        "invalid-config"
    );
}

#[test]
fn terms_basis_builds_requested_functions() {
    let s = load_scenario(&shipped("example1_integrator.scn")).unwrap();
    assert_eq!(s.basis().n_functions(), 1);
    let v = s.basis().eval_functions(0.4).unwrap();
    assert!((v[0] - (std::f64::consts::TAU * 0.4 / 1.1).cos()).abs() < 1e-12);
}

#[test]
fn shipped_scenarios_round_trip() {
    let dir = shipped("");
    let listed = list_scenarios(&dir).unwrap();
    assert!(listed.len() >= 7);
    for (path, id) in listed {
        let f = load_scenario_file(&path, &[]).unwrap();
        assert_eq!(f.id, id);
        let s1 = f.build().unwrap();
        let text = f.to_toml().unwrap();
        let g = parse_scenario(&text, &[]).unwrap();
        assert_eq!(f, g, "{}", path.display());
        let s2 = g.build().unwrap();
        assert_eq!(s1.grid(), s2.grid());
        assert_eq!(s1.basis(), s2.basis());
        assert_eq!(s1.initial_conditions(), s2.initial_conditions());
        assert_eq!(s1.noise(), s2.noise());
        assert_eq!(s1.quadratic_cost(), s2.quadratic_cost());
        for t in [0.0, 1234.5] {
            assert_eq!(s1.linear_at(t), s2.linear_at(t));
        }
    }
}

fn spec(name: &str, mode: Mode, iters: Option<usize>, dir: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec {
        scenario_path: shipped(name),
        mode,
        n_iterations: iters,
        seed: None,
        out_dir: dir.to_path_buf(),
        overrides: Vec::new(),
    }
}

#[test]
fn oracle_mode_matches_closed_form_scalar_riccati() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&spec(
        "example2_scalar.scn",
        Mode::OracleOnly,
        None,
        dir.path(),
    ))
    .unwrap();
    // σ = T − τ: dS/dσ = −½(S − s₊)(S − s₋), S(σ = 0) = 2.
    let (sp, sm) = (2.0 + 2.0 * 2f64.sqrt(), 2.0 - 2.0 * 2f64.sqrt());
    let ratio = (2.0 - sp) / (2.0 - sm) * (-0.5 * (sp - sm)).exp();
    let s0 = (sp - ratio * sm) / (1.0 - ratio);
    let j_star = 0.5 * s0 * 4.0;
    assert!(
        (summary.j_star.unwrap() - j_star).abs() < 1e-5,
        "{:?} vs {j_star}",
        summary.j_star
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(json["mode"], "oracle-only");
    assert!(dir.path().join("riccati.csv").exists());
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "label,ic,tau,x_1,u_1");
}

#[test]
fn open_loop_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut sa = spec(
        "timevarying_noisy.scn",
        Mode::OpenLoopEs,
        Some(300),
        a.path(),
    );
    sa.seed = Some(9);
    let mut sb = sa.clone();
    sb.out_dir = b.path().to_path_buf();
    let ra = run_experiment(&sa).unwrap();
    run_experiment(&sb).unwrap();
    for f in ["iterations.csv", "trajectory.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(ra.seed, 9);
    assert_eq!(ra.iterations, 300);
    let text = std::fs::read_to_string(a.path().join("iterations.csv")).unwrap();
    assert!(text.starts_with("s,t,J,J_hat,c0,c1,"));
    assert_eq!(text.lines().count(), 302);
    sb.seed = Some(10);
    run_experiment(&sb).unwrap();
    assert_ne!(
        std::fs::read(a.path().join("iterations.csv")).unwrap(),
        std::fs::read(b.path().join("iterations.csv")).unwrap()
    );
}

#[test]
fn compare_mode_fills_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&spec(
        "example2_scalar.scn",
        Mode::Compare,
        Some(500),
        dir.path(),
    ))
    .unwrap();
    let (j, star, restricted) = (s.j_avg.unwrap(), s.j_star.unwrap(), s.j_restricted.unwrap());
    assert_eq!(s.relative_gap, Some((j - star) / star));
    assert_eq!(s.restricted_gap, Some((j - restricted) / restricted));
    assert!(restricted >= star);
    assert_eq!(s.es_config.as_ref().unwrap().n_coeffs(), 10);
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    for label in ["first", "last", "oracle"] {
        assert!(traj.lines().any(|l| l.starts_with(label)), "{label}");
    }
}

#[test]
fn feedback_mode_writes_gains_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut sp = spec("feedback_2d.scn", Mode::FeedbackEs, Some(200), dir.path());
    sp.overrides = vec!["grid.steps=100".into(), "es.snapshot_stride=1".into()];
    let s = run_experiment(&sp).unwrap();
    assert_eq!(s.validation.len(), 1);
    assert_eq!(s.validation[0].x0, vec![-2.0, 3.0]);
    assert!(s.j_star.is_some());
    let gains = std::fs::read_to_string(dir.path().join("gains.csv")).unwrap();
    assert_eq!(
        gains.lines().next().unwrap(),
        "tau,K_1_1,K_1_2,K_2_1,K_2_2,Kopt_1_1,Kopt_1_2,Kopt_2_1,Kopt_2_2"
    );
    assert_eq!(gains.lines().count(), 102);
}

#[test]
fn es_modes_need_an_es_section() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.scn");
    std::fs::write(&path, MINIMAL).unwrap();
    let mut sp = spec("unused", Mode::OpenLoopEs, Some(10), dir.path());
    sp.scenario_path = path;
    assert_eq!(run_experiment(&sp).unwrap_err().kind(), "invalid-config");
    sp.mode = Mode::OracleOnly;
    assert!(run_experiment(&sp).is_ok());
}

#[test]
fn default_out_dir_uses_scenario_id() {
    let d = default_out_dir("abc");
    assert!(d.ends_with("abc"));
}

use gni_core::harness::{convergence, exit_code, run, ExperimentConfig, IntegratorSpec, OutputFormat};
use serde_json::Value;

fn config(problem: &str, integrator: &str, h: f64, n: usize) -> ExperimentConfig {
    ExperimentConfig { problem: problem.into(), integrator: integrator.into(), h, n_steps: n, ..Default::default() }
}

#[test]
fn midpoint_conserves_harmonic_energy() {
    let mut c = config("harmonic", "implicit-midpoint", 0.1, 1000);
    c.observables = vec!["energy".into()];
    let r = run(&c).unwrap();
    assert!(r.summary.max_drift["energy"] <= 1e-11, "{}", r.summary.max_drift["energy"]);
}

#[test]
fn kepler_drift_slope_symplectic_vs_rk4() {
    let mut sv = config("kepler", "stormer-verlet", 0.01, 100_000);
    sv.problem_params.insert("e".into(), Value::from(0.6));
    sv.observables = vec!["energy".into()];
    sv.every = 10;
    let mut rk = sv.clone();
    rk.integrator = "rk4".into();
    let s_sv = run(&sv).unwrap().summary.drift_slope["energy"];
    let s_rk = run(&rk).unwrap().summary.drift_slope["energy"];
    assert!(s_rk > 0.0);
    assert!(s_sv.abs() < 1e-10 && s_sv.abs() < 0.25 * s_rk, "sv {s_sv:e} rk4 {s_rk:e}");
}

#[test]
fn summary_is_recomputable_from_table() {
    let mut c = config("pendulum", "rk4", 0.2, 300);
    c.diagnostics = vec!["time-symmetry-defect".into()];
    c.every = 7;
    let r = run(&c).unwrap();
    assert_eq!(*r.steps.last().unwrap(), 300);
    for name in r.columns.iter().take(r.observables) {
        let col = r.column(name).unwrap();
        let max = col.iter().map(|v| (v - col[0]).abs()).fold(0.0, f64::max);
        assert_eq!(max, r.summary.max_drift[name], "{name}");
    }
    assert!(r.column("time-symmetry-defect").unwrap().iter().all(|d| *d > 0.0));
}

#[test]
fn csv_is_deterministic_and_well_formed() {
    let mut c = config("random-quadratic", "kahan", 0.01, 50);
    c.seed = 7;
    let a = run(&c).unwrap().to_csv();
    let b = run(&c).unwrap().to_csv();
    assert_eq!(a, b);
    assert!(a.starts_with("step,t,state-norm\n"));
    assert!(!a.contains('\r'));
    let first = a.lines().nth(1).unwrap();
    let t = first.split(',').nth(1).unwrap();
    assert_eq!(t, "0.0000000000000000e0");
    c.seed = 8;
    assert_ne!(a, run(&c).unwrap().to_csv());
}

#[test]
fn json_mirrors_csv() {
    let c = config("harmonic", "strang", 0.1, 5);
    let r = run(&c).unwrap();
    let doc: Value = serde_json::from_str(&r.render(OutputFormat::Json)).unwrap();
    let cols = doc["columns"].as_array().unwrap();
    assert_eq!(cols[0], "step");
    assert_eq!(cols.len(), 2 + r.columns.len());
    assert_eq!(doc["rows"].as_array().unwrap().len(), 6);
    assert!(doc["summary"]["max_drift"]["energy"].is_number());
}

#[test]
fn convergence_orders() {
    let c = config("pendulum", "strang", 0.1, 0);
    let h = [0.1, 0.05, 0.025, 0.0125];
    let specs = [
        IntegratorSpec::new("strang"),
        IntegratorSpec::new("yoshida"),
    ];
    let t = convergence(&c, &specs, &h, 1.0).unwrap();
    let strang = t.order("strang").unwrap();
    let yoshida = t.order("yoshida").unwrap();
    // Sixth order reaches round-off quickly; use coarser steps.
    let coarse = [0.5, 0.25, 0.125, 0.0625];
    let g = convergence(&c, &[IntegratorSpec::new("gauss-legendre").with("s", 3)], &coarse, 2.0).unwrap();
    let gl3 = g.order("gauss-legendre:s=3").unwrap();
    assert!((strang - 2.0).abs() <= 0.2, "{strang}");
    assert!((yoshida - 4.0).abs() <= 0.3, "{yoshida}");
    assert!((gl3 - 6.0).abs() <= 0.5, "{gl3}");
    let csv = t.to_csv();
    assert!(csv.starts_with("integrator,h,error,local_order,observed_order\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * h.len());
}

#[test]
fn error_exit_codes() {
    assert_eq!(exit_code(&run(&config("harmonic", "warp-drive", 0.1, 1)).unwrap_err()), 2);
    assert_eq!(exit_code(&run(&config("nowhere", "rk4", 0.1, 1)).unwrap_err()), 2);
    assert_eq!(exit_code(&run(&config("harmonic", "rk4", f64::NAN, 1)).unwrap_err()), 2);
    // Explicit Euler on a stiff chain blows up.
    let mut c = config("fpu", "explicit-euler", 0.5, 5000);
    c.problem_params.insert("omega".into(), Value::from(1000.0));
    let e = run(&c).unwrap_err();
    assert_eq!(exit_code(&e), 3);
    assert!(e.step().is_some(), "{e}");
}

#[test]
fn every_integrator_runs_on_a_compatible_problem() {
    let pairs = [
        ("explicit-euler", "harmonic"),
        ("kutta3", "harmonic"),
        ("lie-trotter", "quartic"),
        ("avf", "pendulum"),
        ("simpson-rk", "quartic"),
        ("discrete-gradient", "pendulum"),
        ("two-integral", "rigid-body"),
        ("kahan", "nahm-icosahedral"),
        ("vp-splitting", "volume-example"),
        ("triangular-vp", "volume-example"),
        ("rkmk3", "rotating-frame"),
        ("rkmk3", "isospectral"),
        ("magnus4", "mathieu"),
        ("gautschi", "fpu"),
        ("trig-voc", "fpu"),
        ("stormer-verlet", "nbody"),
    ];
    for (i, p) in pairs {
        let r = run(&config(p, i, 0.01, 20)).unwrap_or_else(|e| panic!("{i} on {p}: {e}"));
        assert_eq!(r.rows.len(), 21);
    }
}

#[test]
fn zassenhaus_through_harness_keeps_norm() {
    let mut c = config("schrodinger", "zassenhaus", 1.0 / 16.0, 8);
    c.problem_params.insert("n".into(), Value::from(128));
    let r = run(&c).unwrap();
    assert!(r.summary.max_drift["norm"] <= 1e-10, "{}", r.summary.max_drift["norm"]);
}

#[test]
fn config_file_roundtrip() {
    let text = r#"{"problem":"kepler","problem_params":{"e":0.3},"integrator":"gauss-legendre",
        "integrator_params":{"s":2},"h":0.05,"n_steps":10,"format":"json"}"#;
    let c = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(c.format, OutputFormat::Json);
    run(&c).unwrap();
    assert!(ExperimentConfig::from_json(r#"{"colour":"red"}"#).is_err());
}

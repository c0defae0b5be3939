use std::process::{Command, Output};

fn gni(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gni")).args(args).output().expect("spawn gni")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const KEPLER: &[&str] = &[
    "run", "--problem", "kepler", "--param", "e=0.6", "--integrator", "gauss-legendre", "--iparam", "s=2",
    "--h", "0.01", "--steps", "200", "--diagnostics", "symplecticity-defect", "--every", "20",
];

#[test]
fn repeated_runs_are_byte_identical() {
    let a = gni(KEPLER);
    let b = gni(KEPLER);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("step,t,energy,angular-momentum,state-norm,symplecticity-defect\n"));
    assert_eq!(text.lines().count(), 1 + 11);
    assert!(!text.contains('\r'));

    let seeded = ["run", "--problem", "random-quadratic", "--integrator", "kahan", "--seed", "3", "--steps", "40"];
    assert_eq!(gni(&seeded).stdout, gni(&seeded).stdout);
}

#[test]
fn out_file_matches_stdout_and_plot_data_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.csv");
    let plots = dir.path().join("plots");
    let mut args = KEPLER.to_vec();
    args.extend(["--out", out.to_str().unwrap(), "--emit-plot-data", plots.to_str().unwrap()]);
    let o = gni(&args);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    assert_eq!(std::fs::read(&out).unwrap(), gni(KEPLER).stdout);
    let energy = std::fs::read_to_string(plots.join("energy.dat")).unwrap();
    assert_eq!(energy.lines().count(), 11);
    assert_eq!(energy.lines().next().unwrap().split(' ').count(), 2);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"problem":"harmonic","integrator":"implicit-midpoint","h":0.1,"n_steps":1000,"format":"json"}"#,
    )
    .unwrap();
    let o = gni(&["run", "--config", cfg.to_str().unwrap(), "--observables", "energy"]);
    assert_eq!(code(&o), 0);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(doc["summary"]["max_drift"]["energy"].as_f64().unwrap() <= 1e-11);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 1001);

    let o = gni(&["run", "--config", cfg.to_str().unwrap(), "--steps", "3", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 5);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&gni(&["list", "problems"])), 0);
    assert_eq!(code(&gni(&["run", "--integrator", "warp-drive"])), 2);
    assert_eq!(code(&gni(&["run", "--problem", "nowhere"])), 2);
    assert_eq!(code(&gni(&["run", "--param", "nonsense"])), 2);
    assert_eq!(code(&gni(&["run", "--format", "xml"])), 2);
    assert_eq!(code(&gni(&["list", "widgets"])), 2);
    assert_eq!(code(&gni(&["frobnicate"])), 2);
    assert_eq!(code(&gni(&["run", "--config", "/nonexistent/c.json"])), 1);

    let o = gni(&[
        "run", "--problem", "fpu", "--param", "omega=1000", "--integrator", "explicit-euler", "--h", "0.5",
        "--steps", "5000",
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn list_registries() {
    let text = |r: &str| String::from_utf8(gni(&["list", r]).stdout).unwrap();
    let has = |t: &str, id: &str| t.lines().any(|l| l.split_whitespace().next() == Some(id));
    let p = text("problems");
    for id in ["kepler", "fpu", "nahm-octahedral"] {
        assert!(has(&p, id), "{id}");
    }
    let i = text("integrators");
    for id in ["kahan", "avf", "rkmk3", "zassenhaus"] {
        assert!(has(&i, id), "{id}");
    }
    let d = text("diagnostics");
    for id in ["symplecticity-defect", "volume-defect"] {
        assert!(has(&d, id), "{id}");
    }
}

#[test]
fn convergence_table() {
    let o = gni(&[
        "convergence", "--problem", "pendulum", "--integrators", "strang,gauss-legendre:s=1",
        "--h-list", "0.2,0.1,0.05,0.025", "--t-end", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let orders: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(orders.len(), 8);
    assert!(orders.iter().all(|o| (o - 2.0).abs() <= 0.2), "{orders:?}");
    let two = gni(&["convergence", "--integrators", "strang", "--h-list", "0.1,0.05", "--t-end", "1"]);
    assert_eq!(code(&two), 2);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stoch-torus");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn calibrate_two_mode_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        r#"scenario = "calibrate"
[spectrum]
nu = 1.0
radius = 1.0
modes = [{ k = [1, 0], lambda = 1.0 }, { k = [0, 1], lambda = 1.0 }]
[flow]
n_paths = 2000
[params]
t = 0.05
"#,
    );
    let out = tmp.path().join("out");
    let o = run(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("variance rate"));
    let report = std::fs::read_to_string(out.join("calibrate_seed0_report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["within_3se"], serde_json::Value::Bool(true));
    // config echo carries resolved defaults
    let echo = std::fs::read_to_string(out.join("calibrate_seed0_config.toml")).unwrap();
    assert!(echo.contains("grid_n"));
}

#[test]
fn distance_audit_translation_has_no_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("distance_audit.toml");
    let o = run(&["run", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("violations = 0"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(tmp.path().join("distance-audit_seed1_distance.csv")).unwrap();
    assert!(csv.starts_with("t,rho,rho_ext,sigma_sq,b,"));
}

#[test]
fn zero_wave_vector_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        r#"scenario = "simulate"
[spectrum]
nu = 1.0
modes = [{ k = [0, 0], lambda = 1.0 }]
"#,
    );
    let o = run(&["run", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wave vector must be nonzero"), "{}", stderr(&o));
    let o = run(&["describe", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_field_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        r#"scenario = "simulate"
[spectrum]
nu = 1.0
radius = 1.0
shell = { amplitude = 1.0 }
[flow]
dt = -0.1
"#,
    );
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flow.dt"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_an_io_error() {
    let o = run(&["run", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn describe_two_mode_and_eight_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let two = write(
        tmp.path(),
        "two.toml",
        r#"scenario = "simulate"
[spectrum]
nu = 1.0
radius = 1.0
modes = [{ k = [1, 0], lambda = 1.0 }, { k = [0, 1], lambda = 1.0 }]
"#,
    );
    let o = run(&["describe", two.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("0.0320"), "{text}");
    assert!(text.contains("c1"), "{text}");

    let o = run(&["describe", configs().join("stability_audit.toml").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0.25"), "{}", stdout(&o));
}

#[test]
fn reruns_are_byte_identical_and_seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("simulate.toml");
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, seed) in dirs.iter().zip(["0", "0", "5"]) {
        let o = run(&["run", cfg.to_str().unwrap(), "--seed", seed, "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["snapshots.csv", "distance.csv", "ensemble.bin", "report.json"] {
        let a = std::fs::read(dirs[0].join(format!("simulate_seed0_{name}"))).unwrap();
        let b = std::fs::read(dirs[1].join(format!("simulate_seed0_{name}"))).unwrap();
        assert_eq!(a, b, "{name} differs across reruns");
    }
    // the echo records the output directory, which differs by construction
    let echo = |d: &Path| {
        std::fs::read_to_string(d.join("simulate_seed0_config.toml"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("dir = "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(echo(&dirs[0]), echo(&dirs[1]));
    let a = std::fs::read(dirs[0].join("simulate_seed0_distance.csv")).unwrap();
    let c = std::fs::read(dirs[2].join("simulate_seed5_distance.csv")).unwrap();
    assert_ne!(a, c);
}

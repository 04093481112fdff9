use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
experiment_id = "ou"
criterion = "discounted"

[model]
name = "linear_ou"

[sim]
h = 0.1
dt = 0.01
horizon = 2.0
seed = 3

[quantizer]
side = 2.0
bins_per_axis = 6

[actions]
n_u = 3

[learning]
steps = 5000

[evaluation]
n_replicas = 32
"#;

fn qdiff(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdiff"))
        .env("QDIFF_OUT", out)
        .args(args)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn run_then_evaluate_stored_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ou.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let cfg_s = cfg.to_str().unwrap();

    let o = qdiff(&out, &["run", "-c", cfg_s, "--threads", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let results = fs::read(out.join("ou/results.csv")).unwrap();
    assert!(out.join("ou/manifest.json").exists());

    let table = out.join("ou/qtable.bin");
    let o = qdiff(&out, &["qtable", "inspect", table.to_str().unwrap()]);
    assert!(o.status.success() && text(&o).contains("QDQT"), "{}", text(&o));
    let o = qdiff(&out, &["qtable", "load", table.to_str().unwrap(), "--config", cfg_s]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1 + 7);

    let o = qdiff(&out, &["evaluate", "-c", cfg_s, "--qtable", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(out.join("ou/results.csv")).unwrap(), results);

    // a table from a different discretization is refused
    let other = dir.path().join("other.toml");
    fs::write(&other, CONFIG.replace("bins_per_axis = 6", "bins_per_axis = 5")).unwrap();
    let o = qdiff(&out, &["evaluate", "-c", other.to_str().unwrap(), "--qtable", table.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).contains("bins per axis"), "{}", text(&o));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ou.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        let o = qdiff(&out, &["learn", "-c", cfg.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success(), "{}", text(&o));
        fs::read(out.join("ou/qtable.bin")).unwrap()
    };
    assert_eq!(read("5"), read("5"));
    assert_ne!(read("5"), read("6"));
}

#[test]
fn failed_stage_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, CONFIG.replace("name = \"linear_ou\"", "name = \"linear_ou\"\na = -50.0")).unwrap();
    let o = qdiff(&dir.path().join("out"), &["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("stage learn failed"));
}

#[test]
fn bounds_table_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = qdiff(dir.path(), &["bounds", "--m", "16,256"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].starts_with("# qdiff-csv v1"));
    assert_eq!(lines[1], "M,N,h,beta,general,collapsed,exponent");
    assert_eq!(lines.len(), 4);

    let o = qdiff(dir.path(), &["reproduce", "fig9"]);
    assert!(!o.status.success());
    let missing = qdiff(dir.path(), &["run", "-c", "/nonexistent.toml"]);
    assert_eq!(missing.status.code(), Some(1));
}

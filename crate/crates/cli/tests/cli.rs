use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn duallink(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duallink"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DUALLINK_OUT")
        .output()
        .expect("binary runs")
}

fn run_dir(o: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap_or_else(|| panic!("no run directory in {text}"));
    PathBuf::from(line)
}

const SMALL: &[&str] = &["--replicas", "20", "--override", "grid.steps=50"];

#[test]
fn simulate_is_deterministic_and_never_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [&["simulate", "--seed", "9"], SMALL].concat();
    let a = duallink(tmp.path(), &args);
    let b = duallink(tmp.path(), &args);
    assert!(a.status.success() && b.status.success());
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    assert!(da.ends_with("simulate-0001") && db.ends_with("simulate-0002"));
    let csv = fs::read(da.join("paths.csv")).unwrap();
    assert_eq!(csv, fs::read(db.join("paths.csv")).unwrap());
    assert!(String::from_utf8_lossy(&csv).starts_with("replica,t,x_1\n"));
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 1 + 20 * 51);
    let cfg = fs::read_to_string(da.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 9") && cfg.contains("steps = 50"));
}

#[test]
fn different_seeds_give_different_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_dir(&duallink(tmp.path(), &[&["simulate", "--seed", "1"], SMALL].concat()));
    let b = run_dir(&duallink(tmp.path(), &[&["simulate", "--seed", "2"], SMALL].concat()));
    assert_ne!(fs::read(a.join("paths.csv")).unwrap(), fs::read(b.join("paths.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = duallink(tmp.path(), &["simulate", "--override", "grid.stepz=5"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_grid = duallink(tmp.path(), &["simulate", "--override", "grid.steps=0"]);
    assert_eq!(bad_grid.status.code(), Some(2));
    let missing = duallink(tmp.path(), &["simulate", "--config", "/nonexistent/duallink.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    let cfg = tmp.path().join("broken.toml");
    fs::write(&cfg, "seed = \"abc\"\n").unwrap();
    assert_eq!(duallink(tmp.path(), &["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert!(!tmp.path().join("simulate-0001").exists());
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "seed = 4\n[model]\nfamily = \"constant\"\nmu = [0.0, 1.0]\n[simulate]\nx0 = [0.0, 0.0]\n[grid]\nsteps = 10\n").unwrap();
    let o = duallink(tmp.path(), &["simulate", "--config", cfg.to_str().unwrap(), "--replicas", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run_dir(&o).join("paths.csv")).unwrap();
    assert!(csv.starts_with("replica,t,x_1,x_2\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 11);
}

#[test]
fn couple_then_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let c = duallink(tmp.path(), &[&["couple"], SMALL].concat());
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let src = run_dir(&c);
    assert_eq!(fs::read_dir(src.join("trajectories")).unwrap().count(), 20);

    let p = duallink(tmp.path(), &["plot", src.to_str().unwrap()]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let plot = run_dir(&p);
    let tidy = fs::read_to_string(plot.join("trajectories_replica_00003.tidy.csv")).unwrap();
    assert!(tidy.starts_with("t,z_1,y_1,x_1,sigma\n"));
    assert_eq!(tidy.lines().count(), 52);
    let flat = fs::read_to_string(plot.join("trajectories_replica_00003.csv")).unwrap();
    assert!(flat.starts_with("t,z.0,y.0,x.0,sigma,gamma"));
    for (a, b) in tidy.lines().skip(1).zip(flat.lines().skip(1)) {
        assert!(b.starts_with(a), "{a} vs {b}");
    }
}

#[test]
fn plot_of_an_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("nothing");
    fs::create_dir(&empty).unwrap();
    assert_eq!(duallink(tmp.path(), &["plot", empty.to_str().unwrap()]).status.code(), Some(5));
}

#[test]
fn dual_and_pitman_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = duallink(tmp.path(), &[&["dual"], SMALL].concat());
    assert!(d.status.success());
    let jsonl = fs::read_to_string(run_dir(&d).join("dual.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 20 * 51);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["replica"], 0);
    assert_eq!(first["t"], 0.0);

    let p = duallink(tmp.path(), &[&["pitman"], SMALL].concat());
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stdout));
    let dir = run_dir(&p);
    assert!(dir.join("pitman.csv").exists());
    assert_eq!(fs::read_to_string(dir.join("reports.jsonl")).unwrap().lines().count(), 2);

    let quadratic = duallink(tmp.path(), &["pitman", "--override", "model.family=quadratic", "--override", "model.k=1.0"]);
    assert_eq!(quadratic.status.code(), Some(2));
}

#[test]
fn posterior_on_small_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = duallink(
        tmp.path(),
        &["posterior", "--override", "posterior.sampler.target_accepts=200", "--override", "posterior.oracle_samples=2000"],
    );
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["accepts"], 200);
    let samples = fs::read_to_string(dir.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 201);
    let reports = fs::read_to_string(dir.join("reports.jsonl")).unwrap();
    assert!(reports.contains("posterior/offsets-uniform"));
}

#[test]
fn verify_with_small_suites() {
    let tmp = tempfile::tempdir().unwrap();
    let o = duallink(
        tmp.path(),
        &[
            "verify",
            "--seed",
            "5",
            "--override",
            "verify.suites=[\"duality\", \"flow_wiener\"]",
            "--override",
            "verify.duality.paths=400",
            "--override",
            "verify.duality.steps=50",
            "--override",
            "verify.duality.include_slab=false",
            "--override",
            "verify.flow_wiener.replicas=200",
            "--override",
            "verify.flow_wiener.steps=50",
            "--override",
            "verify.flow_wiener.include_bilinear=false",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let dir = run_dir(&o);
    let cfg = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(cfg.contains("[verify.flow_wiener]") && cfg.contains("seed = 6"));
    let reports = fs::read_to_string(dir.join("reports.jsonl")).unwrap();
    assert!(reports.contains("duality/interval/dual") && reports.contains("flow-wiener/1d"));
    assert!(!reports.contains("reversal/"));
    assert!(fs::read_to_string(dir.join("summary.txt")).unwrap().contains("[PASS]"));
}

#[test]
fn config_subcommand_prints_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = duallink(tmp.path(), &["config", "--seed", "77"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 77"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

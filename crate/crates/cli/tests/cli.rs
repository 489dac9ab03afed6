use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_nlsq");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn nlsq(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("NLSQ_SEED").env_remove("NLSQ_WORKERS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn run_sub(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    nlsq(&args, &[])
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    v.sort();
    v
}

fn write_config(dir: &TempDir, body: &str) -> PathBuf {
    let p = dir.path().join("config.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn every_subcommand_reruns_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for sub in ["spectrum", "sample-field", "charfun", "gibbs", "form-eval", "dynamics", "check-conditions", "particles", "local-limit"] {
        let cfg = configs().join(format!("{sub}.json"));
        let a = tmp.path().join(format!("{sub}-a"));
        let b = tmp.path().join(format!("{sub}-b"));
        let ra = run_sub(sub, &cfg, &a, &["--seed", "17", "--workers", "1"]);
        assert!(ra.status.success(), "{sub}: {}", String::from_utf8_lossy(&ra.stderr));
        let rb = run_sub(sub, &cfg, &b, &["--seed", "17", "--workers", "3"]);
        assert!(rb.status.success(), "{sub}: {}", String::from_utf8_lossy(&rb.stderr));
        let fa = files(&a);
        assert!(fa.len() >= 2, "{sub} wrote {fa:?}");
        assert_eq!(fa, files(&b), "{sub} differs between reruns");
        for (name, content) in &fa {
            let text = String::from_utf8_lossy(content);
            if name.ends_with(".csv") {
                assert!(text.starts_with("# nlsq ") && text.lines().next().unwrap().contains("seed=17"), "{sub}/{name}");
            } else {
                let v: serde_json::Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["manifest"]["seed"], 17, "{sub}/{name}");
                assert_eq!(v["manifest"]["config_sha256"].as_str().unwrap().len(), 64);
            }
        }
    }
}

#[test]
fn spectrum_has_k_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, r#"{ "base": { "d": 1, "L": 6.0, "n": 32, "K": 10 } }"#);
    let out = tmp.path().join("out");
    assert!(run_sub("spectrum", &cfg, &out, &[]).status.success());
    let csv = fs::read_to_string(out.join("spectrum.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("1,1.0"));
}

#[test]
fn seed_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("spectrum.json");
    let out = tmp.path().join("out");
    let o = nlsq(&["spectrum", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[("NLSQ_SEED", "99")]);
    assert!(o.status.success());
    assert!(fs::read_to_string(out.join("spectrum.csv")).unwrap().contains("seed=99"));
}

#[test]
fn malformed_json_leaves_no_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, r#"{ "base": { "d": 1, "L": 6.0, "#);
    let out = tmp.path().join("out");
    let o = run_sub("spectrum", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(files(&out).is_empty());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn invalid_configs_exit_two() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    for body in [
        r#"{ "base": { "d": 3, "L": 6.0, "n": 32, "K": 10 } }"#,
        r#"{ "base": { "d": 1, "L": 6.0, "n": 32, "K": 10 }, "extra": 1 }"#,
        r#"{ "base": { "d": 1, "L": -1.0, "n": 32, "K": 10 } }"#,
    ] {
        let cfg = write_config(&tmp, body);
        assert_eq!(run_sub("spectrum", &cfg, &out, &[]).status.code(), Some(2), "{body}");
    }
    let cfg = write_config(&tmp, r#"{ "kind": "exp", "a0": 4.0, "base": { "d": 1, "L": 6.0, "n": 32, "K": 8 }, "samples": 10 }"#);
    assert_eq!(run_sub("gibbs", &cfg, &out, &[]).status.code(), Some(2));
    assert_eq!(nlsq(&["bogus", "--config", "x.json"], &[]).status.code(), Some(2));
    assert!(files(&out).is_empty());
}

#[test]
fn resource_and_numeric_failures() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let big = write_config(&tmp, r#"{ "base": { "d": 2, "L": 6.0, "n": 128, "K": 10 } }"#);
    assert_eq!(run_sub("spectrum", &big, &out, &[]).status.code(), Some(4));
    let divergent = write_config(
        &tmp,
        r#"{ "d": 1, "N": 1, "window": 2.0, "L": 4.0, "grid_n": 32, "K": 8, "points": [{ "y": [0.0], "m": 1 }], "gamma": 0.5 }"#,
    );
    assert_eq!(run_sub("particles", &divergent, &out, &[]).status.code(), Some(3));
    assert!(files(&out).is_empty());
}

#[test]
fn zero_sweeps_record_only_the_start() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(&tmp, r#"{ "base": { "d": 1, "L": 6.0, "n": 32, "K": 4 }, "alpha": 0.5, "steps": 0, "x0": [0.5, -1.0, 0.25, 2.0] }"#);
    let out = tmp.path().join("out");
    assert!(run_sub("dynamics", &cfg, &out, &[]).status.success());
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1], "0,5.00000000000000000e-1,-1.00000000000000000e0,2.50000000000000000e-1,2.00000000000000000e0");
    assert!(csv.contains("# chain: {\"alpha\":0.5"));
}

#[test]
fn failed_check_exit_code_and_exploratory_flag() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        r#"{ "base": { "d": 1, "L": 6.0, "n": 32, "K": 4 }, "alpha": 1.0, "sweeps": 100, "cap": 10.0,
             "force_accept": true, "chains": 1000, "observables": [{ "square": 0 }] }"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(run_sub("dynamics", &cfg, &out, &[]).status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("invariance.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["pass"], false);
    assert!(run_sub("dynamics", &cfg, &out, &["--exploratory"]).status.success());
}

#[test]
fn check_conditions_identity_row() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert!(run_sub("check-conditions", &configs().join("check-conditions.json"), &out, &[]).status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("regularity.json")).unwrap()).unwrap();
    let id = &v["report"]["regularity"]["identity"];
    let (a, b) = (id["sum_beta_gamma"].as_f64().unwrap(), id["sum_lambda_squared"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-12 * b);
}

#[test]
fn local_limit_rows_decrease() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        &tmp,
        r#"{ "alphas": [1.5, 1.9, 1.99], "windows": ["local"],
             "f": { "center": 0.0, "width": 1.0, "amplitude": 1.0 }, "g": { "center": 0.3, "width": 0.8, "amplitude": 1.0 } }"#,
    );
    let out = tmp.path().join("out");
    assert!(run_sub("local-limit", &cfg, &out, &[]).status.success());
    let csv = fs::read_to_string(out.join("local_limit.csv")).unwrap();
    let errs: Vec<f64> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(errs.len(), 3);
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn manifest_records_wall_time_only_on_request() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("spectrum.json");
    let out = tmp.path().join("out");
    assert!(run_sub("spectrum", &cfg, &out, &[]).status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(v["wall_seconds"].is_null());
    assert_eq!(v["config"]["base"]["K"], 32);
    assert!(run_sub("spectrum", &cfg, &out, &["--timing"]).status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(v["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn selftest_is_quick() {
    let start = Instant::now();
    let o = nlsq(&["--selftest"], &[]);
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(secs < 60.0, "selftest took {secs} s");
}

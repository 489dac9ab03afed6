//! Command-line half of criterion 11: byte-identical reruns of every
//! subcommand under a fixed seed and a quick self-test.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_nlsq");
const SUBCOMMANDS: [&str; 9] =
    ["spectrum", "sample-field", "charfun", "gibbs", "form-eval", "dynamics", "check-conditions", "particles", "local-limit"];

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap()).map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn run(sub: &str, out: &Path, workers: &str) -> bool {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{sub}.json"));
    Command::new(BIN)
        .args([sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "2024", "--workers", workers])
        .env_remove("NLSQ_SEED")
        .env_remove("NLSQ_WORKERS")
        .status()
        .is_ok_and(|s| s.success())
}

fn main() -> ExitCode {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    let mut differing = Vec::new();
    for sub in SUBCOMMANDS {
        let (a, b) = (tmp.path().join(format!("{sub}-a")), tmp.path().join(format!("{sub}-b")));
        let ok = run(sub, &a, "1") && run(sub, &b, "4");
        if !ok || snapshot(&a) != snapshot(&b) || snapshot(&a).is_empty() {
            differing.push(sub);
        }
    }
    let rerun_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let selftest = Command::new(BIN).arg("--selftest").output().expect("binary runs");
    let selftest_secs = start.elapsed().as_secs_f64();
    let selftest_ok = selftest.status.success() && selftest_secs < 60.0;
    let pass = differing.is_empty() && selftest_ok;
    println!(
        "criterion 11 (cli): {} reruns identical for {}/9 subcommands ({rerun_secs:.1} s); selftest {} in {selftest_secs:.1} s",
        if pass { "PASS" } else { "FAIL" },
        9 - differing.len(),
        if selftest.status.success() { "passed" } else { "failed" },
    );
    if !differing.is_empty() {
        println!("differing: {differing:?}");
    }
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Quick end-to-end checks of every subcommand on tiny inputs.

use serde_json::{json, Value};

use nlsq_core::particles::{geometric_tail, ruelle_tail_bound, u_n_membership, Configuration, Particle, RuelleParams};

use crate::commands::run;
use crate::output::{Manifest, Outputs};

fn exec(sub: &str, cfg: Value, seed: u64) -> Result<Outputs, String> {
    let raw = cfg.to_string();
    run(sub, &cfg, seed, &Manifest::new(sub, seed, raw.as_bytes())).map_err(|e| e.to_string())
}

fn data_rows(csv: &str) -> usize {
    csv.lines().filter(|l| !l.starts_with('#')).count().saturating_sub(1)
}

fn base() -> Value {
    json!({ "d": 1, "L": 6.0, "n": 32, "K": 8, "m0": 1.0 })
}

type Check = (&'static str, fn() -> Result<bool, String>);

const CHECKS: [Check; 12] = [
    ("spectrum: K rows", || {
        let o = exec("spectrum", json!({ "base": base() }), 1)?;
        Ok(data_rows(o.get("spectrum.csv").unwrap_or("")) == 8)
    }),
    ("spectrum: rerun identical", || {
        let a = exec("spectrum", json!({ "base": base() }), 3)?;
        let b = exec("spectrum", json!({ "base": base() }), 3)?;
        Ok(a.get("spectrum.csv") == b.get("spectrum.csv") && a.get("hs_report.json") == b.get("hs_report.json"))
    }),
    ("malformed config rejected", || Ok(exec("spectrum", json!({ "base": { "d": 1 } }), 1).is_err())),
    ("sample-field: covariance", || {
        let o = exec("sample-field", json!({ "base": base(), "samples": 2000 }), 2)?;
        let v: Value = serde_json::from_str(o.get("sample_summary.json").unwrap_or("{}")).map_err(|e| e.to_string())?;
        Ok(v["report"]["weighted_norms_finite"] == json!(true))
    }),
    ("charfun: exact vs empirical", || {
        let o = exec("charfun", json!({ "base": base(), "samples": 4000, "random_functions": 4 }), 4)?;
        Ok(o.pass == Some(true))
    }),
    ("gibbs: exponential bound", || {
        let o = exec("gibbs", json!({ "kind": "exp", "a0": 1.0, "base": base(), "samples": 2000, "r": [0.5] }), 5)?;
        Ok(o.pass == Some(true))
    }),
    ("form-eval: constant gives zero", || {
        let cfg = json!({ "base": base(), "alpha": 1.0, "samples": 50,
            "u": { "kind": "constant", "value": 2.0 }, "v": { "kind": "coordinate", "index": 0 } });
        let o = exec("form-eval", cfg, 6)?;
        let v: Value = serde_json::from_str(o.get("form.json").unwrap_or("{}")).map_err(|e| e.to_string())?;
        Ok(v["report"]["form"]["value"] == json!(0.0))
    }),
    ("dynamics: zero sweeps keep x0", || {
        let o = exec("dynamics", json!({ "base": base(), "alpha": 1.0, "steps": 0 }), 7)?;
        Ok(data_rows(o.get("trajectory.csv").unwrap_or("")) == 1)
    }),
    ("check-conditions: identity row", || {
        let cfg = json!({ "base": base(), "alpha": 1.0, "samples": 500, "M": [1.0, 1e3] });
        let o = exec("check-conditions", cfg, 8)?;
        let v: Value = serde_json::from_str(o.get("regularity.json").unwrap_or("{}")).map_err(|e| e.to_string())?;
        Ok(v["report"]["regularity"]["identity"]["abs_diff"].as_f64().is_some_and(|d| d < 1e-12))
    }),
    ("local-limit: errors decrease", || {
        let bump = json!({ "center": 0.0, "width": 1.0, "amplitude": 1.0 });
        let o = exec("local-limit", json!({ "alphas": [1.5, 1.9, 1.99], "windows": ["global"], "f": bump, "g": bump }), 9)?;
        Ok(o.pass == Some(true) && data_rows(o.get("local_limit.csv").unwrap_or("")) == 3)
    }),
    ("particles: membership and Ruelle sum", || {
        let n = 3;
        let at = |m| Configuration::new(1, 2.0, vec![Particle { y: vec![0.0], m }]).map_err(|e| e.to_string());
        let ok = u_n_membership(&Configuration::empty(1, 2.0), n, 0).map_err(|e| e.to_string())?.member
            && u_n_membership(&at(n)?, n, 0).map_err(|e| e.to_string())?.member
            && !u_n_membership(&at(n + 1)?, n, 0).map_err(|e| e.to_string())?.member;
        let half = RuelleParams { gamma: 1.0 + std::f64::consts::LN_2, delta: 0.0 };
        Ok(ok && geometric_tail(0.5) == 1.0 && (ruelle_tail_bound(half, 1).map_err(|e| e.to_string())? - 1.0).abs() < 1e-15)
    }),
    ("particles: embedding", || {
        let cfg = json!({ "d": 1, "N": 2, "window": 3.0, "L": 4.0, "grid_n": 64, "K": 8,
            "points": [{ "y": [0.2], "m": 1 }, { "y": [-1.4], "m": 2 }] });
        let o = exec("particles", cfg, 10)?;
        Ok(o.pass == Some(true) && data_rows(o.get("embedding.csv").unwrap_or("")) == 8)
    }),
];

/// Runs every check, printing one line each; true when all pass.
pub fn selftest() -> bool {
    let mut all = true;
    for (name, check) in CHECKS {
        let ok = match check() {
            Ok(ok) => ok,
            Err(e) => {
                eprintln!("  {name}: {e}");
                false
            }
        };
        all &= ok;
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
    }
    all
}

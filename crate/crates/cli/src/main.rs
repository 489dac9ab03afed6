mod commands;
mod config;
mod output;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::Value;

use output::{run_manifest, Manifest};

/// Non-local forms, jump dynamics and field-measure diagnostics.
#[derive(Debug, Parser)]
#[command(name = "nlsq", version)]
struct Cli {
    /// spectrum | sample-field | charfun | gibbs | form-eval | dynamics |
    /// check-conditions | particles | local-limit
    subcommand: Option<String>,

    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, env = "NLSQ_SEED", default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Worker threads; results do not depend on it.
    #[arg(long, env = "NLSQ_WORKERS")]
    workers: Option<usize>,

    /// Run the quick end-to-end checks of every module.
    #[arg(long)]
    selftest: bool,

    /// Exit 0 even when a module check fails.
    #[arg(long)]
    exploratory: bool,

    /// Record wall time in the run manifest (outputs then differ between runs).
    #[arg(long)]
    timing: bool,

    #[arg(short, long)]
    verbose: bool,
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_RESOURCE: u8 = 4;

fn core_exit(e: &nlsq_core::Error) -> u8 {
    if e.is_config() {
        EXIT_CONFIG
    } else if e.is_resource() {
        EXIT_RESOURCE
    } else {
        EXIT_NUMERIC
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("nlsq: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            return fail(EXIT_CONFIG, "--workers must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(EXIT_RESOURCE, e);
        }
    }
    if cli.selftest {
        let start = Instant::now();
        let ok = selftest::selftest();
        println!("selftest {} in {:.1} s", if ok { "passed" } else { "failed" }, start.elapsed().as_secs_f64());
        return if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK_FAILED) };
    }
    let Some(sub) = cli.subcommand.as_deref() else {
        return fail(EXIT_CONFIG, format!("missing subcommand (one of {})", commands::SUBCOMMANDS.join(", ")));
    };
    if !commands::SUBCOMMANDS.contains(&sub) {
        return fail(EXIT_CONFIG, format!("unknown subcommand {sub}"));
    }
    let Some(path) = cli.config.as_ref() else {
        return fail(EXIT_CONFIG, "--config is required");
    };
    let raw = match std::fs::read(path) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
    };
    let cfg: Value = match serde_json::from_slice(&raw) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
    };
    let start = Instant::now();
    let manifest = Manifest::new(sub, cli.seed, &raw);
    let mut outputs = match commands::run(sub, &cfg, cli.seed, &manifest) {
        Ok(o) => o,
        Err(e) => return fail(core_exit(&e), e),
    };
    let wall = cli.timing.then(|| start.elapsed().as_secs_f64());
    let mut names: Vec<String> = outputs.names().iter().map(|s| s.to_string()).collect();
    names.push("manifest.json".into());
    let run_doc = run_manifest(&manifest, &cfg, &names, outputs.pass, wall);
    let pass = outputs.pass;
    outputs.push_raw("manifest.json", run_doc);
    if let Err(e) = outputs.write_all(&cli.out) {
        return fail(EXIT_RESOURCE, format!("{}: {e}", cli.out.display()));
    }
    if cli.verbose {
        for n in outputs.names() {
            eprintln!("wrote {}", cli.out.join(n).display());
        }
    }
    match pass {
        Some(false) if !cli.exploratory => fail(EXIT_CHECK_FAILED, "a module check failed; see the reports"),
        _ => ExitCode::SUCCESS,
    }
}

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    pub config_sha256: String,
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64, raw_config: &[u8]) -> Self {
        let hash = Sha256::digest(raw_config);
        let config_sha256 = hash.iter().map(|b| format!("{b:02x}")).collect();
        Self { tool: "nlsq", version: VERSION, subcommand: subcommand.into(), seed, config_sha256 }
    }

    fn csv_header(&self) -> String {
        format!(
            "# {} {} {} seed={} config_sha256={}\n",
            self.tool, self.version, self.subcommand, self.seed, self.config_sha256
        )
    }
}

/// Files produced by a run, held in memory until the run has succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, String)>,
    pub pass: Option<bool>,
}

impl Outputs {
    pub fn csv(&mut self, name: &str, manifest: &Manifest, body: &str) {
        self.files.push((name.into(), manifest.csv_header() + body));
    }

    pub fn json(&mut self, name: &str, manifest: &Manifest, report: impl Serialize) {
        let doc = json!({ "manifest": manifest, "report": report });
        self.files.push((name.into(), pretty(&doc)));
    }

    pub fn push_raw(&mut self, name: &str, content: String) {
        self.files.push((name.into(), content));
    }

    /// Combine a module verdict with the ones seen so far.
    pub fn verdict(&mut self, pass: bool) {
        self.pass = Some(self.pass.unwrap_or(true) && pass);
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    /// Write every file through a temporary name and rename into place.
    pub fn write_all(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            let tmp = dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, content)?;
            fs::rename(&tmp, dir.join(name))?;
        }
        Ok(())
    }
}

pub fn run_manifest(manifest: &Manifest, config: &Value, files: &[String], pass: Option<bool>, wall_seconds: Option<f64>) -> String {
    pretty(&json!({
        "manifest": manifest,
        "config": config,
        "outputs": files,
        "pass": pass,
        "wall_seconds": wall_seconds,
    }))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

//! Run directories, manifests and history files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

use super::config::RunConfig;
use super::trainer::EpochRecord;

pub const MANIFEST: &str = "manifest.json";
pub const HISTORY: &str = "history.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.json";
pub const CONFIG: &str = "config.toml";

/// `<root>/<YYYYmmdd-HHMMSS>-<config hash>`.
pub fn new_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    root.join(format!("{stamp}-{}", cfg.hash()))
}

/// `HEAD` of the enclosing git checkout, if any.
pub fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    created: String,
    git: Option<String>,
    config_hash: String,
    seed: u64,
    seeds: &'a [u64],
    config: &'a RunConfig,
    extra: serde_json::Value,
}

/// Write the manifest and a TOML copy of the config into `dir`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        created: chrono::Local::now().to_rfc3339(),
        git: git_hash(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        seeds: &cfg.seeds,
        config: cfg,
        extra,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
    std::fs::write(dir.join(CONFIG), cfg.to_toml()?)?;
    Ok(())
}

/// One JSON object per epoch.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

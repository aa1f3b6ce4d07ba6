//! Every run drops a `run-manifest.json` into the output directory: the
//! effective configuration hash, versions, and timestamps.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use amfc_core::util::fnv1a64;

#[derive(Serialize)]
struct RunManifest {
    schema: &'static str,
    command: String,
    version: &'static str,
    config_hash: String,
    seed: u64,
    threads: usize,
    timestamp_unix_s: u64,
    args: Vec<String>,
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    effective_config_json: &str,
    seed: u64,
    threads: usize,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest = RunManifest {
        schema: "amfc-manifest/1",
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: format!("{:016x}", fnv1a64(effective_config_json.as_bytes())),
        seed,
        threads,
        timestamp_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        args: std::env::args().collect(),
    };
    let path = out_dir.join("run-manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

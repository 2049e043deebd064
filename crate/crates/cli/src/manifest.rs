//! `manifest.json`: the configuration, seeds and artifact checksums of every
//! command run against an output directory.

use std::path::Path;

use gptrec::binio::{sha256_hex, write_atomic};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const FILE: &str = "manifest.json";

pub fn record(cfg: &RunConfig, command: &str, artifacts: &[&str]) -> CliResult {
    let path = cfg.out.join(FILE);
    let mut manifest: Value = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => json!({
            "tool": "gptrec",
            "version": env!("CARGO_PKG_VERSION"),
            "runs": [],
        }),
    };
    let mut sums = Map::new();
    for name in artifacts {
        let bytes = std::fs::read(cfg.out.join(name))?;
        sums.insert(name.to_string(), Value::String(sha256_hex(&bytes)));
    }
    let config = serde_json::to_value(cfg)?;
    let run = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "seeds": {
            "split": cfg.data.split_seed,
            "svd": cfg.tokeniser.svd_seed,
            "noise": cfg.tokeniser.noise_seed,
            "train": cfg.train.seed,
            "generation": cfg.generation.seed,
        },
        "config": config.clone(),
        "artifacts": sums,
    });
    manifest["config"] = config;
    manifest["runs"]
        .as_array_mut()
        .ok_or_else(|| anyhow::anyhow!("{} has no runs array", path.display()))?
        .push(run);
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Configuration of the most recent run in `dir`, if there is one.
pub fn last_config(dir: &Path) -> CliResult<Option<RunConfig>> {
    let path = dir.join(FILE);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let manifest: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("corrupt {}: {e}", path.display())))?;
    match manifest.get("config") {
        Some(c) => serde_json::from_value(c.clone())
            .map(Some)
            .map_err(|e| CliError::Usage(format!("config in {} is unreadable: {e}", path.display()))),
        None => Ok(None),
    }
}

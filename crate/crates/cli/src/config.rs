//! Layered run configuration: preset, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cwm_core::experiment::RunConfig;
use serde::Serialize;
use serde_json::Value;

pub const CONFIG_FILE: &str = "run_config.json";
pub const TOOL: &str = "cwm";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `preset` with the fields of the JSON file at `path` overlaid.
pub fn load_layered(preset: RunConfig, path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(preset) };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let patch: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let mut value = serde_json::to_value(&preset)?;
    merge(&mut value, patch);
    serde_json::from_value(value).with_context(|| format!("config {}", path.display()))
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    compute_threads: usize,
    config: &'a RunConfig,
}

/// Writes the resolved config and tool version to `dir/run_config.json`.
pub fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = Provenance {
        tool: TOOL,
        version: VERSION,
        command,
        compute_threads: cwm_core::parallel::threads(),
        config: cfg,
    };
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(&p)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

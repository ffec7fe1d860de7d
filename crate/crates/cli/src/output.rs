//! CSV and manifest files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::{Command, Outcome};

pub const RESULTS_FILE: &str = "results.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const EM_TRACE_FILE: &str = "em_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub mixamp: String,
    pub mixamp_cli: String,
}

impl Versions {
    fn current() -> Self {
        Versions {
            mixamp: mixamp::VERSION.to_string(),
            mixamp_cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Everything needed to rerun a command, plus run diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub versions: Versions,
    pub outputs: Vec<String>,
    /// Per-repeat seeds, statuses and diagnostics (informational).
    #[serde(default)]
    pub tasks: serde_json::Value,
    #[serde(default)]
    pub state_evolution: serde_json::Value,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub wall_time_s: f64,
}

/// Input file contents: a plain config or a manifest written by a previous run.
pub enum Input {
    Config(RunConfig),
    Manifest(Box<Manifest>),
}

impl Input {
    pub fn parse(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let is_manifest = value.get("command").is_some() && value.get("config").is_some();
        if is_manifest {
            serde_json::from_value(value)
                .map(|m| Input::Manifest(Box::new(m)))
                .map_err(|e| format!("manifest: {e}"))
        } else {
            serde_json::from_value(value).map(Input::Config).map_err(|e| e.to_string())
        }
    }

    /// The config to run, checking that a manifest belongs to `command`.
    pub fn into_config(self, command: Command) -> Result<RunConfig, String> {
        match self {
            Input::Config(c) => Ok(c),
            Input::Manifest(m) if m.command == command.name() => Ok(m.config),
            Input::Manifest(m) => Err(format!(
                "manifest was written by `{}`, not `{}`",
                m.command,
                command.name()
            )),
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the CSV files and the manifest; returns the written paths.
pub fn write_outputs(
    dir: &Path,
    command: Command,
    config: &RunConfig,
    outcome: &Outcome,
    threads: usize,
    wall_time_s: f64,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut names = vec![RESULTS_FILE];
    write_csv(&dir.join(RESULTS_FILE), &outcome.results)?;
    if command == Command::Heatmap {
        write_csv(&dir.join(HEATMAP_FILE), &outcome.heatmap)?;
        names.push(HEATMAP_FILE);
    }
    if command == Command::EmAmp {
        write_csv(&dir.join(EM_TRACE_FILE), &outcome.em_trace)?;
        names.push(EM_TRACE_FILE);
    }
    let manifest = Manifest {
        command: command.name().to_string(),
        config: config.clone(),
        versions: Versions::current(),
        outputs: names.iter().map(|s| s.to_string()).collect(),
        tasks: serde_json::to_value(&outcome.tasks)?,
        state_evolution: serde_json::to_value(&outcome.state_evolution)?,
        threads,
        wall_time_s,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    names.push(MANIFEST_FILE);
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

//! Merges run manifests into one summary.

use std::path::{Path, PathBuf};

use mkvlab_core::io::{read_json, write_json};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;
use crate::run::{Check, Manifest, MANIFEST_FILE};

pub const REPORT_FILE: &str = "report.json";

/// Metrics copied into the summary when a run has them.
const KEY_METRICS: &[&str] = &[
    "fixed_point_gap",
    "slope",
    "mean_distances",
    "final_ratio",
    "distances",
    "sigma2",
    "mc_variance",
    "ks_stat",
    "ks_p_value",
    "max_reconstruction_error",
    "max_assignment_error",
    "ratios",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub directory: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub status: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub wall_time_seconds: f64,
    pub metrics: serde_json::Map<String, Value>,
    pub failed_checks: Vec<Check>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunEntry>,
    pub all_ok: bool,
}

fn manifests_under(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    if dir.join(MANIFEST_FILE).is_file() {
        found.push(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    subdirs.sort();
    found.extend(subdirs);
    Ok(found)
}

/// Summary of the run in `dir` and of every direct subdirectory holding a
/// manifest; also written to `dir/report.json`.
pub fn emit_report(dir: &Path) -> Result<Summary, CliError> {
    if !dir.is_dir() {
        return Err(CliError::MissingArtifact(format!("{} is not a directory", dir.display())));
    }
    let runs_dirs = manifests_under(dir)?;
    if runs_dirs.is_empty() {
        return Err(CliError::MissingArtifact(format!("no {MANIFEST_FILE} in {}", dir.display())));
    }
    let mut runs = Vec::with_capacity(runs_dirs.len());
    for run_dir in runs_dirs {
        let m: Manifest = read_json(run_dir.join(MANIFEST_FILE))?;
        for a in &m.artifacts {
            if !run_dir.join(a).is_file() {
                return Err(CliError::MissingArtifact(format!("{} listed in {}", a, run_dir.display())));
            }
        }
        let mut metrics = serde_json::Map::new();
        for key in KEY_METRICS {
            if let Some(v) = m.metrics.get(*key) {
                metrics.insert((*key).to_string(), v.clone());
            }
        }
        runs.push(RunEntry {
            directory: run_dir.strip_prefix(dir).unwrap_or(&run_dir).display().to_string(),
            kind: m.kind.clone(),
            description: m.description.clone(),
            status: m.status.clone(),
            seeds: m.seeds.clone(),
            wall_time_seconds: m.wall_time_seconds,
            metrics,
            failed_checks: m.checks.iter().filter(|c| !c.passed).cloned().collect(),
        });
    }
    let summary = Summary { all_ok: runs.iter().all(|r| r.status == "ok"), runs };
    write_json(dir.join(REPORT_FILE), &summary)?;
    Ok(summary)
}

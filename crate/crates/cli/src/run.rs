//! Run directory bookkeeping and the experiment dispatcher.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mkvlab_core::io::{read_json, write_json};
use mkvlab_core::noise::derive_seed;
use mkvlab_core::paths::TimeGrid;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;
use crate::{diagnostics, pipelines};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `<=`, `>=`, `<`, or `holds` for boolean checks.
    pub relation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
    pub metrics: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    pub status: String,
}

impl Manifest {
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| match (c.value, c.threshold) {
                (Some(v), Some(t)) => format!("{}: {v} {} {t} fails", c.name, c.relation),
                _ => format!("{} failed {}", c.name, c.detail),
            })
            .collect()
    }

    pub fn metric_f64(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(Value::as_f64)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Reads `manifest.json` from a run directory.
    pub fn load(run_dir: &Path) -> Result<Manifest, CliError> {
        Ok(read_json(run_dir.join(MANIFEST_FILE))?)
    }
}

/// State threaded through one pipeline: grid, seeds handed out, metrics,
/// checks and written artifacts.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub grid: TimeGrid,
    out: PathBuf,
    seeds: BTreeMap<String, u64>,
    metrics: BTreeMap<String, Value>,
    checks: Vec<Check>,
    artifacts: Vec<String>,
}

impl<'a> RunContext<'a> {
    fn new(cfg: &'a ExperimentConfig, out: &Path) -> Result<Self, CliError> {
        let grid = cfg.grid.build()?;
        let mut seeds = BTreeMap::new();
        seeds.insert("base".to_string(), cfg.seed);
        Ok(Self {
            cfg,
            grid,
            out: out.to_path_buf(),
            seeds,
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    /// Seed for a named stream, recorded in the manifest.
    pub fn seed(&mut self, name: &str, stream: u64) -> u64 {
        let s = derive_seed(self.cfg.seed, stream);
        self.seeds.insert(name.to_string(), s);
        s
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metrics.insert(name.to_string(), v);
    }

    pub fn check_le(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.push(name, "<=", value, threshold, value <= threshold)
    }

    pub fn check_lt(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.push(name, "<", value, threshold, value < threshold)
    }

    pub fn check_ge(&mut self, name: &str, value: f64, threshold: f64) -> bool {
        self.push(name, ">=", value, threshold, value >= threshold)
    }

    pub fn check_holds(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> bool {
        self.checks.push(Check {
            name: name.to_string(),
            relation: "holds".into(),
            value: None,
            threshold: None,
            passed,
            detail: detail.into(),
        });
        passed
    }

    fn push(&mut self, name: &str, relation: &str, value: f64, threshold: f64, passed: bool) -> bool {
        self.checks.push(Check {
            name: name.to_string(),
            relation: relation.into(),
            value: Some(value),
            threshold: Some(threshold),
            passed,
            detail: String::new(),
        });
        passed
    }

    /// Path of an artifact inside the run directory; the name is recorded.
    pub fn artifact(&mut self, file: &str) -> PathBuf {
        self.artifacts.push(file.to_string());
        self.out.join(file)
    }
}

/// Runs the configured experiment, writing artifacts and `manifest.json` into
/// `out`. Failed checks give [`CliError::Invariant`] after the manifest is written.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, CliError> {
    let start = Instant::now();
    let created = !out.exists();
    std::fs::create_dir_all(out)?;
    let mut ctx = RunContext::new(cfg, out)?;
    if let Err(e) = dispatch(&mut ctx, cfg) {
        // config errors leave nothing behind
        if created && matches!(e, CliError::Config(_)) {
            let _ = std::fs::remove_dir_all(out);
        }
        return Err(e);
    }
    let mut versions = BTreeMap::new();
    versions.insert("mkvlab".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let failed = ctx.checks.iter().any(|c| !c.passed);
    let manifest = Manifest {
        kind: cfg.experiment.name().to_string(),
        description: cfg.description.clone(),
        config: serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?,
        seeds: ctx.seeds,
        versions,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        metrics: ctx.metrics,
        checks: ctx.checks,
        artifacts: ctx.artifacts,
        status: if failed { "invariant_violation" } else { "ok" }.to_string(),
    };
    write_json(out.join(MANIFEST_FILE), &manifest)?;
    if failed {
        return Err(CliError::Invariant(manifest.failures()));
    }
    Ok(manifest)
}

fn dispatch(ctx: &mut RunContext, cfg: &ExperimentConfig) -> Result<(), CliError> {
    match &cfg.experiment {
        Experiment::Simulate(p) => pipelines::simulate(ctx, p),
        Experiment::Stability(p) => pipelines::stability(ctx, p),
        Experiment::Inverse(p) => pipelines::inverse(ctx, p),
        Experiment::Sweep(p) => pipelines::sweep(ctx, p),
        Experiment::CommonNoise(p) => pipelines::common_noise(ctx, p),
        Experiment::Battery(p) => pipelines::battery(ctx, p),
        Experiment::Cadlag(p) => pipelines::cadlag(ctx, p),
        Experiment::Reflect(p) => diagnostics::reflect(ctx, p),
        Experiment::Clt(p) => diagnostics::clt(ctx, p),
        Experiment::Lln(p) => diagnostics::lln(ctx, p),
        Experiment::TransportSelftest(p) => diagnostics::transport_selftest(ctx, p),
    }
}

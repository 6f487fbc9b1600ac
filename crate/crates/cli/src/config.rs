//! JSON experiment configuration.
//!
//! A config is one object with the common fields `seed`, `grid`, `solver`,
//! an optional `description`, and a `kind` tag selecting the experiment whose
//! parameters sit alongside. See `configs/` for one file per experiment kind.

use std::path::Path;
use std::sync::Arc;

use mkvlab_core::drift::{self, BatteryParams, Drift, LinearDecay, ScalarFn};
use mkvlab_core::fluctuations::{CltDrift, CylinderTestFunction, MeanFieldOu, SineInteraction, TanhMeanField};
use mkvlab_core::noise::{gaussian_points, NoiseConfig, NoiseKind};
use mkvlab_core::paths::{PointCloud, TimeGrid};
use mkvlab_core::reflection::Polyhedron;
use mkvlab_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(flatten)]
    pub experiment: Experiment,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.horizon, self.n_steps).map_err(CliError::config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Simulate(SimulateParams),
    Stability(StabilityParams),
    Inverse(InverseParams),
    Sweep(SweepParams),
    CommonNoise(CommonNoiseParams),
    Battery(BatteryExperiment),
    Reflect(ReflectParams),
    Clt(CltParams),
    Lln(LlnParams),
    Cadlag(CadlagParams),
    TransportSelftest(SelftestParams),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Simulate(_) => "simulate",
            Experiment::Stability(_) => "stability",
            Experiment::Inverse(_) => "inverse",
            Experiment::Sweep(_) => "sweep",
            Experiment::CommonNoise(_) => "common-noise",
            Experiment::Battery(_) => "battery",
            Experiment::Reflect(_) => "reflect",
            Experiment::Clt(_) => "clt",
            Experiment::Lln(_) => "lln",
            Experiment::Cadlag(_) => "cadlag",
            Experiment::TransportSelftest(_) => "transport-selftest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Picard,
    Particle,
    #[default]
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub initial: InitialConfig,
    pub n: usize,
    #[serde(default)]
    pub method: SolveMethod,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub initial: InitialConfig,
    pub n: usize,
    pub deltas: Vec<f64>,
    /// Allowed `(max - min) / min` of the ratios across `deltas`.
    #[serde(default = "default_spread")]
    pub max_spread: f64,
    /// Relative slack on the `e^{K T}` bound.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_spread() -> f64 {
    0.05
}
fn default_margin() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub initial: InitialConfig,
    pub n: usize,
    pub instances: usize,
    #[serde(default = "default_inverse_tol")]
    pub tolerance: f64,
}

fn default_inverse_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub initial: InitialConfig,
    pub n_list: Vec<usize>,
    pub reference_m: usize,
    pub repeats: usize,
    /// Accepted range of the log-log slope, if checked.
    #[serde(default)]
    pub slope_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommonNoiseParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub common: NoiseSpec,
    pub initial: InitialConfig,
    pub n_list: Vec<usize>,
    pub reference_m: usize,
    pub repeats: usize,
    /// Upper bound on last/first mean distance.
    #[serde(default)]
    pub max_final_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatteryExperiment {
    pub model: BatteryModel,
    /// Initial mole fraction shared by all particles.
    pub initial_fraction: f64,
    /// Radii of the two groups; the first half of the particles gets the first.
    pub radii: [f64; 2],
    pub noise: NoiseSpec,
    pub n_list: Vec<usize>,
    pub reference_m: usize,
    pub repeats: usize,
    /// Members per group in the shared-driver symmetry run.
    #[serde(default = "default_group")]
    pub symmetry_group_size: usize,
}

fn default_group() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatteryModel {
    pub tau: ScalarSpec,
    pub sigma: ScalarSpec,
    pub mu_li: ScalarSpec,
    pub q_dot: ScalarSpec,
    pub r_min: f64,
    pub r_max: f64,
    pub declared_lipschitz: f64,
}

impl BatteryModel {
    pub fn build(&self) -> Result<BatteryParams, CliError> {
        let p = BatteryParams {
            tau: self.tau.build(),
            sigma_r: self.sigma.build(),
            mu_li: self.mu_li.build(),
            q_dot: self.q_dot.build(),
            r_min: self.r_min,
            r_max: self.r_max,
        };
        p.validate().map_err(CliError::config)?;
        Ok(p)
    }
}

/// Scalar functions selectable from a config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScalarSpec {
    Constant { value: f64 },
    /// `coef * s^exponent`
    Power { coef: f64, exponent: f64 },
    /// `offset + slope * s + amplitude * sin(frequency * s)`
    LinearSine {
        #[serde(default)]
        offset: f64,
        slope: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl ScalarSpec {
    pub fn build(&self) -> ScalarFn {
        match *self {
            ScalarSpec::Constant { value } => Arc::new(move |_| value),
            ScalarSpec::Power { coef, exponent } => Arc::new(move |s: f64| coef * s.powf(exponent)),
            ScalarSpec::LinearSine { offset, slope, amplitude, frequency } => {
                Arc::new(move |s: f64| offset + slope * s + amplitude * (frequency * s).sin())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub cases: Vec<ReflectCase>,
    /// Members and steps of the invariant run; members * n_steps steps are checked.
    pub invariant_members: usize,
    #[serde(default = "default_reflect_tol")]
    pub tolerance: f64,
    /// Grid sizes of the self-convergence study, ascending.
    pub levels: Vec<usize>,
    /// The oracle uses `levels.last() * oracle_factor` steps.
    #[serde(default = "default_oracle")]
    pub oracle_factor: usize,
    pub smooth_members: usize,
    pub smooth_amplitude: f64,
    #[serde(default = "default_ratio_range")]
    pub ratio_range: [f64; 2],
    pub perturbation_scales: Vec<f64>,
    pub stability_members: usize,
}

fn default_reflect_tol() -> f64 {
    1e-9
}
fn default_oracle() -> usize {
    100
}
fn default_ratio_range() -> [f64; 2] {
    [0.4, 1.2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectCase {
    pub name: String,
    pub domain: DomainSpec,
    /// Bound for the Lipschitz ratio of the discrete Skorokhod map.
    pub c_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DomainSpec {
    Interval { lo: f64, hi: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Halfspaces { faces: Vec<(Vec<f64>, f64)> },
}

impl DomainSpec {
    pub fn build(&self) -> Result<Polyhedron, CliError> {
        match self {
            DomainSpec::Interval { lo, hi } => Polyhedron::interval(*lo, *hi),
            DomainSpec::Box { lo, hi } => Polyhedron::boxed(lo, hi),
            DomainSpec::Halfspaces { faces } => Polyhedron::new(faces.clone()),
        }
        .map_err(CliError::config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub phi: TestFunctionSpec,
    pub n: usize,
    pub replicas: usize,
    pub reference_m: usize,
    /// Members of the ensemble used for the limiting variance.
    #[serde(default = "default_sigma_members")]
    pub variance_members: usize,
    #[serde(default = "default_rel_tol")]
    pub max_relative_error: f64,
    #[serde(default = "default_alpha")]
    pub ks_level: f64,
}

fn default_sigma_members() -> usize {
    2048
}
fn default_rel_tol() -> f64 {
    0.15
}
fn default_alpha() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TestFunctionSpec {
    Linear { a: Vec<f64> },
    Constant { value: f64 },
    Sine,
}

impl TestFunctionSpec {
    pub fn build(&self) -> CylinderTestFunction {
        match self {
            TestFunctionSpec::Linear { a } => CylinderTestFunction::linear(a.clone()),
            TestFunctionSpec::Constant { value } => CylinderTestFunction::constant(*value),
            TestFunctionSpec::Sine => CylinderTestFunction::sine(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundedLaw {
    Rademacher,
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlnParams {
    pub law: BoundedLaw,
    pub n_min: usize,
    pub n_max: usize,
    pub n_step: usize,
    /// `|S^N| <= N^{-exponent}` is checked.
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_exponent() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CadlagParams {
    pub drift: DriftConfig,
    pub noise: NoiseSpec,
    pub initial: InitialConfig,
    pub n: usize,
    /// Jump-node shifts, in grid steps, in the order they are reported.
    pub shifts: Vec<usize>,
    /// Distance at the last shift must be below this fraction of the mean path norm.
    #[serde(default = "default_fraction")]
    pub max_final_fraction: f64,
}

fn default_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelftestParams {
    pub instances: usize,
    pub max_n: usize,
    pub pairs: usize,
    #[serde(default = "default_selftest_tol")]
    pub tolerance: f64,
}

fn default_selftest_tol() -> f64 {
    1e-12
}

/// Built-in drifts by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DriftConfig {
    Zero { dim: usize },
    Constant { value: Vec<f64> },
    MeanReversion {
        alpha: f64,
        dim: usize,
        #[serde(default)]
        beta: Option<Vec<f64>>,
    },
    SineInteraction { kappa: f64, dim: usize },
    LinearDecay { rate: f64, dim: usize },
    TanhMeanField,
}

impl DriftConfig {
    pub fn dim(&self) -> usize {
        match self {
            DriftConfig::Zero { dim }
            | DriftConfig::MeanReversion { dim, .. }
            | DriftConfig::SineInteraction { dim, .. }
            | DriftConfig::LinearDecay { dim, .. } => *dim,
            DriftConfig::Constant { value } => value.len(),
            DriftConfig::TanhMeanField => 1,
        }
    }

    /// The same drift on `R^dim`, for drifts defined in any dimension.
    pub fn with_dim(&self, dim: usize) -> Result<DriftConfig, CliError> {
        let mut out = self.clone();
        match &mut out {
            DriftConfig::Zero { dim: d }
            | DriftConfig::SineInteraction { dim: d, .. }
            | DriftConfig::LinearDecay { dim: d, .. } => *d = dim,
            DriftConfig::MeanReversion { dim: d, beta, .. } => {
                if beta.is_some() && *d != dim {
                    return Err(CliError::Config("mean_reversion with beta has a fixed dimension".into()));
                }
                *d = dim;
            }
            other if other.dim() != dim => {
                return Err(CliError::Config(format!("drift {other:?} is not defined on R^{dim}")))
            }
            _ => {}
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<Arc<dyn Drift>, CliError> {
        Ok(match self {
            DriftConfig::Zero { dim } => Arc::new(drift::ZeroDrift { dim: *dim }),
            DriftConfig::Constant { value } => Arc::new(drift::ConstantDrift { value: value.clone() }),
            DriftConfig::MeanReversion { alpha, dim, beta } => {
                let beta = beta.clone().unwrap_or_else(|| vec![0.0; *dim]);
                if beta.len() != *dim {
                    return Err(CliError::Config(format!("beta has {} entries, dim is {dim}", beta.len())));
                }
                Arc::new(drift::make_mean_reversion(*alpha, beta).map_err(CliError::config)?)
            }
            DriftConfig::SineInteraction { kappa, dim } => {
                Arc::new(drift::sine_interaction(*kappa, *dim).map_err(CliError::config)?)
            }
            DriftConfig::LinearDecay { rate, dim } => Arc::new(LinearDecay { rate: *rate, dim: *dim }),
            DriftConfig::TanhMeanField => Arc::new(TanhMeanField),
        })
    }

    /// The drift with its measure derivatives, for the fluctuation experiments.
    pub fn build_clt(&self) -> Result<Arc<dyn CltDrift>, CliError> {
        Ok(match self {
            DriftConfig::MeanReversion { alpha, dim, beta } => {
                if beta.as_ref().is_some_and(|b| b.iter().any(|&v| v != 0.0)) {
                    return Err(CliError::Config("fluctuation runs need beta = 0".into()));
                }
                Arc::new(MeanFieldOu { alpha: *alpha, dim: *dim })
            }
            DriftConfig::SineInteraction { kappa, dim } => Arc::new(SineInteraction { kappa: *kappa, dim: *dim }),
            DriftConfig::TanhMeanField => Arc::new(TanhMeanField),
            other => {
                return Err(CliError::Config(format!(
                    "drift {other:?} has no measure derivatives registered"
                )))
            }
        })
    }
}

/// Noise without a seed; seeds are derived from the top-level seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub dim: usize,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn with_seed(&self, seed: u64) -> Result<NoiseConfig, CliError> {
        let cfg = NoiseConfig { kind: self.kind.clone(), dim: self.dim, scale: self.scale, seed };
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialConfig {
    Point { value: Vec<f64> },
    Gaussian { mean: Vec<f64>, sd: f64 },
}

impl InitialConfig {
    pub fn dim(&self) -> usize {
        match self {
            InitialConfig::Point { value } => value.len(),
            InitialConfig::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// `n` initial points; Gaussian points are nested in `n` for a fixed seed.
    pub fn build(&self, seed: u64, n: usize) -> mkvlab_core::Result<PointCloud> {
        match self {
            InitialConfig::Point { value } => {
                PointCloud::new(value.len(), value.iter().copied().cycle().take(value.len() * n).collect())
            }
            InitialConfig::Gaussian { mean, sd } => gaussian_points(seed, mean.len(), n, mean, *sd),
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.solver.validate().map_err(CliError::config)?;
    cfg.grid.build()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Replaces the seed with `value` when it is set; returns the old seed if replaced.
pub fn apply_seed_override(cfg: &mut ExperimentConfig, value: Option<&str>) -> Result<Option<u64>, CliError> {
    match value {
        None => Ok(None),
        Some(s) => {
            let seed = s
                .trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("MKVLAB_SEED is not an unsigned integer: {s:?}")))?;
            let old = cfg.seed;
            cfg.seed = seed;
            Ok(Some(old))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIMULATE: &str = r#"{
        "kind": "simulate",
        "seed": 3,
        "grid": {"horizon": 1.0, "n_steps": 10},
        "drift": {"name": "mean_reversion", "alpha": 1.0, "dim": 2},
        "noise": {"type": "brownian", "dim": 2},
        "initial": {"type": "gaussian", "mean": [0.0, 0.0], "sd": 1.0},
        "n": 8
    }"#;

    #[test]
    fn parses_simulate() {
        let cfg = parse_config(SIMULATE).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.solver, SolverConfig::default());
        match &cfg.experiment {
            Experiment::Simulate(p) => {
                assert_eq!(p.n, 8);
                assert_eq!(p.method, SolveMethod::Both);
                assert_eq!(p.noise.scale, 1.0);
            }
            other => panic!("wrong kind {other:?}"),
        }
        let echo = serde_json::to_string(&cfg).unwrap();
        assert!(echo.contains("\"kind\":\"simulate\""));
        parse_config(&echo).unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(parse_config("{not json").is_err());
        assert!(parse_config(&SIMULATE.replace("\"seed\": 3,", "")).is_err());
        assert!(parse_config(&SIMULATE.replace("simulate", "nonsense")).is_err());
        assert!(parse_config(&SIMULATE.replace("\"n_steps\": 10", "\"n_steps\": 0")).is_err());
        assert!(parse_config(&SIMULATE.replace("mean_reversion", "unknown_drift")).is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = parse_config(SIMULATE).unwrap();
        assert_eq!(apply_seed_override(&mut cfg, None).unwrap(), None);
        assert_eq!(apply_seed_override(&mut cfg, Some("42")).unwrap(), Some(3));
        assert_eq!(cfg.seed, 42);
        assert!(apply_seed_override(&mut cfg, Some("x")).is_err());
    }

    #[test]
    fn scalar_functions() {
        let f = ScalarSpec::LinearSine { offset: 1.0, slope: 2.0, amplitude: 0.5, frequency: 3.0 }.build();
        assert!((f(0.5) - (1.0 + 1.0 + 0.5 * 1.5f64.sin())).abs() < 1e-15);
        assert_eq!(ScalarSpec::Power { coef: 2.0, exponent: 3.0 }.build()(2.0), 16.0);
    }

    #[test]
    fn initial_points_nest() {
        let init = InitialConfig::Gaussian { mean: vec![1.0], sd: 2.0 };
        let small = init.build(5, 4).unwrap();
        let big = init.build(5, 9).unwrap();
        assert_eq!(small.as_flat(), &big.as_flat()[..4]);
        let pt = InitialConfig::Point { value: vec![1.0, 2.0] }.build(0, 3).unwrap();
        assert_eq!(pt.as_flat(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}

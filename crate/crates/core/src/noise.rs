//! Seeded driver generators.
//!
//! Member `i` of an ensemble always draws from stream `i` of a ChaCha8
//! generator keyed by the configuration seed, so the first `n` members of a
//! larger ensemble coincide with an ensemble of size `n`, and generation order
//! (or thread count) never changes the output.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{CadlagPath, Jump, PathEnsemble, PointCloud, SamplePath, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseKind {
    Brownian,
    Fbm {
        hurst: f64,
    },
    CompoundPoisson {
        rate: f64,
        jump_scale: f64,
    },
    /// Every member receives this path (one point per grid node).
    Deterministic {
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub dim: usize,
    /// Multiplies every generated path.
    #[serde(default = "one")]
    pub scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl NoiseConfig {
    pub fn brownian(dim: usize, scale: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Brownian, dim, scale, seed }
    }

    pub fn fbm(hurst: f64, dim: usize, scale: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Fbm { hurst }, dim, scale, seed }
    }

    pub fn compound_poisson(rate: f64, jump_scale: f64, dim: usize, scale: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::CompoundPoisson { rate, jump_scale },
            dim,
            scale,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("noise dimension must be positive".into()));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise scale must be finite and >= 0, got {}",
                self.scale
            )));
        }
        match &self.kind {
            NoiseKind::Brownian => {}
            NoiseKind::Fbm { hurst } => {
                if !(*hurst > 0.0 && *hurst < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "Hurst index must lie in (0,1), got {hurst}"
                    )));
                }
            }
            NoiseKind::CompoundPoisson { rate, jump_scale } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "jump rate must be positive, got {rate}"
                    )));
                }
                if !(*jump_scale >= 0.0 && jump_scale.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "jump scale must be finite and >= 0, got {jump_scale}"
                    )));
                }
            }
            NoiseKind::Deterministic { values } => {
                if values.iter().any(|v| v.len() != self.dim) {
                    return Err(Error::InvalidParameter(
                        "deterministic path points must match the noise dimension".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Generator for member `index` under `seed`.
pub fn member_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives an independent seed from a base seed and a stream label (SplitMix64).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn expect_kind(found: &NoiseKind, wanted: &str) -> Error {
    Error::InvalidParameter(format!("expected {wanted} noise, got {found:?}"))
}

/// `n` independent Brownian paths started at 0.
pub fn brownian_paths(cfg: &NoiseConfig, grid: &TimeGrid, n: usize) -> Result<Vec<SamplePath>> {
    cfg.validate()?;
    if cfg.kind != NoiseKind::Brownian {
        return Err(expect_kind(&cfg.kind, "brownian"));
    }
    let d = cfg.dim;
    let sd = grid.step().sqrt() * cfg.scale;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = member_rng(cfg.seed, i as u64);
            let mut values = vec![0.0; grid.n_nodes() * d];
            for j in 1..grid.n_nodes() {
                for c in 0..d {
                    values[j * d + c] = values[(j - 1) * d + c] + sd * gaussian(&mut rng);
                }
            }
            SamplePath::from_raw(*grid, d, values)
        })
        .collect())
}

/// Lower Cholesky factor of the fBm covariance on the nodes `t_1..t_n`.
pub fn fbm_factor(grid: &TimeGrid, hurst: f64) -> Result<DMatrix<f64>> {
    let n = grid.n_steps();
    let two_h = 2.0 * hurst;
    let cov = DMatrix::from_fn(n, n, |a, b| {
        let s = grid.time(a + 1);
        let t = grid.time(b + 1);
        0.5 * (s.powf(two_h) + t.powf(two_h) - (s - t).abs().powf(two_h))
    });
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Factorization(format!(
            "fBm covariance with H={hurst} on {n} nodes is not numerically positive definite"
        )))
}

/// `n` independent fractional Brownian paths with exact grid covariance.
pub fn fbm_paths(cfg: &NoiseConfig, grid: &TimeGrid, n: usize) -> Result<Vec<SamplePath>> {
    cfg.validate()?;
    let hurst = match cfg.kind {
        NoiseKind::Fbm { hurst } => hurst,
        ref other => return Err(expect_kind(other, "fbm")),
    };
    let l = fbm_factor(grid, hurst)?;
    let d = cfg.dim;
    let m = grid.n_steps();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = member_rng(cfg.seed, i as u64);
            let mut values = vec![0.0; grid.n_nodes() * d];
            let mut z = vec![0.0; m];
            for c in 0..d {
                z.iter_mut().for_each(|v| *v = gaussian(&mut rng));
                for a in 0..m {
                    let mut acc = 0.0;
                    for (b, zb) in z.iter().enumerate().take(a + 1) {
                        acc += l[(a, b)] * zb;
                    }
                    values[(a + 1) * d + c] = cfg.scale * acc;
                }
            }
            SamplePath::from_raw(*grid, d, values)
        })
        .collect())
}

/// Jump lists for `n` compound Poisson members: a Poisson(rate·T) number of
/// jumps at uniform times snapped to the nearest node (never node 0), with
/// Gaussian sizes times `jump_scale · scale`.
pub fn compound_poisson_jumps(cfg: &NoiseConfig, grid: &TimeGrid, n: usize) -> Result<Vec<Vec<Jump>>> {
    cfg.validate()?;
    let (rate, jump_scale) = match cfg.kind {
        NoiseKind::CompoundPoisson { rate, jump_scale } => (rate, jump_scale),
        ref other => return Err(expect_kind(other, "compound_poisson")),
    };
    let poisson = Poisson::new(rate * grid.horizon())
        .map_err(|e| Error::InvalidParameter(format!("Poisson intensity: {e}")))?;
    let d = cfg.dim;
    let size_scale = jump_scale * cfg.scale;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = member_rng(cfg.seed, i as u64);
            let count = poisson.sample(&mut rng) as usize;
            let mut jumps: Vec<Jump> = (0..count)
                .map(|_| {
                    let u: f64 = rng.random();
                    let node = ((u * grid.horizon() / grid.step()).round() as usize)
                        .clamp(1, grid.n_steps());
                    let size = (0..d).map(|_| size_scale * gaussian(&mut rng)).collect();
                    Jump { node, size }
                })
                .collect();
            jumps.sort_by_key(|j| j.node);
            jumps
        })
        .collect())
}

pub fn compound_poisson_paths(cfg: &NoiseConfig, grid: &TimeGrid, n: usize) -> Result<Vec<CadlagPath>> {
    compound_poisson_jumps(cfg, grid, n)?
        .iter()
        .map(|jumps| CadlagPath::from_jumps(*grid, cfg.dim, jumps))
        .collect()
}

/// `n` copies of the configured deterministic path, times the scale.
pub fn deterministic_paths(cfg: &NoiseConfig, grid: &TimeGrid, n: usize) -> Result<Vec<SamplePath>> {
    cfg.validate()?;
    let values = match &cfg.kind {
        NoiseKind::Deterministic { values } => values,
        other => return Err(expect_kind(other, "deterministic")),
    };
    if values.len() != grid.n_nodes() {
        return Err(Error::SizeMismatch {
            left: values.len(),
            right: grid.n_nodes(),
        });
    }
    let flat: Vec<f64> = values.iter().flatten().map(|v| v * cfg.scale).collect();
    let path = SamplePath::new(*grid, cfg.dim, flat)?;
    Ok(vec![path; n])
}

/// Dispatches on the configured kind; compound Poisson ensembles are marked càdlàg.
pub fn generate(cfg: &NoiseConfig, grid: &TimeGrid, n: usize) -> Result<PathEnsemble> {
    match cfg.kind {
        NoiseKind::Brownian => PathEnsemble::new(brownian_paths(cfg, grid, n)?),
        NoiseKind::Fbm { .. } => PathEnsemble::new(fbm_paths(cfg, grid, n)?),
        NoiseKind::CompoundPoisson { .. } => {
            PathEnsemble::cadlag(compound_poisson_paths(cfg, grid, n)?)
        }
        NoiseKind::Deterministic { .. } => PathEnsemble::new(deterministic_paths(cfg, grid, n)?),
    }
}

/// Replaces every member `W_i` by `W_i + b`.
pub fn add_common(paths: &[SamplePath], b: &SamplePath) -> Result<Vec<SamplePath>> {
    paths.iter().map(|w| w.add(b)).collect()
}

/// `n` i.i.d. Gaussian points `mean + sd·Z`, member `i` drawn from its own stream.
pub fn gaussian_points(seed: u64, dim: usize, n: usize, mean: &[f64], sd: f64) -> Result<PointCloud> {
    if mean.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: mean.len() });
    }
    let mut points = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut rng = member_rng(seed, i as u64);
        for m in mean {
            points.push(m + sd * gaussian(&mut rng));
        }
    }
    PointCloud::new(dim, points)
}

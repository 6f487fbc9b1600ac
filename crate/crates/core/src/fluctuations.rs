//! Fluctuations around the mean-field limit: the linearization `F'` of the
//! solution map, the CLT mean and variance of cylinder functionals, Monte Carlo
//! samples of `Y^N`, the modified LLN statistic and propagation-of-chaos sweeps.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::drift::Drift;
use crate::error::{Error, Result};
use crate::noise::{derive_seed, generate, member_rng, NoiseConfig};
use crate::paths::{norm, InputEnsemble, PathEnsemble, PointCloud, TimeGrid};
use crate::solver::{particle_solve, SolverConfig};
use crate::transport::wasserstein_paths;

/// Time-homogeneous drift with the derivatives needed for the linearization.
/// All matrices are `d x d`, row-major.
pub trait CltDrift: Drift {
    /// `d_x b(x, mu)`.
    fn dx(&self, x: &[f64], cloud: &PointCloud, out: &mut [f64]);

    /// Linear functional derivative `d_mu b(x, mu)(y)`.
    fn dmu(&self, x: &[f64], y: &[f64], cloud: &PointCloud, out: &mut [f64]);

    /// `d_y d_mu b(x, mu)(y)`.
    fn dydmu(&self, x: &[f64], y: &[f64], cloud: &PointCloud, out: &mut [f64]);

    /// Uniform bound on `b` and its derivatives, when one exists.
    fn clt_bound(&self) -> Option<f64> {
        None
    }

    /// `d_y d_mu b` when it does not depend on `(x, y, mu)`.
    fn dydmu_constant(&self) -> Option<Vec<f64>> {
        None
    }
}

fn identity_scaled(d: usize, s: f64, out: &mut [f64]) {
    out.fill(0.0);
    for c in 0..d {
        out[c * d + c] = s;
    }
}

/// `b(x, mu) = alpha (mean(mu) - x)`, with `d_mu b(x, mu)(y) = alpha y`.
#[derive(Debug, Clone)]
pub struct MeanFieldOu {
    pub alpha: f64,
    pub dim: usize,
}

impl Drift for MeanFieldOu {
    fn name(&self) -> &str {
        "mean_field_ou"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lipschitz(&self) -> f64 {
        2.0 * self.alpha.abs()
    }
    fn eval(&self, _t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        let m = cloud.mean();
        for c in 0..self.dim {
            out[c] = self.alpha * (m[c] - x[c]);
        }
        Ok(())
    }
    fn eval_batch(&self, _t: f64, xs: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        let m = cloud.mean();
        for (o, x) in out.chunks_mut(self.dim).zip(xs.chunks(self.dim)) {
            for c in 0..self.dim {
                o[c] = self.alpha * (m[c] - x[c]);
            }
        }
        Ok(())
    }
}

impl CltDrift for MeanFieldOu {
    fn dx(&self, _x: &[f64], _cloud: &PointCloud, out: &mut [f64]) {
        identity_scaled(self.dim, -self.alpha, out);
    }
    fn dmu(&self, _x: &[f64], y: &[f64], _cloud: &PointCloud, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(y) {
            *o = self.alpha * v;
        }
    }
    fn dydmu(&self, _x: &[f64], _y: &[f64], _cloud: &PointCloud, out: &mut [f64]) {
        identity_scaled(self.dim, self.alpha, out);
    }
    fn dydmu_constant(&self) -> Option<Vec<f64>> {
        let mut m = vec![0.0; self.dim * self.dim];
        identity_scaled(self.dim, self.alpha, &mut m);
        Some(m)
    }
}

/// `b(x, mu) = (1/N) sum_k kappa sin(y_k - x)` coordinatewise.
#[derive(Debug, Clone)]
pub struct SineInteraction {
    pub kappa: f64,
    pub dim: usize,
}

impl Drift for SineInteraction {
    fn name(&self) -> &str {
        "sine_interaction"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lipschitz(&self) -> f64 {
        3.0 * self.kappa.abs() * (self.dim as f64).sqrt()
    }
    fn bound(&self) -> Option<f64> {
        Some(self.kappa.abs() * (self.dim as f64).sqrt())
    }
    fn eval(&self, _t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        for y in cloud.iter() {
            for c in 0..self.dim {
                out[c] += self.kappa * (y[c] - x[c]).sin();
            }
        }
        let n = cloud.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(())
    }
}

impl CltDrift for SineInteraction {
    fn dx(&self, x: &[f64], cloud: &PointCloud, out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for y in cloud.iter() {
            for c in 0..d {
                out[c * d + c] -= self.kappa * (y[c] - x[c]).cos();
            }
        }
        let n = cloud.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    fn dmu(&self, x: &[f64], y: &[f64], _cloud: &PointCloud, out: &mut [f64]) {
        for c in 0..self.dim {
            out[c] = self.kappa * (y[c] - x[c]).sin();
        }
    }
    fn dydmu(&self, x: &[f64], y: &[f64], _cloud: &PointCloud, out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for c in 0..d {
            out[c * d + c] = self.kappa * (y[c] - x[c]).cos();
        }
    }
    fn clt_bound(&self) -> Option<f64> {
        Some(self.kappa.abs() * (self.dim as f64).sqrt())
    }
}

/// One-dimensional `b(x, mu) = tanh(mean(mu)) - x`; nonlinear in the measure.
#[derive(Debug, Clone)]
pub struct TanhMeanField;

fn sech2(m: f64) -> f64 {
    1.0 - m.tanh().powi(2)
}

impl Drift for TanhMeanField {
    fn name(&self) -> &str {
        "tanh_mean_field"
    }
    fn dim(&self) -> usize {
        1
    }
    fn lipschitz(&self) -> f64 {
        2.0
    }
    fn eval(&self, _t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        out[0] = cloud.mean()[0].tanh() - x[0];
        Ok(())
    }
}

impl CltDrift for TanhMeanField {
    fn dx(&self, _x: &[f64], _cloud: &PointCloud, out: &mut [f64]) {
        out[0] = -1.0;
    }
    fn dmu(&self, _x: &[f64], y: &[f64], cloud: &PointCloud, out: &mut [f64]) {
        out[0] = sech2(cloud.mean()[0]) * y[0];
    }
    fn dydmu(&self, _x: &[f64], _y: &[f64], cloud: &PointCloud, out: &mut [f64]) {
        out[0] = sech2(cloud.mean()[0]);
    }
}

/// `phi(gamma) = g(gamma(T))` with gradient of `g`.
#[derive(Clone)]
pub struct CylinderTestFunction {
    pub name: String,
    pub g: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub grad_g: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl std::fmt::Debug for CylinderTestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylinderTestFunction").field("name", &self.name).finish()
    }
}

impl CylinderTestFunction {
    /// `g(x) = a . x`.
    pub fn linear(a: Vec<f64>) -> Self {
        let a2 = a.clone();
        Self {
            name: "linear".into(),
            g: Arc::new(move |x| x.iter().zip(&a).map(|(u, v)| u * v).sum()),
            grad_g: Arc::new(move |_x, out| out.copy_from_slice(&a2)),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            name: "constant".into(),
            g: Arc::new(move |_| c),
            grad_g: Arc::new(|_x, out| out.fill(0.0)),
        }
    }

    /// `g(x) = sum_c sin(x_c)`.
    pub fn sine() -> Self {
        Self {
            name: "sine".into(),
            g: Arc::new(|x| x.iter().map(|v| v.sin()).sum()),
            grad_g: Arc::new(|x, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v.cos();
                }
            }),
        }
    }

    /// Largest relative mismatch between `grad_g` and central differences at `x`.
    pub fn gradient_error(&self, x: &[f64], eps: f64) -> f64 {
        let d = x.len();
        let mut grad = vec![0.0; d];
        (self.grad_g)(x, &mut grad);
        let mut worst: f64 = 0.0;
        let mut xp = x.to_vec();
        for c in 0..d {
            xp[c] = x[c] + eps;
            let up = (self.g)(&xp);
            xp[c] = x[c] - eps;
            let down = (self.g)(&xp);
            xp[c] = x[c];
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - grad[c]).abs() / grad[c].abs().max(1.0));
        }
        worst
    }
}

/// Time slices of the linearization `F'[i][j]` (each a `d`-vector).
#[derive(Debug, Clone)]
pub struct FPrimeSolution {
    pub n: usize,
    pub dim: usize,
    /// `(node, values)` with `values[((i * n) + j) * d + c]`, for each recorded node.
    pub recorded: Vec<(usize, Vec<f64>)>,
    /// Slice at the final node.
    pub terminal: Vec<f64>,
    /// Largest entry norm `|F'[i][j](t)|` over all nodes.
    pub max_norm: f64,
    /// Largest norm of `d_x b`, `d_mu b`, `d_y d_mu b` met along the trajectory.
    pub effective_bound: f64,
}

impl FPrimeSolution {
    pub fn entry(values: &[f64], n: usize, d: usize, i: usize, j: usize) -> &[f64] {
        &values[(i * n + j) * d..(i * n + j + 1) * d]
    }

    /// Growth bound `e^{2KT} K T`.
    pub fn gronwall_bound(k: f64, horizon: f64) -> f64 {
        (2.0 * k * horizon).exp() * k * horizon
    }
}

fn mat_vec_add(m: &[f64], v: &[f64], out: &mut [f64], scale: f64) {
    let d = v.len();
    for r in 0..d {
        let mut acc = 0.0;
        for c in 0..d {
            acc += m[r * d + c] * v[c];
        }
        out[r] += scale * acc;
    }
}

fn frob(m: &[f64]) -> f64 {
    norm(m)
}

/// Euler solve of the linear system for `F'` along the trajectory `x`,
/// starting from zero. Only the current slice is kept in memory, plus the
/// slices at `record` nodes.
pub fn solve_fprime(model: &dyn CltDrift, x: &PathEnsemble, record: &[usize]) -> Result<FPrimeSolution> {
    let grid = *x.grid();
    let n = x.len();
    let d = x.dim();
    if model.dim() != d {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: d });
    }
    for &r in record {
        grid.check_node(r)?;
    }
    let h = grid.step();
    let mut cur = vec![0.0; n * n * d];
    let mut next = vec![0.0; n * n * d];
    let mut recorded = Vec::new();
    if record.contains(&0) {
        recorded.push((0, cur.clone()));
    }
    let constant = model.dydmu_constant();
    let mut max_norm: f64 = 0.0;
    let mut effective: f64 = 0.0;

    for step in 0..grid.n_steps() {
        let cloud = x.marginal_at(step)?;
        // per-row data
        let mut dx_all = vec![0.0; n * d * d];
        for i in 0..n {
            model.dx(cloud.point(i), &cloud, &mut dx_all[i * d * d..(i + 1) * d * d]);
        }
        effective = dx_all.chunks(d * d).map(frob).fold(effective, f64::max);
        // column means of the current slice, for the constant coupling case
        let col_mean: Option<Vec<f64>> = constant.as_ref().map(|_| {
            let mut m = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    for c in 0..d {
                        m[j * d + c] += cur[(i * n + j) * d + c];
                    }
                }
            }
            m.iter_mut().for_each(|v| *v /= n as f64);
            m
        });
        if let Some(k) = &constant {
            effective = effective.max(frob(k));
        }

        let row_stats: Vec<(f64, f64)> = next
            .par_chunks_mut(n * d)
            .enumerate()
            .map(|(i, row)| {
                let xi = cloud.point(i);
                let dx_i = &dx_all[i * d * d..(i + 1) * d * d];
                let mut forcing = vec![0.0; d];
                let mut mat = vec![0.0; d * d];
                let mut coupling = vec![0.0; d];
                let mut local_bound: f64 = 0.0;
                let mut local_norm: f64 = 0.0;
                for j in 0..n {
                    let idx = (i * n + j) * d;
                    let f = &cur[idx..idx + d];
                    let out = &mut row[j * d..(j + 1) * d];
                    out.copy_from_slice(f);
                    mat_vec_add(dx_i, f, out, h);
                    match (&constant, &col_mean) {
                        (Some(k), Some(cm)) => mat_vec_add(k, &cm[j * d..(j + 1) * d], out, h),
                        _ => {
                            coupling.fill(0.0);
                            for kk in 0..n {
                                model.dydmu(xi, cloud.point(kk), &cloud, &mut mat);
                                local_bound = local_bound.max(frob(&mat));
                                let fk = &cur[(kk * n + j) * d..(kk * n + j + 1) * d];
                                mat_vec_add(&mat, fk, &mut coupling, 1.0);
                            }
                            for c in 0..d {
                                out[c] += h * coupling[c] / n as f64;
                            }
                        }
                    }
                    model.dmu(xi, cloud.point(j), &cloud, &mut forcing);
                    local_bound = local_bound.max(norm(&forcing));
                    for c in 0..d {
                        out[c] += h * forcing[c];
                    }
                    local_norm = local_norm.max(norm(out));
                }
                (local_bound, local_norm)
            })
            .collect();
        for (b, m) in row_stats {
            effective = effective.max(b);
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("F' at node {}", step + 1)));
            }
            max_norm = max_norm.max(m);
        }
        std::mem::swap(&mut cur, &mut next);
        if record.contains(&(step + 1)) {
            recorded.push((step + 1, cur.clone()));
        }
    }
    Ok(FPrimeSolution { n, dim: d, recorded, terminal: cur, max_norm, effective_bound: effective })
}

/// CLT mean/variance and Monte Carlo samples of `Y^N`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub m: Option<f64>,
    pub sigma2: Option<f64>,
    pub y_samples: Vec<f64>,
    pub n: usize,
    pub replicas: usize,
    pub reference_m: Option<usize>,
    /// Reference estimate of the limit value of the functional.
    pub reference_value: Option<f64>,
    pub seed: u64,
}

/// Zero initial conditions paired with `drivers`.
pub fn from_origin(drivers: PathEnsemble) -> Result<InputEnsemble> {
    let d = drivers.dim();
    InputEnsemble::with_common_start(&vec![0.0; d], drivers)
}

/// The bracket `g(X_i(T)) + (1/N) sum_j grad g(X_j(T)) . F'[j][i](T)` per member.
pub fn clt_brackets(x: &PathEnsemble, fprime: &FPrimeSolution, phi: &CylinderTestFunction) -> Vec<f64> {
    let n = x.len();
    let d = x.dim();
    let last = x.grid().n_steps();
    let grads: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut g = vec![0.0; d];
            (phi.grad_g)(x.member(j).at(last), &mut g);
            g
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut corr = 0.0;
            for (j, g) in grads.iter().enumerate() {
                let f = FPrimeSolution::entry(&fprime.terminal, n, d, j, i);
                corr += g.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
            (phi.g)(x.member(i).at(last)) + corr / n as f64
        })
        .collect()
}

/// CLT mean `m` and variance `sigma^2` from the empirical measure of the
/// fixed point driven by `drivers` from the origin. Also returns `F'`.
pub fn clt_variance(
    model: &dyn CltDrift,
    phi: &CylinderTestFunction,
    drivers: &PathEnsemble,
    cfg: &SolverConfig,
) -> Result<(FluctuationReport, FPrimeSolution)> {
    let x = particle_solve(model, &from_origin(drivers.clone())?, cfg)?;
    let fprime = solve_fprime(model, &x, &[])?;
    let brackets = clt_brackets(&x, &fprime, phi);
    let n = brackets.len() as f64;
    let m = brackets.iter().sum::<f64>() / n;
    let sigma2 = brackets.iter().map(|b| (b - m).powi(2)).sum::<f64>() / n;
    Ok((
        FluctuationReport { m: Some(m), sigma2: Some(sigma2), n: drivers.len(), ..Default::default() },
        fprime,
    ))
}

/// Mean of `phi` over the fixed point driven from the origin by `n` members of `noise`.
pub fn functional_mean(
    model: &dyn Drift,
    phi: &CylinderTestFunction,
    noise: &NoiseConfig,
    grid: &TimeGrid,
    n: usize,
    cfg: &SolverConfig,
) -> Result<f64> {
    let drivers = generate(noise, grid, n)?;
    let x = particle_solve(model, &from_origin(drivers)?, cfg)?;
    let last = grid.n_steps();
    Ok(x.iter().map(|p| (phi.g)(p.at(last))).sum::<f64>() / n as f64)
}

/// Samples of `Y^N = sqrt(N) (mean_i phi(X_i) - reference)` over independent
/// replicas. The reference uses seed `derive_seed(seed, 0)` and replica `r`
/// uses `derive_seed(seed, r + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_fluctuations(
    model: &dyn Drift,
    phi: &CylinderTestFunction,
    n: usize,
    replicas: usize,
    reference_m: usize,
    noise: &NoiseConfig,
    grid: &TimeGrid,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<FluctuationReport> {
    if n == 0 || replicas == 0 {
        return Err(Error::InvalidParameter("N and replicas must be positive".into()));
    }
    let reference = functional_mean(model, phi, &noise.with_seed(derive_seed(seed, 0)), grid, reference_m, cfg)?;
    let samples: Vec<Result<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let cfg_r = noise.with_seed(derive_seed(seed, r as u64 + 1));
            functional_mean(model, phi, &cfg_r, grid, n, cfg).map(|m| (n as f64).sqrt() * (m - reference))
        })
        .collect();
    let mut y = Vec::with_capacity(replicas);
    for (r, s) in samples.into_iter().enumerate() {
        match s {
            Ok(v) => y.push(v),
            Err(e) => return Err(Error::Malformed(format!("replica {r} failed: {e}"))),
        }
    }
    Ok(FluctuationReport {
        y_samples: y,
        n,
        replicas,
        reference_m: Some(reference_m),
        reference_value: Some(reference),
        seed,
        ..Default::default()
    })
}

pub fn sample_mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against the normal law with the sample
/// mean and standard deviation.
pub fn ks_normal_fit(samples: &[f64]) -> Result<KsResult> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("KS test needs at least two samples".into()));
    }
    let (mean, var) = sample_mean_var(samples);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidParameter("KS test needs a nondegenerate sample".into()));
    }
    let normal = Normal::new(mean, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut stat: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = normal.cdf(*x);
        stat = stat.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sqrt_n = n.sqrt();
    let p_value = kolmogorov_sf((sqrt_n + 0.12 + 0.11 / sqrt_n) * stat);
    Ok(KsResult { statistic: stat, p_value, mean, sd })
}

/// `S^N = (1/N) sum_{i<N} X_i Y_{i,N}` for each `N`, with `row(N)` supplying
/// the `N` values `Y_{., N}`.
pub fn modified_lln_stat_with(
    x: &[f64],
    n_list: &[usize],
    mut row: impl FnMut(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    n_list
        .iter()
        .map(|&n| {
            if n == 0 || n > x.len() {
                return Err(Error::SizeMismatch { left: x.len(), right: n });
            }
            let y = row(n);
            if y.len() < n {
                return Err(Error::SizeMismatch { left: n, right: y.len() });
            }
            Ok(x[..n].iter().zip(&y[..n]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        })
        .collect()
}

/// [`modified_lln_stat_with`] over explicit rows, one per entry of `n_list`.
pub fn modified_lln_stat(x: &[f64], y_rows: &[Vec<f64>], n_list: &[usize]) -> Result<Vec<f64>> {
    if y_rows.len() != n_list.len() {
        return Err(Error::SizeMismatch { left: n_list.len(), right: y_rows.len() });
    }
    let mut k = 0;
    modified_lln_stat_with(x, n_list, |_| {
        k += 1;
        y_rows[k - 1].clone()
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub mean_distance: f64,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `ln(mean distance)` against `ln N`.
    pub slope: f64,
    pub reference_m: usize,
    pub repeats: usize,
}

impl SweepTable {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_distance < w[0].mean_distance)
    }
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Distances between size-`N` outputs and size-`N` subsamples of one size-`M`
/// reference, averaged over repeats.
///
/// `runner(n, seed)` must return an ensemble of `n` members; the reference is
/// `runner(reference_m, derive_seed(seed, 0))` and repeat `r` uses
/// `derive_seed(seed, r + 1)` for every `N`. The reference subsample for repeat
/// `r` is the first `N` entries of a fixed random permutation.
pub fn convergence_sweep_with(
    runner: impl Fn(usize, u64) -> Result<PathEnsemble> + Sync,
    metric: impl Fn(&PathEnsemble, &PathEnsemble) -> Result<f64> + Sync,
    n_list: &[usize],
    reference_m: usize,
    repeats: usize,
    seed: u64,
) -> Result<SweepTable> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("N list must be nonempty and strictly ascending".into()));
    }
    let n_max = *n_list.last().expect("nonempty");
    if reference_m < n_max {
        return Err(Error::InvalidParameter(format!(
            "reference size {reference_m} is smaller than the largest N {n_max}"
        )));
    }
    if repeats == 0 {
        return Err(Error::InvalidParameter("at least one repeat is required".into()));
    }
    let reference = runner(reference_m, derive_seed(seed, 0))?;
    if reference.len() != reference_m {
        return Err(Error::SizeMismatch { left: reference_m, right: reference.len() });
    }
    let orders: Vec<Vec<usize>> = (0..repeats)
        .map(|r| {
            let mut order: Vec<usize> = (0..reference_m).collect();
            order.shuffle(&mut member_rng(derive_seed(seed, 0), r as u64 + 1));
            order
        })
        .collect();
    let jobs: Vec<(usize, usize)> = n_list.iter().flat_map(|&n| (0..repeats).map(move |r| (n, r))).collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let out = runner(n, derive_seed(seed, r as u64 + 1))?;
            let sub = reference.select(&orders[r][..n])?;
            metric(&out, &sub)
        })
        .collect();
    let mut rows = Vec::with_capacity(n_list.len());
    let mut it = results.into_iter();
    for &n in n_list {
        let distances: Vec<f64> = (0..repeats).map(|_| it.next().expect("one result per job")).collect::<Result<_>>()?;
        let mean_distance = distances.iter().sum::<f64>() / repeats as f64;
        rows.push(SweepRow { n, mean_distance, distances });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_distance).collect();
    let slope = if rows.len() >= 2 { log_log_slope(&xs, &ys) } else { f64::NAN };
    Ok(SweepTable { rows, slope, reference_m, repeats })
}

/// Particle solves of `drift` on inputs from `input_factory(n, seed)`, compared
/// in path-space `W_p` against a size-`reference_m` reference.
#[allow(clippy::too_many_arguments)]
pub fn convergence_sweep(
    drift: &dyn Drift,
    input_factory: impl Fn(usize, u64) -> Result<InputEnsemble> + Sync,
    n_list: &[usize],
    reference_m: usize,
    p: f64,
    repeats: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<SweepTable> {
    convergence_sweep_with(
        |n, s| particle_solve(drift, &input_factory(n, s)?, cfg),
        |a, b| Ok(wasserstein_paths(a, b, p)?.distance),
        n_list,
        reference_m,
        repeats,
        seed,
    )
}

/// Left side `b(x, mu') - b(x, mu)` and right side
/// `int_0^1 (1/N) sum_k [d_mu b(x, mu_theta)(y'_k) - d_mu b(x, mu_theta)(y_k)] dtheta`
/// of the linear functional derivative identity, with `mu_theta` the mixture
/// realized by point replication and Simpson's rule on `2 * half_steps` panels.
pub fn measure_derivative_identity(
    model: &dyn CltDrift,
    x: &[f64],
    cloud: &PointCloud,
    cloud_prime: &PointCloud,
    half_steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    if cloud.len() != cloud_prime.len() {
        return Err(Error::SizeMismatch { left: cloud.len(), right: cloud_prime.len() });
    }
    let panels = 2 * half_steps.max(1);
    let mut lhs = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    model.eval(0.0, x, cloud_prime, &mut lhs)?;
    model.eval(0.0, x, cloud, &mut tmp)?;
    for (l, t) in lhs.iter_mut().zip(&tmp) {
        *l -= t;
    }
    let mut rhs = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for q in 0..=panels {
        // mixture (1 - q/panels) mu + (q/panels) mu' by replication
        let mut flat = Vec::with_capacity(panels * cloud.as_flat().len());
        for _ in 0..(panels - q) {
            flat.extend_from_slice(cloud.as_flat());
        }
        for _ in 0..q {
            flat.extend_from_slice(cloud_prime.as_flat());
        }
        let mix = PointCloud::from_raw(cloud.dim(), flat);
        let mut integrand = vec![0.0; d];
        for (yp, y) in cloud_prime.iter().zip(cloud.iter()) {
            model.dmu(x, yp, &mix, &mut a);
            model.dmu(x, y, &mix, &mut b);
            for c in 0..d {
                integrand[c] += (a[c] - b[c]) / cloud.len() as f64;
            }
        }
        let w = if q == 0 || q == panels {
            1.0
        } else if q % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for c in 0..d {
            rhs[c] += w * integrand[c] / (3.0 * panels as f64);
        }
    }
    Ok((lhs, rhs))
}

/// Largest relative mismatch of `d_x b` and `d_y d_mu b` against central differences.
pub fn derivative_fd_error(model: &dyn CltDrift, x: &[f64], y: &[f64], cloud: &PointCloud, eps: f64) -> Result<f64> {
    let d = model.dim();
    let mut analytic = vec![0.0; d * d];
    let mut up = vec![0.0; d];
    let mut down = vec![0.0; d];
    let mut worst: f64 = 0.0;
    let mut check = |analytic: &[f64], col: usize, up: &[f64], down: &[f64]| {
        for r in 0..d {
            let fd = (up[r] - down[r]) / (2.0 * eps);
            let an = analytic[r * d + col];
            worst = worst.max((fd - an).abs() / an.abs().max(1.0));
        }
    };
    model.dx(x, cloud, &mut analytic);
    for c in 0..d {
        let mut xp = x.to_vec();
        xp[c] += eps;
        model.eval(0.0, &xp, cloud, &mut up)?;
        xp[c] -= 2.0 * eps;
        model.eval(0.0, &xp, cloud, &mut down)?;
        check(&analytic, c, &up, &down);
    }
    model.dydmu(x, y, cloud, &mut analytic);
    for c in 0..d {
        let mut yp = y.to_vec();
        yp[c] += eps;
        model.dmu(x, &yp, cloud, &mut up);
        yp[c] -= 2.0 * eps;
        model.dmu(x, &yp, cloud, &mut down);
        check(&analytic, c, &up, &down);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{brownian_paths, NoiseConfig};
    use crate::paths::SamplePath;
    use rand::Rng;

    fn drivers(n: usize, steps: usize, seed: u64) -> PathEnsemble {
        let g = TimeGrid::new(1.0, steps).unwrap();
        PathEnsemble::new(brownian_paths(&NoiseConfig::brownian(1, 1.0, seed), &g, n).unwrap()).unwrap()
    }

    /// `d_mu b = 0` but nonzero `d_x b`.
    struct Decay;

    impl Drift for Decay {
        fn name(&self) -> &str {
            "decay"
        }
        fn dim(&self) -> usize {
            1
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn eval(&self, _t: f64, x: &[f64], _c: &PointCloud, out: &mut [f64]) -> Result<()> {
            out[0] = -x[0];
            Ok(())
        }
    }

    impl CltDrift for Decay {
        fn dx(&self, _x: &[f64], _c: &PointCloud, out: &mut [f64]) {
            out[0] = -1.0;
        }
        fn dmu(&self, _x: &[f64], _y: &[f64], _c: &PointCloud, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn dydmu(&self, _x: &[f64], _y: &[f64], _c: &PointCloud, out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    /// Only the forcing term: `b = mean(sin(y))`, so `d_x b = 0`, `d_y d_mu b`
    /// is not needed when `cos` is replaced by zero below.
    struct ForcingOnly;

    impl Drift for ForcingOnly {
        fn name(&self) -> &str {
            "forcing"
        }
        fn dim(&self) -> usize {
            1
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
        fn eval(&self, _t: f64, _x: &[f64], c: &PointCloud, out: &mut [f64]) -> Result<()> {
            out[0] = c.iter().map(|y| y[0].sin()).sum::<f64>() / c.len() as f64;
            Ok(())
        }
    }

    impl CltDrift for ForcingOnly {
        fn dx(&self, _x: &[f64], _c: &PointCloud, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn dmu(&self, _x: &[f64], y: &[f64], _c: &PointCloud, out: &mut [f64]) {
            out[0] = y[0].sin();
        }
        fn dydmu(&self, _x: &[f64], _y: &[f64], _c: &PointCloud, out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    #[test]
    fn fprime_vanishes_without_measure_dependence() {
        let w = drivers(10, 20, 1);
        let x = particle_solve(&Decay, &from_origin(w).unwrap(), &SolverConfig::default()).unwrap();
        let f = solve_fprime(&Decay, &x, &[]).unwrap();
        assert!(f.terminal.iter().all(|&v| v == 0.0));
        assert_eq!(f.max_norm, 0.0);
    }

    #[test]
    fn fprime_plain_quadrature() {
        let w = drivers(6, 15, 2);
        let x = particle_solve(&ForcingOnly, &from_origin(w).unwrap(), &SolverConfig::default()).unwrap();
        let f = solve_fprime(&ForcingOnly, &x, &[7]).unwrap();
        let h = x.grid().step();
        for i in 0..6 {
            for j in 0..6 {
                let full: f64 = (0..15).map(|l| x.member(j).at(l)[0].sin() * h).sum();
                let part: f64 = (0..7).map(|l| x.member(j).at(l)[0].sin() * h).sum();
                assert!((FPrimeSolution::entry(&f.terminal, 6, 1, i, j)[0] - full).abs() < 1e-13);
                assert!((FPrimeSolution::entry(&f.recorded[0].1, 6, 1, i, j)[0] - part).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fprime_ou_matches_matrix_exponential() {
        // with zero drivers X stays at the origin except for the forcing alpha*y,
        // so use a frozen deterministic trajectory instead: X_j(t) = c_j
        let n = 4;
        let alpha = 0.7;
        let g = TimeGrid::new(1.0, 4000).unwrap();
        let c = [0.3, -1.2, 0.8, 2.0];
        let x = PathEnsemble::new(c.iter().map(|&v| SamplePath::constant(g, &[v])).collect()).unwrap();
        let model = MeanFieldOu { alpha, dim: 1 };
        let f = solve_fprime(&model, &x, &[]).unwrap();
        // F' = A F' + forcing with A = alpha(-I + J/N) acting on columns, forcing F[i][j] = alpha c_j
        let a = nalgebra::DMatrix::from_fn(n, n, |r, k| alpha * ((1.0 / n as f64) - if r == k { 1.0 } else { 0.0 }));
        // augmented exponential for F(T) = int_0^T e^{A s} ds * forcing
        let mut aug = nalgebra::DMatrix::zeros(2 * n, 2 * n);
        aug.view_mut((0, 0), (n, n)).copy_from(&a);
        for k in 0..n {
            aug[(k, n + k)] = 1.0;
        }
        let e = aug.exp();
        let integral = e.view((0, n), (n, n)).into_owned();
        for j in 0..n {
            let forcing = nalgebra::DVector::from_element(n, alpha * c[j]);
            let col = &integral * forcing;
            for i in 0..n {
                let got = FPrimeSolution::entry(&f.terminal, n, 1, i, j)[0];
                assert!((got - col[i]).abs() < 5e-4, "{i},{j}: {got} vs {}", col[i]);
            }
        }
    }

    #[test]
    fn constant_coupling_fast_path_matches_general_path() {
        struct Slow(MeanFieldOu);
        impl Drift for Slow {
            fn name(&self) -> &str {
                "slow"
            }
            fn dim(&self) -> usize {
                1
            }
            fn lipschitz(&self) -> f64 {
                self.0.lipschitz()
            }
            fn eval(&self, t: f64, x: &[f64], c: &PointCloud, out: &mut [f64]) -> Result<()> {
                self.0.eval(t, x, c, out)
            }
        }
        impl CltDrift for Slow {
            fn dx(&self, x: &[f64], c: &PointCloud, out: &mut [f64]) {
                self.0.dx(x, c, out)
            }
            fn dmu(&self, x: &[f64], y: &[f64], c: &PointCloud, out: &mut [f64]) {
                self.0.dmu(x, y, c, out)
            }
            fn dydmu(&self, x: &[f64], y: &[f64], c: &PointCloud, out: &mut [f64]) {
                self.0.dydmu(x, y, c, out)
            }
        }
        let ou = MeanFieldOu { alpha: 1.3, dim: 1 };
        let w = drivers(12, 30, 5);
        let x = particle_solve(&ou, &from_origin(w).unwrap(), &SolverConfig::default()).unwrap();
        let fast = solve_fprime(&ou, &x, &[]).unwrap();
        let slow = solve_fprime(&Slow(ou.clone()), &x, &[]).unwrap();
        for (a, b) in fast.terminal.iter().zip(&slow.terminal) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fprime_respects_gronwall_bound() {
        for kappa in [0.5, 1.5] {
            let model = SineInteraction { kappa, dim: 1 };
            let w = drivers(24, 40, 6);
            let x = particle_solve(&model, &from_origin(w).unwrap(), &SolverConfig::default()).unwrap();
            let f = solve_fprime(&model, &x, &[]).unwrap();
            let k = model.clt_bound().unwrap();
            assert!(f.effective_bound <= k + 1e-12);
            assert!(f.max_norm <= FPrimeSolution::gronwall_bound(k, 1.0));
        }
    }

    #[test]
    fn clt_variance_examples() {
        let w = drivers(50, 20, 7);
        let phi = CylinderTestFunction::sine();
        let (rep, _) = clt_variance(&Decay, &phi, &w, &SolverConfig::default()).unwrap();
        let x = particle_solve(&Decay, &from_origin(w.clone()).unwrap(), &SolverConfig::default()).unwrap();
        let vals: Vec<f64> = x.iter().map(|p| p.at(20)[0].sin()).collect();
        let m = vals.iter().sum::<f64>() / 50.0;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 50.0;
        assert!((rep.sigma2.unwrap() - v).abs() < 1e-14);

        let (rep, _) = clt_variance(&MeanFieldOu { alpha: 1.0, dim: 1 }, &CylinderTestFunction::constant(2.0), &w, &SolverConfig::default()).unwrap();
        assert_eq!(rep.sigma2.unwrap(), 0.0);
    }

    #[test]
    fn clt_moments_are_permutation_invariant() {
        let w = drivers(30, 20, 8);
        let model = SineInteraction { kappa: 1.0, dim: 1 };
        let phi = CylinderTestFunction::sine();
        let (a, _) = clt_variance(&model, &phi, &w, &SolverConfig::default()).unwrap();
        let order: Vec<usize> = (0..30).rev().collect();
        let (b, _) = clt_variance(&model, &phi, &w.permuted(&order).unwrap(), &SolverConfig::default()).unwrap();
        assert!((a.sigma2.unwrap() - b.sigma2.unwrap()).abs() < 1e-12);
        assert!((a.m.unwrap() - b.m.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_constant_functional() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let rep = monte_carlo_fluctuations(
            &MeanFieldOu { alpha: 1.0, dim: 1 },
            &CylinderTestFunction::constant(1.5),
            16,
            20,
            128,
            &NoiseConfig::brownian(1, 1.0, 0),
            &g,
            3,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.y_samples.len(), 20);
        assert!(rep.y_samples.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn monte_carlo_classical_clt() {
        // no measure dependence: Var Y -> Var phi(X)
        let g = TimeGrid::new(1.0, 10).unwrap();
        let phi = CylinderTestFunction::sine();
        let noise = NoiseConfig::brownian(1, 1.0, 0);
        let rep = monte_carlo_fluctuations(&Decay, &phi, 64, 1500, 8192, &noise, &g, 17, &SolverConfig::default()).unwrap();
        let (_, var_y) = sample_mean_var(&rep.y_samples);
        let w = generate(&noise.with_seed(99), &g, 20_000).unwrap();
        let x = particle_solve(&Decay, &from_origin(w).unwrap(), &SolverConfig::default()).unwrap();
        let vals: Vec<f64> = x.iter().map(|p| (phi.g)(p.at(10))).collect();
        let (_, var_phi) = sample_mean_var(&vals);
        // the reference bias adds N/M of variance
        let expected = var_phi * (1.0 + 64.0 / 8192.0);
        assert!((var_y / expected - 1.0).abs() < 0.15, "{var_y} vs {expected}");
    }

    #[test]
    fn ks_accepts_normal_and_rejects_uniform() {
        let mut rng = member_rng(5, 0);
        let normal: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * 2.0 + 1.0).collect();
        let r = ks_normal_fit(&normal).unwrap();
        assert!(r.p_value > 0.01, "{r:?}");
        let skewed: Vec<f64> = (0..2000).map(|_| rng.random::<f64>().powi(4)).collect();
        assert!(ks_normal_fit(&skewed).unwrap().p_value < 0.01);
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
    }

    #[test]
    fn lln_examples() {
        let x: Vec<f64> = (0..100).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let zeros = vec![0.0; 100];
        let s = modified_lln_stat(&zeros, &[vec![1.0; 10], vec![2.0; 50]], &[10, 50]).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        let s = modified_lln_stat_with(&x, &[30, 100], |n| vec![1.0; n]).unwrap();
        assert!((s[0] - x[..30].iter().sum::<f64>() / 30.0).abs() < 1e-15);
        assert!((s[1] - x.iter().sum::<f64>() / 100.0).abs() < 1e-15);
        assert!(modified_lln_stat(&x, &[vec![1.0; 5]], &[10]).is_err());
        assert!(modified_lln_stat_with(&x, &[200], |n| vec![1.0; n]).is_err());
    }

    #[test]
    fn sweep_rate_without_drift() {
        // one-step paths from the origin: W_1 between empirical laws of N(0,1) samples
        let g = TimeGrid::new(1.0, 1).unwrap();
        let zero = crate::drift::ZeroDrift { dim: 1 };
        let table = convergence_sweep(
            &zero,
            |n, s| from_origin(generate(&NoiseConfig::brownian(1, 1.0, s), &g, n)?),
            &[8, 16, 32, 64, 128, 256],
            2048,
            1.0,
            5,
            21,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!((table.slope + 0.5).abs() <= 0.2, "{table:?}");
    }

    #[test]
    fn sweep_with_repeated_atoms_is_flat() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        let path = SamplePath::new(g, 1, vec![0.0, 1.0]).unwrap();
        let other = SamplePath::new(g, 1, vec![0.0, 3.0]).unwrap();
        let table = convergence_sweep_with(
            |n, _| PathEnsemble::new(vec![path.clone(); n]),
            |a, _| Ok(wasserstein_paths(a, &PathEnsemble::new(vec![other.clone(); a.len()])?, 1.0)?.distance),
            &[4, 8, 16],
            64,
            2,
            0,
        )
        .unwrap();
        assert!(table.rows.iter().all(|r| (r.mean_distance - 2.0).abs() < 1e-15));
    }

    #[test]
    fn measure_derivative_identity_holds() {
        let mut rng = member_rng(31, 0);
        let specs: Vec<Box<dyn CltDrift>> = vec![
            Box::new(MeanFieldOu { alpha: 0.8, dim: 1 }),
            Box::new(SineInteraction { kappa: 1.3, dim: 1 }),
            Box::new(TanhMeanField),
        ];
        for model in &specs {
            for _ in 0..20 {
                let pts = |rng: &mut rand_chacha::ChaCha8Rng| {
                    PointCloud::new(1, (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
                };
                let a = pts(&mut rng);
                let b = pts(&mut rng);
                let x = [rng.random_range(-2.0..2.0)];
                let (lhs, rhs) = measure_derivative_identity(model.as_ref(), &x, &a, &b, 4).unwrap();
                assert!((lhs[0] - rhs[0]).abs() < 1e-4, "{}: {lhs:?} vs {rhs:?}", model.name());
                let y = [rng.random_range(-2.0..2.0)];
                assert!(derivative_fd_error(model.as_ref(), &x, &y, &a, 1e-5).unwrap() < 1e-4);
            }
        }
    }

    #[test]
    fn gradient_checks() {
        for phi in [CylinderTestFunction::sine(), CylinderTestFunction::linear(vec![2.0, -1.0])] {
            assert!(phi.gradient_error(&[0.3, 1.1], 1e-6) < 1e-5);
        }
    }
}

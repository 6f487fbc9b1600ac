//! Mean-field drifts `b(t, x, mu)` where `mu` is always an empirical point cloud.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::member_rng;
use crate::paths::{distance, PointCloud};
use crate::transport::wasserstein_cloud;

/// Members per rayon task when a batch is evaluated in parallel.
const BATCH_CHUNK: usize = 256;

pub trait Drift: Send + Sync {
    fn name(&self) -> &str;

    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Dimension of the cloud points the drift reads. Usually `d`; reflected
    /// drifts may read the joint `(X, k)` cloud and report `2d`.
    fn measure_dim(&self) -> usize {
        self.dim()
    }

    /// Declared Lipschitz constant with respect to `|x - x'| + W_1(mu, mu')`.
    fn lipschitz(&self) -> f64;

    /// Declared uniform bound on `|b|`, when one exists.
    fn bound(&self) -> Option<f64> {
        None
    }

    fn eval(&self, t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()>;

    /// Evaluates the drift at every point of `xs` (flat, `d` values each)
    /// against the same cloud. Overrides must agree bit-for-bit with `eval`.
    fn eval_batch(&self, t: f64, xs: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        if xs.len() / d.max(1) > BATCH_CHUNK {
            out.par_chunks_mut(BATCH_CHUNK * d)
                .zip(xs.par_chunks(BATCH_CHUNK * d))
                .try_for_each(|(o, x)| {
                    for (oi, xi) in o.chunks_mut(d).zip(x.chunks(d)) {
                        self.eval(t, xi, cloud, oi)?;
                    }
                    Ok(())
                })
        } else {
            for (oi, xi) in out.chunks_mut(d).zip(xs.chunks(d)) {
                self.eval(t, xi, cloud, oi)?;
            }
            Ok(())
        }
    }
}

pub type DynDrift = Arc<dyn Drift>;

fn check_cloud(cloud: &PointCloud, dim: usize) -> Result<()> {
    if cloud.dim() < dim {
        return Err(Error::DimensionMismatch { expected: dim, got: cloud.dim() });
    }
    if cloud.is_empty() {
        return Err(Error::InvalidParameter("empty measure argument".into()));
    }
    Ok(())
}

/// `b ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroDrift {
    pub dim: usize,
}

impl Drift for ZeroDrift {
    fn name(&self) -> &str {
        "zero"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn bound(&self) -> Option<f64> {
        Some(0.0)
    }
    fn eval(&self, _t: f64, _x: &[f64], _cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// `b ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    pub value: Vec<f64>,
}

impl Drift for ConstantDrift {
    fn name(&self) -> &str {
        "constant"
    }
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn bound(&self) -> Option<f64> {
        Some(crate::paths::norm(&self.value))
    }
    fn eval(&self, _t: f64, _x: &[f64], _cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.value);
        Ok(())
    }
}

/// `b(t, x, mu) = alpha (mean(mu) - x) + beta`.
#[derive(Debug, Clone)]
pub struct MeanReversion {
    pub alpha: f64,
    pub beta: Vec<f64>,
}

pub fn make_mean_reversion(alpha: f64, beta: Vec<f64>) -> Result<MeanReversion> {
    if !alpha.is_finite() || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidParameter("mean reversion parameters must be finite".into()));
    }
    if beta.is_empty() {
        return Err(Error::InvalidParameter("beta fixes the dimension and cannot be empty".into()));
    }
    Ok(MeanReversion { alpha, beta })
}

/// First `d` coordinates of the cloud mean.
fn leading_mean(cloud: &PointCloud, d: usize) -> Vec<f64> {
    let mut m = cloud.mean();
    m.truncate(d);
    m
}

impl MeanReversion {
    #[inline]
    fn apply(&self, mean: &[f64], x: &[f64], out: &mut [f64]) {
        for c in 0..out.len() {
            out[c] = self.alpha * (mean[c] - x[c]) + self.beta[c];
        }
    }
}

impl Drift for MeanReversion {
    fn name(&self) -> &str {
        "mean_reversion"
    }
    fn dim(&self) -> usize {
        self.beta.len()
    }
    fn lipschitz(&self) -> f64 {
        2.0 * self.alpha.abs()
    }
    fn eval(&self, _t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        check_cloud(cloud, self.dim())?;
        self.apply(&leading_mean(cloud, self.dim()), x, out);
        Ok(())
    }
    fn eval_batch(&self, _t: f64, xs: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        check_cloud(cloud, self.dim())?;
        let d = self.dim();
        let mean = leading_mean(cloud, d);
        for (o, x) in out.chunks_mut(d).zip(xs.chunks(d)) {
            self.apply(&mean, x, o);
        }
        Ok(())
    }
}

pub type Kernel = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// `b(t, x, mu) = (1/N) sum_k B(x, y_k)` for a kernel bounded by `C` and
/// `C`-Lipschitz in each argument; declared constant `3C`.
#[derive(Clone)]
pub struct Convolution {
    name: String,
    dim: usize,
    kernel: Arc<Kernel>,
    bound: f64,
    lip: f64,
}

pub fn make_convolution(
    name: impl Into<String>,
    dim: usize,
    kernel: Arc<Kernel>,
    bound: f64,
    lip: f64,
) -> Result<Convolution> {
    if !(bound >= 0.0 && lip >= 0.0) {
        return Err(Error::InvalidParameter("kernel constants must be nonnegative".into()));
    }
    Ok(Convolution { name: name.into(), dim, kernel, bound, lip })
}

impl Convolution {
    /// Larger of the two kernel constants, `C`.
    pub fn kernel_constant(&self) -> f64 {
        self.bound.max(self.lip)
    }
}

impl std::fmt::Debug for Convolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolution")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("bound", &self.bound)
            .field("lip", &self.lip)
            .finish()
    }
}

impl Drift for Convolution {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lipschitz(&self) -> f64 {
        3.0 * self.kernel_constant()
    }
    fn bound(&self) -> Option<f64> {
        Some(self.bound)
    }
    fn eval(&self, _t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        check_cloud(cloud, self.dim)?;
        let d = self.dim;
        out.fill(0.0);
        let mut buf = vec![0.0; d];
        for y in cloud.iter() {
            (self.kernel)(x, &y[..d], &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b;
            }
        }
        let n = cloud.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(())
    }
}

/// `B(x, y) = kappa sin(y - x)` coordinatewise; bounded by `|kappa| sqrt(d)`.
pub fn sine_interaction(kappa: f64, dim: usize) -> Result<Convolution> {
    let kernel: Arc<Kernel> = Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
        for c in 0..out.len() {
            out[c] = kappa * (y[c] - x[c]).sin();
        }
    });
    make_convolution(
        "sine_interaction",
        dim,
        kernel,
        kappa.abs() * (dim as f64).sqrt(),
        kappa.abs(),
    )
}

/// Measure-free linear drift `b(t, x, mu) = -a x`.
#[derive(Debug, Clone)]
pub struct LinearDecay {
    pub rate: f64,
    pub dim: usize,
}

impl Drift for LinearDecay {
    fn name(&self) -> &str {
        "linear_decay"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn lipschitz(&self) -> f64 {
        self.rate.abs()
    }
    fn eval(&self, _t: f64, x: &[f64], _cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -self.rate * xi;
        }
        Ok(())
    }
}

/// Scalar function of one real argument.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Parameters of the particle battery model on the extended state `(x, r)`.
#[derive(Clone)]
pub struct BatteryParams {
    /// Relaxation time as a function of radius.
    pub tau: ScalarFn,
    /// Noise intensity as a function of radius.
    pub sigma_r: ScalarFn,
    /// Lithium chemical potential as a function of mole fraction.
    pub mu_li: ScalarFn,
    /// Time derivative of the state of charge.
    pub q_dot: ScalarFn,
    pub r_min: f64,
    pub r_max: f64,
}

impl std::fmt::Debug for BatteryParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatteryParams")
            .field("r_min", &self.r_min)
            .field("r_max", &self.r_max)
            .finish_non_exhaustive()
    }
}

pub fn particle_volume(r: f64) -> f64 {
    4.0 * PI * r.powi(3) / 3.0
}

impl BatteryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_max >= self.r_min && self.r_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "radius interval [{}, {}] must lie in (0, inf)",
                self.r_min, self.r_max
            )));
        }
        // tau must stay positive on the radius interval
        for k in 0..=32 {
            let r = self.r_min + (self.r_max - self.r_min) * k as f64 / 32.0;
            let tau = (self.tau)(r);
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidParameter(format!("tau({r}) = {tau} is not positive")));
            }
        }
        Ok(())
    }

    pub fn contains_radius(&self, r: f64) -> bool {
        r >= self.r_min && r <= self.r_max
    }
}

/// Battery drift: `(1/tau(r)) (-mu_Li(x) + Lambda(t, nu))` on `x`, zero on `r`.
#[derive(Debug, Clone)]
pub struct BatteryDrift {
    pub params: BatteryParams,
    lip: f64,
}

pub fn make_battery_drift(params: BatteryParams, declared_lipschitz: f64) -> Result<BatteryDrift> {
    params.validate()?;
    Ok(BatteryDrift { params, lip: declared_lipschitz })
}

impl BatteryDrift {
    /// Surface chemical potential of the cloud of `(x, r)` points.
    pub fn lambda(&self, t: f64, cloud: &PointCloud) -> Result<f64> {
        check_cloud(cloud, 2)?;
        let q_dot = (self.params.q_dot)(t);
        let mut num = 0.0;
        let mut den = 0.0;
        for p in cloud.iter() {
            let (x, r) = (p[0], p[1]);
            let v = particle_volume(r);
            let w = v / (self.params.tau)(r);
            num += v * q_dot + (self.params.mu_li)(x) * w;
            den += w;
        }
        if den.abs() < 1e-300 {
            return Err(Error::InvalidParameter(
                "battery potential denominator vanished (degenerate radii)".into(),
            ));
        }
        Ok(num / den)
    }

    #[inline]
    fn apply(&self, lambda: f64, state: &[f64], out: &mut [f64]) {
        let (x, r) = (state[0], state[1]);
        out[0] = (-(self.params.mu_li)(x) + lambda) / (self.params.tau)(r);
        out[1] = 0.0;
    }
}

impl Drift for BatteryDrift {
    fn name(&self) -> &str {
        "battery"
    }
    fn dim(&self) -> usize {
        2
    }
    fn lipschitz(&self) -> f64 {
        self.lip
    }
    fn eval(&self, t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        let lambda = self.lambda(t, cloud)?;
        self.apply(lambda, x, out);
        Ok(())
    }
    fn eval_batch(&self, t: f64, xs: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        let lambda = self.lambda(t, cloud)?;
        for (o, x) in out.chunks_mut(2).zip(xs.chunks(2)) {
            self.apply(lambda, x, o);
        }
        Ok(())
    }
}

/// One random comparison for [`estimate_lipschitz`].
#[derive(Debug, Clone)]
pub struct LipschitzSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub cloud: PointCloud,
    pub cloud_prime: PointCloud,
}

/// Largest observed `|b(t,x,mu) - b(t,x',mu')| / (|x - x'| + W_1(mu, mu'))`,
/// a lower bound for the Lipschitz constant. Samples with a vanishing
/// denominator are skipped.
pub fn estimate_lipschitz(
    drift: &dyn Drift,
    trials: usize,
    seed: u64,
    mut sampler: impl FnMut(&mut ChaCha8Rng) -> LipschitzSample,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidParameter("at least one trial is required".into()));
    }
    let mut rng = member_rng(seed, 0);
    let d = drift.dim();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut best: f64 = 0.0;
    let mut used = 0usize;
    for _ in 0..trials {
        let s = sampler(&mut rng);
        let w1 = wasserstein_cloud(&s.cloud, &s.cloud_prime, 1.0)?.distance;
        let den = distance(&s.x, &s.x_prime) + w1;
        if den <= 0.0 {
            continue;
        }
        drift.eval(s.t, &s.x, &s.cloud, &mut a)?;
        drift.eval(s.t, &s.x_prime, &s.cloud_prime, &mut b)?;
        best = best.max(distance(&a, &b) / den);
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateSample(trials));
    }
    Ok(best)
}

/// Default sampler: uniform points in `[-width, width]^d`, clouds of `n` points,
/// with `x'` and `mu'` either equal to or perturbed from `x` and `mu`.
pub fn uniform_sampler(dim: usize, n: usize, width: f64) -> impl FnMut(&mut ChaCha8Rng) -> LipschitzSample {
    move |rng| {
        let pt = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-width..width)).collect()
        };
        let x = pt(rng);
        let mode = rng.random_range(0..3);
        let x_prime = if mode == 1 { x.clone() } else { pt(rng) };
        let mut flat = Vec::with_capacity(n * dim);
        for _ in 0..n {
            flat.extend(pt(rng));
        }
        let cloud = PointCloud::new(dim, flat.clone()).expect("finite sample");
        let cloud_prime = if mode == 2 {
            cloud.clone()
        } else {
            let scale = rng.random_range(0.0..1.0);
            let moved: Vec<f64> = flat
                .iter()
                .map(|v| v + scale * rng.random_range(-width..width))
                .collect();
            PointCloud::new(dim, moved).expect("finite sample")
        };
        LipschitzSample { t: rng.random_range(0.0..1.0), x, x_prime, cloud, cloud_prime }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud1(v: &[f64]) -> PointCloud {
        PointCloud::new(1, v.to_vec()).unwrap()
    }

    fn eval1(d: &dyn Drift, x: f64, cloud: &PointCloud) -> f64 {
        let mut out = [0.0];
        d.eval(0.0, &[x], cloud, &mut out).unwrap();
        out[0]
    }

    #[test]
    fn mean_reversion_examples() {
        let zero = make_mean_reversion(0.0, vec![0.0]).unwrap();
        assert_eq!(eval1(&zero, 3.0, &cloud1(&[1.0, 5.0])), 0.0);
        let b = make_mean_reversion(2.0, vec![0.7]).unwrap();
        assert_eq!(eval1(&b, 1.3, &cloud1(&[1.3])), 0.7);
        let b = make_mean_reversion(1.0, vec![0.0]).unwrap();
        assert_eq!(eval1(&b, 0.0, &cloud1(&[0.0, 2.0])), 1.0);
        assert_eq!(b.lipschitz(), 2.0);
    }

    #[test]
    fn batch_matches_single_bitwise() {
        let b = make_mean_reversion(0.37, vec![0.1, -0.2]).unwrap();
        let pts: Vec<f64> = (0..40).map(|i| (i as f64 * 0.731).sin()).collect();
        let cloud = PointCloud::new(2, pts.clone()).unwrap();
        let mut batch = vec![0.0; 40];
        b.eval_batch(0.0, &pts, &cloud, &mut batch).unwrap();
        for i in 0..20 {
            let mut one = [0.0; 2];
            b.eval(0.0, &pts[2 * i..2 * i + 2], &cloud, &mut one).unwrap();
            assert_eq!(one[..], batch[2 * i..2 * i + 2]);
        }
    }

    #[test]
    fn convolution_examples() {
        let zero: Arc<Kernel> = Arc::new(|_x: &[f64], _y: &[f64], o: &mut [f64]| o.fill(0.0));
        let b = make_convolution("zero", 1, zero, 0.0, 0.0).unwrap();
        assert_eq!(eval1(&b, 2.0, &cloud1(&[1.0, 3.0])), 0.0);

        let id: Arc<Kernel> = Arc::new(|_x: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0]);
        let b = make_convolution("y", 1, id, 1.0, 1.0).unwrap();
        assert_eq!(eval1(&b, 0.0, &cloud1(&[1.0, 3.0])), 2.0);
        assert_eq!(b.lipschitz(), 3.0);

        let neg: Arc<Kernel> = Arc::new(|x: &[f64], _y: &[f64], o: &mut [f64]| o[0] = -x[0]);
        let b = make_convolution("neg", 1, neg, 1.0, 1.0).unwrap();
        assert_eq!(eval1(&b, 0.4, &cloud1(&[1.0, 3.0])), -0.4);
        assert_eq!(eval1(&b, 0.4, &cloud1(&[-7.0])), -0.4);
    }

    #[test]
    fn convolution_is_linear_in_the_measure() {
        let b = sine_interaction(0.8, 1).unwrap();
        let m1 = cloud1(&[0.1, 0.5, -1.0]);
        let m2 = cloud1(&[2.0, 0.3, 0.9]);
        let merged = m1.merge(&m2).unwrap();
        for x in [-1.0, 0.0, 0.77] {
            let avg = 0.5 * (eval1(&b, x, &m1) + eval1(&b, x, &m2));
            assert!((eval1(&b, x, &merged) - avg).abs() < 1e-14);
        }
    }

    fn battery(q_dot: f64, mu: ScalarFn) -> BatteryDrift {
        make_battery_drift(
            BatteryParams {
                tau: Arc::new(|r| 0.5 + r * r),
                sigma_r: Arc::new(|_| 0.0),
                mu_li: mu,
                q_dot: Arc::new(move |_| q_dot),
                r_min: 0.5,
                r_max: 2.0,
            },
            1.0,
        )
        .unwrap()
    }

    fn battery_eval(b: &BatteryDrift, state: [f64; 2], cloud: &PointCloud) -> [f64; 2] {
        let mut out = [0.0; 2];
        b.eval(0.3, &state, cloud, &mut out).unwrap();
        out
    }

    #[test]
    fn battery_examples() {
        let mu: ScalarFn = Arc::new(|x: f64| (3.0 * x).sin() + x);
        let b = battery(0.0, mu.clone());
        // equal radii, equal mole fractions, no charging
        let cloud = PointCloud::from_points(&[[0.4, 1.0], [0.4, 1.0], [0.4, 1.0]]).unwrap();
        assert!((b.lambda(0.0, &cloud).unwrap() - mu(0.4)).abs() < 1e-14);
        assert!(battery_eval(&b, [0.4, 1.0], &cloud)[0].abs() < 1e-14);

        // one particle tracks the state of charge
        let b = battery(0.25, mu.clone());
        let single = PointCloud::from_points(&[[0.7, 1.5]]).unwrap();
        let tau = 0.5 + 1.5 * 1.5;
        assert!((b.lambda(0.0, &single).unwrap() - (tau * 0.25 + mu(0.7))).abs() < 1e-12);
        let out = battery_eval(&b, [0.7, 1.5], &single);
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert_eq!(out[1], 0.0);

        // constant potential, no charging: zero drift for any cloud
        let b = battery(0.0, Arc::new(|_| 1.3));
        let cloud = PointCloud::from_points(&[[0.1, 0.6], [0.9, 1.9], [0.5, 1.1]]).unwrap();
        for s in cloud.iter() {
            assert!(battery_eval(&b, [s[0], s[1]], &cloud)[0].abs() < 1e-14);
        }
    }

    #[test]
    fn battery_is_permutation_invariant() {
        let b = battery(0.1, Arc::new(|x: f64| x * x));
        let pts = [[0.1, 0.6], [0.9, 1.9], [0.5, 1.1], [0.3, 0.8]];
        let cloud = PointCloud::from_points(&pts).unwrap();
        let rev: Vec<[f64; 2]> = pts.iter().rev().copied().collect();
        let cloud_rev = PointCloud::from_points(&rev).unwrap();
        let l1 = b.lambda(0.0, &cloud).unwrap();
        let l2 = b.lambda(0.0, &cloud_rev).unwrap();
        assert!((l1 - l2).abs() <= 1e-15 * l1.abs().max(1.0));
    }

    #[test]
    fn battery_rejects_bad_radii() {
        let p = BatteryParams {
            tau: Arc::new(|_| 1.0),
            sigma_r: Arc::new(|_| 0.0),
            mu_li: Arc::new(|_| 0.0),
            q_dot: Arc::new(|_| 0.0),
            r_min: 0.0,
            r_max: 1.0,
        };
        assert!(make_battery_drift(p, 1.0).is_err());
    }

    #[test]
    fn lipschitz_estimates() {
        let zero = ZeroDrift { dim: 1 };
        assert_eq!(estimate_lipschitz(&zero, 200, 1, uniform_sampler(1, 5, 2.0)).unwrap(), 0.0);

        let decay = LinearDecay { rate: 1.0, dim: 1 };
        let est = estimate_lipschitz(&decay, 2000, 2, uniform_sampler(1, 5, 2.0)).unwrap();
        assert!(est <= 1.0 + 1e-12 && est > 0.99, "{est}");

        let mr = make_mean_reversion(1.0, vec![0.0]).unwrap();
        let est = estimate_lipschitz(&mr, 2000, 3, uniform_sampler(1, 5, 2.0)).unwrap();
        assert!(est <= mr.lipschitz());
    }

    #[test]
    fn degenerate_samples_are_reported() {
        let zero = ZeroDrift { dim: 1 };
        let sampler = |_: &mut ChaCha8Rng| LipschitzSample {
            t: 0.0,
            x: vec![1.0],
            x_prime: vec![1.0],
            cloud: PointCloud::new(1, vec![0.0]).unwrap(),
            cloud_prime: PointCloud::new(1, vec![0.0]).unwrap(),
        };
        assert!(matches!(
            estimate_lipschitz(&zero, 10, 0, sampler),
            Err(Error::DegenerateSample(10))
        ));
    }
}

//! Frozen-measure solves, the Picard fixed point and the coupled particle system.
//!
//! Every solve uses explicit left-endpoint Euler written in integral form,
//!
//! ```text
//! X(t_j) = zeta + D_j + (W(t_j) - W(t_0)),   D_{j+1} = D_j + b(t_j, X(t_j), mu_j) h,
//! ```
//!
//! so the Picard iterate `m` and the particle solve agree bit-for-bit on the
//! first `m` nodes, and the inverse map is the same quadrature run backwards.

use serde::{Deserialize, Serialize};

use crate::drift::Drift;
use crate::error::{Error, Result};
use crate::noise::add_common;
use crate::paths::{
    sup_distance_unchecked, InputEnsemble, PathEnsemble, PathKind, PointCloud, SamplePath,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Wasserstein order used by distance-based diagnostics.
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_iters")]
    pub max_picard_iters: usize,
}

fn default_p() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_iters() -> usize {
    500
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { p: default_p(), picard_tol: default_tol(), max_picard_iters: default_iters() }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::InvalidParameter(format!("p must be >= 1, got {}", self.p)));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::InvalidParameter("picard_tol must be positive".into()));
        }
        if self.max_picard_iters == 0 {
            return Err(Error::InvalidParameter("max_picard_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Record of a fixed-point iteration. `iterates[0]` is the starting point and
/// `successive_gaps[k]` is the gap between `iterates[k + 1]` and `iterates[k]`.
#[derive(Debug, Clone)]
pub struct PicardTrace<S = PathEnsemble> {
    pub iterates: Vec<S>,
    pub successive_gaps: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

/// Iterates `step` from `initial` until `gap(next, current) <= tol`.
pub fn picard_iterate<S: Clone>(
    initial: S,
    mut step: impl FnMut(&S) -> Result<S>,
    gap: impl Fn(&S, &S) -> f64,
    tol: f64,
    max_iters: usize,
) -> Result<(S, PicardTrace<S>)> {
    let mut iterates = vec![initial];
    let mut gaps = Vec::new();
    for _ in 0..max_iters {
        let current = iterates.last().expect("nonempty");
        let next = step(current)?;
        let g = gap(&next, current);
        gaps.push(g);
        iterates.push(next);
        if g <= tol {
            let result = iterates.last().expect("nonempty").clone();
            let used = gaps.len();
            return Ok((
                result,
                PicardTrace { iterates, successive_gaps: gaps, converged: true, iterations_used: used },
            ));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        last_gap: gaps.last().copied().unwrap_or(f64::INFINITY),
        gaps,
    })
}

/// Largest member-wise uniform distance between two ensembles of equal size;
/// an upper bound for every `W_p` between them.
pub fn synchronous_gap(a: &PathEnsemble, b: &PathEnsemble) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| sup_distance_unchecked(x, y))
        .fold(0.0, f64::max)
}

fn check_drift(drift: &dyn Drift, d: usize) -> Result<()> {
    if drift.dim() != d {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: d });
    }
    Ok(())
}

fn frozen_clouds(drift: &dyn Drift, mu: &PathEnsemble, inputs: &InputEnsemble) -> Result<Vec<PointCloud>> {
    if mu.grid() != inputs.grid() {
        return Err(Error::GridMismatch);
    }
    if mu.dim() != drift.measure_dim() {
        return Err(Error::DimensionMismatch { expected: drift.measure_dim(), got: mu.dim() });
    }
    (0..mu.grid().n_nodes()).map(|j| mu.marginal_at(j)).collect()
}

/// Euler sweep over all members. With `frozen = None` the drift reads the
/// current empirical marginal of the members themselves.
fn euler_sweep(
    drift: &dyn Drift,
    inputs: &InputEnsemble,
    frozen: Option<&[PointCloud]>,
) -> Result<Vec<SamplePath>> {
    let d = inputs.dim();
    check_drift(drift, d)?;
    if frozen.is_none() && drift.measure_dim() != d {
        return Err(Error::DimensionMismatch { expected: drift.measure_dim(), got: d });
    }
    let grid = *inputs.grid();
    let n = inputs.len();
    let h = grid.step();
    let zeta = inputs.initial();
    let drivers = inputs.drivers();

    let mut paths = vec![vec![0.0; grid.n_nodes() * d]; n];
    let mut acc = vec![0.0; n * d];
    let mut xs = vec![0.0; n * d];
    let mut b = vec![0.0; n * d];
    for j in 0..grid.n_nodes() {
        for i in 0..n {
            let w = drivers.member(i);
            let (wj, w0) = (w.at(j), w.at(0));
            let z = zeta.point(i);
            for c in 0..d {
                let x = z[c] + acc[i * d + c] + (wj[c] - w0[c]);
                xs[i * d + c] = x;
                paths[i][j * d + c] = x;
            }
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state at node {j} (t = {})", grid.time(j))));
        }
        if j == grid.n_steps() {
            break;
        }
        let live;
        let cloud = match frozen {
            Some(clouds) => &clouds[j],
            None => {
                live = PointCloud::from_raw(d, xs.clone());
                &live
            }
        };
        drift.eval_batch(grid.time(j), &xs, cloud, &mut b)?;
        for (a, bk) in acc.iter_mut().zip(&b) {
            *a += bk * h;
        }
    }
    Ok(paths.into_iter().map(|v| SamplePath::from_raw(grid, d, v)).collect())
}

/// Solution of the equation with the measure flow frozen to the marginals of `mu`.
pub fn solve_frozen(
    drift: &dyn Drift,
    mu: &PathEnsemble,
    zeta: &[f64],
    w: &SamplePath,
    cfg: &SolverConfig,
) -> Result<SamplePath> {
    cfg.validate()?;
    let inputs = InputEnsemble::new(
        PointCloud::new(w.dim(), zeta.to_vec())?,
        PathEnsemble::new(vec![w.clone()])?,
    )?;
    let clouds = frozen_clouds(drift, mu, &inputs)?;
    Ok(euler_sweep(drift, &inputs, Some(&clouds))?.remove(0))
}

/// Frozen solve of every input pair against `mu`.
pub fn solve_frozen_ensemble(
    drift: &dyn Drift,
    mu: &PathEnsemble,
    inputs: &InputEnsemble,
) -> Result<PathEnsemble> {
    let clouds = frozen_clouds(drift, mu, inputs)?;
    PathEnsemble::with_kind(euler_sweep(drift, inputs, Some(&clouds))?, inputs.drivers().kind())
}

/// `zeta_i + W_i - W_i(0)`, the solution with zero drift.
pub fn zero_drift_transport(inputs: &InputEnsemble) -> Result<PathEnsemble> {
    let d = inputs.dim();
    let members = inputs
        .drivers()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let z = inputs.initial().point(i);
            let w0 = w.at(0);
            let mut v = Vec::with_capacity(w.values().len());
            for node in w.nodes() {
                for c in 0..d {
                    v.push(z[c] + 0.0 + (node[c] - w0[c]));
                }
            }
            SamplePath::from_raw(*w.grid(), d, v)
        })
        .collect();
    PathEnsemble::with_kind(members, inputs.drivers().kind())
}

/// Fixed point of the frozen-solve map started from the zero-drift transport.
pub fn picard_solve(
    drift: &dyn Drift,
    inputs: &InputEnsemble,
    cfg: &SolverConfig,
) -> Result<(PathEnsemble, PicardTrace)> {
    cfg.validate()?;
    check_drift(drift, inputs.dim())?;
    if drift.measure_dim() != inputs.dim() {
        return Err(Error::DimensionMismatch { expected: drift.measure_dim(), got: inputs.dim() });
    }
    picard_iterate(
        zero_drift_transport(inputs)?,
        |mu| solve_frozen_ensemble(drift, mu, inputs),
        synchronous_gap,
        cfg.picard_tol,
        cfg.max_picard_iters,
    )
}

/// The coupled particle system: one Euler sweep feeding the drift the current
/// empirical marginal of all members.
pub fn particle_solve(drift: &dyn Drift, inputs: &InputEnsemble, cfg: &SolverConfig) -> Result<PathEnsemble> {
    cfg.validate()?;
    PathEnsemble::with_kind(euler_sweep(drift, inputs, None)?, inputs.drivers().kind())
}

/// Particle solve for càdlàg drivers; the output is marked càdlàg.
pub fn solve_cadlag(drift: &dyn Drift, inputs: &InputEnsemble, cfg: &SolverConfig) -> Result<PathEnsemble> {
    cfg.validate()?;
    PathEnsemble::with_kind(euler_sweep(drift, inputs, None)?, PathKind::Cadlag)
}

/// Inverse of the frozen solve: recovers `(zeta, W)` from a solution path.
pub fn reconstruct_inputs(
    drift: &dyn Drift,
    mu: &PathEnsemble,
    x: &SamplePath,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SamplePath)> {
    cfg.validate()?;
    if mu.grid() != x.grid() {
        return Err(Error::GridMismatch);
    }
    check_drift(drift, x.dim())?;
    if mu.dim() != drift.measure_dim() {
        return Err(Error::DimensionMismatch { expected: drift.measure_dim(), got: mu.dim() });
    }
    let grid = *x.grid();
    let d = x.dim();
    let h = grid.step();
    let zeta = x.at(0).to_vec();
    let mut acc = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut w = Vec::with_capacity(x.values().len());
    for j in 0..grid.n_nodes() {
        let xj = x.at(j);
        for c in 0..d {
            w.push(xj[c] - zeta[c] - acc[c]);
        }
        if j == grid.n_steps() {
            break;
        }
        drift.eval_batch(grid.time(j), xj, &mu.marginal_at(j)?, &mut b)?;
        for (a, bk) in acc.iter_mut().zip(&b) {
            *a += bk * h;
        }
    }
    Ok((zeta, SamplePath::from_raw(grid, d, w)))
}

/// Particle solve with every driver shifted by the common path `b`.
pub fn common_noise_solve(
    drift: &dyn Drift,
    inputs: &InputEnsemble,
    b: &SamplePath,
    cfg: &SolverConfig,
) -> Result<PathEnsemble> {
    let shifted = add_common(inputs.drivers().members(), b)?;
    let kind = inputs.drivers().kind();
    let inputs = InputEnsemble::new(inputs.initial().clone(), PathEnsemble::with_kind(shifted, kind)?)?;
    particle_solve(drift, &inputs, cfg)
}

/// Wraps a drift on `R^{d+n}` and zeroes its last `n` output coordinates.
struct ZeroTail<'a> {
    inner: &'a dyn Drift,
    head: usize,
}

impl Drift for ZeroTail<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn measure_dim(&self) -> usize {
        self.inner.measure_dim()
    }
    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }
    fn bound(&self) -> Option<f64> {
        self.inner.bound()
    }
    fn eval(&self, t: f64, x: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        self.inner.eval(t, x, cloud, out)?;
        out[self.head..].fill(0.0);
        Ok(())
    }
    fn eval_batch(&self, t: f64, xs: &[f64], cloud: &PointCloud, out: &mut [f64]) -> Result<()> {
        self.inner.eval_batch(t, xs, cloud, out)?;
        let d = self.dim();
        for o in out.chunks_mut(d) {
            o[self.head..].fill(0.0);
        }
        Ok(())
    }
}

/// Extended inputs `((zeta_i, R_i(0)), (W_i, R_i - R_i(0)))`.
pub fn lift_inputs(inputs: &InputEnsemble, radii: &[SamplePath]) -> Result<InputEnsemble> {
    if radii.len() != inputs.len() {
        return Err(Error::SizeMismatch { left: inputs.len(), right: radii.len() });
    }
    let n_r = radii.first().map(SamplePath::dim).unwrap_or(0);
    let mut initial = Vec::with_capacity(inputs.len() * (inputs.dim() + n_r));
    let mut drivers = Vec::with_capacity(inputs.len());
    for (i, r) in radii.iter().enumerate() {
        if r.dim() != n_r {
            return Err(Error::DimensionMismatch { expected: n_r, got: r.dim() });
        }
        initial.extend_from_slice(inputs.initial().point(i));
        initial.extend_from_slice(r.at(0));
        let r0 = r.at(0).to_vec();
        let mut v = Vec::with_capacity(r.values().len());
        for node in r.nodes() {
            v.extend(node.iter().zip(&r0).map(|(a, b)| a - b));
        }
        let inc = SamplePath::new(*r.grid(), n_r, v)?;
        drivers.push(inputs.drivers().member(i).stack(&inc)?);
    }
    InputEnsemble::new(
        PointCloud::new(inputs.dim() + n_r, initial)?,
        PathEnsemble::with_kind(drivers, inputs.drivers().kind())?,
    )
}

/// Particle solve of the extended state `(X_i, R_i)`; the drift acts on the
/// `X`-block only and the `R`-block follows the given radius paths.
pub fn heterogeneous_lift(
    drift_xr: &dyn Drift,
    inputs: &InputEnsemble,
    radii: &[SamplePath],
    cfg: &SolverConfig,
) -> Result<PathEnsemble> {
    let lifted = lift_inputs(inputs, radii)?;
    if drift_xr.dim() != lifted.dim() {
        return Err(Error::DimensionMismatch { expected: lifted.dim(), got: drift_xr.dim() });
    }
    let wrapped = ZeroTail { inner: drift_xr, head: inputs.dim() };
    particle_solve(&wrapped, &lifted, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{make_mean_reversion, sine_interaction, ConstantDrift, LinearDecay, ZeroDrift};
    use crate::noise::{brownian_paths, gaussian_points, NoiseConfig};
    use crate::paths::{sup_distance, TimeGrid};

    fn inputs(n: usize, d: usize, steps: usize, seed: u64) -> InputEnsemble {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let w = brownian_paths(&NoiseConfig::brownian(d, 0.5, seed), &g, n).unwrap();
        let z = gaussian_points(seed + 1, d, n, &vec![0.0; d], 1.0).unwrap();
        InputEnsemble::new(z, PathEnsemble::new(w).unwrap()).unwrap()
    }

    fn cfg() -> SolverConfig {
        SolverConfig { p: 1.0, picard_tol: 1e-13, max_picard_iters: 400 }
    }

    #[test]
    fn zero_drift_is_transport() {
        let inp = inputs(5, 2, 30, 1);
        let out = particle_solve(&ZeroDrift { dim: 2 }, &inp, &cfg()).unwrap();
        for (i, x) in out.iter().enumerate() {
            for j in 0..=30 {
                for c in 0..2 {
                    let expected = inp.initial().point(i)[c] + inp.drivers().member(i).at(j)[c];
                    assert_eq!(x.at(j)[c], expected);
                }
            }
        }
        let (fp, trace) = picard_solve(&ZeroDrift { dim: 2 }, &inp, &cfg()).unwrap();
        assert_eq!(trace.iterations_used, 1);
        assert_eq!(trace.successive_gaps, vec![0.0]);
        assert_eq!(fp, out);
    }

    #[test]
    fn constant_drift_adds_ct() {
        let inp = inputs(3, 1, 50, 2);
        let b = ConstantDrift { value: vec![0.7] };
        let out = particle_solve(&b, &inp, &cfg()).unwrap();
        let g = *inp.grid();
        for (i, x) in out.iter().enumerate() {
            for j in 0..=50 {
                let expected = inp.initial().point(i)[0] + 0.7 * g.time(j) + inp.drivers().member(i).at(j)[0];
                assert!((x.at(j)[0] - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn exponential_decay() {
        for steps in [100, 1000] {
            let g = TimeGrid::new(1.0, steps).unwrap();
            let w = SamplePath::zeros(g, 1);
            let mu = PathEnsemble::new(vec![w.clone()]).unwrap();
            let x = solve_frozen(&LinearDecay { rate: 1.0, dim: 1 }, &mu, &[1.0], &w, &cfg()).unwrap();
            let err = (x.at(steps)[0] - (-1.0f64).exp()).abs();
            // Euler error ~ e^{-1} h / 2
            assert!(err < 0.25 / steps as f64, "{steps}: {err}");
            assert!(err > 0.1 / steps as f64);
        }
    }

    #[test]
    fn measure_free_drift_converges_after_one_frozen_solve() {
        let inp = inputs(6, 1, 40, 3);
        let b = LinearDecay { rate: 0.8, dim: 1 };
        let (fp, trace) = picard_solve(&b, &inp, &cfg()).unwrap();
        assert_eq!(trace.successive_gaps[1], 0.0);
        assert_eq!(trace.iterates[1], fp);
    }

    #[test]
    fn prefix_propagation_is_exact() {
        let inp = inputs(16, 2, 60, 4);
        let b = make_mean_reversion(1.5, vec![0.2, -0.1]).unwrap();
        let particles = particle_solve(&b, &inp, &cfg()).unwrap();
        let (fp, trace) = picard_solve(&b, &inp, &cfg()).unwrap();
        assert!(synchronous_gap(&fp, &particles) <= 1e-12);
        for (m, it) in trace.iterates.iter().enumerate() {
            let upto = m.min(60);
            for (a, p) in it.iter().zip(particles.iter()) {
                assert_eq!(a.values()[..(upto + 1) * 2], p.values()[..(upto + 1) * 2], "iterate {m}");
            }
        }
    }

    #[test]
    fn nonlinear_kernel_agrees_with_picard() {
        let inp = inputs(32, 1, 50, 5);
        let b = sine_interaction(2.0, 1).unwrap();
        let particles = particle_solve(&b, &inp, &cfg()).unwrap();
        let (fp, trace) = picard_solve(&b, &inp, &cfg()).unwrap();
        assert!(trace.converged && trace.iterations_used <= 50);
        assert!(synchronous_gap(&fp, &particles) <= 1e-12);
    }

    #[test]
    fn ensemble_mean_is_conserved() {
        // drivers with zero ensemble mean at every node
        let g = TimeGrid::new(1.0, 40).unwrap();
        let w = brownian_paths(&NoiseConfig::brownian(1, 1.0, 9), &g, 8).unwrap();
        let mut members = w.clone();
        members.extend(w.iter().map(|p| p.scaled(-1.0)));
        let z = gaussian_points(10, 1, 16, &[0.3], 1.0).unwrap();
        let zbar = z.mean()[0];
        let inp = InputEnsemble::new(z, PathEnsemble::new(members).unwrap()).unwrap();
        let b = make_mean_reversion(1.0, vec![0.0]).unwrap();
        let (fp, _) = picard_solve(&b, &inp, &cfg()).unwrap();
        for j in 0..=40 {
            assert!((fp.mean_at(j).unwrap()[0] - zbar).abs() < 1e-13);
        }
    }

    #[test]
    fn single_particle_feels_no_mean_reversion() {
        let inp = inputs(1, 2, 25, 6);
        let out = particle_solve(&make_mean_reversion(3.0, vec![0.0, 0.0]).unwrap(), &inp, &cfg()).unwrap();
        let t = zero_drift_transport(&inp).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn reconstruct_roundtrip() {
        let inp = inputs(8, 2, 80, 7);
        let b = make_mean_reversion(1.0, vec![0.5, 0.0]).unwrap();
        let (fp, _) = picard_solve(&b, &inp, &cfg()).unwrap();
        for (i, x) in fp.iter().enumerate() {
            let (z, w) = reconstruct_inputs(&b, &fp, x, &cfg()).unwrap();
            assert_eq!(z, inp.initial().point(i));
            assert!(sup_distance(&w, inp.drivers().member(i)).unwrap() <= 1e-12);
            let again = solve_frozen(&b, &fp, &z, &w, &cfg()).unwrap();
            assert!(sup_distance(&again, x).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn reconstruct_is_exact_without_drift_from_origin() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let w = brownian_paths(&NoiseConfig::brownian(1, 1.0, 1), &g, 1).unwrap().remove(0);
        let mu = PathEnsemble::new(vec![w.clone()]).unwrap();
        let zero = ZeroDrift { dim: 1 };
        let x = solve_frozen(&zero, &mu, &[0.0], &w, &cfg()).unwrap();
        let (z, wr) = reconstruct_inputs(&zero, &mu, &x, &cfg()).unwrap();
        assert_eq!(z, vec![0.0]);
        assert_eq!(wr, w);

        let c = SamplePath::constant(g, &[2.5]);
        let (z, wr) = reconstruct_inputs(&zero, &mu, &c, &cfg()).unwrap();
        assert_eq!(z, vec![2.5]);
        assert_eq!(wr, SamplePath::zeros(g, 1));
    }

    #[test]
    fn common_noise_examples() {
        let inp = inputs(10, 1, 30, 8);
        let g = *inp.grid();
        let b = make_mean_reversion(1.0, vec![0.0]).unwrap();
        let zero_b = SamplePath::zeros(g, 1);
        assert_eq!(
            common_noise_solve(&b, &inp, &zero_b, &cfg()).unwrap(),
            particle_solve(&b, &inp, &cfg()).unwrap()
        );
        let common = brownian_paths(&NoiseConfig::brownian(1, 1.0, 99), &g, 1).unwrap().remove(0);
        let shifted = common_noise_solve(&b, &inp, &common, &cfg()).unwrap();
        let plain = particle_solve(&b, &inp, &cfg()).unwrap();
        for j in 0..=30 {
            let lhs = shifted.mean_at(j).unwrap()[0];
            let rhs = plain.mean_at(j).unwrap()[0] + common.at(j)[0];
            assert!((lhs - rhs).abs() < 1e-12);
        }
        let free = common_noise_solve(&ZeroDrift { dim: 1 }, &inp, &common, &cfg()).unwrap();
        for (i, x) in free.iter().enumerate() {
            for j in 0..=30 {
                let e = inp.initial().point(i)[0] + inp.drivers().member(i).at(j)[0] + common.at(j)[0];
                assert!((x.at(j)[0] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let inp = inputs(12, 1, 30, 11);
        let b = sine_interaction(1.0, 1).unwrap();
        let out = particle_solve(&b, &inp, &cfg()).unwrap();
        let order: Vec<usize> = (0..12).rev().collect();
        let out_perm = particle_solve(&b, &inp.permuted(&order).unwrap(), &cfg()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert!(sup_distance(out_perm.member(k), out.member(i)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn lift_examples() {
        let inp = inputs(6, 1, 20, 12);
        let g = *inp.grid();
        let radii: Vec<SamplePath> = (0..6).map(|i| SamplePath::constant(g, &[1.0 + i as f64])).collect();
        let b = make_mean_reversion(1.0, vec![0.0, 0.0]).unwrap();
        let out = heterogeneous_lift(&b, &inp, &radii, &cfg()).unwrap();
        for (x, r) in out.iter().zip(&radii) {
            assert_eq!(x.project(1..2).unwrap(), *r);
        }
        // a drift that ignores the radius reproduces the plain solve on the X block
        let ignore = make_mean_reversion(1.0, vec![0.0]).unwrap();
        let plain = particle_solve(&ignore, &inp, &cfg()).unwrap();
        let decay = LinearDecay { rate: 0.5, dim: 2 };
        let lifted = heterogeneous_lift(&decay, &inp, &radii, &cfg()).unwrap();
        let plain_decay = particle_solve(&LinearDecay { rate: 0.5, dim: 1 }, &inp, &cfg()).unwrap();
        for (a, p) in lifted.iter().zip(plain_decay.iter()) {
            assert_eq!(a.project(0..1).unwrap(), *p);
        }
        assert_eq!(plain.len(), 6);
        assert!(heterogeneous_lift(&ignore, &inp, &radii, &cfg()).is_err());
    }

    #[test]
    fn non_convergence_reports_gaps() {
        // the mean-reversion start already carries the exact mean, so use a nonlinear kernel
        let inp = inputs(8, 1, 100, 13);
        let b = sine_interaction(5.0, 1).unwrap();
        let c = SolverConfig { p: 1.0, picard_tol: 1e-14, max_picard_iters: 3 };
        match picard_solve(&b, &inp, &c) {
            Err(Error::NonConvergence { iterations, gaps, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(gaps.len(), 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let inp = inputs(4, 2, 10, 14);
        assert!(particle_solve(&ZeroDrift { dim: 1 }, &inp, &cfg()).is_err());
    }
}

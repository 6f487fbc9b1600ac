//! Skorokhod problems in bounded convex polyhedra via projected Euler steps.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::drift::{BatteryDrift, BatteryParams, Drift};
use crate::error::{Error, Result};
use crate::noise::{generate, NoiseConfig};
use crate::paths::{norm, InputEnsemble, PathEnsemble, PointCloud, SamplePath, TimeGrid};
use crate::solver::{lift_inputs, picard_iterate, PicardTrace, SolverConfig};

/// Feasibility slack accepted after a projection.
const FEAS_TOL: f64 = 1e-12;

/// `D = { x : n_i . x <= c_i }` with unit normals, bounded, nonempty interior.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    dim: usize,
    normals: Vec<f64>,
    offsets: Vec<f64>,
    interior: Vec<f64>,
    bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Polyhedron {
    pub fn new(halfspaces: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let dim = halfspaces
            .first()
            .map(|(n, _)| n.len())
            .ok_or_else(|| Error::Infeasible("no halfspaces given".into()))?;
        if dim == 0 {
            return Err(Error::Infeasible("zero-dimensional normals".into()));
        }
        let mut normals = Vec::with_capacity(halfspaces.len() * dim);
        let mut offsets = Vec::with_capacity(halfspaces.len());
        for (n, c) in &halfspaces {
            if n.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: n.len() });
            }
            let len = norm(n);
            if !(len > 0.0 && len.is_finite() && c.is_finite()) {
                return Err(Error::Infeasible("degenerate halfspace".into()));
            }
            normals.extend(n.iter().map(|v| v / len));
            offsets.push(c / len);
        }
        let mut p = Self { dim, normals, offsets, interior: Vec::new(), bounds: None };
        if p.has_recession_direction() {
            return Err(Error::Infeasible("polyhedron is unbounded".into()));
        }
        let vertices = p.vertices();
        if vertices.is_empty() {
            return Err(Error::Infeasible("polyhedron is empty".into()));
        }
        let mut centroid = vec![0.0; dim];
        for v in &vertices {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / vertices.len() as f64;
            }
        }
        let scale = p.offsets.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        if p.violation(&centroid) > -1e-9 * scale {
            return Err(Error::Infeasible("polyhedron has empty interior".into()));
        }
        p.interior = centroid;
        Ok(p)
    }

    /// Axis-aligned box; projection is coordinatewise clamping.
    pub fn boxed(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().zip(hi).any(|(l, h)| !(l < h && l.is_finite() && h.is_finite())) {
            return Err(Error::Infeasible("box bounds must satisfy lo < hi".into()));
        }
        let d = lo.len();
        let mut halfspaces = Vec::with_capacity(2 * d);
        for c in 0..d {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            halfspaces.push((e.clone(), hi[c]));
            e[c] = -1.0;
            halfspaces.push((e, -lo[c]));
        }
        let mut p = Self::new(halfspaces)?;
        p.bounds = Some((lo.to_vec(), hi.to_vec()));
        Ok(p)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(&[lo], &[hi])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_faces(&self) -> usize {
        self.offsets.len()
    }

    pub fn normal(&self, i: usize) -> &[f64] {
        &self.normals[i * self.dim..(i + 1) * self.dim]
    }

    pub fn offset(&self, i: usize) -> f64 {
        self.offsets[i]
    }

    pub fn interior_point(&self) -> &[f64] {
        &self.interior
    }

    pub fn is_box(&self) -> bool {
        self.bounds.is_some()
    }

    fn slack(&self, i: usize, x: &[f64]) -> f64 {
        self.offsets[i] - dot(self.normal(i), x)
    }

    /// `max_i (n_i . x - c_i)`: nonpositive exactly on the closed domain.
    pub fn violation(&self, x: &[f64]) -> f64 {
        (0..self.n_faces())
            .map(|i| -self.slack(i, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.violation(x) <= tol
    }

    /// Distance from a point of the domain to its boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        (0..self.n_faces())
            .map(|i| self.slack(i, x))
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
    }

    /// Faces whose hyperplane passes within `tol` of `x`.
    pub fn active_faces(&self, x: &[f64], tol: f64) -> Vec<usize> {
        (0..self.n_faces()).filter(|&i| self.slack(i, x).abs() <= tol).collect()
    }

    fn rows(&self, subset: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(subset.len(), self.dim, |r, c| self.normal(subset[r])[c])
    }

    fn has_recession_direction(&self) -> bool {
        let d = self.dim;
        let m = self.n_faces();
        let all: Vec<usize> = (0..m).collect();
        if self.rows(&all).rank(1e-12) < d {
            return true;
        }
        // a pointed nontrivial recession cone has an extreme ray fixed by d-1 faces
        let mut candidates = Vec::new();
        if d == 1 {
            candidates.push(vec![1.0]);
        } else {
            for_each_subset(m, d - 1, |s| {
                let u = null_vector(&self.rows(s));
                if norm(&u) > 1e-12 {
                    candidates.push(u);
                }
            });
        }
        candidates.iter().any(|u: &Vec<f64>| {
            [1.0, -1.0].iter().any(|sgn| {
                (0..m).all(|i| sgn * dot(self.normal(i), u) <= 1e-12)
            })
        })
    }

    fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let scale = self.offsets.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        let mut out = Vec::new();
        for_each_subset(self.n_faces(), d, |s| {
            let a = self.rows(s);
            let b = DVector::from_iterator(d, s.iter().map(|&i| self.offsets[i]));
            if let Some(y) = a.lu().solve(&b) {
                let y: Vec<f64> = y.iter().copied().collect();
                if y.iter().all(|v| v.is_finite()) && self.violation(&y) <= 1e-9 * scale {
                    out.push(y);
                }
            }
        });
        out
    }

    /// Euclidean projection onto the closed domain.
    ///
    /// Boxes are clamped. Otherwise candidate active sets are tried by
    /// increasing size and then lexicographically; the first one whose
    /// equality-constrained projection is feasible with nonnegative multipliers
    /// satisfies the optimality conditions and is the unique projection.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if let Some((lo, hi)) = &self.bounds {
            return Ok(x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect());
        }
        if self.violation(x) <= 0.0 {
            return Ok(x.to_vec());
        }
        let scale = 1.0 + norm(x).max(self.offsets.iter().fold(0.0f64, |a, c| a.max(c.abs())));
        for size in 1..=self.dim.min(self.n_faces()) {
            let mut found = None;
            for_each_subset(self.n_faces(), size, |s| {
                if found.is_some() {
                    return;
                }
                let a = self.rows(s);
                let rhs = DVector::from_iterator(
                    size,
                    s.iter().map(|&i| dot(self.normal(i), x) - self.offsets[i]),
                );
                let Some(lambda) = (&a * a.transpose()).lu().solve(&rhs) else {
                    return;
                };
                if lambda.iter().any(|&l| l < -1e-12 * scale || !l.is_finite()) {
                    return;
                }
                let shift = a.transpose() * lambda;
                let y: Vec<f64> = x.iter().zip(shift.iter()).map(|(v, s)| v - s).collect();
                if self.violation(&y) <= 1e-12 * scale {
                    found = Some(y);
                }
            });
            if let Some(y) = found {
                return Ok(y);
            }
        }
        Err(Error::Infeasible(format!("projection of {x:?} failed")))
    }

    /// Least-squares residual of writing `v` as a nonnegative combination of
    /// the normals of the faces active at `y` (within `tol`).
    pub fn normal_cone_residual(&self, y: &[f64], v: &[f64], tol: f64) -> f64 {
        let active = self.active_faces(y, tol);
        let mut best = norm(v);
        for size in 1..=active.len().min(self.dim) {
            for_each_subset(active.len(), size, |s| {
                let faces: Vec<usize> = s.iter().map(|&k| active[k]).collect();
                let a = self.rows(&faces);
                let rhs = &a * DVector::from_column_slice(v);
                let Some(lambda) = (&a * a.transpose()).lu().solve(&rhs) else {
                    return;
                };
                if lambda.iter().any(|&l| l < 0.0) {
                    return;
                }
                let fit = a.transpose() * lambda;
                let r: f64 = v.iter().zip(fit.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                best = best.min(r);
            });
        }
        best
    }
}

/// Generalized cross product of the `d-1` rows of `a`: orthogonal to every row,
/// zero when the rows are dependent.
fn null_vector(a: &DMatrix<f64>) -> Vec<f64> {
    let d = a.ncols();
    (0..d)
        .map(|c| {
            let minor = a.clone().remove_column(c);
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor.determinant()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Calls `f` on every increasing `k`-subset of `0..n`, in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if i == 0 {
                return;
            }
        }
    }
}

/// Constrained path `x`, pushing term `k` and running variation `tv` of `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPath {
    pub x: SamplePath,
    pub k: SamplePath,
    pub tv: Vec<f64>,
}

impl ReflectedPath {
    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    /// `(X, k)` as one path in `R^{2d}`.
    pub fn joint(&self) -> SamplePath {
        self.x.stack(&self.k).expect("x and k share a grid")
    }
}

/// One projected step from `y` with increment `inc`; returns the new point and `dk`.
pub fn reflect_step(p: &Polyhedron, y: &[f64], inc: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let trial: Vec<f64> = y.iter().zip(inc).map(|(a, b)| a + b).collect();
    let next = p.project(&trial)?;
    let dk = trial.iter().zip(&next).map(|(a, b)| a - b).collect();
    Ok((next, dk))
}

fn check_start(p: &Polyhedron, x0: &[f64]) -> Result<()> {
    if x0.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: x0.len() });
    }
    let v = p.violation(x0);
    if v > FEAS_TOL {
        return Err(Error::OutsideDomain(v));
    }
    Ok(())
}

/// Discrete Skorokhod map of `z` started at `x0`.
pub fn skorokhod_map(p: &Polyhedron, x0: &[f64], z: &SamplePath) -> Result<ReflectedPath> {
    check_start(p, x0)?;
    if z.dim() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: z.dim() });
    }
    let d = p.dim();
    let grid = *z.grid();
    let mut xs = Vec::with_capacity(z.values().len());
    let mut ks = vec![0.0; d];
    let mut k_all = Vec::with_capacity(z.values().len());
    let mut tv = vec![0.0];
    let mut y = x0.to_vec();
    xs.extend_from_slice(&y);
    k_all.extend_from_slice(&ks);
    let mut inc = vec![0.0; d];
    for j in 0..grid.n_steps() {
        for c in 0..d {
            inc[c] = z.at(j + 1)[c] - z.at(j)[c];
        }
        let (next, dk) = reflect_step(p, &y, &inc)?;
        for c in 0..d {
            ks[c] += dk[c];
        }
        tv.push(tv[j] + norm(&dk));
        xs.extend_from_slice(&next);
        k_all.extend_from_slice(&ks);
        y = next;
    }
    Ok(ReflectedPath {
        x: SamplePath::new(grid, d, xs)?,
        k: SamplePath::new(grid, d, k_all)?,
        tv,
    })
}

fn measure_cloud(drift: &dyn Drift, xs: &[f64], ks: &[f64], d: usize) -> Result<PointCloud> {
    if drift.measure_dim() == d {
        Ok(PointCloud::from_raw(d, xs.to_vec()))
    } else if drift.measure_dim() == 2 * d {
        let mut pts = Vec::with_capacity(2 * xs.len());
        for (x, k) in xs.chunks(d).zip(ks.chunks(d)) {
            pts.extend_from_slice(x);
            pts.extend_from_slice(k);
        }
        Ok(PointCloud::from_raw(2 * d, pts))
    } else {
        Err(Error::DimensionMismatch { expected: 2 * d, got: drift.measure_dim() })
    }
}

/// The measure argument a drift reads from a reflected ensemble: the `X`
/// paths, or the joint `(X, k)` paths for drifts with `measure_dim = 2d`.
pub fn measure_ensemble(drift: &dyn Drift, paths: &[ReflectedPath]) -> Result<PathEnsemble> {
    let d = drift.dim();
    if drift.measure_dim() == d {
        PathEnsemble::new(paths.iter().map(|p| p.x.clone()).collect())
    } else {
        PathEnsemble::new(paths.iter().map(ReflectedPath::joint).collect())
    }
}

fn reflected_sweep(
    drift: &dyn Drift,
    inputs: &InputEnsemble,
    p: &Polyhedron,
    frozen: Option<&PathEnsemble>,
) -> Result<Vec<ReflectedPath>> {
    let d = inputs.dim();
    if drift.dim() != d || p.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: drift.dim().max(p.dim()) });
    }
    let n = inputs.len();
    for i in 0..n {
        check_start(p, inputs.initial().point(i))?;
    }
    let grid = *inputs.grid();
    if let Some(mu) = frozen {
        if mu.grid() != &grid {
            return Err(Error::GridMismatch);
        }
        if mu.dim() != drift.measure_dim() {
            return Err(Error::DimensionMismatch { expected: drift.measure_dim(), got: mu.dim() });
        }
    }
    let h = grid.step();
    let nodes = grid.n_nodes();
    let mut xs: Vec<f64> = inputs.initial().as_flat().to_vec();
    let mut ks = vec![0.0; n * d];
    let mut x_out = vec![vec![0.0; nodes * d]; n];
    let mut k_out = vec![vec![0.0; nodes * d]; n];
    let mut tv_out = vec![vec![0.0; nodes]; n];
    let mut b = vec![0.0; n * d];
    let mut trial = vec![0.0; d];
    for i in 0..n {
        x_out[i][..d].copy_from_slice(&xs[i * d..(i + 1) * d]);
    }
    for j in 0..grid.n_steps() {
        let cloud = match frozen {
            Some(mu) => mu.marginal_at(j)?,
            None => measure_cloud(drift, &xs, &ks, d)?,
        };
        drift.eval_batch(grid.time(j), &xs, &cloud, &mut b)?;
        for i in 0..n {
            let w = inputs.drivers().member(i);
            let (w1, w0) = (w.at(j + 1), w.at(j));
            for c in 0..d {
                trial[c] = xs[i * d + c] + b[i * d + c] * h + (w1[c] - w0[c]);
            }
            if trial.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("member {i} at node {}", j + 1)));
            }
            let next = p.project(&trial)?;
            let mut step_tv = 0.0;
            for c in 0..d {
                let dk = trial[c] - next[c];
                ks[i * d + c] += dk;
                step_tv += dk * dk;
                xs[i * d + c] = next[c];
            }
            tv_out[i][j + 1] = tv_out[i][j] + step_tv.sqrt();
            x_out[i][(j + 1) * d..(j + 2) * d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            k_out[i][(j + 1) * d..(j + 2) * d].copy_from_slice(&ks[i * d..(i + 1) * d]);
        }
    }
    Ok(x_out
        .into_iter()
        .zip(k_out)
        .zip(tv_out)
        .map(|((x, k), tv)| ReflectedPath {
            x: SamplePath::from_raw(grid, d, x),
            k: SamplePath::from_raw(grid, d, k),
            tv,
        })
        .collect())
}

/// Reflected solve with the measure argument frozen to the marginals of `mu`.
pub fn reflected_frozen(
    drift: &dyn Drift,
    mu: &PathEnsemble,
    p: &Polyhedron,
    zeta: &[f64],
    w: &SamplePath,
    cfg: &SolverConfig,
) -> Result<ReflectedPath> {
    cfg.validate()?;
    let inputs = InputEnsemble::new(
        PointCloud::new(w.dim(), zeta.to_vec())?,
        PathEnsemble::new(vec![w.clone()])?,
    )?;
    Ok(reflected_sweep(drift, &inputs, p, Some(mu))?.remove(0))
}

/// Coupled reflected particle system.
pub fn reflected_particle_solve(
    drift: &dyn Drift,
    inputs: &InputEnsemble,
    p: &Polyhedron,
    cfg: &SolverConfig,
) -> Result<Vec<ReflectedPath>> {
    cfg.validate()?;
    reflected_sweep(drift, inputs, p, None)
}

fn reflected_gap(a: &[ReflectedPath], b: &[ReflectedPath]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            crate::paths::sup_distance_unchecked(&x.x, &y.x)
                .max(crate::paths::sup_distance_unchecked(&x.k, &y.k))
        })
        .fold(0.0, f64::max)
}

/// Picard iteration for the reflected problem, started from the reflected
/// zero-drift solve.
pub fn reflected_picard_solve(
    drift: &dyn Drift,
    inputs: &InputEnsemble,
    p: &Polyhedron,
    cfg: &SolverConfig,
) -> Result<(Vec<ReflectedPath>, PicardTrace<Vec<ReflectedPath>>)> {
    cfg.validate()?;
    let start: Vec<ReflectedPath> = (0..inputs.len())
        .map(|i| skorokhod_map(p, inputs.initial().point(i), inputs.drivers().member(i)))
        .collect::<Result<_>>()?;
    picard_iterate(
        start,
        |current| {
            let mu = measure_ensemble(drift, current)?;
            reflected_sweep(drift, inputs, p, Some(&mu))
        },
        |a: &Vec<ReflectedPath>, b: &Vec<ReflectedPath>| reflected_gap(a, b),
        cfg.picard_tol,
        cfg.max_picard_iters,
    )
}

/// Worst-case invariant residuals of a reflected path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ReflectionDiagnostics {
    /// Largest constraint violation `max_i (n_i . x - c_i)^+`.
    pub max_violation: f64,
    /// Largest distance to the boundary at a step where `|k|` increased.
    pub max_complementarity: f64,
    /// Largest normal-cone least-squares residual of a `k` increment.
    pub max_cone_residual: f64,
    /// Largest mismatch between `|dk|` and the `tv` increment.
    pub max_tv_mismatch: f64,
    pub steps: usize,
}

impl ReflectionDiagnostics {
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_violation: self.max_violation.max(other.max_violation),
            max_complementarity: self.max_complementarity.max(other.max_complementarity),
            max_cone_residual: self.max_cone_residual.max(other.max_cone_residual),
            max_tv_mismatch: self.max_tv_mismatch.max(other.max_tv_mismatch),
            steps: self.steps + other.steps,
        }
    }
}

pub fn check_reflected(p: &Polyhedron, path: &ReflectedPath, active_tol: f64) -> ReflectionDiagnostics {
    let d = p.dim();
    let mut diag = ReflectionDiagnostics { steps: path.grid().n_steps(), ..Default::default() };
    let mut dk = vec![0.0; d];
    for j in 0..path.x.n_nodes() {
        let x = path.x.at(j);
        diag.max_violation = diag.max_violation.max(p.violation(x).max(0.0));
        if j == 0 {
            continue;
        }
        for c in 0..d {
            dk[c] = path.k.at(j)[c] - path.k.at(j - 1)[c];
        }
        let dtv = path.tv[j] - path.tv[j - 1];
        if dtv < 0.0 {
            diag.max_tv_mismatch = f64::INFINITY;
        }
        diag.max_tv_mismatch = diag.max_tv_mismatch.max((norm(&dk) - dtv).abs());
        if dtv > 0.0 {
            diag.max_complementarity = diag.max_complementarity.max(p.boundary_distance(x));
            diag.max_cone_residual = diag.max_cone_residual.max(p.normal_cone_residual(x, &dk, active_tol));
        }
    }
    diag
}

/// Battery simulation: mole fractions reflected in `[0, 1]`, constant radii,
/// drivers `sigma(r_i) W_i`.
pub fn battery_simulate(
    params: &BatteryParams,
    declared_lipschitz: f64,
    a: f64,
    radii: &[f64],
    noise: &NoiseConfig,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<Vec<ReflectedPath>> {
    params.validate()?;
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::OutsideDomain(if a < 0.0 { -a } else { a - 1.0 }));
    }
    if let Some(r) = radii.iter().find(|&&r| !params.contains_radius(r)) {
        return Err(Error::InvalidParameter(format!(
            "radius {r} outside [{}, {}]",
            params.r_min, params.r_max
        )));
    }
    if noise.dim != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: noise.dim });
    }
    let n = radii.len();
    let w = generate(noise, grid, n)?;
    let drivers: Vec<SamplePath> = w
        .iter()
        .zip(radii)
        .map(|(wi, &r)| wi.scaled((params.sigma_r)(r)))
        .collect();
    let inputs = InputEnsemble::new(PointCloud::new(1, vec![a; n])?, PathEnsemble::new(drivers)?)?;
    let radius_paths: Vec<SamplePath> = radii.iter().map(|&r| SamplePath::constant(*grid, &[r])).collect();
    let lifted = lift_inputs(&inputs, &radius_paths)?;
    let domain = Polyhedron::boxed(&[0.0, params.r_min], &[1.0, params.r_max])?;
    let drift: BatteryDrift = crate::drift::make_battery_drift(params.clone(), declared_lipschitz)?;
    reflected_particle_solve(&drift, &lifted, &domain, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{make_mean_reversion, ConstantDrift, ZeroDrift};
    use crate::noise::{brownian_paths, member_rng};
    use crate::paths::sup_distance;
    use crate::solver::particle_solve;
    use rand::Rng;
    use std::sync::Arc;

    fn unit_square_general() -> Polyhedron {
        Polyhedron::new(vec![
            (vec![1.0, 0.0], 1.0),
            (vec![-1.0, 0.0], 0.0),
            (vec![0.0, 1.0], 1.0),
            (vec![0.0, -1.0], 0.0),
        ])
        .unwrap()
    }

    fn triangle() -> Polyhedron {
        // x >= 0, y >= 0, x + 2y <= 2
        Polyhedron::new(vec![
            (vec![-1.0, 0.0], 0.0),
            (vec![0.0, -1.0], 0.0),
            (vec![1.0, 2.0], 2.0),
        ])
        .unwrap()
    }

    /// Dykstra's alternating projections onto the halfspaces.
    fn dykstra(p: &Polyhedron, x: &[f64]) -> Vec<f64> {
        let m = p.n_faces();
        let d = p.dim();
        let mut y = x.to_vec();
        let mut incr = vec![vec![0.0; d]; m];
        for _ in 0..20_000 {
            for i in 0..m {
                let z: Vec<f64> = y.iter().zip(&incr[i]).map(|(a, b)| a + b).collect();
                let n = p.normal(i);
                let over = dot(n, &z) - p.offset(i);
                let proj: Vec<f64> = if over > 0.0 {
                    z.iter().zip(n).map(|(a, b)| a - over * b).collect()
                } else {
                    z.clone()
                };
                incr[i] = z.iter().zip(&proj).map(|(a, b)| a - b).collect();
                y = proj;
            }
        }
        y
    }

    #[test]
    fn rejects_bad_domains() {
        assert!(Polyhedron::new(vec![(vec![1.0, 0.0], 1.0), (vec![-1.0, 0.0], 0.0)]).is_err());
        assert!(Polyhedron::new(vec![(vec![1.0], 0.0), (vec![-1.0], 1.0), (vec![1.0], -2.0)]).is_err());
        assert!(Polyhedron::new(vec![(vec![1.0], 0.0), (vec![-1.0], 0.0)]).is_err());
        assert!(Polyhedron::new(vec![(vec![1.0, 1.0], 1.0), (vec![-1.0, 0.0], 0.0), (vec![0.0, -1.0], 0.0)]).is_ok());
        assert!(Polyhedron::new(vec![(vec![1.0, 1.0], 1.0), (vec![-1.0, 0.0], 0.0)]).is_err());
        let t = triangle();
        assert!(t.contains(t.interior_point(), -1e-6));
    }

    #[test]
    fn projection_examples() {
        let i = Polyhedron::interval(0.0, 1.0).unwrap();
        assert_eq!(i.project(&[0.4]).unwrap(), vec![0.4]);
        assert_eq!(i.project(&[-0.3]).unwrap(), vec![0.0]);
        let sq = unit_square_general();
        let p = sq.project(&[2.0, 2.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
        assert_eq!(sq.project(&[0.25, 0.5]).unwrap(), vec![0.25, 0.5]);
    }

    #[test]
    fn projection_matches_clamp_and_dykstra() {
        let sq = unit_square_general();
        let bx = Polyhedron::boxed(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let tri = triangle();
        let mut rng = member_rng(42, 0);
        for _ in 0..300 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let a = sq.project(&x).unwrap();
            let b = bx.project(&x).unwrap();
            assert!(norm(&[a[0] - b[0], a[1] - b[1]]) < 1e-12);
            let t = tri.project(&x).unwrap();
            let o = dykstra(&tri, &x);
            assert!(norm(&[t[0] - o[0], t[1] - o[1]]) < 1e-8, "{x:?}: {t:?} vs {o:?}");
        }
    }

    #[test]
    fn skorokhod_examples() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let sq = Polyhedron::boxed(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let z = SamplePath::from_fn(g, 2, |t, o| {
            o[0] = 0.2 * (6.0 * t).sin();
            o[1] = -0.1 * t;
        })
        .unwrap();
        let r = skorokhod_map(&sq, &[0.5, 0.5], &z).unwrap();
        assert!(r.tv.iter().all(|&v| v == 0.0));
        for j in 0..=50 {
            assert!((r.x.at(j)[0] - 0.5 - z.at(j)[0]).abs() < 1e-15);
        }

        // half line approximated by a long interval
        let half = Polyhedron::interval(0.0, 1e6).unwrap();
        let down = SamplePath::from_fn(g, 1, |t, o| o[0] = -t).unwrap();
        let r = skorokhod_map(&half, &[0.0], &down).unwrap();
        assert!(r.x.values().iter().all(|&v| v == 0.0));
        assert!((r.tv[50] - 1.0).abs() < 1e-12);
        assert!(skorokhod_map(&half, &[-0.1], &down).is_err());
    }

    #[test]
    fn hitting_and_sticking() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let d = Polyhedron::interval(0.0, 1.0).unwrap();
        let w = SamplePath::zeros(g, 1);
        let mu = PathEnsemble::new(vec![w.clone()]).unwrap();
        let r = reflected_frozen(&ConstantDrift { value: vec![2.0] }, &mu, &d, &[0.5], &w, &SolverConfig::default()).unwrap();
        for j in 0..=200 {
            let t = g.time(j);
            let expected_x = (0.5 + 2.0 * t).min(1.0);
            assert!((r.x.at(j)[0] - expected_x).abs() < 1e-12);
            let expected_tv = (2.0 * (t - 0.25)).max(0.0);
            assert!((r.tv[j] - expected_tv).abs() <= 2.0 * g.step() + 1e-12);
        }
        let diag = check_reflected(&d, &r, 1e-9);
        assert!(diag.max_complementarity <= 1e-9 && diag.max_cone_residual <= 1e-9);
    }

    #[test]
    fn interior_reflected_solve_matches_unreflected() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let w = brownian_paths(&NoiseConfig::brownian(1, 0.1, 3), &g, 8).unwrap();
        let z = PointCloud::new(1, vec![0.0; 8]).unwrap();
        let inp = InputEnsemble::new(z, PathEnsemble::new(w).unwrap()).unwrap();
        let big = Polyhedron::interval(-100.0, 100.0).unwrap();
        let b = make_mean_reversion(1.0, vec![0.3]).unwrap();
        let refl = reflected_particle_solve(&b, &inp, &big, &SolverConfig::default()).unwrap();
        let plain = particle_solve(&b, &inp, &SolverConfig::default()).unwrap();
        for (r, p) in refl.iter().zip(plain.iter()) {
            assert!(sup_distance(&r.x, p).unwrap() < 1e-12);
            assert!(r.tv.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_drift_is_independent_skorokhod_maps() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let w = brownian_paths(&NoiseConfig::brownian(2, 1.0, 4), &g, 5).unwrap();
        let z = PointCloud::new(2, vec![0.5; 10]).unwrap();
        let inp = InputEnsemble::new(z, PathEnsemble::new(w.clone()).unwrap()).unwrap();
        let sq = unit_square_general();
        let out = reflected_particle_solve(&ZeroDrift { dim: 2 }, &inp, &sq, &SolverConfig::default()).unwrap();
        for (o, wi) in out.iter().zip(&w) {
            let single = skorokhod_map(&sq, &[0.5, 0.5], wi).unwrap();
            assert!(sup_distance(&o.x, &single.x).unwrap() < 1e-14);
            let diag = check_reflected(&sq, o, 1e-9);
            assert!(diag.max_violation <= 1e-12);
            assert!(diag.max_complementarity <= 1e-9);
            assert!(diag.max_cone_residual <= 1e-9);
            assert!(diag.max_tv_mismatch <= 1e-12);
        }
    }

    #[test]
    fn reflected_picard_matches_particles() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let w = brownian_paths(&NoiseConfig::brownian(1, 1.0, 5), &g, 10).unwrap();
        let z = PointCloud::new(1, (0..10).map(|i| i as f64 / 10.0).collect()).unwrap();
        let inp = InputEnsemble::new(z, PathEnsemble::new(w).unwrap()).unwrap();
        let d = Polyhedron::interval(0.0, 1.0).unwrap();
        let b = make_mean_reversion(2.0, vec![0.0]).unwrap();
        let cfg = SolverConfig { p: 1.0, picard_tol: 1e-14, max_picard_iters: 100 };
        let particles = reflected_particle_solve(&b, &inp, &d, &cfg).unwrap();
        let (fp, trace) = reflected_picard_solve(&b, &inp, &d, &cfg).unwrap();
        assert!(trace.converged);
        assert!(reflected_gap(&fp, &particles) <= 1e-12);
    }

    fn params(q_dot: f64, sigma: f64) -> BatteryParams {
        BatteryParams {
            tau: Arc::new(|r| 0.5 * r * r),
            sigma_r: Arc::new(move |_| sigma),
            mu_li: Arc::new(|x: f64| 0.5 * x + 0.1 * (8.0 * x).sin()),
            q_dot: Arc::new(move |_| q_dot),
            r_min: 0.5,
            r_max: 2.0,
        }
    }

    #[test]
    fn battery_examples() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let cfg = SolverConfig::default();
        let noise = NoiseConfig::brownian(1, 1.0, 3);
        let still = battery_simulate(&params(0.0, 0.0), 1.0, 0.3, &[1.0; 6], &noise, &g, &cfg).unwrap();
        for r in &still {
            assert!(r.x.values().chunks(2).all(|p| (p[0] - 0.3).abs() < 1e-14 && p[1] == 1.0));
        }
        let single = battery_simulate(&params(0.8, 0.0), 1.0, 0.5, &[1.2], &noise, &g, &cfg).unwrap();
        for j in 0..=100 {
            let expected = (0.5 + 0.8 * g.time(j)).clamp(0.0, 1.0);
            assert!((single[0].x.at(j)[0] - expected).abs() < 1e-12, "{j}");
        }
        let noisy = battery_simulate(&params(0.3, 0.5), 1.0, 0.5, &[0.6, 0.6, 1.8, 1.8], &noise, &g, &cfg).unwrap();
        for r in &noisy {
            assert!(r.x.values().chunks(2).all(|p| (0.0..=1.0).contains(&p[0])));
        }
        assert!(battery_simulate(&params(0.0, 0.0), 1.0, 1.5, &[1.0], &noise, &g, &cfg).is_err());
        assert!(battery_simulate(&params(0.0, 0.0), 1.0, 0.5, &[3.0], &noise, &g, &cfg).is_err());
    }

    #[test]
    fn subsets_are_lexicographic() {
        let mut seen = Vec::new();
        for_each_subset(4, 2, |s| seen.push(s.to_vec()));
        assert_eq!(
            seen,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        let mut count = 0;
        for_each_subset(3, 0, |_| count += 1);
        assert_eq!(count, 1);
    }
}

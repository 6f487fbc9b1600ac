//! Time grids, sampled paths and empirical measures.
//!
//! Every path lives on a uniform [`TimeGrid`]; values are stored flat, node by
//! node, so `values[j * dim + c]` is coordinate `c` at node `t_j`. Càdlàg paths
//! use the same storage with the right-continuous convention: the value stored
//! at a node is the post-jump value, and jumps only happen at nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_j = j * h` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    step: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
        }
        Ok(Self {
            horizon,
            n_steps,
            step: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Node time; the last node is exactly the horizon.
    pub fn time(&self, j: usize) -> f64 {
        if j == self.n_steps {
            self.horizon
        } else {
            j as f64 * self.step
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(|j| self.time(j))
    }

    /// Grid on `[0, t_j]` with the same step. `j = 0` yields the one-node grid.
    pub fn prefix(&self, j: usize) -> Result<Self> {
        self.check_node(j)?;
        Ok(Self {
            horizon: self.time(j),
            n_steps: j,
            step: self.step,
        })
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidParameter("refinement factor must be >= 1".into()));
        }
        Self::new(self.horizon, self.n_steps * factor)
    }

    /// Index of the node carrying the value at time `s` under piecewise-constant
    /// right-continuous readout.
    pub fn node_at_or_before(&self, s: f64) -> usize {
        if s <= 0.0 {
            return 0;
        }
        if s >= self.horizon {
            return self.n_steps;
        }
        let raw = s / self.step;
        let nearest = raw.round();
        // snap times that are a node up to rounding
        let j = if (raw - nearest).abs() < 1e-9 {
            nearest as usize
        } else {
            raw.floor() as usize
        };
        j.min(self.n_steps)
    }

    pub(crate) fn check_node(&self, j: usize) -> Result<()> {
        if j > self.n_steps {
            return Err(Error::IndexOutOfRange {
                index: j,
                max: self.n_steps,
            });
        }
        Ok(())
    }
}

/// A continuous path sampled on the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        let expected = grid.n_nodes() * dim;
        if values.len() != expected {
            return Err(Error::SizeMismatch {
                left: expected,
                right: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "path value at node {}",
                pos / dim
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub(crate) fn from_raw(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_nodes() * dim);
        Self { grid, dim, values }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self::from_raw(grid, dim, vec![0.0; grid.n_nodes() * dim])
    }

    /// Constant path equal to `point` at every node.
    pub fn constant(grid: TimeGrid, point: &[f64]) -> Self {
        let dim = point.len();
        let mut values = Vec::with_capacity(grid.n_nodes() * dim);
        for _ in 0..grid.n_nodes() {
            values.extend_from_slice(point);
        }
        Self::from_raw(grid, dim, values)
    }

    /// Samples `f(t, out)` at every node.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Result<Self> {
        let mut values = vec![0.0; grid.n_nodes() * dim];
        for (j, chunk) in values.chunks_mut(dim).enumerate() {
            f(grid.time(j), chunk);
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at node `j`. Panics if `j` is past the last node.
    pub fn at(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim)
    }

    pub fn sup_norm(&self) -> f64 {
        self.nodes().map(norm).fold(0.0, f64::max)
    }

    /// Pointwise `self + other` on a shared grid.
    pub fn add(&self, other: &SamplePath) -> Result<SamplePath> {
        check_compatible(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_raw(self.grid, self.dim, values))
    }

    pub fn scaled(&self, factor: f64) -> SamplePath {
        Self::from_raw(
            self.grid,
            self.dim,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// Concatenates coordinates node by node: result has `dim + other.dim` coordinates.
    pub fn stack(&self, other: &SamplePath) -> Result<SamplePath> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        let dim = self.dim + other.dim;
        let mut values = Vec::with_capacity(self.grid.n_nodes() * dim);
        for (a, b) in self.nodes().zip(other.nodes()) {
            values.extend_from_slice(a);
            values.extend_from_slice(b);
        }
        Ok(Self::from_raw(self.grid, dim, values))
    }

    /// Coordinates `range` of every node.
    pub fn project(&self, range: std::ops::Range<usize>) -> Result<SamplePath> {
        if range.end > self.dim || range.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "coordinate range {range:?} invalid for dimension {}",
                self.dim
            )));
        }
        let dim = range.len();
        let mut values = Vec::with_capacity(self.grid.n_nodes() * dim);
        for node in self.nodes() {
            values.extend_from_slice(&node[range.clone()]);
        }
        Ok(Self::from_raw(self.grid, dim, values))
    }
}

/// A càdlàg path with jumps at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CadlagPath(SamplePath);

/// A jump of a piecewise-constant path: at `node` the value changes by `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub node: usize,
    pub size: Vec<f64>,
}

impl CadlagPath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        SamplePath::new(grid, dim, values).map(Self)
    }

    /// Pure-jump path starting at zero.
    pub fn from_jumps(grid: TimeGrid, dim: usize, jumps: &[Jump]) -> Result<Self> {
        let mut increments = vec![0.0; grid.n_nodes() * dim];
        for jump in jumps {
            grid.check_node(jump.node)?;
            if jump.size.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: jump.size.len(),
                });
            }
            for (slot, s) in increments[jump.node * dim..(jump.node + 1) * dim]
                .iter_mut()
                .zip(&jump.size)
            {
                *slot += s;
            }
        }
        for j in 1..grid.n_nodes() {
            for c in 0..dim {
                increments[j * dim + c] += increments[(j - 1) * dim + c];
            }
        }
        Self::new(grid, dim, increments)
    }

    pub fn as_path(&self) -> &SamplePath {
        &self.0
    }

    pub fn into_path(self) -> SamplePath {
        self.0
    }

    /// Value at an arbitrary time under the right-continuous piecewise-constant readout.
    pub fn value_at(&self, s: f64) -> &[f64] {
        self.0.at(self.0.grid.node_at_or_before(s))
    }

    /// Nodes `j >= 1` ordered by decreasing increment size, at most `limit`,
    /// keeping only increments strictly larger than `threshold`.
    pub fn largest_jumps(&self, limit: usize, threshold: f64) -> Vec<usize> {
        let p = &self.0;
        let mut incs: Vec<(usize, f64)> = (1..p.n_nodes())
            .map(|j| (j, distance(p.at(j), p.at(j - 1))))
            .filter(|&(_, m)| m > threshold)
            .collect();
        incs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        incs.truncate(limit);
        let mut nodes: Vec<usize> = incs.into_iter().map(|(j, _)| j).collect();
        nodes.sort_unstable();
        nodes
    }
}

impl From<SamplePath> for CadlagPath {
    fn from(p: SamplePath) -> Self {
        Self(p)
    }
}

impl std::ops::Deref for CadlagPath {
    type Target = SamplePath;

    fn deref(&self) -> &SamplePath {
        &self.0
    }
}

/// Equally weighted point cloud on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    points: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "point buffer of length {} is not a nonempty multiple of {dim}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud entry".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        Self::new(dim, flat)
    }

    pub(crate) fn from_raw(dim: usize, points: Vec<f64>) -> Self {
        debug_assert!(dim > 0 && points.len().is_multiple_of(dim) && !points.is_empty());
        Self { dim, points }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += v;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Cloud obtained by concatenating the points of `self` and `other`.
    pub fn merge(&self, other: &PointCloud) -> Result<PointCloud> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Ok(Self::from_raw(self.dim, points))
    }
}

/// Whether the members of an ensemble are read as continuous or càdlàg paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Continuous,
    Cadlag,
}

/// The empirical measure of `N` paths sharing a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    kind: PathKind,
    members: Vec<SamplePath>,
}

impl PathEnsemble {
    pub fn new(members: Vec<SamplePath>) -> Result<Self> {
        Self::with_kind(members, PathKind::Continuous)
    }

    pub fn cadlag(members: Vec<CadlagPath>) -> Result<Self> {
        Self::with_kind(
            members.into_iter().map(CadlagPath::into_path).collect(),
            PathKind::Cadlag,
        )
    }

    pub fn with_kind(members: Vec<SamplePath>, kind: PathKind) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidParameter("ensemble must contain at least one path".into()))?;
        let (grid, dim) = (first.grid, first.dim);
        for m in &members {
            if m.grid != grid {
                return Err(Error::GridMismatch);
            }
            if m.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim,
                });
            }
        }
        Ok(Self {
            grid,
            dim,
            kind,
            members,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, i: usize) -> &SamplePath {
        &self.members[i]
    }

    pub fn members(&self) -> &[SamplePath] {
        &self.members
    }

    pub fn into_members(self) -> Vec<SamplePath> {
        self.members
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SamplePath> {
        self.members.iter()
    }

    /// Time-`t_j` marginal, in member order.
    pub fn marginal_at(&self, j: usize) -> Result<PointCloud> {
        self.grid.check_node(j)?;
        let mut points = Vec::with_capacity(self.len() * self.dim);
        for m in &self.members {
            points.extend_from_slice(m.at(j));
        }
        Ok(PointCloud::from_raw(self.dim, points))
    }

    /// Members reordered so that member `i` of the result is member `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<PathEnsemble> {
        if order.len() != self.len() {
            return Err(Error::SizeMismatch {
                left: self.len(),
                right: order.len(),
            });
        }
        let members = order.iter().map(|&i| self.members[i].clone()).collect();
        Self::with_kind(members, self.kind)
    }

    /// Sub-ensemble of the given member indices.
    pub fn select(&self, indices: &[usize]) -> Result<PathEnsemble> {
        let members = indices
            .iter()
            .map(|&i| {
                self.members.get(i).cloned().ok_or(Error::IndexOutOfRange {
                    index: i,
                    max: self.len().saturating_sub(1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_kind(members, self.kind)
    }

    /// Mean over members of the value at node `j`.
    pub fn mean_at(&self, j: usize) -> Result<Vec<f64>> {
        Ok(self.marginal_at(j)?.mean())
    }
}

/// Inputs `(zeta_i, W_i)` of an `N`-particle problem.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEnsemble {
    initial: PointCloud,
    drivers: PathEnsemble,
}

impl InputEnsemble {
    pub fn new(initial: PointCloud, drivers: PathEnsemble) -> Result<Self> {
        if initial.len() != drivers.len() {
            return Err(Error::SizeMismatch {
                left: initial.len(),
                right: drivers.len(),
            });
        }
        if initial.dim() != drivers.dim() {
            return Err(Error::DimensionMismatch {
                expected: drivers.dim(),
                got: initial.dim(),
            });
        }
        Ok(Self { initial, drivers })
    }

    /// Every particle starts at the same point.
    pub fn with_common_start(start: &[f64], drivers: PathEnsemble) -> Result<Self> {
        let mut flat = Vec::with_capacity(drivers.len() * start.len());
        for _ in 0..drivers.len() {
            flat.extend_from_slice(start);
        }
        Self::new(PointCloud::new(start.len(), flat)?, drivers)
    }

    pub fn initial(&self) -> &PointCloud {
        &self.initial
    }

    pub fn drivers(&self) -> &PathEnsemble {
        &self.drivers
    }

    pub fn grid(&self) -> &TimeGrid {
        self.drivers.grid()
    }

    pub fn dim(&self) -> usize {
        self.drivers.dim()
    }

    pub fn len(&self) -> usize {
        self.drivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drivers.is_empty()
    }

    pub fn into_parts(self) -> (PointCloud, PathEnsemble) {
        (self.initial, self.drivers)
    }

    pub fn permuted(&self, order: &[usize]) -> Result<InputEnsemble> {
        let pts: Vec<&[f64]> = order.iter().map(|&i| self.initial.point(i)).collect();
        Self::new(PointCloud::from_points(&pts)?, self.drivers.permuted(order)?)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn check_compatible(a: &SamplePath, b: &SamplePath) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    Ok(())
}

/// Marginal of the ensemble at node `j`.
pub fn marginal_at(ens: &PathEnsemble, j: usize) -> Result<PointCloud> {
    ens.marginal_at(j)
}

/// `max_j |a(t_j) - b(t_j)|`.
pub fn sup_distance(a: &SamplePath, b: &SamplePath) -> Result<f64> {
    check_compatible(a, b)?;
    Ok(sup_distance_unchecked(a, b))
}

pub(crate) fn sup_distance_unchecked(a: &SamplePath, b: &SamplePath) -> f64 {
    a.nodes()
        .zip(b.nodes())
        .map(|(x, y)| distance(x, y))
        .fold(0.0, f64::max)
}

/// The path restricted to `[0, t_j]`.
pub fn restrict_prefix(a: &SamplePath, j: usize) -> Result<SamplePath> {
    let grid = a.grid.prefix(j)?;
    Ok(SamplePath::from_raw(
        grid,
        a.dim,
        a.values[..(j + 1) * a.dim].to_vec(),
    ))
}

/// Càdlàg modulus `w_g(delta)` over partitions whose cells all lie on grid nodes
/// and are wider than `delta`.
///
/// A cell `[t_a, t_b)` sees the values at nodes `a..b`; the final cell is closed
/// and also sees the value at `T`. The infimum over partitions is computed exactly
/// by dynamic programming over the right endpoint.
pub fn cadlag_modulus(g: &CadlagPath, delta: f64) -> Result<f64> {
    let grid = *g.grid();
    if !(delta > 0.0 && delta < grid.horizon()) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, {}), got {delta}",
            grid.horizon()
        )));
    }
    let n = grid.n_steps();
    let path = g.as_path();
    // best[b]: optimal max-oscillation over partitions of [0, t_b)
    let mut best = vec![f64::INFINITY; n + 1];
    best[0] = 0.0;
    let mut answer = f64::INFINITY;
    // narrowest admissible cell, in steps; widths within rounding of delta do not count
    let min_steps = (delta / grid.step() + 1e-9).floor() as usize + 1;
    for a in 0..n {
        if !best[a].is_finite() {
            continue;
        }
        let mut diam: f64 = 0.0;
        // diam holds the diameter of nodes a..b (exclusive of b) while scanning
        for b in (a + 1)..=n {
            let node = path.at(b - 1);
            for k in a..(b - 1) {
                diam = diam.max(distance(node, path.at(k)));
            }
            if b - a < min_steps {
                continue;
            }
            let cell = best[a].max(diam);
            if b < n {
                if cell < best[b] {
                    best[b] = cell;
                }
            } else {
                let last = path.at(n);
                let closed = (a..n).map(|k| distance(last, path.at(k))).fold(diam, f64::max);
                answer = answer.min(best[a].max(closed));
            }
        }
    }
    Ok(answer)
}

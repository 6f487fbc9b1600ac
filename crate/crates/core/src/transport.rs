//! Exact Wasserstein distances between equally weighted empirical measures.
//!
//! For two `N`-point uniform measures the optimal coupling can be taken to be a
//! permutation, so `W_p^p` is `1/N` times the value of a linear assignment
//! problem on the matrix of ground costs raised to the `p`-th power.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{
    check_compatible, distance, sup_distance_unchecked, CadlagPath, PathEnsemble, PointCloud,
    SamplePath, TimeGrid,
};

/// Optimal permutation coupling between two uniform `N`-point measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlanResult {
    pub p: f64,
    pub distance: f64,
    /// `matching[i]` is the atom of the second measure coupled with atom `i` of the first.
    pub matching: Vec<usize>,
    /// `sum_i cost(i, matching[i])^p`.
    pub total_cost: f64,
    /// FNV-1a digest of the bit patterns of the `cost^p` matrix, row-major.
    pub cost_matrix_checksum: u64,
}

/// Serialized form of a distance computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    pub p: f64,
    pub distance: f64,
    pub matching: Vec<usize>,
    pub cost_matrix_checksum: String,
}

impl From<&TransportPlanResult> for DistanceReport {
    fn from(r: &TransportPlanResult) -> Self {
        Self {
            p: r.p,
            distance: r.distance,
            matching: r.matching.clone(),
            cost_matrix_checksum: format!("{:016x}", r.cost_matrix_checksum),
        }
    }
}

fn check_order(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Wasserstein order must be a finite p >= 1, got {p}"
        )));
    }
    Ok(())
}

fn check_sizes(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch { left: a, right: b });
    }
    Ok(())
}

/// Exact `W_p` between two one-dimensional clouds by pairing order statistics.
pub fn wasserstein_1d(a: &PointCloud, b: &PointCloud, p: f64) -> Result<f64> {
    check_order(p)?;
    check_sizes(a.len(), b.len())?;
    for c in [a, b] {
        if c.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: c.dim(),
            });
        }
    }
    let mut xs = a.as_flat().to_vec();
    let mut ys = b.as_flat().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let total: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum();
    Ok((total / xs.len() as f64).powf(1.0 / p))
}

/// Exact `W_p` between two clouds with Euclidean ground cost.
pub fn wasserstein_cloud(a: &PointCloud, b: &PointCloud, p: f64) -> Result<TransportPlanResult> {
    check_order(p)?;
    check_sizes(a.len(), b.len())?;
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(wasserstein_with_cost(a.len(), p, |i, j| {
        distance(a.point(i), b.point(j))
    }))
}

/// Exact `W_p` between two path ensembles with the uniform (sup) ground distance.
pub fn wasserstein_paths(
    a: &PathEnsemble,
    b: &PathEnsemble,
    p: f64,
) -> Result<TransportPlanResult> {
    check_order(p)?;
    check_sizes(a.len(), b.len())?;
    check_compatible(a.member(0), b.member(0))?;
    Ok(wasserstein_with_cost(a.len(), p, |i, j| {
        sup_distance_unchecked(a.member(i), b.member(j))
    }))
}

/// `W_p` between two càdlàg ensembles using [`skorokhod_j1_upper`] as ground cost.
///
/// The ground cost is itself an upper bound of the Skorokhod distance, so the
/// result bounds the true Skorokhod-Wasserstein distance from above.
pub fn wasserstein_skorokhod(
    a: &PathEnsemble,
    b: &PathEnsemble,
    p: f64,
) -> Result<TransportPlanResult> {
    check_order(p)?;
    check_sizes(a.len(), b.len())?;
    check_compatible(a.member(0), b.member(0))?;
    let prepared_a: Vec<JumpProfile> = a.iter().map(JumpProfile::new).collect();
    let prepared_b: Vec<JumpProfile> = b.iter().map(JumpProfile::new).collect();
    Ok(wasserstein_with_cost(a.len(), p, |i, j| {
        j1_upper_prepared(&prepared_a[i], &prepared_b[j])
    }))
}

/// `W_p` for an arbitrary ground cost between atom `i` of the first and atom `j`
/// of the second measure.
pub fn wasserstein_with_cost(
    n: usize,
    p: f64,
    cost: impl Fn(usize, usize) -> f64 + Sync,
) -> TransportPlanResult {
    let mut costs = vec![0.0; n * n];
    costs.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.iter_mut().enumerate() {
            let c = cost(i, j);
            *slot = if p == 1.0 { c } else { c.powf(p) };
        }
    });
    let matching = solve_assignment(&costs, n);
    let total_cost: f64 = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[i * n + j])
        .sum();
    TransportPlanResult {
        p,
        distance: (total_cost / n as f64).powf(1.0 / p),
        matching,
        total_cost,
        cost_matrix_checksum: fnv1a(&costs),
    }
}

fn fnv1a(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Minimum-cost perfect matching on a dense `n x n` row-major cost matrix
/// (shortest augmenting path Hungarian method, `O(n^3)`).
///
/// Returns `assignment[row] = column`. Among equal reduced costs the lowest
/// column index is taken, so the output is deterministic.
pub fn solve_assignment(costs: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(costs.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &costs[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Most jumps per path considered when building candidate time changes.
pub const MAX_CANDIDATE_JUMPS: usize = 4;

struct JumpProfile<'a> {
    path: &'a SamplePath,
    jumps: Vec<usize>,
}

impl<'a> JumpProfile<'a> {
    fn new(path: &'a SamplePath) -> Self {
        let cad = CadlagPath::from(path.clone());
        let scale = path.sup_norm().max(1.0);
        // increments below this are treated as continuous motion
        let threshold = 1e-9 * scale;
        Self {
            path,
            jumps: cad.largest_jumps(MAX_CANDIDATE_JUMPS, threshold),
        }
    }
}

/// Upper bound on the Skorokhod J1 distance between two càdlàg paths.
///
/// Minimizes `||lambda|| + ||a - b o lambda||_inf` over a finite family of
/// piecewise-linear time changes: the identity, and every order-preserving
/// pairing of the (at most [`MAX_CANDIDATE_JUMPS`]) largest jump nodes of `a`
/// with those of `b`, interpolated linearly through the paired nodes. Here
/// `||lambda||` is the largest `|log slope|` and the sup is exact for the
/// piecewise-constant readout of both paths.
pub fn skorokhod_j1_upper(a: &CadlagPath, b: &CadlagPath) -> Result<f64> {
    check_compatible(a, b)?;
    Ok(j1_upper_prepared(
        &JumpProfile::new(a.as_path()),
        &JumpProfile::new(b.as_path()),
    ))
}

fn j1_upper_prepared(a: &JumpProfile<'_>, b: &JumpProfile<'_>) -> f64 {
    let grid = *a.path.grid();
    let mut best = sup_distance_unchecked(a.path, b.path);
    if best == 0.0 {
        return 0.0;
    }
    let mut pairs = Vec::with_capacity(MAX_CANDIDATE_JUMPS);
    enumerate_pairings(&a.jumps, &b.jumps, 0, 0, &mut pairs, &mut |pairs| {
        if pairs.iter().all(|(x, y)| x == y) {
            return;
        }
        let knots = knots_for(&grid, pairs);
        let lam_norm = knots
            .windows(2)
            .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).ln().abs())
            .fold(0.0, f64::max);
        if lam_norm >= best {
            return;
        }
        let d = sup_after_time_change(a.path, b.path, &knots);
        best = best.min(lam_norm + d);
    });
    best
}

fn enumerate_pairings(
    ja: &[usize],
    jb: &[usize],
    start_a: usize,
    start_b: usize,
    current: &mut Vec<(usize, usize)>,
    visit: &mut impl FnMut(&[(usize, usize)]),
) {
    for ia in start_a..ja.len() {
        for ib in start_b..jb.len() {
            current.push((ja[ia], jb[ib]));
            visit(current);
            enumerate_pairings(ja, jb, ia + 1, ib + 1, current, visit);
            current.pop();
        }
    }
}

/// Breakpoints `(s, lambda(s))` through `(0,0)`, the paired node times and `(T,T)`.
fn knots_for(grid: &TimeGrid, pairs: &[(usize, usize)]) -> Vec<(f64, f64)> {
    let mut knots = Vec::with_capacity(pairs.len() + 2);
    knots.push((0.0, 0.0));
    for &(na, nb) in pairs {
        knots.push((grid.time(na), grid.time(nb)));
    }
    knots.push((grid.horizon(), grid.horizon()));
    // a jump at the last node pairs (T, T) with the closing knot
    knots.dedup();
    knots
}

/// `sup_s |a(s) - b(lambda(s))|` for piecewise-constant right-continuous readouts.
///
/// Both sides are constant between consecutive points of the merged set of grid
/// nodes and preimages of grid nodes under `lambda`, so evaluating at those
/// points is exact.
fn sup_after_time_change(a: &SamplePath, b: &SamplePath, knots: &[(f64, f64)]) -> f64 {
    let grid = *a.grid();
    let n = grid.n_steps();
    let tol = 1e-9 * grid.step();

    // preimages of b's nodes under lambda, increasing
    let mut pre = Vec::with_capacity(n + 1);
    let mut seg = 0usize;
    for k in 0..=n {
        let t = grid.time(k);
        while seg + 2 < knots.len() && knots[seg + 1].1 <= t {
            seg += 1;
        }
        let (s0, l0) = knots[seg];
        let (s1, l1) = knots[seg + 1];
        pre.push(s0 + (t - l0) * (s1 - s0) / (l1 - l0));
    }

    let mut best: f64 = 0.0;
    let (mut ia, mut ib) = (0usize, 0usize);
    while ia <= n || ib <= n {
        let ta = if ia <= n { grid.time(ia) } else { f64::INFINITY };
        let tb = if ib <= n { pre[ib] } else { f64::INFINITY };
        let same = (ta - tb).abs() <= tol;
        if ta < tb || same {
            ia += 1;
        }
        if tb < ta || same {
            ib += 1;
        }
        best = best.max(distance(a.at(ia.max(1) - 1), b.at(ib.max(1) - 1)));
    }
    best
}

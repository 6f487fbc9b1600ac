//! Solver-driven experiments: simulate, stability, inverse, sweeps, battery, càdlàg.

use std::sync::Mutex;

use mkvlab_core::drift::{make_battery_drift, Drift};
use mkvlab_core::fluctuations::{convergence_sweep_with, SweepTable};
use mkvlab_core::io::{write_ensemble_csv, write_json, write_reflected_csv, write_table_csv, EnsembleManifest, TraceRecord};
use mkvlab_core::noise::{compound_poisson_jumps, derive_seed, gaussian_points, generate, NoiseKind};
use mkvlab_core::paths::{restrict_prefix, CadlagPath, InputEnsemble, PathEnsemble, PointCloud, SamplePath, TimeGrid};
use mkvlab_core::reflection::{battery_simulate, reflected_particle_solve, Polyhedron, ReflectedPath};
use mkvlab_core::solver::{common_noise_solve, lift_inputs, particle_solve, picard_solve, reconstruct_inputs, solve_cadlag, synchronous_gap};
use mkvlab_core::transport::{wasserstein_paths, wasserstein_skorokhod};
use serde::Serialize;

use crate::config::{
    BatteryExperiment, CadlagParams, CommonNoiseParams, DriftConfig, InitialConfig, InverseParams, NoiseSpec,
    SimulateParams, SolveMethod, StabilityParams, SweepParams,
};
use crate::error::CliError;
use crate::run::RunContext;

const NOISE_STREAM: u64 = 1;
const INITIAL_STREAM: u64 = 2;

fn check_dims(drift: &DriftConfig, noise: &NoiseSpec, initial: Option<&InitialConfig>) -> Result<usize, CliError> {
    let d = drift.dim();
    if noise.dim != d || initial.is_some_and(|i| i.dim() != d) {
        return Err(CliError::Config(format!(
            "dimension mismatch: drift {d}, noise {}, initial {:?}",
            noise.dim,
            initial.map(InitialConfig::dim)
        )));
    }
    Ok(d)
}

/// Inputs of size `n` whose noise and initial streams both derive from `seed`.
fn build_inputs(
    noise: &NoiseSpec,
    initial: &InitialConfig,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<InputEnsemble, CliError> {
    let drivers = generate(&noise.with_seed(derive_seed(seed, NOISE_STREAM))?, grid, n)?;
    let zeta = initial.build(derive_seed(seed, INITIAL_STREAM), n)?;
    Ok(InputEnsemble::new(zeta, drivers)?)
}

fn check_n(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("ensemble size must be positive".into()));
    }
    Ok(())
}

pub fn simulate(ctx: &mut RunContext, p: &SimulateParams) -> Result<(), CliError> {
    check_dims(&p.drift, &p.noise, Some(&p.initial))?;
    check_n(p.n)?;
    let drift = p.drift.build()?;
    let seed = ctx.seed("inputs", 1);
    let inputs = build_inputs(&p.noise, &p.initial, &ctx.grid, p.n, seed)?;
    let cfg = ctx.cfg.solver;

    let particles = match p.method {
        SolveMethod::Picard => None,
        _ => Some(particle_solve(drift.as_ref(), &inputs, &cfg)?),
    };
    let picard = match p.method {
        SolveMethod::Particle => None,
        _ => Some(picard_solve(drift.as_ref(), &inputs, &cfg)?),
    };
    if let Some((_, trace)) = &picard {
        ctx.metric("picard_iterations", trace.iterations_used);
        ctx.metric("picard_gaps", &trace.successive_gaps);
        write_json(ctx.artifact("picard_trace.json"), &TraceRecord::from(trace))?;
    }
    if let (Some(x), Some((fixed, trace))) = (&particles, &picard) {
        let gap = synchronous_gap(fixed, x);
        ctx.metric("fixed_point_gap", gap);
        ctx.check_le("fixed_point_gap", gap, cfg.picard_tol);
        let last = trace.iterates.len().min(ctx.grid.n_nodes());
        let mut mismatches = Vec::new();
        for (m, iterate) in trace.iterates.iter().enumerate().take(last) {
            let exact = iterate
                .iter()
                .zip(x.iter())
                .all(|(a, b)| restrict_prefix(a, m).ok() == restrict_prefix(b, m).ok());
            if !exact {
                mismatches.push(m);
            }
        }
        ctx.metric("prefix_iterates_checked", last);
        ctx.check_holds("prefix_bit_exact", mismatches.is_empty(), format!("mismatched iterates {mismatches:?}"));
    }
    let out = particles.or(picard.map(|(x, _)| x)).expect("at least one solve ran");
    write_ensemble_csv(ctx.artifact("ensemble.csv"), &out)?;
    write_json(ctx.artifact("ensemble.json"), &EnsembleManifest::describe(&out, vec![("inputs".into(), seed)]))?;
    ctx.metric("drift", drift.name());
    ctx.metric("declared_lipschitz", drift.lipschitz());
    Ok(())
}

/// Unit vectors `u_i`, one per member.
fn unit_directions(seed: u64, dim: usize, n: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let g = gaussian_points(seed, dim, n, &vec![0.0; dim], 1.0)?;
    Ok(g.iter()
        .map(|v| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|a| a / norm).collect()
            } else {
                let mut e = vec![0.0; dim];
                e[0] = 1.0;
                e
            }
        })
        .collect())
}

#[derive(Serialize)]
struct StabilityRow {
    delta: f64,
    input_distance: f64,
    output_distance: f64,
    ratio: f64,
}

pub fn stability(ctx: &mut RunContext, p: &StabilityParams) -> Result<(), CliError> {
    let d = check_dims(&p.drift, &p.noise, Some(&p.initial))?;
    check_n(p.n)?;
    if p.deltas.is_empty() || p.deltas.iter().any(|&x| !(x > 0.0)) {
        return Err(CliError::Config("deltas must be positive and nonempty".into()));
    }
    let drift = p.drift.build()?;
    let cfg = ctx.cfg.solver;
    let seed = ctx.seed("inputs", 1);
    let inputs = build_inputs(&p.noise, &p.initial, &ctx.grid, p.n, seed)?;
    let out = particle_solve(drift.as_ref(), &inputs, &cfg)?;
    let dirs = unit_directions(ctx.seed("directions", 3), d, p.n)?;
    let horizon = ctx.grid.horizon();
    let mut rows = Vec::new();
    for &delta in &p.deltas {
        // W_i + delta (t / T) u_i
        let shifted: Vec<SamplePath> = inputs
            .drivers()
            .iter()
            .zip(&dirs)
            .map(|(w, u)| {
                let ramp = SamplePath::from_fn(ctx.grid, d, |t, v| {
                    for (slot, uc) in v.iter_mut().zip(u) {
                        *slot = delta * (t / horizon) * uc;
                    }
                })?;
                w.add(&ramp)
            })
            .collect::<mkvlab_core::Result<_>>()?;
        let moved = InputEnsemble::new(inputs.initial().clone(), PathEnsemble::new(shifted)?)?;
        let out2 = particle_solve(drift.as_ref(), &moved, &cfg)?;
        let input_distance = wasserstein_paths(inputs.drivers(), moved.drivers(), cfg.p)?.distance;
        let output_distance = wasserstein_paths(&out, &out2, cfg.p)?.distance;
        rows.push(StabilityRow { delta, input_distance, output_distance, ratio: output_distance / delta });
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let bound = (drift.lipschitz() * horizon).exp() * (1.0 + p.margin);
    ctx.metric("ratios", &ratios);
    ctx.metric("ratio_spread", spread);
    ctx.metric("ratio_bound", bound);
    ctx.check_le("ratio_spread", spread, p.max_spread);
    ctx.check_le("max_ratio", hi, bound);
    write_table_csv(
        ctx.artifact("stability.csv"),
        &["delta", "input_distance", "output_distance", "ratio"],
        &rows.iter().map(|r| vec![r.delta, r.input_distance, r.output_distance, r.ratio]).collect::<Vec<_>>(),
    )?;
    write_json(ctx.artifact("stability.json"), &rows)?;
    Ok(())
}

pub fn inverse(ctx: &mut RunContext, p: &InverseParams) -> Result<(), CliError> {
    let d = check_dims(&p.drift, &p.noise, Some(&p.initial))?;
    check_n(p.n)?;
    let drift = p.drift.build()?;
    let cfg = ctx.cfg.solver;
    let base = ctx.seed("instances", 3);
    let mut rows = Vec::with_capacity(p.instances);
    for k in 0..p.instances {
        let inputs = build_inputs(&p.noise, &p.initial, &ctx.grid, p.n, derive_seed(base, k as u64))?;
        let x = particle_solve(drift.as_ref(), &inputs, &cfg)?;
        let mut err: f64 = 0.0;
        for i in 0..p.n {
            let (zeta, w) = reconstruct_inputs(drift.as_ref(), &x, x.member(i), &cfg)?;
            let z0 = inputs.initial().point(i);
            err = zeta.iter().zip(z0).map(|(a, b)| (a - b).abs()).fold(err, f64::max);
            let wi = inputs.drivers().member(i);
            let w0 = wi.at(0);
            for (j, node) in w.nodes().enumerate() {
                for c in 0..d {
                    err = err.max((node[c] - (wi.at(j)[c] - w0[c])).abs());
                }
            }
        }
        rows.push(vec![k as f64, err]);
    }
    let worst = rows.iter().map(|r| r[1]).fold(0.0, f64::max);
    ctx.metric("instances", p.instances);
    ctx.metric("max_reconstruction_error", worst);
    ctx.check_le("max_reconstruction_error", worst, p.tolerance);
    write_table_csv(ctx.artifact("inverse.csv"), &["instance", "max_error"], &rows)?;
    Ok(())
}

fn write_sweep(ctx: &mut RunContext, table: &SweepTable) -> Result<(), CliError> {
    let mut header = vec!["n".to_string(), "mean_distance".to_string()];
    header.extend((0..table.repeats).map(|r| format!("repeat_{r}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.n as f64, r.mean_distance];
            v.extend(&r.distances);
            v
        })
        .collect();
    write_table_csv(ctx.artifact("sweep.csv"), &header_refs, &rows)?;
    write_json(ctx.artifact("sweep.json"), table)?;
    ctx.metric("slope", table.slope);
    ctx.metric("mean_distances", table.rows.iter().map(|r| r.mean_distance).collect::<Vec<_>>());
    ctx.check_holds("strictly_decreasing", table.strictly_decreasing(), "repeat-averaged distances");
    Ok(())
}

pub fn sweep(ctx: &mut RunContext, p: &SweepParams) -> Result<(), CliError> {
    check_dims(&p.drift, &p.noise, Some(&p.initial))?;
    let drift = p.drift.build()?;
    let cfg = ctx.cfg.solver;
    let grid = ctx.grid;
    let seed = ctx.seed("sweep", 3);
    let table = convergence_sweep_with(
        |n, s| {
            let inputs = build_inputs(&p.noise, &p.initial, &grid, n, s).map_err(to_core)?;
            particle_solve(drift.as_ref(), &inputs, &cfg)
        },
        |a, b| Ok(wasserstein_paths(a, b, cfg.p)?.distance),
        &p.n_list,
        p.reference_m,
        p.repeats,
        seed,
    )
    .map_err(CliError::config_or_run)?;
    write_sweep(ctx, &table)?;
    if let Some([lo, hi]) = p.slope_range {
        ctx.check_ge("slope_min", table.slope, lo);
        ctx.check_le("slope_max", table.slope, hi);
    }
    Ok(())
}

pub fn common_noise(ctx: &mut RunContext, p: &CommonNoiseParams) -> Result<(), CliError> {
    check_dims(&p.drift, &p.noise, Some(&p.initial))?;
    check_dims(&p.drift, &p.common, None)?;
    let drift = p.drift.build()?;
    let cfg = ctx.cfg.solver;
    let grid = ctx.grid;
    let common_seed = ctx.seed("common", 4);
    let b = generate(&p.common.with_seed(common_seed)?, &grid, 1)?.member(0).clone();
    let seed = ctx.seed("sweep", 3);
    let table = convergence_sweep_with(
        |n, s| {
            let inputs = build_inputs(&p.noise, &p.initial, &grid, n, s).map_err(to_core)?;
            common_noise_solve(drift.as_ref(), &inputs, &b, &cfg)
        },
        |x, y| Ok(wasserstein_paths(x, y, cfg.p)?.distance),
        &p.n_list,
        p.reference_m,
        p.repeats,
        seed,
    )
    .map_err(CliError::config_or_run)?;
    write_sweep(ctx, &table)?;
    write_ensemble_csv(ctx.artifact("common_path.csv"), &PathEnsemble::new(vec![b])?)?;
    let first = table.rows.first().expect("nonempty sweep").mean_distance;
    let last = table.rows.last().expect("nonempty sweep").mean_distance;
    ctx.metric("final_ratio", last / first);
    if let Some(max) = p.max_final_ratio {
        ctx.check_lt("final_ratio", last / first, max);
    }
    Ok(())
}

fn to_core(e: CliError) -> mkvlab_core::Error {
    match e {
        CliError::Core(c) => c,
        other => mkvlab_core::Error::InvalidParameter(other.to_string()),
    }
}

fn group_radii(radii: [f64; 2], n: usize) -> Vec<f64> {
    (0..n).map(|i| if i < n / 2 { radii[0] } else { radii[1] }).collect()
}

#[derive(Serialize)]
struct GroupSummary {
    radius: f64,
    members: usize,
    mean_fraction: Vec<f64>,
}

fn group_summaries(paths: &[ReflectedPath], radii: &[f64]) -> Vec<GroupSummary> {
    let mut distinct: Vec<f64> = radii.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct
        .into_iter()
        .map(|r| {
            let members: Vec<&ReflectedPath> = paths.iter().zip(radii).filter(|(_, &q)| q == r).map(|(p, _)| p).collect();
            let nodes = members[0].x.n_nodes();
            let mean_fraction = (0..nodes)
                .map(|j| members.iter().map(|p| p.x.at(j)[0]).sum::<f64>() / members.len() as f64)
                .collect();
            GroupSummary { radius: r, members: members.len(), mean_fraction }
        })
        .collect()
}

pub fn battery(ctx: &mut RunContext, p: &BatteryExperiment) -> Result<(), CliError> {
    if p.noise.dim != 1 {
        return Err(CliError::Config("battery noise must be one-dimensional".into()));
    }
    if p.n_list.iter().any(|&n| n < 2) {
        return Err(CliError::Config("battery runs need at least two particles".into()));
    }
    let params = p.model.build()?;
    let cfg = ctx.cfg.solver;
    let grid = ctx.grid;
    let declared = p.model.declared_lipschitz;
    let range = Mutex::new((f64::INFINITY, f64::NEG_INFINITY));
    let track = |paths: &[ReflectedPath]| {
        let (lo, hi) = paths.iter().flat_map(|r| r.x.values().chunks(2).map(|v| v[0])).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), v| (lo.min(v), hi.max(v)),
        );
        let mut g = range.lock().expect("range lock");
        g.0 = g.0.min(lo);
        g.1 = g.1.max(hi);
    };
    let run = |n: usize, s: u64| -> mkvlab_core::Result<Vec<ReflectedPath>> {
        let noise = p.noise.with_seed(derive_seed(s, NOISE_STREAM)).map_err(to_core)?;
        battery_simulate(&params, declared, p.initial_fraction, &group_radii(p.radii, n), &noise, &grid, &cfg)
    };
    let seed = ctx.seed("sweep", 3);
    let table = convergence_sweep_with(
        |n, s| {
            let paths = run(n, s)?;
            track(&paths);
            PathEnsemble::new(paths.into_iter().map(|r| r.x).collect())
        },
        |a, b| Ok(wasserstein_paths(a, b, cfg.p)?.distance),
        &p.n_list,
        p.reference_m,
        p.repeats,
        seed,
    )
    .map_err(CliError::config_or_run)?;
    write_sweep(ctx, &table)?;

    // one stored run at the largest size, same inputs as repeat 0 of the sweep
    let n_max = *p.n_list.last().expect("nonempty");
    let radii = group_radii(p.radii, n_max);
    let showcase = run(n_max, derive_seed(seed, 1))?;
    track(&showcase);
    write_reflected_csv(ctx.artifact("battery.csv"), &showcase)?;
    write_json(ctx.artifact("battery_groups.json"), &group_summaries(&showcase, &radii))?;

    let (lo, hi) = *range.lock().expect("range lock");
    ctx.metric("min_fraction", lo);
    ctx.metric("max_fraction", hi);
    ctx.check_ge("min_fraction", lo, 0.0);
    ctx.check_le("max_fraction", hi, 1.0);

    // shared drivers within each group give identical group members
    let g = p.symmetry_group_size.max(1);
    let sym_seed = ctx.seed("symmetry", 5);
    let w = generate(&p.noise.with_seed(sym_seed)?, &grid, 2)?;
    let radii_sym = group_radii(p.radii, 2 * g);
    let drivers: Vec<SamplePath> =
        radii_sym.iter().enumerate().map(|(i, &r)| w.member(i / g).scaled((params.sigma_r)(r))).collect();
    let inputs = InputEnsemble::new(PointCloud::new(1, vec![p.initial_fraction; 2 * g])?, PathEnsemble::new(drivers)?)?;
    let radius_paths: Vec<SamplePath> = radii_sym.iter().map(|&r| SamplePath::constant(grid, &[r])).collect();
    let lifted = lift_inputs(&inputs, &radius_paths)?;
    let domain = Polyhedron::boxed(&[0.0, params.r_min], &[1.0, params.r_max])?;
    let drift = make_battery_drift(params.clone(), declared)?;
    let sym = reflected_particle_solve(&drift as &dyn Drift, &lifted, &domain, &cfg)?;
    let symmetric = (0..2).all(|grp| sym[grp * g..(grp + 1) * g].windows(2).all(|w| w[0].x == w[1].x));
    let groups_differ = sym[0].x != sym[g].x;
    ctx.check_holds("group_symmetry", symmetric, "members sharing radius and driver coincide bitwise");
    ctx.metric("groups_differ", groups_differ);
    write_json(ctx.artifact("symmetry_groups.json"), &group_summaries(&sym, &radii_sym))?;
    Ok(())
}

/// Jumps moved `shift` nodes later, clamped to the last node.
fn shifted_jumps(jumps: &[mkvlab_core::paths::Jump], shift: usize, last: usize) -> Vec<mkvlab_core::paths::Jump> {
    jumps
        .iter()
        .map(|j| mkvlab_core::paths::Jump { node: (j.node + shift).min(last), size: j.size.clone() })
        .collect()
}

pub fn cadlag(ctx: &mut RunContext, p: &CadlagParams) -> Result<(), CliError> {
    let d = check_dims(&p.drift, &p.noise, Some(&p.initial))?;
    check_n(p.n)?;
    if !matches!(p.noise.kind, NoiseKind::CompoundPoisson { .. }) {
        return Err(CliError::Config("cadlag runs need compound_poisson noise".into()));
    }
    let drift = p.drift.build()?;
    let cfg = ctx.cfg.solver;
    let grid = ctx.grid;
    let noise = p.noise.with_seed(ctx.seed("noise", 1))?;
    let zeta = p.initial.build(ctx.seed("initial", 2), p.n)?;
    let jumps = compound_poisson_jumps(&noise, &grid, p.n)?;
    let solve = |shift: usize| -> Result<PathEnsemble, CliError> {
        let paths: Vec<CadlagPath> = jumps
            .iter()
            .map(|j| CadlagPath::from_jumps(grid, d, &shifted_jumps(j, shift, grid.n_steps())))
            .collect::<mkvlab_core::Result<_>>()?;
        let inputs = InputEnsemble::new(zeta.clone(), PathEnsemble::cadlag(paths)?)?;
        Ok(solve_cadlag(drift.as_ref(), &inputs, &cfg)?)
    };
    let base = solve(0)?;
    let norm = base.iter().map(SamplePath::sup_norm).sum::<f64>() / p.n as f64;
    let mut rows = Vec::new();
    for &shift in &p.shifts {
        let moved = solve(shift)?;
        let j1 = wasserstein_skorokhod(&base, &moved, cfg.p)?.distance;
        let uniform = wasserstein_paths(&base, &moved, cfg.p)?.distance;
        rows.push(vec![shift as f64, j1, uniform]);
    }
    write_ensemble_csv(ctx.artifact("ensemble.csv"), &base)?;
    write_table_csv(ctx.artifact("cadlag.csv"), &["shift", "skorokhod_distance", "uniform_distance"], &rows)?;
    let distances: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    ctx.metric("shifts", &p.shifts);
    ctx.metric("distances", &distances);
    ctx.metric("uniform_distances", rows.iter().map(|r| r[2]).collect::<Vec<_>>());
    ctx.metric("mean_path_norm", norm);
    ctx.check_holds(
        "decreasing_in_shift",
        distances.windows(2).all(|w| w[1] < w[0]),
        format!("{distances:?}"),
    );
    if let Some(&last) = distances.last() {
        ctx.metric("final_fraction", last / norm);
        ctx.check_lt("final_fraction", last / norm, p.max_final_fraction);
    }
    Ok(())
}

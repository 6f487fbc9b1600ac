//! Reflection, fluctuation, LLN and transport self-test experiments.

use mkvlab_core::fluctuations::{clt_variance, ks_normal_fit, modified_lln_stat_with, monte_carlo_fluctuations, sample_mean_var, FPrimeSolution};
use mkvlab_core::io::{write_json, write_reflected_csv, write_table_csv};
use mkvlab_core::noise::{derive_seed, generate, member_rng};
use mkvlab_core::paths::{sup_distance, InputEnsemble, PathEnsemble, PointCloud, SamplePath, TimeGrid};
use mkvlab_core::reflection::{check_reflected, reflected_particle_solve, skorokhod_map, Polyhedron, ReflectionDiagnostics};
use mkvlab_core::transport::{solve_assignment, wasserstein_cloud, wasserstein_paths};
use rand::Rng;
use serde::Serialize;

use crate::config::{BoundedLaw, CltParams, LlnParams, ReflectCase, ReflectParams, SelftestParams};
use crate::error::CliError;
use crate::run::RunContext;

fn start_inputs(p: &Polyhedron, drivers: PathEnsemble) -> Result<InputEnsemble, CliError> {
    let n = drivers.len();
    let start = p.interior_point().to_vec();
    let flat: Vec<f64> = start.iter().copied().cycle().take(start.len() * n).collect();
    Ok(InputEnsemble::new(PointCloud::new(start.len(), flat)?, drivers)?)
}

/// `A sin(2 pi f t / T + phase) - A sin(phase)` in each coordinate, with
/// `f = 1 + (i + c) mod 3` and random phases.
fn smooth_drivers(grid: TimeGrid, dim: usize, n: usize, amplitude: f64, seed: u64) -> Result<PathEnsemble, CliError> {
    let horizon = grid.horizon();
    let members = (0..n)
        .map(|i| {
            let mut rng = member_rng(seed, i as u64);
            let phases: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            SamplePath::from_fn(grid, dim, |t, v| {
                for (c, slot) in v.iter_mut().enumerate() {
                    let freq = std::f64::consts::TAU * (1 + (i + c) % 3) as f64 / horizon;
                    *slot = amplitude * ((freq * t + phases[c]).sin() - phases[c].sin());
                }
            })
        })
        .collect::<mkvlab_core::Result<Vec<_>>>()?;
    Ok(PathEnsemble::new(members)?)
}

#[derive(Debug, Serialize)]
struct ReflectSummary {
    case: String,
    diagnostics: ReflectionDiagnostics,
    levels: Vec<usize>,
    errors: Vec<f64>,
    observed_orders: Vec<f64>,
    scales: Vec<f64>,
    stability_ratios: Vec<f64>,
    c_max: f64,
}

fn reflect_case(ctx: &mut RunContext, p: &ReflectParams, case: &ReflectCase, index: u64) -> Result<ReflectSummary, CliError> {
    let domain = case.domain.build()?;
    let d = domain.dim();
    let drift = p.drift.with_dim(d)?.build()?;
    let cfg = ctx.cfg.solver;
    let grid = ctx.grid;
    let noise = mkvlab_core::noise::NoiseConfig { dim: d, ..p.noise.with_seed(0)? };

    // invariants over members * n_steps projected steps
    let w = generate(&noise.with_seed(ctx.seed(&format!("{}/invariants", case.name), 10 + 10 * index)), &grid, p.invariant_members)?;
    let paths = reflected_particle_solve(drift.as_ref(), &start_inputs(&domain, w)?, &domain, &cfg)?;
    let diagnostics = paths
        .iter()
        .map(|r| check_reflected(&domain, r, p.tolerance))
        .fold(ReflectionDiagnostics::default(), ReflectionDiagnostics::merge);
    write_reflected_csv(ctx.artifact(&format!("reflect_{}.csv", case.name)), &paths)?;

    // self-convergence against a finer oracle
    if p.levels.len() < 2 || p.levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Config("levels must be ascending with at least two entries".into()));
    }
    let fine = p.levels.last().expect("nonempty") * p.oracle_factor;
    if p.levels.iter().any(|&n| !fine.is_multiple_of(n)) {
        return Err(CliError::Config("every level must divide the oracle grid".into()));
    }
    let smooth_seed = ctx.seed(&format!("{}/smooth", case.name), 11 + 10 * index);
    let solve_level = |n: usize| -> Result<Vec<SamplePath>, CliError> {
        let g = TimeGrid::new(grid.horizon(), n)?;
        let drivers = smooth_drivers(g, d, p.smooth_members, p.smooth_amplitude, smooth_seed)?;
        let out = reflected_particle_solve(drift.as_ref(), &start_inputs(&domain, drivers)?, &domain, &cfg)?;
        Ok(out.into_iter().map(|r| r.x).collect())
    };
    let oracle = solve_level(fine)?;
    let mut errors = Vec::new();
    for &n in &p.levels {
        let coarse = solve_level(n)?;
        let stride = fine / n;
        // member-averaged sup error on the coarse nodes
        let mut total = 0.0;
        for (a, b) in coarse.iter().zip(&oracle) {
            let mut worst: f64 = 0.0;
            for j in 0..=n {
                let diff: f64 = a.at(j).iter().zip(b.at(j * stride)).map(|(u, v)| (u - v).powi(2)).sum();
                worst = worst.max(diff.sqrt());
            }
            total += worst;
        }
        errors.push(total / coarse.len() as f64);
    }
    let observed_orders: Vec<f64> = p
        .levels
        .windows(2)
        .zip(errors.windows(2))
        .map(|(n, e)| (e[0] / e[1]).ln() / (n[1] as f64 / n[0] as f64).ln())
        .collect();

    // Lipschitz ratio of the discrete Skorokhod map
    let z = generate(&noise.with_seed(ctx.seed(&format!("{}/stability", case.name), 12 + 10 * index)), &grid, p.stability_members)?;
    let u = generate(&noise.with_seed(ctx.seed(&format!("{}/perturbation", case.name), 13 + 10 * index)), &grid, p.stability_members)?;
    let x0 = domain.interior_point().to_vec();
    let mut stability_ratios = Vec::new();
    for &delta in &p.perturbation_scales {
        let mut worst: f64 = 0.0;
        for (zi, ui) in z.iter().zip(u.iter()) {
            let norm = ui.sup_norm();
            if norm == 0.0 {
                continue;
            }
            let moved = zi.add(&ui.scaled(delta / norm))?;
            let a = skorokhod_map(&domain, &x0, zi)?;
            let b = skorokhod_map(&domain, &x0, &moved)?;
            let input = sup_distance(zi, &moved)?;
            let gap = sup_distance(&a.x, &b.x)?.max(sup_distance(&a.k, &b.k)?);
            worst = worst.max(gap / input);
        }
        stability_ratios.push(worst);
    }

    Ok(ReflectSummary {
        case: case.name.clone(),
        diagnostics,
        levels: p.levels.clone(),
        errors,
        observed_orders,
        scales: p.perturbation_scales.clone(),
        stability_ratios,
        c_max: case.c_max,
    })
}

pub fn reflect(ctx: &mut RunContext, p: &ReflectParams) -> Result<(), CliError> {
    if p.cases.is_empty() || p.perturbation_scales.is_empty() {
        return Err(CliError::Config("reflect needs at least one case and one perturbation scale".into()));
    }
    let mut summaries = Vec::new();
    for (k, case) in p.cases.iter().enumerate() {
        let s = reflect_case(ctx, p, case, k as u64)?;
        let name = &s.case;
        let tol = p.tolerance;
        ctx.check_le(&format!("{name}/violation"), s.diagnostics.max_violation, tol);
        ctx.check_le(&format!("{name}/complementarity"), s.diagnostics.max_complementarity, tol);
        ctx.check_le(&format!("{name}/normal_cone"), s.diagnostics.max_cone_residual, tol);
        ctx.check_le(&format!("{name}/variation"), s.diagnostics.max_tv_mismatch, tol);
        ctx.metric(&format!("{name}/steps_checked"), s.diagnostics.steps);
        for (k, &order) in s.observed_orders.iter().enumerate() {
            ctx.check_ge(&format!("{name}/order_{k}_min"), order, p.ratio_range[0]);
            ctx.check_le(&format!("{name}/order_{k}_max"), order, p.ratio_range[1]);
        }
        for (delta, &r) in s.scales.iter().zip(&s.stability_ratios) {
            ctx.check_le(&format!("{name}/stability_{delta}"), r, s.c_max);
        }
        ctx.metric(&format!("{name}/errors"), &s.errors);
        ctx.metric(&format!("{name}/observed_orders"), &s.observed_orders);
        ctx.metric(&format!("{name}/stability_ratios"), &s.stability_ratios);
        summaries.push(s);
    }
    let rows: Vec<Vec<f64>> = summaries
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.levels.iter().zip(&s.errors).map(move |(&n, &e)| vec![k as f64, n as f64, e]))
        .collect();
    write_table_csv(ctx.artifact("reflect_convergence.csv"), &["case", "n_steps", "error"], &rows)?;
    write_json(ctx.artifact("reflect.json"), &summaries)?;
    Ok(())
}

#[derive(Serialize)]
struct CltSummary {
    m: f64,
    sigma2: f64,
    mc_mean: f64,
    mc_variance: f64,
    relative_error: f64,
    ks_stat: f64,
    ks_p_value: f64,
    reference_value: f64,
    fprime_max_norm: f64,
    fprime_constant: f64,
    fprime_bound: f64,
}

pub fn clt(ctx: &mut RunContext, p: &CltParams) -> Result<(), CliError> {
    let model = p.drift.build_clt()?;
    if p.noise.dim != model.dim() {
        return Err(CliError::Config("noise and drift dimensions differ".into()));
    }
    if p.n == 0 || p.replicas < 2 || p.variance_members == 0 {
        return Err(CliError::Config("need n >= 1, replicas >= 2 and variance_members >= 1".into()));
    }
    let phi = p.phi.build();
    let cfg = ctx.cfg.solver;
    let grid = ctx.grid;

    let drivers = generate(&p.noise.with_seed(ctx.seed("variance", 6))?, &grid, p.variance_members)?;
    let (limit, fprime) = clt_variance(model.as_ref(), &phi, &drivers, &cfg)?;
    let sigma2 = limit.sigma2.expect("set by clt_variance");
    let m = limit.m.expect("set by clt_variance");
    // declared constant when there is one, else the largest derivative seen along the run
    let k = model.clt_bound().unwrap_or(fprime.effective_bound);
    let bound = FPrimeSolution::gronwall_bound(k, grid.horizon());

    let seed = ctx.seed("replicas", 7);
    let mc = monte_carlo_fluctuations(model.as_ref(), &phi, p.n, p.replicas, p.reference_m, &p.noise.with_seed(0)?, &grid, seed, &cfg)
        .map_err(CliError::config_or_run)?;
    let (mc_mean, mc_variance) = sample_mean_var(&mc.y_samples);
    let ks = ks_normal_fit(&mc.y_samples)?;
    let relative_error = (mc_variance - sigma2).abs() / sigma2;

    let summary = CltSummary {
        m,
        sigma2,
        mc_mean,
        mc_variance,
        relative_error,
        ks_stat: ks.statistic,
        ks_p_value: ks.p_value,
        reference_value: mc.reference_value.unwrap_or(f64::NAN),
        fprime_max_norm: fprime.max_norm,
        fprime_constant: k,
        fprime_bound: bound,
    };
    ctx.metric("sigma2", sigma2);
    ctx.metric("mc_variance", mc_variance);
    ctx.metric("ks_stat", ks.statistic);
    ctx.metric("ks_p_value", ks.p_value);
    ctx.metric("relative_error", relative_error);
    ctx.metric("fprime_max_norm", fprime.max_norm);
    ctx.metric("fprime_bound", bound);
    ctx.check_le("variance_relative_error", relative_error, p.max_relative_error);
    ctx.check_ge("ks_p_value", ks.p_value, p.ks_level);
    ctx.check_le("fprime_bound", fprime.max_norm, bound);
    if let Some(declared) = model.clt_bound() {
        ctx.check_le("fprime_effective_constant", fprime.effective_bound, declared);
    }
    let rows: Vec<Vec<f64>> = mc.y_samples.iter().enumerate().map(|(r, &y)| vec![r as f64, y]).collect();
    write_table_csv(ctx.artifact("y_samples.csv"), &["replica", "y"], &rows)?;
    write_json(ctx.artifact("clt.json"), &summary)?;
    Ok(())
}

fn bounded_sample(law: BoundedLaw, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = member_rng(seed, 0);
    (0..n)
        .map(|_| match law {
            BoundedLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            BoundedLaw::Uniform => rng.random_range(-1.0..=1.0),
        })
        .collect()
}

pub fn lln(ctx: &mut RunContext, p: &LlnParams) -> Result<(), CliError> {
    if p.n_min == 0 || p.n_step == 0 || p.n_max < p.n_min {
        return Err(CliError::Config("need 0 < n_min <= n_max and n_step > 0".into()));
    }
    let n_list: Vec<usize> = (p.n_min..=p.n_max).step_by(p.n_step).collect();
    let x = bounded_sample(p.law, ctx.seed("x", 8), p.n_max);
    let y_seed = ctx.seed("y", 9);
    // Y_{., N} is a fresh row for every N
    let s = modified_lln_stat_with(&x, &n_list, |n| bounded_sample(p.law, derive_seed(y_seed, n as u64), n))?;
    let rows: Vec<Vec<f64>> = n_list
        .iter()
        .zip(&s)
        .map(|(&n, &v)| vec![n as f64, v, (n as f64).powf(-p.exponent)])
        .collect();
    let worst = rows.iter().map(|r| r[1].abs() / r[2]).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| r[1].abs() > r[2]).count();
    ctx.metric("sizes_checked", n_list.len());
    ctx.metric("max_scaled_statistic", worst);
    ctx.check_le("violations", violations as f64, 0.0);
    write_table_csv(ctx.artifact("lln.csv"), &["n", "statistic", "bound"], &rows)?;
    Ok(())
}

/// Minimum of `sum_i costs[i][perm[i]]` over all permutations (Heap's algorithm).
pub fn brute_force_assignment(costs: &[f64], n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| costs[i * n + j]).sum::<f64>();
    let mut best = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

pub fn transport_selftest(ctx: &mut RunContext, p: &SelftestParams) -> Result<(), CliError> {
    if p.max_n == 0 || p.max_n > 9 {
        return Err(CliError::Config("max_n must be in 1..=9 for enumeration".into()));
    }
    let seed = ctx.seed("instances", 3);
    let mut rows = Vec::with_capacity(p.instances);
    for k in 0..p.instances {
        let mut rng = member_rng(seed, k as u64);
        let n = 1 + k % p.max_n;
        // every third instance uses small integers to force ties
        let costs: Vec<f64> = (0..n * n)
            .map(|_| if k % 3 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..10.0) })
            .collect();
        let m = solve_assignment(&costs, n);
        let hungarian: f64 = m.iter().enumerate().map(|(i, &j)| costs[i * n + j]).sum();
        let brute = brute_force_assignment(&costs, n);
        rows.push(vec![k as f64, n as f64, hungarian, brute, (hungarian - brute).abs()]);
    }
    let worst = rows.iter().map(|r| r[4]).fold(0.0, f64::max);
    ctx.metric("max_assignment_error", worst);
    ctx.check_le("max_assignment_error", worst, p.tolerance);
    write_table_csv(ctx.artifact("selftest.csv"), &["instance", "n", "hungarian", "brute_force", "abs_diff"], &rows)?;

    let pair_seed = ctx.seed("pairs", 4);
    let grid = TimeGrid::new(1.0, 5)?;
    let mut excess: f64 = f64::NEG_INFINITY;
    let mut pair_rows = Vec::with_capacity(p.pairs);
    for k in 0..p.pairs {
        let n = 2 + k % 7;
        let s = derive_seed(pair_seed, k as u64);
        let a = generate(&mkvlab_core::noise::NoiseConfig::brownian(2, 1.0, derive_seed(s, 0)), &grid, n)?;
        let b = generate(&mkvlab_core::noise::NoiseConfig::brownian(2, 1.5, derive_seed(s, 1)), &grid, n)?;
        let path = wasserstein_paths(&a, &b, ctx.cfg.solver.p)?.distance;
        let mut marginal: f64 = 0.0;
        for j in 0..grid.n_nodes() {
            marginal = marginal.max(wasserstein_cloud(&a.marginal_at(j)?, &b.marginal_at(j)?, ctx.cfg.solver.p)?.distance);
        }
        excess = excess.max(marginal - path);
        pair_rows.push(vec![k as f64, n as f64, marginal, path]);
    }
    ctx.metric("max_marginal_excess", excess);
    ctx.check_le("marginal_bound", excess, 1e-12);
    write_table_csv(ctx.artifact("marginal_bound.csv"), &["pair", "n", "max_marginal_distance", "path_distance"], &pair_rows)?;
    Ok(())
}

//! Command implementations. All artifacts of a run live under one output
//! directory and chain together: `generate` writes dataset.txt, `design`
//! turns it into design.txt + basis.txt + are.txt, `simulate` adds CDFs,
//! rollout dumps, and summaries, and `report` renders figure data and a
//! result table from whatever summaries it finds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use probgain::behavior::{
    exact_basis_from_kernel, learn_basis, learn_basis_auto, BehaviorBasis, LearnOptions,
    TrajectorySet,
};
use probgain::estimator::{solve_are, NoiseModel, SteadyState, ARE_MAX_ITER};
use probgain::numerics::SymMatrix;
use probgain::paramdyn::{decompose, ParamDynamics};
use probgain::sdp::{SolveOptions, SolveStatus, MAX_ITERATIONS};
use probgain::simulator::{
    artifact_stem, bound_curve, export_cdf, export_record, gamma_cdf, generate_open_loop_set,
    inner_test, outer_test, run_campaign, run_closed_loop, GenerateOptions, RolloutOptions,
    RolloutStatus, SimulatorError,
};
use probgain::synthesis::{
    assemble_controller, build_theorem1, build_theorem2, build_zero_mean, compute_rho_sequence,
    ControllerDesign, DesignMode, GammaChoice, SynthesisError, CERT_TOL, DISS_TOL,
};

use crate::config::{self, ModeCfg, RunConfig};
use crate::error::{internal, parse_err, usage, CliError};
use crate::textio;

/// Parsed config plus the directory all artifacts share.
pub struct Ctx {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(config_path: &Path, out: PathBuf) -> Result<Self, CliError> {
        let (config, hash) = RunConfig::load(config_path)?;
        std::fs::create_dir_all(&out).map_err(internal)?;
        Ok(Self { config, hash, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn comments(&self, seeds: String) -> Vec<String> {
        vec![format!("config {}", self.hash), format!("seeds {seeds}")]
    }
}

fn map_sim(e: SimulatorError) -> CliError {
    match e {
        SimulatorError::Shape(msg) => usage(msg),
        other => internal(other),
    }
}

fn require<P: AsRef<Path>>(path: P, hint: &str) -> Result<PathBuf, CliError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(usage(format!("{} not found; {hint}", path.display())));
    }
    Ok(path.to_path_buf())
}

pub fn cmd_generate(ctx: &Ctx, seed: Option<u64>) -> Result<(), CliError> {
    let data = ctx
        .config
        .data
        .as_ref()
        .ok_or_else(|| usage("generate needs a [data] section"))?;
    let kernel = ctx
        .config
        .kernel
        .as_ref()
        .ok_or_else(|| usage("generate needs a [kernel] section as the ground truth"))?;
    let layout = ctx.config.layout.fixed()?;
    let model = kernel.to_model()?;
    let noise = ctx.config.noise.to_model(&layout)?;
    let mixtures = ctx.config.mixtures.to_mixtures(&noise)?;
    let forecast = ctx.config.disturbance.mean_program(layout.q, data.steps)?;
    let amplitude =
        data.excitation_amplitude.unwrap_or_else(|| noise.s_u().trace().sqrt());
    let data_seed = seed.unwrap_or(ctx.config.seeds.data);
    let gen = GenerateOptions {
        trajectories: data.trajectories,
        steps: data.steps,
        amplitude,
        retry_cap: data.retry_cap,
        seed: data_seed,
    };
    let set = generate_open_loop_set(&model, &layout, &noise, &mixtures, &forecast, &gen)
        .map_err(map_sim)?;
    let comments = ctx.comments(format!(
        "data={data_seed} mixtures={} disturbance={}",
        ctx.config.mixtures.describe(),
        ctx.config.disturbance.describe()
    ));
    let path = ctx.path("dataset.txt");
    set.save(&path, &comments).map_err(internal)?;
    println!(
        "wrote {} ({} trajectories x {} steps)",
        path.display(),
        set.len(),
        set.steps()
    );
    Ok(())
}

/// Loads the dataset and learns the basis, selecting the state cardinality
/// automatically when the layout leaves it open.
fn learn_from_dataset(
    ctx: &Ctx,
    dataset: &Path,
) -> Result<(BehaviorBasis, Option<f64>, bool), CliError> {
    let lay = &ctx.config.layout;
    let s_n = SymMatrix::from_average(&config::matrix(&ctx.config.noise.s_n, "s_n")?);
    let opts = LearnOptions { gap_tol: ctx.config.tolerances.gap_tol, check_excitation: true };
    let load = |n_state: usize| -> Result<TrajectorySet, CliError> {
        let set = TrajectorySet::load(dataset, lay.lag, n_state)
            .map_err(|e| parse_err(dataset, e))?;
        let got = set.layout();
        if (got.p, got.m, got.q) != (lay.p, lay.m, lay.q) {
            return Err(parse_err(
                dataset,
                format!(
                    "dataset channels ({}, {}, {}) do not match [layout] ({}, {}, {})",
                    got.p, got.m, got.q, lay.p, lay.m, lay.q
                ),
            ));
        }
        Ok(set)
    };
    let learned = match lay.n_state {
        Some(n) => {
            let set = load(n)?;
            learn_basis(&set, &s_n, &opts).map_err(internal)?
        }
        None => {
            let set = load(0)?;
            let (learned, n_state) = learn_basis_auto(&set, &s_n, &opts).map_err(internal)?;
            println!("selected n_state = {n_state} from the pooled spectrum");
            learned
        }
    };
    if learned.gap_warning {
        eprintln!(
            "warning: spectral gap {:.3e} is below the threshold; the subspace cut is poorly separated",
            learned.spectral_gap
        );
    }
    Ok((learned.basis, Some(learned.spectral_gap), learned.gap_warning))
}

/// Rebuilds the deterministic pipeline stages downstream of a basis.
fn stages(
    ctx: &Ctx,
    basis: &BehaviorBasis,
) -> Result<(ParamDynamics, NoiseModel, SteadyState), CliError> {
    let dynamics = decompose(basis).map_err(internal)?;
    let noise = ctx.config.noise.to_model(basis.layout())?;
    let ss = solve_are(&dynamics, &noise, None, ARE_MAX_ITER, ctx.config.tolerances.are_tol)
        .map_err(internal)?;
    Ok((dynamics, noise, ss))
}

pub fn cmd_design(ctx: &Ctx, mode_override: Option<ModeCfg>) -> Result<(), CliError> {
    let dataset = require(ctx.path("dataset.txt"), "run generate first or supply a dataset")?;
    let mode = mode_override.map(ModeCfg::to_mode).unwrap_or(ctx.config.design.mode.to_mode());

    let (basis, spectral_gap, gap_warning) = learn_from_dataset(ctx, &dataset)?;
    let (dynamics, noise, ss) = stages(ctx, &basis)?;
    let layout = *basis.layout();

    let comments = ctx.comments(format!("data={}", ctx.config.seeds.data));
    textio::save_basis(&ctx.path("basis.txt"), &basis, spectral_gap, gap_warning, &comments)?;
    textio::write_with_comments(&ctx.path("are.txt"), &comments, &ss.report())?;

    let gammas = ctx.config.design.gamma_choice(mode)?;
    let fixed_pair = |gammas: &GammaChoice| match *gammas {
        GammaChoice::Fixed { gamma1_sq, gamma2_sq } => Ok((gamma1_sq, gamma2_sq)),
        GammaChoice::Minimize => {
            Err(usage("this design mode needs a fixed gain pair, not optimize"))
        }
    };
    let program = match mode {
        DesignMode::General => {
            let (g1, g2) = fixed_pair(&gammas)?;
            build_theorem1(&dynamics, &ss, &noise, g1, g2).map_err(internal)?
        }
        DesignMode::ConstantMean => {
            let d_bar = ctx.config.disturbance.d_bar(layout.q)?;
            build_theorem2(&dynamics, &ss, &noise, &d_bar, gammas).map_err(internal)?
        }
        DesignMode::ZeroMean => {
            let (_, g2) = fixed_pair(&gammas)?;
            build_zero_mean(&dynamics, &ss, &noise, g2).map_err(internal)?
        }
    };
    let opts = SolveOptions {
        feas_tol: ctx.config.tolerances.feas_tol,
        max_iterations: MAX_ITERATIONS,
    };
    let sol = program.solve(&opts).map_err(internal)?;
    match sol.status {
        SolveStatus::Feasible => {}
        SolveStatus::Infeasible => {
            return Err(CliError::Infeasible(format!(
                "the {mode} certificate admits no solution at the requested gains (margin {:.3e})",
                sol.phase1_margin.unwrap_or(sol.min_eig_margin)
            )))
        }
        SolveStatus::MaxIterations => {
            return Err(CliError::Internal(anyhow!(
                "solver stopped at the iteration cap before certifying feasibility; \
                 tighten tolerances or rescale the problem"
            )))
        }
    }
    let design = assemble_controller(&program, &sol, &dynamics).map_err(|e| match e {
        SynthesisError::NotFeasible { .. } => CliError::Infeasible(e.to_string()),
        other => internal(other),
    })?;

    let design_path = ctx.path("design.txt");
    textio::write_with_comments(&design_path, &comments, &design.to_text())?;

    println!("mode {}", design.mode());
    println!("constraint kernel residual {:.3e}", dynamics.kernel_residual());
    println!("gamma1_sq {:.6e} gamma2_sq {:.6e}", design.gamma1_sq(), design.gamma2_sq());
    if let Some(rho) = design.rho() {
        let profile = design.gain_profile(None).map_err(internal)?;
        println!("rho {:.6e} mixed_gain_sq {:.6e}", rho, profile.mixed_gain_sq());
    }
    if let Some(obj) = design.objective() {
        println!("objective {obj:.6e}");
    }
    let worst =
        design.margins().iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    println!("worst certificate margin {worst:.3e}");
    if design.mode() == DesignMode::ZeroMean {
        println!("closed-loop spectral radius {:.6}", design.closed_loop_radius());
    }
    println!("wrote {}", design_path.display());
    Ok(())
}

/// Splits a cohort into equally sized leading groups, dropping the remainder.
fn group_slices(records: &[probgain::simulator::RolloutRecord], groups: usize) -> Vec<&[probgain::simulator::RolloutRecord]> {
    let size = records.len() / groups;
    (0..groups).map(|g| &records[g * size..(g + 1) * size]).collect()
}

pub fn cmd_simulate(
    ctx: &Ctx,
    seed: Option<u64>,
    cohort_override: Option<usize>,
    horizon_override: Option<usize>,
) -> Result<(), CliError> {
    let sim = ctx
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| usage("simulate needs a [simulate] section"))?;
    let kernel = ctx
        .config
        .kernel
        .as_ref()
        .ok_or_else(|| usage("simulate needs a [kernel] section as the ground truth"))?;
    let cohort = cohort_override.unwrap_or(sim.cohort);
    if cohort == 0 {
        return Err(usage("cohort must be at least 1"));
    }
    let horizon = horizon_override.unwrap_or(sim.horizon);
    if horizon == 0 {
        return Err(usage("horizon must be at least 1"));
    }

    let basis_path = require(ctx.path("basis.txt"), "run design first")?;
    let design_path = require(ctx.path("design.txt"), "run design first")?;
    let basis = textio::load_basis(&basis_path)?;
    let design = ControllerDesign::load(&design_path).map_err(|e| parse_err(&design_path, e))?;
    let layout = *basis.layout();
    let lay = &ctx.config.layout;
    if (layout.p, layout.m, layout.q, layout.lag) != (lay.p, lay.m, lay.q, lay.lag) {
        return Err(parse_err(&basis_path, "stored layout does not match [layout]"));
    }
    if design.k_g().ncols() != layout.g_dim() {
        return Err(parse_err(
            &design_path,
            format!(
                "design acts on {} coordinates, basis spans {}",
                design.k_g().ncols(),
                layout.g_dim()
            ),
        ));
    }

    let model = kernel.to_model()?;
    let (dynamics, noise, ss) = stages(ctx, &basis)?;
    let mixtures = ctx.config.mixtures.to_mixtures(&noise)?;
    let forecast = ctx.config.disturbance.mean_program(layout.q, horizon)?;
    let base_seed = seed.unwrap_or(ctx.config.seeds.simulate);
    let label = format!(
        "{}{}",
        design.mode(),
        if design.objective().is_some() { "_opt" } else { "" }
    );

    let template = RolloutOptions {
        overflow_cap: sim.overflow_cap,
        ..RolloutOptions::new(horizon, base_seed)
    };
    let started = Instant::now();
    let records = run_campaign(
        &design, &model, &dynamics, &ss, &noise, &mixtures, &forecast, &template, cohort,
    )
    .map_err(map_sim)?;
    let runtime = started.elapsed().as_secs_f64();

    let diverged =
        records.iter().filter(|r| matches!(r.status(), RolloutStatus::Diverged { .. })).count();
    let fraction = diverged as f64 / cohort as f64;

    let rho_override = match design.mode() {
        DesignMode::General => {
            let means: Vec<DVector<f64>> = (1..=horizon).map(|k| forecast.mean_at(k)).collect();
            Some(compute_rho_sequence(&means, noise.s_d()).map_err(internal)?)
        }
        _ => None,
    };
    let profile = design.gain_profile(rho_override).map_err(internal)?;
    let grid = sim.grid();
    let bound = bound_curve(&profile, &grid);

    let cdf = match gamma_cdf(&records, horizon, &grid) {
        Ok(c) => Some(c),
        Err(SimulatorError::EmptyCohort) => None,
        Err(e) => return Err(internal(e)),
    };

    let comments = ctx.comments(format!(
        "simulate={base_seed} mixtures={} disturbance={}",
        ctx.config.mixtures.describe(),
        ctx.config.disturbance.describe()
    ));

    let mut entries: Vec<(String, String)> = vec![
        ("label".into(), label.clone()),
        ("mode".into(), design.mode().to_string()),
        ("seed".into(), base_seed.to_string()),
        ("horizon".into(), horizon.to_string()),
        ("cohort".into(), cohort.to_string()),
        ("gamma1_sq".into(), format!("{:.12e}", design.gamma1_sq())),
        ("gamma2_sq".into(), format!("{:.12e}", design.gamma2_sq())),
        ("rho".into(), format!("{:.12e}", profile.rho())),
        ("mixed_gain_sq".into(), format!("{:.12e}", profile.mixed_gain_sq())),
        ("diverged".into(), diverged.to_string()),
        ("diverged_fraction".into(), format!("{fraction:.6e}")),
    ];
    if let Some(obj) = design.objective() {
        entries.push(("objective".into(), format!("{obj:.12e}")));
    }

    let mut inner_strict = "skipped".to_string();
    let mut inner_tolerant = "skipped".to_string();
    if let Some(cdf) = &cdf {
        let verdict = inner_test(&grid, cdf, &bound, cohort);
        inner_strict = if verdict.strict.pass { "pass" } else { "fail" }.into();
        inner_tolerant = if verdict.tolerant_pass { "pass" } else { "fail" }.into();
        entries.push(("inner_worst_gap".into(), format!("{:.6e}", verdict.strict.worst_gap)));

        let cdf_name = format!("{}.txt", artifact_stem("cdf", &label, base_seed, horizon));
        export_cdf(&ctx.path(&cdf_name), &grid, cdf, &bound, &comments).map_err(internal)?;
        entries.push(("cdf_file".into(), cdf_name));
    }
    entries.push(("inner_strict".into(), inner_strict.clone()));
    entries.push(("inner_tolerant".into(), inner_tolerant.clone()));

    let mut outer_verdict = "skipped".to_string();
    if sim.outer_groups >= 2 && cohort >= sim.outer_groups && cdf.is_some() {
        let groups = group_slices(&records, sim.outer_groups);
        let mut group_cdfs = Vec::with_capacity(groups.len());
        let mut usable = true;
        for g in &groups {
            match gamma_cdf(g, horizon, &grid) {
                Ok(c) => group_cdfs.push(c),
                Err(SimulatorError::EmptyCohort) => {
                    usable = false;
                    break;
                }
                Err(e) => return Err(internal(e)),
            }
        }
        if usable {
            let checks = outer_test(&group_cdfs, &profile, &grid).map_err(internal)?;
            let pass = checks.iter().all(|c| c.pass);
            outer_verdict = if pass { "pass" } else { "fail" }.into();

            let outer_name =
                format!("{}.txt", artifact_stem("outer", &label, base_seed, horizon));
            let mut columns = vec!["gamma".to_string(), "bound".to_string()];
            columns.extend((1..=group_cdfs.len()).map(|i| format!("group{i}")));
            let rows: Vec<Vec<f64>> = (0..grid.len())
                .map(|i| {
                    let mut row = vec![grid[i], bound[i]];
                    row.extend(group_cdfs.iter().map(|c| c[i]));
                    row
                })
                .collect();
            textio::write_table(&ctx.path(&outer_name), &comments, &columns, &rows)?;
            entries.push(("outer_file".into(), outer_name));
            entries.push(("outer_groups".into(), sim.outer_groups.to_string()));
        }
    }
    entries.push(("outer".into(), outer_verdict.clone()));

    let dumps = sim.record_dumps.min(cohort);
    for record in records.iter().take(dumps) {
        let name =
            format!("{}.txt", artifact_stem("rollout", &label, record.seed(), horizon));
        export_record(&ctx.path(&name), record, &comments).map_err(internal)?;
    }

    let mut traj_files = Vec::new();
    for i in 0..sim.traj_panels.min(cohort) {
        let opts = RolloutOptions {
            detailed: true,
            ..RolloutOptions {
                seed: base_seed.wrapping_add(i as u64),
                ..template.clone()
            }
        };
        let record = run_closed_loop(
            &design, &model, &dynamics, &ss, &noise, &mixtures, &forecast, &opts,
        )
        .map_err(map_sim)?;
        let name = format!("{}.txt", artifact_stem("traj", &label, opts.seed, horizon));
        write_traj_panel(&ctx.path(&name), &record, &layout, &comments)?;
        traj_files.push(name);
    }
    if !traj_files.is_empty() {
        entries.push(("traj_files".into(), traj_files.join(" ")));
    }

    entries.push(("runtime_s".into(), format!("{runtime:.3}")));
    let summary_name = format!("{}.txt", artifact_stem("summary", &label, base_seed, horizon));
    textio::write_summary(&ctx.path(&summary_name), &entries, &comments)?;

    println!(
        "cohort {cohort} horizon {horizon} diverged {diverged} ({:.2}%)",
        100.0 * fraction
    );
    println!("inner bound check: strict {inner_strict}, tolerant {inner_tolerant}");
    println!("outer bound check: {outer_verdict}");
    println!("wrote {}", ctx.path(&summary_name).display());

    if fraction > sim.divergence_threshold {
        return Err(CliError::Divergence(format!(
            "{diverged} of {cohort} rollouts diverged (fraction {fraction:.3e} exceeds \
             threshold {:.3e}); see {summary_name}",
            sim.divergence_threshold
        )));
    }
    Ok(())
}

/// Writes one detailed record's per-step true signals and forecasts.
fn write_traj_panel(
    path: &Path,
    record: &probgain::simulator::RolloutRecord,
    layout: &probgain::behavior::SignalLayout,
    comments: &[String],
) -> Result<(), CliError> {
    let mut columns = vec!["step".to_string()];
    for i in 1..=layout.p {
        columns.push(format!("y{i}"));
    }
    for i in 1..=layout.m {
        columns.push(format!("u{i}"));
    }
    for i in 1..=layout.q {
        columns.push(format!("d{i}"));
    }
    for i in 1..=layout.q {
        columns.push(format!("dmean{i}"));
    }
    let mut rows = Vec::with_capacity(record.steps().len());
    for (k, step) in record.steps().iter().enumerate() {
        let (y, u, d) = layout.split_step(&step.w_true);
        let mut row = Vec::with_capacity(columns.len());
        row.push((k + 1) as f64);
        row.extend(y.iter().copied());
        row.extend(u.iter().copied());
        row.extend(d.iter().copied());
        row.extend(step.d_mean.iter().copied());
        rows.push(row);
    }
    textio::write_table(path, comments, &columns, &rows)
}

/// One parsed simulation summary plus its source file name.
struct RunRow {
    file: String,
    label: String,
    seed: u64,
    horizon: usize,
    map: BTreeMap<String, String>,
}

impl RunRow {
    fn get(&self, key: &str, path: &Path) -> Result<&str, CliError> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| parse_err(path, format!("summary lacks the {key} field")))
    }
}

pub fn cmd_report(ctx: &Ctx) -> Result<(), CliError> {
    let mut summary_files: Vec<String> = std::fs::read_dir(&ctx.out)
        .map_err(internal)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("summary_") && n.ends_with(".txt"))
        .collect();
    summary_files.sort();
    if summary_files.is_empty() {
        return Err(usage(format!(
            "no simulation summaries under {}; run simulate first",
            ctx.out.display()
        )));
    }

    let mut rows = Vec::new();
    for file in &summary_files {
        let path = ctx.path(file);
        let map = textio::parse_summary(&path)?;
        let need = |key: &str| -> Result<String, CliError> {
            map.get(key)
                .cloned()
                .ok_or_else(|| parse_err(&path, format!("summary lacks the {key} field")))
        };
        let label = need("label")?;
        let seed: u64 =
            need("seed")?.parse().map_err(|e| parse_err(&path, format!("seed: {e}")))?;
        let horizon: usize = need("horizon")?
            .parse()
            .map_err(|e| parse_err(&path, format!("horizon: {e}")))?;
        rows.push(RunRow { file: file.clone(), label, seed, horizon, map });
    }
    rows.sort_by(|a, b| {
        (&a.label, a.horizon, a.seed).cmp(&(&b.label, b.horizon, b.seed))
    });

    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let manifest = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let comments =
        ctx.comments(format!("data={} simulate={manifest}", ctx.config.seeds.data));
    let mut figures = Vec::new();

    // CDF overlays across horizons, one figure per design label.
    let mut by_label: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for row in &rows {
        if row.map.contains_key("cdf_file") {
            by_label.entry(&row.label).or_default().push(row);
        }
    }
    for (label, group) in &by_label {
        let mut grid: Option<Vec<f64>> = None;
        let mut columns = vec!["gamma".to_string()];
        let mut series: Vec<Vec<f64>> = Vec::new();
        let mut sources = Vec::new();
        for row in group {
            let cdf_file = row.get("cdf_file", &ctx.path(&row.file))?;
            let cdf_path = ctx.path(cdf_file);
            let table = textio::read_table(&cdf_path)?;
            let g = table.column("gamma", &cdf_path)?;
            match &grid {
                None => grid = Some(g),
                Some(first) if *first == g => {}
                Some(_) => {
                    return Err(parse_err(
                        &cdf_path,
                        "gamma grid differs from the first campaign; regenerate with one grid",
                    ))
                }
            }
            columns.push(format!("cdf_T{}_seed{}", row.horizon, row.seed));
            columns.push(format!("bound_T{}_seed{}", row.horizon, row.seed));
            series.push(table.column("cdf", &cdf_path)?);
            series.push(table.column("bound", &cdf_path)?);
            sources.push(cdf_file.to_string());
        }
        let grid = grid.expect("group is nonempty");
        let table_rows: Vec<Vec<f64>> = (0..grid.len())
            .map(|i| {
                let mut row = vec![grid[i]];
                row.extend(series.iter().map(|s| s[i]));
                row
            })
            .collect();
        let name = format!("fig_inner_{label}.txt");
        let mut fig_comments = comments.clone();
        fig_comments.push(format!("source {}", sources.join(" ")));
        textio::write_table(&ctx.path(&name), &fig_comments, &columns, &table_rows)?;
        figures.push(name);
    }

    // Outer-test sheaves and trajectory panels re-emitted per run.
    for row in &rows {
        if let Some(outer_file) = row.map.get("outer_file") {
            let outer_path = ctx.path(outer_file);
            let table = textio::read_table(&outer_path)?;
            let name = format!("fig_outer_{}_T{}_seed{}.txt", row.label, row.horizon, row.seed);
            let mut fig_comments = comments.clone();
            fig_comments.push(format!("source {outer_file}"));
            textio::write_table(&ctx.path(&name), &fig_comments, &table.columns, &table.rows)?;
            figures.push(name);
        }
        if let Some(traj_files) = row.map.get("traj_files") {
            let mut columns: Option<Vec<String>> = None;
            let mut merged = Vec::new();
            for (idx, traj_file) in traj_files.split_whitespace().enumerate() {
                let traj_path = ctx.path(traj_file);
                let table = textio::read_table(&traj_path)?;
                match &columns {
                    None => columns = Some(table.columns.clone()),
                    Some(c) if *c == table.columns => {}
                    Some(_) => {
                        return Err(parse_err(&traj_path, "trajectory columns differ across panels"))
                    }
                }
                for mut r in table.rows {
                    let mut row = vec![(idx + 1) as f64];
                    row.append(&mut r);
                    merged.push(row);
                }
            }
            if let Some(mut columns) = columns {
                columns.insert(0, "rollout".to_string());
                let name =
                    format!("fig_trajectories_{}_T{}_seed{}.txt", row.label, row.horizon, row.seed);
                let mut fig_comments = comments.clone();
                fig_comments.push(format!("source {traj_files}"));
                textio::write_table(&ctx.path(&name), &fig_comments, &columns, &merged)?;
                figures.push(name);
            }
        }
    }

    // Result table: one line per campaign.
    let mut body = String::new();
    let _ = writeln!(
        body,
        "label seed T cohort gamma1_sq gamma2_sq rho mixed_gain_sq inner_strict inner_tolerant outer diverged_fraction runtime_s"
    );
    for row in &rows {
        let path = ctx.path(&row.file);
        let _ = writeln!(
            body,
            "{} {} {} {} {} {} {} {} {} {} {} {} {}",
            row.label,
            row.seed,
            row.horizon,
            row.get("cohort", &path)?,
            row.get("gamma1_sq", &path)?,
            row.get("gamma2_sq", &path)?,
            row.get("rho", &path)?,
            row.get("mixed_gain_sq", &path)?,
            row.get("inner_strict", &path)?,
            row.get("inner_tolerant", &path)?,
            row.get("outer", &path)?,
            row.get("diverged_fraction", &path)?,
            row.get("runtime_s", &path)?,
        );
    }
    let report_path = ctx.path("report.txt");
    textio::write_with_comments(&report_path, &comments, &body)?;
    print!("{body}");
    println!("wrote {} and {} figure files", report_path.display(), figures.len());
    Ok(())
}

pub fn cmd_are(ctx: &Ctx) -> Result<(), CliError> {
    let basis_path = ctx.path("basis.txt");
    let basis = if basis_path.exists() {
        println!("basis source: learned ({})", basis_path.display());
        textio::load_basis(&basis_path)?
    } else if let Some(kernel) = &ctx.config.kernel {
        println!("basis source: exact kernel null space");
        let layout = ctx.config.layout.fixed()?;
        exact_basis_from_kernel(&kernel.to_model()?, &layout).map_err(internal)?
    } else {
        return Err(usage(
            "are needs either basis.txt under --out (run design) or a [kernel] section",
        ));
    };
    let (_, _, ss) = stages(ctx, &basis)?;
    print!("{}", ss.report());
    let comments = ctx.comments(format!("data={}", ctx.config.seeds.data));
    textio::write_with_comments(&ctx.path("are.txt"), &comments, &ss.report())?;
    Ok(())
}

pub fn cmd_check(ctx: &Ctx) -> Result<(), CliError> {
    let basis_path = require(ctx.path("basis.txt"), "run design first")?;
    let design_path = require(ctx.path("design.txt"), "run design first")?;
    let basis = textio::load_basis(&basis_path)?;
    let design = ControllerDesign::load(&design_path).map_err(|e| parse_err(&design_path, e))?;
    let layout = *basis.layout();
    if design.k_g().ncols() != layout.g_dim() {
        return Err(parse_err(
            &design_path,
            format!(
                "design acts on {} coordinates, basis spans {}",
                design.k_g().ncols(),
                layout.g_dim()
            ),
        ));
    }
    let (dynamics, _, _) = stages(ctx, &basis)?;
    println!("info constraint kernel residual {:.3e}", dynamics.kernel_residual());

    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("check {name}: {} ({detail})", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    let worst_margin =
        design.margins().iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    check(
        "stored-margins",
        worst_margin >= -CERT_TOL,
        format!("worst {worst_margin:.3e} over {} blocks", design.margins().len()),
    );

    let g = layout.g_dim();
    let inv_dev = (design.m().mat() * design.w().mat() - DMatrix::<f64>::identity(g, g))
        .abs()
        .max();
    check("metric-inverse", inv_dev < 1e-6, format!("|MW - I| = {inv_dev:.3e}"));

    let gain_dev = (design.k_g() - design.y() * design.m().mat()).abs().max();
    check("gain-consistency", gain_dev < 1e-6, format!("|K_g - Y M| = {gain_dev:.3e}"));

    let a_dev =
        (design.a_cl() - (dynamics.f_p() + dynamics.f_z() * design.k_g())).abs().max();
    check(
        "closed-loop-consistency",
        a_dev < 1e-6,
        format!("|A_cl - (F_p + F_z K_g)| = {a_dev:.3e}"),
    );

    let pyf = basis.output_rows();
    let storage_dev =
        (design.p_storage().mat() - (design.m().mat() - pyf.transpose() * &pyf)).abs().max();
    let storage_eig = design.p_storage().min_eig();
    check(
        "storage-metric",
        storage_dev < 1e-6 && storage_eig >= -CERT_TOL,
        format!("deviation {storage_dev:.3e}, min eigenvalue {storage_eig:.3e}"),
    );

    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut worst_diss = f64::INFINITY;
    for _ in 0..200 {
        let state = DVector::from_fn(g, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d_mean = match design.mode() {
            DesignMode::General => Some(DVector::from_fn(layout.q, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            })),
            _ => None,
        };
        let margin =
            design.dissipation_margin(&state, d_mean.as_ref()).map_err(internal)?;
        worst_diss = worst_diss.min(margin);
    }
    check(
        "dissipation-sample",
        worst_diss >= -DISS_TOL,
        format!("worst margin {worst_diss:.3e} over 200 draws"),
    );

    let radius = design.closed_loop_radius();
    if design.mode() == DesignMode::ZeroMean {
        check("mean-contraction", radius < 1.0, format!("spectral radius {radius:.6}"));
    } else {
        println!("info closed-loop spectral radius {radius:.6}");
    }

    if failures.is_empty() {
        println!("design artifact verifies");
        Ok(())
    } else {
        Err(CliError::Infeasible(format!(
            "design artifact fails re-verification: {}",
            failures.join(", ")
        )))
    }
}

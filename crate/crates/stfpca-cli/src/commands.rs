//! Command implementations shared by the CLI dispatcher.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use stfpca::archive::{load_model, recompute_residuals, save_model, ObservationPanelRef};
use stfpca::basis2d::{orthonormal_basis, BivariateBasis};
use stfpca::bootstrap::{bootstrap_sd, BootstrapConfig};
use stfpca::demean::demean_two_stage;
use stfpca::em;
use stfpca::error::{Error, Result};
use stfpca::mesh::Triangulation;
use stfpca::model::{FitConfig, FittedModel, Penalties};
use stfpca::panel::{load_long_csv, ObservationPanel, RejectedRow};
use stfpca::selection::{
    cv_score, grid_then_simplex, select_j, select_p, ar_order_criterion, CVPlan, InfoCriterion,
    SearchOptions,
};
use stfpca::simulate::{run_study, EvalGrid, Method, SetupId, StudyOptions, VarianceLevel};
use stfpca::temporal::{build_temporal_basis, TemporalBasis};

use crate::config::{PenaltyMode, RunConfig};

const MONTHS: [&str; 12] =
    ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];

/// Everything the data-driven commands need, assembled from a run config.
pub struct Workspace {
    pub config: RunConfig,
    pub basis: Arc<BivariateBasis>,
    pub temporal: Arc<TemporalBasis>,
    pub panel: ObservationPanel,
    pub rejected: Vec<RejectedRow>,
}

pub fn prepare(config: RunConfig) -> Result<Workspace> {
    let mesh = Triangulation::read_file(&config.triangulation)?;
    let basis = Arc::new(orthonormal_basis(&mesh, config.degree, config.smoothness)?);
    let (raw, rejected) = load_long_csv(&config.data, &mesh)?;
    if raw.n_times() == 0 {
        return Err(Error::Data("data file holds no observations".into()));
    }
    let temporal = Arc::new(build_temporal_basis(&config.temporal, raw.n_times())?);
    let mut panel = ObservationPanel::build(&raw, &basis, &temporal)?;
    if config.demean {
        let fit = demean_two_stage(
            &panel,
            &basis,
            &temporal,
            config.demean_spatial,
            config.demean_temporal,
        )?;
        panel = fit.demeaned;
    }
    std::fs::create_dir_all(&config.output)?;
    Ok(Workspace { config, basis, temporal, panel, rejected })
}

fn write_rejects(dir: &Path, rejected: &[RejectedRow]) -> Result<()> {
    if rejected.is_empty() {
        return Ok(());
    }
    let mut out = String::from("line,x,y,reason\n");
    for r in rejected {
        out.push_str(&format!("{},{},{},{}\n", r.line, r.x, r.y, r.reason));
    }
    std::fs::write(dir.join("rejected_rows.csv"), out)?;
    eprintln!("note: {} rows outside the domain, see rejected_rows.csv", rejected.len());
    Ok(())
}

fn fit_config_of(ws: &Workspace, penalties: Penalties, freeze_override: bool) -> FitConfig {
    let c = &ws.config;
    FitConfig {
        n_factors: c.n_factors,
        ar_order: c.ar_order,
        penalties,
        tol: c.tol,
        max_iter: c.max_iter,
        freeze_ar: c.freeze_ar || freeze_override,
        ar_warmup: c.ar_warmup,
        state_init: c.state_init,
        detailed_trace: false,
    }
}

fn resolve_penalties(ws: &Workspace, seed_override: Option<u64>) -> Result<Penalties> {
    match ws.config.penalties {
        PenaltyMode::Fixed(p) => Ok(p),
        PenaltyMode::Select => {
            let (penalties, _) = select_penalties(ws, seed_override, false)?;
            Ok(penalties)
        }
    }
}

/// Two-stage search for the regularization weights over the CV objective.
pub fn select_penalties(
    ws: &Workspace,
    seed_override: Option<u64>,
    freeze_override: bool,
) -> Result<(Penalties, Vec<(&'static str, Vec<f64>, f64)>)> {
    let seed = seed_override.unwrap_or(ws.config.cv_seed);
    let plan = CVPlan::for_panel(&ws.panel, ws.config.cv_folds, seed)?;
    let options = SearchOptions { budget: ws.config.cv_budget, ..SearchOptions::default() };
    let result = grid_then_simplex(
        |log_lambda| {
            let penalties = Penalties::new(
                10f64.powf(log_lambda[0]),
                10f64.powf(log_lambda[1]),
                10f64.powf(log_lambda[2]),
            )?;
            let config = fit_config_of(ws, penalties, freeze_override);
            Ok(cv_score(&ws.panel, &ws.basis, &ws.temporal, &config, &plan)?.score)
        },
        3,
        &options,
    )?;
    let penalties = Penalties::new(
        10f64.powf(result.best_log[0]),
        10f64.powf(result.best_log[1]),
        10f64.powf(result.best_log[2]),
    )?;
    Ok((penalties, result.evaluations))
}

fn monthly_mae(model: &FittedModel) -> [Option<f64>; 12] {
    let mut acc = [(0.0f64, 0usize); 12];
    for (t, r) in model.residuals.iter().enumerate() {
        let month = t % 12;
        for v in r.iter() {
            acc[month].0 += v.abs();
            acc[month].1 += 1;
        }
    }
    acc.map(|(sum, count)| (count > 0).then(|| sum / count as f64))
}

fn write_monthly_table(path: &Path, label: &str, values: &[Option<f64>; 12]) -> Result<()> {
    let mut out = String::from("model");
    for m in MONTHS {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    out.push_str(label);
    for v in values {
        out.push(',');
        if let Some(v) = v {
            out.push_str(&format!("{v}"));
        }
    }
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

pub fn cmd_fit(config_path: &Path, freeze_ar: bool, seed: Option<u64>) -> Result<()> {
    let ws = prepare(RunConfig::load(config_path)?)?;
    write_rejects(&ws.config.output, &ws.rejected)?;
    let penalties = resolve_penalties(&ws, seed)?;
    let config = fit_config_of(&ws, penalties, freeze_ar);
    let label: &str = if config.freeze_ar { "mfpc" } else { "sfpc" };
    let model = em::fit(&ws.panel, ws.basis.clone(), ws.temporal.clone(), config)?;

    let out = &ws.config.output;
    save_model(&model, &out.join("model.bin"))?;
    write_monthly_table(&out.join("mae_monthly.csv"), label, &monthly_mae(&model))?;

    let mut scores = String::from("t");
    for j in 0..model.params.n_factors() {
        scores.push_str(&format!(",alpha_{}", j + 1));
    }
    scores.push('\n');
    for (t, a) in model.moments.alpha.iter().enumerate() {
        scores.push_str(&format!("{}", t + 1));
        for v in a.iter() {
            scores.push_str(&format!(",{v}"));
        }
        scores.push('\n');
    }
    std::fs::write(out.join("scores.csv"), scores)?;

    let mut trace = String::from("iteration,q_value,observed_neg2_loglik\n");
    for (i, t) in model.trace.iter().enumerate() {
        trace.push_str(&format!("{},{},{}\n", i + 1, t.q_value, t.observed_neg2_loglik));
    }
    std::fs::write(out.join("trace.csv"), trace)?;

    let mut summary = String::new();
    summary.push_str(&format!("method {label}\n"));
    summary.push_str(&format!("converged {}\n", model.converged));
    summary.push_str(&format!("iterations {}\n", model.iterations));
    summary.push_str(&format!("sigma2 {}\n", model.params.sigma2));
    for (j, v) in model.params.score_variances.iter().enumerate() {
        summary.push_str(&format!("score_variance_{} {}\n", j + 1, v));
    }
    for j in 0..model.params.n_factors() {
        summary.push_str(&format!(
            "ar_coefficients_{} {:?}\n",
            j + 1,
            model.params.ar_column(j)
        ));
    }
    for w in &model.warnings {
        summary.push_str(&format!("warning {w}\n"));
    }
    std::fs::write(out.join("fit_summary.txt"), summary)?;
    println!(
        "fit written to {} ({} iterations, converged: {})",
        out.display(),
        model.iterations,
        model.converged
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    setup: &str,
    variance: &str,
    runs: usize,
    seed: u64,
    out_dir: &Path,
    n_times: Option<usize>,
    methods: &str,
) -> Result<()> {
    let setups: Vec<SetupId> = if setup == "all" {
        vec![SetupId::I, SetupId::Ii, SetupId::Iii, SetupId::Iv]
    } else {
        vec![SetupId::parse(setup)?]
    };
    let variances: Vec<VarianceLevel> = match variance {
        "both" => vec![VarianceLevel::High, VarianceLevel::Low],
        v => vec![VarianceLevel::parse(v)?],
    };
    let methods: Vec<Method> = methods
        .split(',')
        .map(|m| match m.trim() {
            "sfpc" => Ok(Method::Sfpc),
            "mfpc" => Ok(Method::Mfpc),
            other => Err(Error::Argument(format!("unknown method `{other}`"))),
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(SetupId, VarianceLevel)> = setups
        .iter()
        .flat_map(|&s| variances.iter().map(move |&v| (s, v)))
        .collect();
    let options = StudyOptions { n_times, methods, ..StudyOptions::default() };
    let table = run_study(&cells, runs, seed, &options)?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.csv"), table.to_csv())?;
    let mut per_run = String::from("setup,variance_level,method,metric,run,value\n");
    for ((s, v, m, metric), values) in &table.per_run {
        for (run, value) in values.iter().enumerate() {
            per_run.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.label(),
                v.label(),
                m.label(),
                metric,
                run,
                value
            ));
        }
    }
    std::fs::write(out_dir.join("per_run.csv"), per_run)?;
    if table.failures > 0 {
        eprintln!("note: {} runs failed and were excluded", table.failures);
    }
    println!("study results written to {}", out_dir.display());
    Ok(())
}

pub fn cmd_cv_select(
    config_path: &Path,
    seed: Option<u64>,
    budget: Option<usize>,
    p_candidates: Option<&str>,
    criterion: &str,
    j_threshold: Option<f64>,
) -> Result<()> {
    let mut run_config = RunConfig::load(config_path)?;
    if let Some(b) = budget {
        run_config.cv_budget = b;
    }
    let ws = prepare(run_config)?;
    write_rejects(&ws.config.output, &ws.rejected)?;

    let (penalties, evaluations) = select_penalties(&ws, seed, false)?;
    let out = &ws.config.output;
    let mut csv = String::from(
        "stage,log10_mean_spatial,log10_mean_temporal,log10_pc,mean_spatial,mean_temporal,pc,cv\n",
    );
    for (stage, point, value) in &evaluations {
        csv.push_str(&format!(
            "{stage},{},{},{},{},{},{},{value}\n",
            point[0],
            point[1],
            point[2],
            10f64.powf(point[0]),
            10f64.powf(point[1]),
            10f64.powf(point[2]),
        ));
    }
    std::fs::write(out.join("cv_evaluations.csv"), csv)?;
    std::fs::write(
        out.join("selected_penalties.cfg"),
        format!(
            "[penalties]\nmode = fixed\nmean_spatial = {}\nmean_temporal = {}\npc = {}\n",
            penalties.mean_spatial, penalties.mean_temporal, penalties.pc
        ),
    )?;
    println!(
        "selected penalties: mean_spatial={} mean_temporal={} pc={}",
        penalties.mean_spatial, penalties.mean_temporal, penalties.pc
    );

    if let Some(candidates) = p_candidates {
        let criterion = InfoCriterion::parse(criterion)?;
        let orders: Vec<usize> = candidates
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad AR order `{s}`")))
            })
            .collect::<Result<_>>()?;
        let mut fitted = Vec::new();
        for &p in &orders {
            let mut config = fit_config_of(&ws, penalties, false);
            config.ar_order = p;
            fitted.push((p, em::fit(&ws.panel, ws.basis.clone(), ws.temporal.clone(), config)?));
        }
        let refs: Vec<(usize, &FittedModel)> = fitted.iter().map(|(p, m)| (*p, m)).collect();
        let (chosen, report) = select_p(&refs, criterion)?;
        let mut csv = String::from("p,criterion,selected\n");
        for (p, value) in &report {
            csv.push_str(&format!("{p},{value},{}\n", if *p == chosen { 1 } else { 0 }));
        }
        std::fs::write(out.join("p_selection.csv"), csv)?;
        println!("selected AR order: {chosen}");

        if let Some(tau) = j_threshold {
            // Proportion-of-variance choice from the fit at the chosen order.
            let model = &fitted.iter().find(|(p, _)| *p == chosen).unwrap().1;
            let (j, vars) = select_j(model, tau);
            let total: f64 = vars.iter().sum();
            let mut csv = String::from("j,score_variance,cumulative_share,selected\n");
            let mut acc = 0.0;
            for (idx, v) in vars.iter().enumerate() {
                acc += v;
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    idx + 1,
                    v,
                    acc / total.max(f64::MIN_POSITIVE),
                    if idx + 1 == j { 1 } else { 0 }
                ));
            }
            std::fs::write(out.join("j_selection.csv"), csv)?;
            println!("selected component count: {j}");
            let _ = ar_order_criterion(model, criterion); // criterion value available on demand
        }
    }
    Ok(())
}

fn grid_for_model(model: &FittedModel, nx: usize, ny: usize) -> Result<EvalGrid> {
    EvalGrid::from_mesh(model.basis.mesh(), nx, ny)
}

pub fn cmd_forecast(
    config_path: &Path,
    model_path: &Path,
    horizon: usize,
    truth: Option<&Path>,
    nx: usize,
    ny: usize,
) -> Result<()> {
    let ws = prepare(RunConfig::load(config_path)?)?;
    let model = load_model(model_path)?;
    let grid = grid_for_model(&model, nx, ny)?;
    let steps = em::forecast(&model, horizon, &grid.points)?;
    let out = &ws.config.output;
    for (h, step) in steps.iter().enumerate() {
        let mut csv = String::from("x,y,mean,sd\n");
        for (i, p) in grid.points.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{}\n", p.x, p.y, step.mean[i], step.sd[i]));
        }
        std::fs::write(out.join(format!("forecast_{:03}.csv", h + 1)), csv)?;
    }

    if let Some(truth_path) = truth {
        let (truth_panel, rejected) =
            load_long_csv(truth_path, model.basis.mesh())?;
        if !rejected.is_empty() {
            eprintln!("note: {} truth rows outside the domain ignored", rejected.len());
        }
        let n = model.n_times();
        let mut acc = [(0.0f64, 0usize); 12];
        for (idx, slice) in truth_panel.times.iter().enumerate() {
            if slice.values.is_empty() {
                continue;
            }
            // Truth rows use absolute time indices n+1..n+h.
            let t_abs = idx + 1;
            if t_abs <= n || t_abs > n + horizon {
                return Err(Error::Data(format!(
                    "truth time {t_abs} outside forecast window ({}..={})",
                    n + 1,
                    n + horizon
                )));
            }
            let step = t_abs - n;
            let pred = em::forecast(&model, step, &slice.locations)?
                .pop()
                .expect("requested step present");
            let month = (t_abs - 1) % 12;
            for (i, &v) in slice.values.iter().enumerate() {
                acc[month].0 += (pred.mean[i] - v).abs();
                acc[month].1 += 1;
            }
        }
        let table = acc.map(|(sum, count)| (count > 0).then(|| sum / count as f64));
        write_monthly_table(&out.join("mape_monthly.csv"), "forecast", &table)?;
    }
    println!("{horizon} forecast grids written to {}", out.display());
    Ok(())
}

pub fn cmd_bootstrap(
    config_path: &Path,
    model_path: &Path,
    replicates: usize,
    seed: u64,
    nx: usize,
    ny: usize,
) -> Result<()> {
    let ws = prepare(RunConfig::load(config_path)?)?;
    let mut model = load_model(model_path)?;
    recompute_residuals(&mut model, &ObservationPanelRef(&ws.panel))?;
    let grid = grid_for_model(&model, nx, ny)?;
    let outcome = bootstrap_sd(
        &model,
        &ws.panel,
        &BootstrapConfig { replicates, seed, grid: grid.clone() },
    )?;
    let out = &ws.config.output;
    let j = outcome.sd.len();
    let mut csv = String::from("x,y");
    for c in 0..j {
        csv.push_str(&format!(",sd_pc{}", c + 1));
    }
    csv.push('\n');
    for (i, p) in grid.points.iter().enumerate() {
        csv.push_str(&format!("{},{}", p.x, p.y));
        for c in 0..j {
            csv.push_str(&format!(",{}", outcome.sd[c][i]));
        }
        csv.push('\n');
    }
    std::fs::write(out.join("sd_surfaces.csv"), csv)?;
    if outcome.failed > 0 {
        eprintln!("note: {} bootstrap replicates failed and were dropped", outcome.failed);
    }
    println!(
        "bootstrap SD surfaces written to {} ({} replicates)",
        out.display(),
        outcome.completed
    );
    Ok(())
}

pub fn cmd_export_grid(
    model_path: &Path,
    out_dir: &Path,
    nx: usize,
    ny: usize,
    what: &str,
    times: Option<&str>,
) -> Result<()> {
    let model = load_model(model_path)?;
    let grid = grid_for_model(&model, nx, ny)?;
    std::fs::create_dir_all(out_dir)?;
    let b_grid = model.basis.eval_design(&grid.points)?;

    let write_surface = |path: PathBuf, values: &[f64]| -> Result<()> {
        let mut csv = String::from("x,y,value\n");
        for (i, p) in grid.points.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", p.x, p.y, values[i]));
        }
        std::fs::write(path, csv)?;
        Ok(())
    };

    let requested_times = || -> Result<Vec<usize>> {
        match times {
            None => Ok((1..=model.n_times()).collect()),
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Argument(format!("bad time `{s}`")))
                })
                .collect(),
        }
    };

    match what {
        "pcs" => {
            let comps = &b_grid * &model.params.loadings;
            for c in 0..model.params.n_factors() {
                write_surface(
                    out_dir.join(format!("pc_{}.csv", c + 1)),
                    comps.column(c).into_owned().as_slice(),
                )?;
            }
        }
        "mean" => {
            let mu_dir = &b_grid * &model.params.theta_b;
            for t in requested_times()? {
                let scale = model.params.theta_c.dot(&model.temporal.eval(t as f64));
                write_surface(
                    out_dir.join(format!("mean_{t:04}.csv")),
                    (&mu_dir * scale).as_slice(),
                )?;
            }
        }
        "surfaces" => {
            for t in requested_times()? {
                let surface = em::reconstruct(&model, t, &grid.points)?;
                write_surface(out_dir.join(format!("surface_{t:04}.csv")), surface.as_slice())?;
            }
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown export `{other}` (expected pcs, mean, or surfaces)"
            )));
        }
    }
    println!("grids written to {}", out_dir.display());
    Ok(())
}

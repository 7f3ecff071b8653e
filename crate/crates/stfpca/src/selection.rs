//! Model selection: AR order by information criterion, component count by
//! proportion of score variance, and regularization weights by K-fold
//! leave-location-out cross validation driven by a coarse grid followed by
//! Nelder-Mead refinement in log space.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis2d::BivariateBasis;
use crate::em;
use crate::error::{Error, Result};
use crate::model::{FitConfig, FittedModel};
use crate::panel::ObservationPanel;
use crate::rng::derive_seed;
use crate::temporal::TemporalBasis;

/// Reproducible per-time partition of observations into near-equal folds.
#[derive(Debug, Clone)]
pub struct CVPlan {
    k_folds: usize,
    seed: u64,
    /// `assignments[t][i]` is the fold of observation `i` at time `t`.
    assignments: Vec<Vec<usize>>,
}

impl CVPlan {
    /// Splits each time point's observations into `k_folds` subsets whose
    /// sizes differ by at most one, shuffled by a stream seeded from `seed`.
    pub fn new(obs_per_time: &[usize], k_folds: usize, seed: u64) -> Result<Self> {
        if k_folds < 2 {
            return Err(Error::Argument("need at least 2 folds".into()));
        }
        let mut assignments = Vec::with_capacity(obs_per_time.len());
        for (t, &n_t) in obs_per_time.iter().enumerate() {
            let mut order: Vec<usize> = (0..n_t).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            order.shuffle(&mut rng);
            let mut folds = vec![0usize; n_t];
            for (rank, &obs) in order.iter().enumerate() {
                folds[obs] = rank % k_folds;
            }
            assignments.push(folds);
        }
        Ok(CVPlan { k_folds, seed, assignments })
    }

    pub fn for_panel(panel: &ObservationPanel, k_folds: usize, seed: u64) -> Result<Self> {
        let counts: Vec<usize> = panel.slices().iter().map(|s| s.n_obs()).collect();
        Self::new(&counts, k_folds, seed)
    }

    /// Builds a plan from explicit per-time fold assignments.
    pub fn from_assignments(assignments: Vec<Vec<usize>>, k_folds: usize) -> Result<Self> {
        if k_folds < 2 {
            return Err(Error::Argument("need at least 2 folds".into()));
        }
        for folds in &assignments {
            if folds.iter().any(|&f| f >= k_folds) {
                return Err(Error::Argument("fold id out of range".into()));
            }
        }
        Ok(CVPlan { k_folds, seed: 0, assignments })
    }

    pub fn k_folds(&self) -> usize {
        self.k_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row indices held out at each time for the given fold.
    pub fn held_out_rows(&self, fold: usize) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|folds| {
                folds
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &f)| (f == fold).then_some(i))
                    .collect()
            })
            .collect()
    }
}

/// Cross-validation outcome: mean squared prediction error over all held-out
/// observations of the completed folds.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub score: f64,
    pub fold_scores: Vec<Option<f64>>,
    pub failed_folds: usize,
}

/// K-fold leave-location-out cross validation: refits on each fold's
/// complement and predicts the held-out observations from the training
/// fit's smoothed moments. Failed folds are recorded and excluded.
pub fn cv_score(
    panel: &ObservationPanel,
    basis: &Arc<BivariateBasis>,
    temporal: &Arc<TemporalBasis>,
    config: &FitConfig,
    plan: &CVPlan,
) -> Result<CvOutcome> {
    let folds: Vec<Result<(f64, usize)>> =
        crate::parallel::map_indexed(plan.k_folds(), |fold| {
            let drop = plan.held_out_rows(fold);
            let train = panel.without_rows(&drop)?;
            let model = em::fit(&train, basis.clone(), temporal.clone(), config.clone())?;
            let mut sq = 0.0;
            let mut count = 0usize;
            for (t, slice) in panel.slices().iter().enumerate() {
                if drop[t].is_empty() {
                    continue;
                }
                let c = temporal.eval((t + 1) as f64);
                let mean_scale = model.params.theta_c.dot(&c);
                let coeff = &model.params.theta_b * mean_scale
                    + &model.params.loadings * &model.moments.alpha[t];
                for &i in &drop[t] {
                    let pred = slice.b.row(i).transpose().dot(&coeff);
                    sq += (slice.z[i] - pred).powi(2);
                    count += 1;
                }
            }
            Ok((sq, count))
        });

    let mut total_sq = 0.0;
    let mut total_count = 0usize;
    let mut fold_scores = Vec::with_capacity(plan.k_folds());
    let mut failed = 0usize;
    for outcome in folds {
        match outcome {
            Ok((sq, count)) => {
                fold_scores.push(Some(if count > 0 { sq / count as f64 } else { 0.0 }));
                total_sq += sq;
                total_count += count;
            }
            Err(_) => {
                fold_scores.push(None);
                failed += 1;
            }
        }
    }
    if total_count == 0 {
        return Err(Error::Data("every cross-validation fold failed".into()));
    }
    Ok(CvOutcome { score: total_sq / total_count as f64, fold_scores, failed_folds: failed })
}

/// Information criterion flavor for AR order selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoCriterion {
    Aic,
    Bic,
}

impl InfoCriterion {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(InfoCriterion::Aic),
            "bic" => Ok(InfoCriterion::Bic),
            other => Err(Error::Argument(format!("unknown criterion `{other}`"))),
        }
    }
}

/// Criterion value of a fitted model:
/// `sum_j { n log sigma_j^2 + S_j(k_j) / sigma_j^2 }` plus `2 p` (AIC) or
/// `log(n) p` (BIC).
pub fn ar_order_criterion(model: &FittedModel, criterion: InfoCriterion) -> f64 {
    let n = model.n_times() as f64;
    let p = model.params.ar_order() as f64;
    let mut value = 0.0;
    for j in 0..model.params.n_factors() {
        let k = model.params.ar_column(j);
        value += n * model.params.score_variances[j].ln()
            + model.moments.s_quadratic(j, &k) / model.params.score_variances[j];
    }
    value
        + match criterion {
            InfoCriterion::Aic => 2.0 * p,
            InfoCriterion::Bic => n.ln() * p,
        }
}

/// Picks the AR order minimizing the criterion; ties break toward the
/// smaller order. Returns the winner plus the per-candidate values.
pub fn select_p(
    candidates: &[(usize, &FittedModel)],
    criterion: InfoCriterion,
) -> Result<(usize, Vec<(usize, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::Argument("empty candidate set".into()));
    }
    let mut report: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&(p, model)| (p, ar_order_criterion(model, criterion)))
        .collect();
    report.sort_by_key(|&(p, _)| p);
    Ok((argmin_prefer_small(&report), report))
}

fn argmin_prefer_small(values: &[(usize, f64)]) -> usize {
    let mut best = values[0];
    for &(p, v) in &values[1..] {
        if v < best.1 {
            best = (p, v);
        }
    }
    best.0
}

/// Smallest J whose leading score variances reach the fraction `tau` of the
/// total; returns the choice and the per-component sample variances.
pub fn select_j(model: &FittedModel, tau: f64) -> (usize, Vec<f64>) {
    let (j, vars) = select_j_from_scores(&model.moments.alpha, tau);
    (j, vars)
}

pub fn select_j_from_scores(alpha: &[DVector<f64>], tau: f64) -> (usize, Vec<f64>) {
    let j_max = alpha.first().map_or(0, |a| a.len());
    let n = alpha.len() as f64;
    let vars: Vec<f64> = (0..j_max)
        .map(|j| {
            let mean: f64 = alpha.iter().map(|a| a[j]).sum::<f64>() / n;
            alpha.iter().map(|a| (a[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    let total: f64 = vars.iter().sum();
    if total <= 0.0 {
        return (1.min(j_max), vars);
    }
    let mut acc = 0.0;
    for (j, &v) in vars.iter().enumerate() {
        acc += v;
        if acc / total >= tau {
            return (j + 1, vars);
        }
    }
    (j_max, vars)
}

/// Options for the two-stage regularization search.
#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Candidate log10 values per axis for the coarse stage.
    pub grid: Vec<f64>,
    /// Initial simplex edge length in log10 units.
    pub initial_step: f64,
    /// Simplex diameter (max coordinate spread) below which the search stops.
    pub diameter_tol: f64,
    /// Total objective-evaluation budget across both stages.
    pub budget: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            grid: vec![-4.0, 0.0, 4.0],
            initial_step: 1.0,
            diameter_tol: 0.05,
            budget: 200,
        }
    }
}

/// Search outcome in log10 space.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_log: Vec<f64>,
    pub best_value: f64,
    pub converged: bool,
    /// Every evaluated point: (stage, log10 coordinates, value).
    pub evaluations: Vec<(&'static str, Vec<f64>, f64)>,
}

/// Coarse grid then Nelder-Mead in log10 space (reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5). The returned point is the best evaluated
/// anywhere, so it is never worse than the grid stage winner.
pub fn grid_then_simplex(
    mut objective: impl FnMut(&[f64]) -> Result<f64>,
    dims: usize,
    options: &SearchOptions,
) -> Result<SearchResult> {
    if dims == 0 || options.grid.is_empty() {
        return Err(Error::Argument("search needs dimensions and grid values".into()));
    }
    let mut evaluations: Vec<(&'static str, Vec<f64>, f64)> = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evals_left = options.budget;

    let mut eval = |stage: &'static str,
                    point: &[f64],
                    evals_left: &mut usize,
                    best: &mut Option<(Vec<f64>, f64)>,
                    evaluations: &mut Vec<(&'static str, Vec<f64>, f64)>|
     -> Result<Option<f64>> {
        if *evals_left == 0 {
            return Ok(None);
        }
        *evals_left -= 1;
        let value = objective(point)?;
        evaluations.push((stage, point.to_vec(), value));
        if best.as_ref().map_or(true, |(_, b)| value < *b) {
            *best = Some((point.to_vec(), value));
        }
        Ok(Some(value))
    };

    // Stage 1: full factorial over the per-axis grid values.
    let mut counters = vec![0usize; dims];
    'grid: loop {
        let point: Vec<f64> = counters.iter().map(|&c| options.grid[c]).collect();
        if eval("grid", &point, &mut evals_left, &mut best, &mut evaluations)?.is_none() {
            break 'grid;
        }
        let mut axis = 0;
        loop {
            counters[axis] += 1;
            if counters[axis] < options.grid.len() {
                break;
            }
            counters[axis] = 0;
            axis += 1;
            if axis == dims {
                break 'grid;
            }
        }
    }
    let (start, start_value) =
        best.clone().ok_or_else(|| Error::Argument("budget exhausted before any evaluation".into()))?;

    // Stage 2: Nelder-Mead from the grid winner.
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(start.clone(), start_value)];
    for axis in 0..dims {
        let mut v = start.clone();
        v[axis] += options.initial_step;
        match eval("simplex", &v, &mut evals_left, &mut best, &mut evaluations)? {
            Some(value) => simplex.push((v, value)),
            None => {
                let (best_log, best_value) = best.unwrap();
                return Ok(SearchResult { best_log, best_value, converged: false, evaluations });
            }
        }
    }

    let diameter = |simplex: &[(Vec<f64>, f64)]| -> f64 {
        let mut d = 0.0f64;
        for a in 0..simplex.len() {
            for b in a + 1..simplex.len() {
                for axis in 0..dims {
                    d = d.max((simplex[a].0[axis] - simplex[b].0[axis]).abs());
                }
            }
        }
        d
    };

    let mut converged = false;
    'outer: loop {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let spread = simplex.last().unwrap().1 - simplex[0].1;
        if diameter(&simplex) < options.diameter_tol
            || spread <= 1e-12 * simplex[0].1.abs().max(1.0)
        {
            converged = true;
            break;
        }
        let worst = simplex.len() - 1;
        let mut centroid = vec![0.0; dims];
        for vertex in &simplex[..worst] {
            for axis in 0..dims {
                centroid[axis] += vertex.0[axis] / worst as f64;
            }
        }
        let combine = |a: f64| -> Vec<f64> {
            (0..dims)
                .map(|axis| centroid[axis] + a * (centroid[axis] - simplex[worst].0[axis]))
                .collect()
        };

        let reflected = combine(1.0);
        let f_reflect =
            match eval("simplex", &reflected, &mut evals_left, &mut best, &mut evaluations)? {
                Some(v) => v,
                None => break 'outer,
            };
        if f_reflect < simplex[0].1 {
            let expanded = combine(2.0);
            match eval("simplex", &expanded, &mut evals_left, &mut best, &mut evaluations)? {
                Some(f_expand) if f_expand < f_reflect => {
                    simplex[worst] = (expanded, f_expand);
                }
                Some(_) => simplex[worst] = (reflected, f_reflect),
                None => break 'outer,
            }
            continue;
        }
        if f_reflect < simplex[worst - 1].1 {
            simplex[worst] = (reflected, f_reflect);
            continue;
        }
        // Contraction (outside toward the reflected point when it improved
        // on the worst, inside otherwise); non-strict acceptance so a flat
        // objective still shrinks to termination.
        let (candidate, bound) = if f_reflect < simplex[worst].1 {
            (combine(0.5), f_reflect)
        } else {
            (combine(-0.5), simplex[worst].1)
        };
        match eval("simplex", &candidate, &mut evals_left, &mut best, &mut evaluations)? {
            Some(f_contract) if f_contract <= bound => {
                simplex[worst] = (candidate, f_contract);
                continue;
            }
            None => break 'outer,
            _ => {}
        }
        // Shrink toward the best vertex.
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let shrunk: Vec<f64> = (0..dims)
                .map(|axis| anchor[axis] + 0.5 * (vertex.0[axis] - anchor[axis]))
                .collect();
            match eval("simplex", &shrunk, &mut evals_left, &mut best, &mut evaluations)? {
                Some(value) => *vertex = (shrunk, value),
                None => break 'outer,
            }
        }
    }

    let (best_log, best_value) = best.unwrap();
    Ok(SearchResult { best_log, best_value, converged, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cv_plan_is_reproducible_and_balanced() {
        let counts = vec![10, 7, 0, 13];
        let a = CVPlan::new(&counts, 5, 99).unwrap();
        let b = CVPlan::new(&counts, 5, 99).unwrap();
        for fold in 0..5 {
            assert_eq!(a.held_out_rows(fold), b.held_out_rows(fold));
        }
        // Every observation lands in exactly one fold; sizes differ by <= 1.
        for (t, &n_t) in counts.iter().enumerate() {
            let mut seen = vec![0usize; n_t];
            let mut sizes = Vec::new();
            for fold in 0..5 {
                let rows = &a.held_out_rows(fold)[t];
                sizes.push(rows.len());
                for &i in rows {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "time {t}");
            let (lo, hi) =
                (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "time {t}: fold sizes {sizes:?}");
        }
        let c = CVPlan::new(&counts, 5, 100).unwrap();
        assert_ne!(a.held_out_rows(0), c.held_out_rows(0));
    }

    #[test]
    fn tie_breaks_toward_smaller_order() {
        assert_eq!(argmin_prefer_small(&[(1, 5.0), (2, 5.0), (3, 5.0)]), 1);
        assert_eq!(argmin_prefer_small(&[(1, 5.0), (2, 4.0), (3, 4.0)]), 2);
    }

    #[test]
    fn select_j_dominant_component() {
        let alpha: Vec<DVector<f64>> = (0..50)
            .map(|t| {
                DVector::from_column_slice(&[
                    (t as f64 * 0.7).sin() * 10.0,
                    (t as f64 * 0.3).cos() * 1e-4,
                    (t as f64 * 0.9).sin() * 1e-4,
                ])
            })
            .collect();
        let (j, _) = select_j_from_scores(&alpha, 0.95);
        assert_eq!(j, 1);
    }

    #[test]
    fn select_j_equal_variances_needs_all() {
        let alpha: Vec<DVector<f64>> = (0..200)
            .map(|t| {
                let s = (t as f64 * 0.77).sin() * 2.0;
                DVector::from_column_slice(&[
                    s,
                    ((t + 13) as f64 * 0.77).sin() * 2.0,
                    ((t + 31) as f64 * 0.77).sin() * 2.0,
                    ((t + 47) as f64 * 0.77).sin() * 2.0,
                ])
            })
            .collect();
        let (j, vars) = select_j_from_scores(&alpha, 0.95);
        assert_eq!(j, 4, "variances {vars:?}");
    }

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let target = [0.7, -1.3, 2.1];
        let mut options = SearchOptions::default();
        options.diameter_tol = 1e-4;
        options.budget = 500;
        let result = grid_then_simplex(
            |x| {
                Ok((0..3)
                    .map(|i| (x[i] - target[i]).powi(2) * (1.0 + i as f64))
                    .sum())
            },
            3,
            &options,
        )
        .unwrap();
        assert!(result.converged);
        for i in 0..3 {
            assert!(
                (result.best_log[i] - target[i]).abs() < 1e-3,
                "axis {i}: {} vs {}",
                result.best_log[i],
                target[i]
            );
        }
    }

    #[test]
    fn simplex_terminates_on_constant_objective() {
        let options = SearchOptions::default();
        let result = grid_then_simplex(|_| Ok(7.5), 3, &options).unwrap();
        assert!(result.converged);
        assert_eq!(result.best_value, 7.5);
    }

    #[test]
    fn search_never_worse_than_grid_stage() {
        // A rough objective with a spurious bump; the final answer must not
        // exceed the best grid value.
        let mut options = SearchOptions::default();
        options.budget = 60;
        let result = grid_then_simplex(
            |x| Ok((x[0] - 0.3).powi(2) + (x[1] * x[0]).sin().abs()),
            2,
            &options,
        )
        .unwrap();
        let grid_best = result
            .evaluations
            .iter()
            .filter(|(stage, _, _)| *stage == "grid")
            .map(|(_, _, v)| *v)
            .fold(f64::INFINITY, f64::min);
        assert!(result.best_value <= grid_best + 1e-15);
    }

    #[test]
    fn budget_exhaustion_flags_non_convergence() {
        let mut options = SearchOptions::default();
        options.budget = 30; // grid needs 27, leaves 3 for the simplex
        let result =
            grid_then_simplex(|x| Ok(x.iter().map(|v| v * v).sum()), 3, &options).unwrap();
        assert!(!result.converged);
        assert!(result.best_value.is_finite());
    }
}

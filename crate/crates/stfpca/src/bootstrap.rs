//! Semi-parametric bootstrap standard-deviation surfaces for the estimated
//! principal component functions.
//!
//! Each replicate simulates scores from the fitted AR model, rebuilds
//! surfaces from the fitted coefficients at the original observation
//! locations, adds residuals resampled with replacement within each time
//! point, refits with the identical configuration, aligns every estimated
//! component to the original by sign, and finally takes pointwise standard
//! deviations across replicates.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::em;
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::panel::ObservationPanel;
use crate::rng::derive_seed;
use crate::simulate::EvalGrid;

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    /// Number of replicates, at least 2.
    pub replicates: usize,
    pub seed: u64,
    /// Point set on which the SD surfaces are reported.
    pub grid: EvalGrid,
}

/// Bootstrap result: one SD surface per principal component, plus the
/// replicate bookkeeping.
#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    /// `sd[j]` is the pointwise standard deviation surface of component `j`.
    pub sd: Vec<DVector<f64>>,
    pub completed: usize,
    pub failed: usize,
}

/// Runs the bootstrap with per-replicate seeds derived from `config.seed`.
pub fn bootstrap_sd(
    model: &FittedModel,
    panel: &ObservationPanel,
    config: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    if config.replicates < 2 {
        return Err(Error::Argument("need at least 2 bootstrap replicates".into()));
    }
    let seeds: Vec<u64> =
        (0..config.replicates).map(|b| derive_seed(config.seed, b as u64)).collect();
    bootstrap_sd_with_seeds(model, panel, &config.grid, &seeds)
}

/// Same as [`bootstrap_sd`] but with explicit per-replicate seeds.
pub fn bootstrap_sd_with_seeds(
    model: &FittedModel,
    panel: &ObservationPanel,
    grid: &EvalGrid,
    seeds: &[u64],
) -> Result<BootstrapOutcome> {
    if model.residuals.len() != panel.n_times() {
        return Err(Error::Argument("model residuals do not match the panel".into()));
    }
    // Work on the sign-canonical representation so the output does not
    // depend on the (arbitrary) sign convention of the input components.
    let model = canonical_model(model);
    let j = model.params.n_factors();
    let b_grid = model.basis.eval_design(&grid.points)?;
    let original = &b_grid * &model.params.loadings;

    let results: Vec<Result<DMatrix<f64>>> = crate::parallel::map_indexed(seeds.len(), |b| {
        replicate_components(&model, panel, &b_grid, &original, seeds[b])
    });

    let completed: Vec<&DMatrix<f64>> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failed = results.len() - completed.len();
    if completed.len() < 2 {
        return Err(Error::Data(format!(
            "only {} bootstrap replicates completed",
            completed.len()
        )));
    }

    let g = grid.len();
    let denom = (completed.len() - 1) as f64;
    let mut sd = Vec::with_capacity(j);
    for comp in 0..j {
        let mut out = DVector::zeros(g);
        for point in 0..g {
            let mean: f64 =
                completed.iter().map(|m| m[(point, comp)]).sum::<f64>() / completed.len() as f64;
            let var: f64 = completed
                .iter()
                .map(|m| (m[(point, comp)] - mean).powi(2))
                .sum::<f64>()
                / denom;
            out[point] = var.sqrt();
        }
        sd.push(out);
    }
    Ok(BootstrapOutcome { sd, completed: completed.len(), failed })
}

fn canonical_model(model: &FittedModel) -> FittedModel {
    let mut out = model.clone();
    let j = out.params.n_factors();
    let mut signs = DVector::from_element(j, 1.0);
    for c in 0..j {
        let col = out.params.loadings.column(c);
        let lead = col.iter().cloned().fold(0.0f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        if lead < 0.0 {
            out.params.loadings.column_mut(c).neg_mut();
            signs[c] = -1.0;
        }
    }
    if signs.iter().any(|&s| s < 0.0) {
        let flip = DMatrix::from_diagonal(&signs);
        out.moments.rotate(&flip);
    }
    out
}

/// One replicate: simulated scores, rebuilt surfaces with resampled
/// residuals, identical refit, sign-aligned grid components.
fn replicate_components(
    model: &FittedModel,
    panel: &ObservationPanel,
    b_grid: &DMatrix<f64>,
    original: &DMatrix<f64>,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = panel.n_times();
    let j = model.params.n_factors();
    let p = model.params.ar_order();

    // Scores from the fitted AR with the model's zero pre-sample convention.
    let mut scores: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut history: Vec<DVector<f64>> = vec![DVector::zeros(j); p];
    for _ in 0..n {
        let mut s = DVector::zeros(j);
        for jj in 0..j {
            let mut v = rng.sample::<f64, _>(StandardNormal)
                * model.params.score_variances[jj].sqrt();
            for lag in 0..p {
                v += model.params.ar_coefficients[(lag, jj)] * history[lag][jj];
            }
            s[jj] = v;
        }
        history.rotate_right(1);
        history[0] = s.clone();
        scores.push(s);
    }

    // Surfaces at the original locations plus within-time resampled
    // residuals.
    let mut values = Vec::with_capacity(n);
    for (t, slice) in panel.slices().iter().enumerate() {
        let n_t = slice.n_obs();
        if n_t == 0 {
            values.push(DVector::zeros(0));
            continue;
        }
        let mean_scale = model.params.theta_c.dot(&slice.c);
        let mut z = &slice.b
            * (&model.params.theta_b * mean_scale + &model.params.loadings * &scores[t]);
        let pool = &model.residuals[t];
        for i in 0..n_t {
            z[i] += pool[rng.gen_range(0..n_t)];
        }
        values.push(z);
    }
    let replicate_panel = panel.with_values(values)?;
    let refit = em::fit(
        &replicate_panel,
        model.basis.clone(),
        model.temporal.clone(),
        model.config.clone(),
    )?;

    let mut components = b_grid * &refit.params.loadings;
    for c in 0..j {
        let inner = components.column(c).dot(&original.column(c));
        if inner < 0.0 {
            components.column_mut(c).neg_mut();
        }
    }
    Ok(components)
}

//! Penalized EM estimation: E-step through the state-space machinery, the
//! six block updates of the M-step, convergence control, reconstruction,
//! and forecasting.
//!
//! Block update order within an iteration is fixed: mean surface
//! coefficients, mean curve coefficients, observation variance, loadings
//! (with spectral re-orthonormalization), innovation variances, AR
//! coefficients. The AR update minimizes the quadratic part of its block
//! objective only (the log-determinant of the initial-state precision is
//! dropped there), so the recorded objective may tick up at that one step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ar;
use crate::basis2d::BivariateBasis;
use crate::error::{Error, Result};
use crate::mesh::Point2;
use crate::model::{FitConfig, FittedModel, InvariantRecord, IterationTrace, ModelParams, Penalties};
use crate::panel::ObservationPanel;
use crate::state_space::{
    extract_moments, kalman_filter, kalman_smoother, LatentMoments, StateInit, StateSpaceSpec,
};
use crate::temporal::TemporalBasis;

/// Observation and innovation variances below this are clamped; fits that
/// hit the clamp are flagged as degenerate. The floor keeps Kalman gains
/// bounded when a noiseless fit collapses a variance to numerical zero.
const VARIANCE_FLOOR: f64 = 1e-12;
const DEGENERATE_TOL: f64 = 1e-12;

/// Armijo backtracking ratio and slope constant for the sphere descent.
const ARMIJO_BETA: f64 = 0.5;
const ARMIJO_GAMMA: f64 = 1e-4;
const SPHERE_STEP_TOL: f64 = 1e-8;
const SPHERE_MAX_ITER: usize = 500;

fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    a.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Conditioning(format!("{what}: normal matrix is singular")))
}

/// `-2 log` complete-data likelihood (no 2 pi constants): residual and AR
/// quadratic forms plus the log-variance and initial-state terms, with the
/// given score path treated as observed.
pub fn neg2_complete_loglik(
    params: &ModelParams,
    panel: &ObservationPanel,
    scores: &[DVector<f64>],
) -> Result<f64> {
    let n = panel.n_times();
    if scores.len() != n {
        return Err(Error::Argument("score path length must equal panel length".into()));
    }
    let j = params.n_factors();
    let p = params.ar_order();
    let mut value = 0.0;
    let mut total_obs = 0usize;
    for (t, slice) in panel.slices().iter().enumerate() {
        if slice.n_obs() == 0 {
            continue;
        }
        let mean_scale = params.theta_c.dot(&slice.c);
        let fitted = &slice.b * (&params.theta_b * mean_scale + &params.loadings * &scores[t]);
        let r = &slice.z - fitted;
        value += r.norm_squared() / params.sigma2;
        total_obs += slice.n_obs();
    }
    value += total_obs as f64 * params.sigma2.ln();

    for jj in 0..j {
        let k = params.ar_column(jj);
        let (_, log_det_m) = ar::ar_precision(&k)?;
        // Lag statistics of the observed path; the quadratic form in
        // (1, k) reproduces the stationary initial-state term plus the
        // conditional sum of squares exactly.
        let mut d = DMatrix::zeros(p + 1, p + 1);
        for a in 1..=p + 1 {
            for b in 1..=p + 1 {
                let mut acc = 0.0;
                if a + b <= n + 1 {
                    for s in 0..=(n + 1 - a - b) {
                        acc += scores[a + s - 1][jj] * scores[b + s - 1][jj];
                    }
                }
                d[(a - 1, b - 1)] = acc;
            }
        }
        let mut s_j = d[(0, 0)];
        for (l, &kl) in k.iter().enumerate() {
            s_j -= 2.0 * kl * d[(0, l + 1)];
            for (m, &km) in k.iter().enumerate() {
                s_j += kl * km * d[(l + 1, m + 1)];
            }
        }
        value += n as f64 * params.score_variances[jj].ln() - log_det_m
            + s_j / params.score_variances[jj];
    }
    Ok(value)
}

/// E-step result: smoothed moments plus the observed-data likelihood and the
/// terminal smoothed state.
#[derive(Debug, Clone)]
pub struct EStep {
    pub moments: LatentMoments,
    pub observed_neg2_loglik: f64,
    pub final_state_mean: DVector<f64>,
    pub final_state_cov: DMatrix<f64>,
}

/// Runs filter and smoother under the current parameters.
pub fn e_step(
    params: &ModelParams,
    panel: &ObservationPanel,
    init: StateInit,
) -> Result<EStep> {
    let mut obs_map = Vec::with_capacity(panel.n_times());
    let mut offset = Vec::with_capacity(panel.n_times());
    let mut z = Vec::with_capacity(panel.n_times());
    for slice in panel.slices() {
        obs_map.push(&slice.b * &params.loadings);
        let mean_scale = params.theta_c.dot(&slice.c);
        offset.push(&slice.b * &params.theta_b * mean_scale);
        z.push(slice.z.clone());
    }
    let spec = StateSpaceSpec::new(
        &params.ar_coefficients,
        &params.score_variances,
        params.sigma2,
        obs_map,
        offset,
        init,
    )?;
    let filt = kalman_filter(&spec, &z, false)?;
    let smooth = kalman_smoother(&spec, &filt)?;
    let n = panel.n_times();
    let moments = extract_moments(&spec, &smooth);
    Ok(EStep {
        moments,
        observed_neg2_loglik: filt.neg2_loglik,
        final_state_mean: smooth.mean[n - 1].clone(),
        final_state_cov: smooth.cov[n - 1].clone(),
    })
}

/// Expected penalized complete-data objective at the given parameters and
/// smoothed moments.
pub fn q_value(
    params: &ModelParams,
    moments: &LatentMoments,
    penalties: &Penalties,
    panel: &ObservationPanel,
    gamma: &DMatrix<f64>,
    pen_t: &DMatrix<f64>,
) -> f64 {
    let n = panel.n_times();
    let j = params.n_factors();
    let mut q = 0.0;
    let mut total_obs = 0usize;
    for (t, slice) in panel.slices().iter().enumerate() {
        if slice.n_obs() > 0 {
            let mean_scale = params.theta_c.dot(&slice.c);
            let fitted = &slice.b
                * (&params.theta_b * mean_scale + &params.loadings * &moments.alpha[t]);
            let r = &slice.z - fitted;
            let proj = params.loadings.transpose() * &slice.btb * &params.loadings;
            let trace_term = (&proj * &moments.sigma[t]).trace();
            q += (r.norm_squared() + trace_term) / params.sigma2;
            total_obs += slice.n_obs();
        }
    }
    q += total_obs as f64 * params.sigma2.ln();

    for jj in 0..j {
        let k = params.ar_column(jj);
        let log_det_m = ar::ar_precision(&k).map(|(_, d)| d).unwrap_or(f64::NAN);
        q += n as f64 * params.score_variances[jj].ln() - log_det_m
            + moments.s_quadratic(jj, &k) / params.score_variances[jj];
    }

    q += penalties.mean_spatial * (gamma * &params.theta_b).dot(&params.theta_b);
    q += penalties.mean_temporal * (pen_t * &params.theta_c).dot(&params.theta_c);
    for jj in 0..j {
        let col = params.loadings.column(jj).into_owned();
        q += penalties.pc * (gamma * &col).dot(&col);
    }
    q
}

/// Sphere-constrained quadratic descent: minimizes
/// `(theta - m)' A (theta - m)` over the unit sphere by projected gradient
/// steps with Armijo backtracking and normalization retraction.
pub fn update_theta_b(
    params: &ModelParams,
    moments: &LatentMoments,
    panel: &ObservationPanel,
    penalties: &Penalties,
    gamma: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n_b = panel.n_b();
    let mut a = gamma * (params.sigma2 * penalties.mean_spatial);
    let mut rhs = DVector::zeros(n_b);
    for (t, slice) in panel.slices().iter().enumerate() {
        if slice.n_obs() == 0 {
            continue;
        }
        let scale = params.theta_c.dot(&slice.c);
        a.axpy_wrt(scale * scale, &slice.btb);
        let resid = &slice.z - &slice.b * (&params.loadings * &moments.alpha[t]);
        rhs += slice.b.transpose() * resid * scale;
    }
    let m = solve_spd(&a, &rhs, "mean-surface update")?;
    sphere_minimize(&a, &m, &params.theta_b)
}

/// Minimizes `(theta - m)' A (theta - m)` over the unit sphere from `start`:
/// projected negative gradient, Armijo backtracking, normalization
/// retraction. Stops when a step moves less than 1e-8 or after 500 steps.
pub fn sphere_minimize(
    a: &DMatrix<f64>,
    m: &DVector<f64>,
    start: &DVector<f64>,
) -> Result<DVector<f64>> {
    let f = |theta: &DVector<f64>| -> f64 {
        let d = theta - m;
        (a * &d).dot(&d)
    };
    let norm = start.norm();
    if norm == 0.0 {
        return Err(Error::Argument("sphere descent needs a nonzero start".into()));
    }
    let mut theta = start / norm;
    let mut f_cur = f(&theta);
    for _ in 0..SPHERE_MAX_ITER {
        let grad = a * (&theta - m) * 2.0;
        let eta = -(&grad - &theta * theta.dot(&grad));
        let eta_norm2 = eta.norm_squared();
        if eta_norm2 == 0.0 {
            break;
        }
        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..60 {
            let cand = (&theta + &eta * step).normalize();
            let f_cand = f(&cand);
            if f_cand <= f_cur - ARMIJO_GAMMA * step * eta_norm2 {
                accepted = Some((cand, f_cand));
                break;
            }
            step *= ARMIJO_BETA;
        }
        match accepted {
            Some((cand, f_cand)) => {
                let moved = (&cand - &theta).norm();
                theta = cand;
                f_cur = f_cand;
                if moved < SPHERE_STEP_TOL {
                    break;
                }
            }
            // No decrease at the smallest step: stationary to rounding.
            None => break,
        }
    }
    Ok(theta)
}

trait AxpyMat {
    fn axpy_wrt(&mut self, alpha: f64, other: &DMatrix<f64>);
}

impl AxpyMat for DMatrix<f64> {
    fn axpy_wrt(&mut self, alpha: f64, other: &DMatrix<f64>) {
        self.zip_apply(other, |a, b| *a += alpha * b);
    }
}

/// Closed-form update of the temporal mean coefficients.
pub fn update_theta_c(
    theta_b_new: &DVector<f64>,
    params: &ModelParams,
    moments: &LatentMoments,
    panel: &ObservationPanel,
    penalties: &Penalties,
    pen_t: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n_c = panel.n_c();
    let mut a = pen_t * (params.sigma2 * penalties.mean_temporal);
    let mut rhs = DVector::zeros(n_c);
    for (t, slice) in panel.slices().iter().enumerate() {
        if slice.n_obs() == 0 {
            continue;
        }
        let u = &slice.b * theta_b_new;
        a.syger(u.norm_squared(), &slice.c, &slice.c, 1.0);
        let resid = &slice.z - &slice.b * (&params.loadings * &moments.alpha[t]);
        rhs += &slice.c * u.dot(&resid);
    }
    a.fill_upper_triangle_with_lower_triangle();
    solve_spd(&a, &rhs, "mean-curve update")
}

/// Closed-form observation variance update; returns the value and whether it
/// collapsed to (numerical) zero.
pub fn update_sigma2(
    theta_b_new: &DVector<f64>,
    theta_c_new: &DVector<f64>,
    params: &ModelParams,
    moments: &LatentMoments,
    panel: &ObservationPanel,
) -> Result<(f64, bool)> {
    let mut acc = 0.0;
    let mut total_obs = 0usize;
    for (t, slice) in panel.slices().iter().enumerate() {
        if slice.n_obs() == 0 {
            continue;
        }
        let mean_scale = theta_c_new.dot(&slice.c);
        let fitted =
            &slice.b * (theta_b_new * mean_scale + &params.loadings * &moments.alpha[t]);
        let r = &slice.z - fitted;
        let proj = params.loadings.transpose() * &slice.btb * &params.loadings;
        acc += r.norm_squared() + (&proj * &moments.sigma[t]).trace();
        total_obs += slice.n_obs();
    }
    if total_obs == 0 {
        return Err(Error::Data("no observations to estimate sigma2".into()));
    }
    let raw = acc / total_obs as f64;
    Ok((raw.max(VARIANCE_FLOOR), raw <= DEGENERATE_TOL))
}

/// Sequential closed-form update of the loading columns (no
/// re-orthonormalization here).
pub fn update_loadings(
    theta_b_new: &DVector<f64>,
    theta_c_new: &DVector<f64>,
    sigma2_new: f64,
    params: &ModelParams,
    moments: &LatentMoments,
    panel: &ObservationPanel,
    penalties: &Penalties,
    gamma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let j = params.n_factors();
    let n_b = panel.n_b();
    let mut theta = params.loadings.clone();

    // Residuals about the new mean, reused across columns.
    let residuals: Vec<Option<DVector<f64>>> = panel
        .slices()
        .iter()
        .map(|slice| {
            (slice.n_obs() > 0).then(|| {
                let mean_scale = theta_c_new.dot(&slice.c);
                &slice.z - &slice.b * theta_b_new * mean_scale
            })
        })
        .collect();

    for col in 0..j {
        let mut a = gamma * (sigma2_new * penalties.pc);
        let mut rhs = DVector::zeros(n_b);
        for (t, slice) in panel.slices().iter().enumerate() {
            if slice.n_obs() == 0 {
                continue;
            }
            let alpha = &moments.alpha[t];
            let sig = &moments.sigma[t];
            let weight = alpha[col] * alpha[col] + sig[(col, col)];
            a.axpy_wrt(weight, &slice.btb);
            let r = residuals[t].as_ref().expect("nonempty slice");
            rhs += slice.b.transpose() * r * alpha[col];
            for other in 0..j {
                if other == col {
                    continue;
                }
                let cross = alpha[other] * alpha[col] + sig[(other, col)];
                rhs -= &slice.btb * theta.column(other) * cross;
            }
        }
        let new_col = solve_spd(&a, &rhs, "loading update")?;
        theta.column_mut(col).copy_from(&new_col);
    }
    Ok(theta)
}

/// Spectral re-orthonormalization of the loadings: decomposes
/// `Theta H Theta'`, returns the orthonormal replacement, the new
/// (decreasing) variances, and the score-rotation matrix to apply to the
/// moments. Emits a warning string when leading eigenvalues nearly tie.
pub fn reorthonormalize(
    loadings: &DMatrix<f64>,
    score_variances: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>, Option<String>)> {
    let j = loadings.ncols();
    let qr = loadings.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let mut small = DMatrix::zeros(j, j);
    for (idx, &v) in score_variances.iter().enumerate() {
        let col = r.column(idx).into_owned();
        small.syger(v, &col, &col, 1.0);
    }
    small.fill_upper_triangle_with_lower_triangle();
    let eig = small.symmetric_eigen();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut u = DMatrix::zeros(j, j);
    let mut values = Vec::with_capacity(j);
    for (new, &old) in order.iter().enumerate() {
        u.column_mut(new).copy_from(&eig.eigenvectors.column(old));
        values.push(eig.eigenvalues[old].max(VARIANCE_FLOOR));
    }
    let mut new_loadings = q * &u;
    // Canonical column signs keep reruns and archives stable.
    for c in 0..j {
        let col = new_loadings.column(c);
        let lead = col.iter().cloned().fold(0.0f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        if lead < 0.0 {
            new_loadings.column_mut(c).neg_mut();
        }
    }
    // Scores in the new coordinates: alpha_new = Q~' Theta alpha. The sign
    // flips are already folded into the columns, so the product carries them.
    let rotation = new_loadings.transpose() * loadings;
    if rotation.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite loading rotation".into()));
    }
    let warn = values.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-10).then(|| {
        format!("re-orthonormalization found nearly equal variances {values:?}")
    });
    Ok((new_loadings, values, rotation, warn))
}

/// Closed-form innovation variance update `S_j(k_j) / n`.
pub fn update_score_variances(
    moments: &LatentMoments,
    ar_coefficients: &DMatrix<f64>,
) -> Vec<f64> {
    let n = moments.n_times() as f64;
    (0..moments.n_factors())
        .map(|jj| {
            let k: Vec<f64> =
                (0..ar_coefficients.nrows()).map(|i| ar_coefficients[(i, jj)]).collect();
            (moments.s_quadratic(jj, &k).max(0.0) / n).max(VARIANCE_FLOOR)
        })
        .collect()
}

/// Column-wise weighted-least-squares AR update with the shrink-to-stable
/// guard; returns the coefficients and whether any column was shrunk.
pub fn update_ar(moments: &LatentMoments) -> Result<(DMatrix<f64>, bool)> {
    let p = moments.ar_order();
    let j = moments.n_factors();
    let mut k = DMatrix::zeros(p, j);
    let mut shrunk = false;
    for jj in 0..j {
        let d = moments.d_stat(jj);
        let dp = d.view((1, 1), (p, p)).into_owned();
        let rhs = DVector::from_fn(p, |i, _| d[(0, i + 1)]);
        let col = dp
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| dp.lu().solve(&rhs))
            .ok_or_else(|| {
                Error::Conditioning(format!("AR design for factor {jj} is singular"))
            })?;
        let mut coef: Vec<f64> = col.iter().copied().collect();
        if !ar::is_stationary(&coef) {
            coef = ar::stabilize(&coef);
            shrunk = true;
        }
        for i in 0..p {
            k[(i, jj)] = coef[i];
        }
    }
    Ok((k, shrunk))
}

/// Warm start: penalized mean fit, per-time ridge coefficients, SVD
/// loadings, sample-variance scales, AR coefficients at zero.
pub fn initialize(
    panel: &ObservationPanel,
    config: &FitConfig,
    gamma: &DMatrix<f64>,
    pen_t: &DMatrix<f64>,
) -> Result<ModelParams> {
    let n_b = panel.n_b();
    let n_c = panel.n_c();
    let j = config.n_factors;
    let ridge = 1e-6;

    // Pooled spatial fit seeds the mean surface direction.
    let mut pooled = gamma * config.penalties.mean_spatial;
    let mut pooled_rhs = DVector::zeros(n_b);
    for slice in panel.slices() {
        pooled += &slice.btb;
        pooled_rhs += slice.b.transpose() * &slice.z;
    }
    for i in 0..n_b {
        pooled[(i, i)] += ridge;
    }
    let seed = solve_spd(&pooled, &pooled_rhs, "mean initialization")?;
    let norm = seed.norm();
    if !(norm > 0.0) {
        return Err(Error::Data("mean initialization collapsed to zero".into()));
    }
    let mut theta_b = seed / norm;
    let mut theta_c = DVector::zeros(n_c);

    // A few alternations of the two mean blocks (scores absent).
    for _ in 0..5 {
        let mut a_c = pen_t * config.penalties.mean_temporal;
        let mut rhs_c = DVector::zeros(n_c);
        for slice in panel.slices() {
            if slice.n_obs() == 0 {
                continue;
            }
            let u = &slice.b * &theta_b;
            a_c.syger(u.norm_squared(), &slice.c, &slice.c, 1.0);
            rhs_c += &slice.c * u.dot(&slice.z);
        }
        a_c.fill_upper_triangle_with_lower_triangle();
        for i in 0..n_c {
            a_c[(i, i)] += ridge;
        }
        theta_c = solve_spd(&a_c, &rhs_c, "mean-curve initialization")?;

        let mut a_b = gamma * config.penalties.mean_spatial;
        let mut rhs_b = DVector::zeros(n_b);
        for slice in panel.slices() {
            if slice.n_obs() == 0 {
                continue;
            }
            let scale = theta_c.dot(&slice.c);
            a_b.axpy_wrt(scale * scale, &slice.btb);
            rhs_b += slice.b.transpose() * &slice.z * scale;
        }
        for i in 0..n_b {
            a_b[(i, i)] += ridge;
        }
        let m = solve_spd(&a_b, &rhs_b, "mean-surface initialization")?;
        let scale = m.norm();
        if !(scale > 0.0) {
            break;
        }
        theta_b = m / scale;
        theta_c *= scale;
    }

    // Per-time ridge coefficients of the demeaned responses. A single time
    // point usually has fewer observations than basis functions, so the
    // ridge must be strong enough to pin the unobserved directions; it is
    // scaled to the average diagonal of B'B.
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for (t, slice) in panel.slices().iter().enumerate() {
        if slice.n_obs() == 0 {
            continue;
        }
        let mean_scale = theta_c.dot(&slice.c);
        let r = &slice.z - &slice.b * &theta_b * mean_scale;
        let mut a = slice.btb.clone();
        let ridge_t = 1e-6 + 0.05 * slice.btb.trace() / n_b as f64;
        for i in 0..n_b {
            a[(i, i)] += ridge_t;
        }
        let coef = solve_spd(&a, &(slice.b.transpose() * r), "score initialization")?;
        columns.push(coef);
        active.push(t);
    }
    if columns.len() < j {
        return Err(Error::Data(format!(
            "only {} non-empty time points for {j} factors",
            columns.len()
        )));
    }
    let mut coef_mat = DMatrix::zeros(n_b, columns.len());
    for (c, col) in columns.iter().enumerate() {
        coef_mat.column_mut(c).copy_from(col);
    }
    let svd = coef_mat.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let mut loadings = DMatrix::zeros(n_b, j);
    for c in 0..j {
        loadings.column_mut(c).copy_from(&u.column(c));
    }

    // Sample variances of the projected scores set the initial scales.
    let scores = loadings.transpose() * &coef_mat;
    let mut variances: Vec<f64> = (0..j)
        .map(|r| {
            let row = scores.row(r);
            let mean = row.sum() / row.len() as f64;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64
        })
        .collect();
    // Order factors by decreasing scale and force strict separation.
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| variances[b].partial_cmp(&variances[a]).unwrap());
    let mut sorted_loadings = DMatrix::zeros(n_b, j);
    let mut sorted_vars = Vec::with_capacity(j);
    for (new, &old) in order.iter().enumerate() {
        sorted_loadings.column_mut(new).copy_from(&loadings.column(old));
        sorted_vars.push(variances[old].max(1e-8));
    }
    loadings = sorted_loadings;
    variances = sorted_vars;
    for idx in 1..j {
        if variances[idx] >= variances[idx - 1] {
            variances[idx] = variances[idx - 1] * (1.0 - 1e-6);
        }
    }

    // Residual variance about the rank-J reconstruction.
    let mut acc = 0.0;
    let mut total = 0usize;
    for (c, &t) in active.iter().enumerate() {
        let slice = panel.slice(t);
        let s = loadings.transpose() * coef_mat.column(c);
        let mean_scale = theta_c.dot(&slice.c);
        let fitted = &slice.b * (&theta_b * mean_scale + &loadings * s);
        acc += (&slice.z - fitted).norm_squared();
        total += slice.n_obs();
    }
    let sigma2 = (acc / total.max(1) as f64).max(1e-8);

    canonical_sign(&mut theta_b, Some(&mut theta_c));
    for c in 0..j {
        let mut col = loadings.column_mut(c);
        let lead = col.iter().cloned().fold(0.0f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        if lead < 0.0 {
            col.neg_mut();
        }
    }

    Ok(ModelParams {
        theta_b,
        theta_c,
        loadings,
        ar_coefficients: DMatrix::zeros(config.ar_order, j),
        sigma2,
        score_variances: variances,
    })
}

/// Flips `theta_b` so its largest-magnitude entry is positive, carrying the
/// sign into `theta_c` when provided (the product is unchanged).
fn canonical_sign(theta_b: &mut DVector<f64>, theta_c: Option<&mut DVector<f64>>) {
    let lead = theta_b.iter().cloned().fold(0.0f64, |acc, v| {
        if v.abs() > acc.abs() {
            v
        } else {
            acc
        }
    });
    if lead < 0.0 {
        theta_b.neg_mut();
        if let Some(tc) = theta_c {
            tc.neg_mut();
        }
    }
}

/// Runs the penalized EM to convergence.
pub fn fit(
    panel: &ObservationPanel,
    basis: Arc<BivariateBasis>,
    temporal: Arc<TemporalBasis>,
    config: FitConfig,
) -> Result<FittedModel> {
    if config.n_factors == 0 {
        return Err(Error::Argument("need at least one factor".into()));
    }
    if config.ar_order == 0 {
        return Err(Error::Argument("AR order must be at least 1".into()));
    }
    if panel.total_observations() == 0 {
        return Err(Error::Data("panel has no observations".into()));
    }
    if panel.n_b() != basis.n_basis() || panel.n_c() != temporal.n_basis() {
        return Err(Error::Argument("panel was built against different bases".into()));
    }
    let gamma = basis.energy_matrix()?;
    let pen_t = temporal.curvature_matrix()?;
    let penalties = config.penalties;

    let mut params = initialize(panel, &config, &gamma, &pen_t)?;
    let mut warnings: Vec<String> = Vec::new();
    let mut trace: Vec<IterationTrace> = Vec::new();
    let mut detailed: Vec<(&'static str, f64)> = Vec::new();
    let mut invariants: Vec<InvariantRecord> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_q = f64::INFINITY;

    for iter in 0..config.max_iter {
        iterations = iter + 1;
        let e = e_step(&params, panel, config.state_init)?;
        let mut moments = e.moments;
        let record = |label: &'static str,
                          params: &ModelParams,
                          moments: &LatentMoments,
                          detailed: &mut Vec<(&'static str, f64)>| {
            if config.detailed_trace {
                detailed.push((label, q_value(params, moments, &penalties, panel, &gamma, &pen_t)));
            }
        };
        record("e_step", &params, &moments, &mut detailed);

        params.theta_b = update_theta_b(&params, &moments, panel, &penalties, &gamma)?;
        record("theta_b", &params, &moments, &mut detailed);

        params.theta_c =
            update_theta_c(&params.theta_b, &params, &moments, panel, &penalties, &pen_t)?;
        record("theta_c", &params, &moments, &mut detailed);

        let (sigma2, degenerate) =
            update_sigma2(&params.theta_b, &params.theta_c, &params, &moments, panel)?;
        if degenerate && !warnings.iter().any(|w| w.contains("degenerate fit")) {
            warnings.push(format!(
                "degenerate fit: observation variance collapsed to {sigma2:.3e} at iteration {}",
                iter + 1
            ));
        }
        params.sigma2 = sigma2;
        record("sigma2", &params, &moments, &mut detailed);

        let raw_loadings = update_loadings(
            &params.theta_b,
            &params.theta_c,
            params.sigma2,
            &params,
            &moments,
            panel,
            &penalties,
            &gamma,
        )?;
        let (loadings, variances, rotation, warn) =
            reorthonormalize(&raw_loadings, &params.score_variances)?;
        if let Some(w) = warn {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        params.loadings = loadings;
        params.score_variances = variances;
        moments.rotate(&rotation);
        record("Theta", &params, &moments, &mut detailed);

        params.score_variances = update_score_variances(&moments, &params.ar_coefficients);
        enforce_variance_order(&mut params, &mut moments, &mut warnings);
        record("sigma_j", &params, &moments, &mut detailed);

        if !config.freeze_ar && iter >= config.ar_warmup {
            let (k, shrunk) = update_ar(&moments)?;
            if shrunk && !warnings.iter().any(|w| w.contains("shrunk")) {
                warnings.push(format!(
                    "AR coefficients shrunk to the stationary region at iteration {}",
                    iter + 1
                ));
            }
            params.ar_coefficients = k;
        }
        record("K", &params, &moments, &mut detailed);

        let q_now = q_value(&params, &moments, &penalties, panel, &gamma, &pen_t);
        trace.push(IterationTrace { q_value: q_now, observed_neg2_loglik: e.observed_neg2_loglik });
        if config.detailed_trace {
            let gram = params.loadings.transpose() * &params.loadings;
            let j_dim = params.n_factors();
            let mut orth_dev = 0.0f64;
            for r in 0..j_dim {
                for c in 0..j_dim {
                    let target = if r == c { 1.0 } else { 0.0 };
                    orth_dev = orth_dev.max((gram[(r, c)] - target).abs());
                }
            }
            invariants.push(InvariantRecord {
                mean_norm_deviation: (params.theta_b.norm() - 1.0).abs(),
                loadings_orthonormality_deviation: orth_dev,
                variances_strictly_decreasing: params
                    .score_variances
                    .windows(2)
                    .all(|w| w[0] > w[1]),
                sigma2: params.sigma2,
            });
        }
        if !q_now.is_finite() {
            let tail: Vec<f64> = trace.iter().rev().take(5).map(|t| t.q_value).collect();
            return Err(Error::Divergence(format!(
                "non-finite objective at iteration {} (recent q values {tail:?})",
                iter + 1
            )));
        }
        let min_iter = if config.freeze_ar { 1 } else { config.ar_warmup + 1 };
        if iter >= min_iter {
            let rel = (prev_q - q_now).abs() / prev_q.abs().max(1.0);
            if rel < config.tol {
                converged = true;
                break;
            }
        }
        prev_q = q_now;
    }

    // Canonical signs for the sign-ambiguous pieces; the refreshed E-step
    // below re-derives the moments under the flipped loadings.
    canonical_sign(&mut params.theta_b, Some(&mut params.theta_c));
    let j = params.n_factors();
    for c in 0..j {
        let col = params.loadings.column(c);
        let lead = col.iter().cloned().fold(0.0f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        if lead < 0.0 {
            params.loadings.column_mut(c).neg_mut();
        }
    }

    let final_e = e_step(&params, panel, config.state_init)?;
    let moments = final_e.moments;
    params.validate()?;

    let residuals: Vec<DVector<f64>> = panel
        .slices()
        .iter()
        .enumerate()
        .map(|(t, slice)| {
            if slice.n_obs() == 0 {
                DVector::zeros(0)
            } else {
                let mean_scale = params.theta_c.dot(&slice.c);
                &slice.z
                    - &slice.b
                        * (&params.theta_b * mean_scale + &params.loadings * &moments.alpha[t])
            }
        })
        .collect();

    Ok(FittedModel {
        params,
        moments,
        basis,
        temporal,
        trace,
        detailed_trace: detailed,
        invariant_trace: invariants,
        converged,
        iterations,
        warnings,
        final_state_mean: final_e.final_state_mean,
        final_state_cov: final_e.final_state_cov,
        residuals,
        config,
    })
}

/// Restores the strictly-decreasing variance convention by permuting the
/// factors when an innovation-variance update broke the order.
fn enforce_variance_order(
    params: &mut ModelParams,
    moments: &mut LatentMoments,
    warnings: &mut Vec<String>,
) {
    let j = params.n_factors();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| {
        params.score_variances[b].partial_cmp(&params.score_variances[a]).unwrap()
    });
    if order.iter().enumerate().any(|(new, &old)| new != old) {
        let mut loadings = DMatrix::zeros(params.loadings.nrows(), j);
        let mut k = DMatrix::zeros(params.ar_order(), j);
        let mut vars = Vec::with_capacity(j);
        for (new, &old) in order.iter().enumerate() {
            loadings.column_mut(new).copy_from(&params.loadings.column(old));
            k.column_mut(new).copy_from(&params.ar_coefficients.column(old));
            vars.push(params.score_variances[old]);
        }
        params.loadings = loadings;
        params.ar_coefficients = k;
        params.score_variances = vars;
        moments.permute(&order);
        let msg = "factor order re-sorted after variance update".to_string();
        if !warnings.contains(&msg) {
            warnings.push(msg);
        }
    }
    for idx in 1..j {
        if params.score_variances[idx] >= params.score_variances[idx - 1] {
            params.score_variances[idx] = params.score_variances[idx - 1] * (1.0 - 1e-9);
            let msg = "tied innovation variances perturbed for identifiability".to_string();
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
    }
}

/// Fitted surface at time `t` (1-based) evaluated at the given points.
pub fn reconstruct(model: &FittedModel, t: usize, points: &[Point2]) -> Result<DVector<f64>> {
    if t == 0 || t > model.n_times() {
        return Err(Error::Argument(format!("time {t} outside 1..={}", model.n_times())));
    }
    let b = model.basis.eval_design(points)?;
    let c = model.temporal.eval(t as f64);
    let mean_scale = model.params.theta_c.dot(&c);
    Ok(&b
        * (&model.params.theta_b * mean_scale
            + &model.params.loadings * &model.moments.alpha[t - 1]))
}

/// One forecast step: surface mean and pointwise predictive standard
/// deviation.
#[derive(Debug, Clone)]
pub struct ForecastStep {
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
}

/// `h`-step-ahead surfaces: extrapolated mean curve plus the AR conditional
/// mean of the scores; the predictive variance accumulates innovation
/// variance, smoothed-state uncertainty, and observation noise.
pub fn forecast(model: &FittedModel, horizon: usize, points: &[Point2]) -> Result<Vec<ForecastStep>> {
    let b = model.basis.eval_design(points)?;
    let j = model.params.n_factors();
    let spec = StateSpaceSpec::new(
        &model.params.ar_coefficients,
        &model.params.score_variances,
        model.params.sigma2,
        vec![DMatrix::zeros(0, j); 1],
        vec![DVector::zeros(0); 1],
        model.config.state_init,
    )?;
    let transition = spec.transition();

    let n = model.n_times();
    let mut state_mean = model.final_state_mean.clone();
    let mut state_cov = model.final_state_cov.clone();
    let mut out = Vec::with_capacity(horizon);
    for step in 1..=horizon {
        state_mean = transition * state_mean;
        let mut next_cov = transition * state_cov * transition.transpose();
        for jj in 0..j {
            next_cov[(jj, jj)] += model.params.score_variances[jj];
        }
        state_cov = (&next_cov + next_cov.transpose()) * 0.5;

        let c = model.temporal.eval((n + step) as f64);
        let mean_scale = model.params.theta_c.dot(&c);
        let mean = &b
            * (&model.params.theta_b * mean_scale
                + &model.params.loadings * state_mean.rows(0, j));
        let qjj = state_cov.view((0, 0), (j, j));
        let spread = &model.params.loadings * qjj * model.params.loadings.transpose();
        let sd = DVector::from_fn(points.len(), |i, _| {
            let row = b.row(i).transpose();
            ((&spread * &row).dot(&row) + model.params.sigma2).max(0.0).sqrt()
        });
        out.push(ForecastStep { mean, sd });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis2d::orthonormal_basis;
    use crate::mesh::{Triangle, Triangulation};
    use crate::panel::{RawPanel, RawTimeSlice};
    use crate::temporal::{build_temporal_basis, TemporalBasisSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn square_mesh() -> Triangulation {
        Triangulation::new(
            vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.0),
                Point2::new(1.0, 1.0),
                Point2::new(0.0, 1.0),
            ],
            vec![Triangle { v: [0, 1, 2] }, Triangle { v: [0, 2, 3] }],
        )
        .unwrap()
    }

    struct Toy {
        basis: Arc<BivariateBasis>,
        temporal: Arc<TemporalBasis>,
        panel: ObservationPanel,
        params: ModelParams,
        truth_scores: Vec<DVector<f64>>,
        gamma: DMatrix<f64>,
        pen_t: DMatrix<f64>,
    }

    /// Small dense instance generated from known parameters.
    fn toy_instance(
        n: usize,
        j: usize,
        p: usize,
        n_obs: usize,
        sigma2: f64,
        k_value: f64,
        seed: u64,
    ) -> Toy {
        let mesh = square_mesh();
        let basis = Arc::new(orthonormal_basis(&mesh, 2, 0).unwrap());
        let spec = TemporalBasisSpec { trend_order: 1, knots: vec![], fourier_pairs: 0, period: 12.0 };
        let temporal = Arc::new(build_temporal_basis(&spec, n).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_b = basis.n_basis();

        let theta_b = DVector::from_fn(n_b, |i, _| ((i + 1) as f64 * 0.37).sin()).normalize();
        let theta_c = DVector::from_column_slice(&[1.0, 0.5]);
        // Orthonormal loading columns distinct from theta_b.
        let mut raw = DMatrix::from_fn(n_b, j, |r, c| ((r * 7 + c * 3 + 1) as f64 * 0.61).cos());
        for c in 0..j {
            for prev in 0..c {
                let prev_col = raw.column(prev).into_owned();
                let proj = raw.column(c).dot(&prev_col);
                let new_col = raw.column(c) - &prev_col * proj;
                raw.column_mut(c).copy_from(&new_col);
            }
            let norm = raw.column(c).norm();
            raw.column_mut(c).scale_mut(1.0 / norm);
        }
        let score_variances: Vec<f64> = (0..j).map(|c| 1.0 / (c + 1) as f64).collect();
        let ar_coefficients = DMatrix::from_fn(p, j, |i, _| if i == 0 { k_value } else { 0.0 });
        let params = ModelParams {
            theta_b,
            theta_c,
            loadings: raw,
            ar_coefficients,
            sigma2,
            score_variances: score_variances.clone(),
        };

        let mut scores: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut prev = DVector::zeros(j);
        for _ in 0..n {
            let mut s = DVector::zeros(j);
            for jj in 0..j {
                s[jj] = k_value * prev[jj]
                    + rng.sample::<f64, _>(rand_distr::StandardNormal)
                        * score_variances[jj].sqrt();
            }
            scores.push(s.clone());
            prev = s;
        }

        let mut raw_panel = RawPanel { times: Vec::new() };
        for t in 0..n {
            let mut locations = Vec::with_capacity(n_obs);
            let mut values = Vec::with_capacity(n_obs);
            for _ in 0..n_obs {
                let point = Point2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                let b_row = basis.eval_at(point).unwrap();
                let c = temporal.eval((t + 1) as f64);
                let mean = b_row.dot(&params.theta_b) * params.theta_c.dot(&c);
                let pc: f64 = (0..j)
                    .map(|jj| b_row.dot(&params.loadings.column(jj).into_owned()) * scores[t][jj])
                    .sum();
                let noise: f64 =
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma2.sqrt();
                locations.push(point);
                values.push(mean + pc + noise);
            }
            raw_panel.times.push(RawTimeSlice { locations, values });
        }
        let panel = ObservationPanel::build(&raw_panel, &basis, &temporal).unwrap();
        let gamma = basis.energy_matrix().unwrap();
        let pen_t = temporal.curvature_matrix().unwrap();
        Toy { basis, temporal, panel, params, truth_scores: scores, gamma, pen_t }
    }

    #[test]
    fn complete_loglik_hand_value_for_white_noise_scores() {
        // J=1, p=1, k=0, n=3, scores (1, -1, 2), unit variances: the AR part
        // reduces to n log 1 - 0 + sum of squares = 6.
        let mut toy = toy_instance(3, 1, 1, 4, 1.0, 0.0, 11);
        toy.params.sigma2 = 1.0;
        toy.params.score_variances = vec![1.0];
        let scores = vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 2.0),
        ];
        let value = neg2_complete_loglik(&toy.params, &toy.panel, &scores).unwrap();
        // Observation part with sigma2 = 1: sum of squared residuals only
        // (n_t log 1 = 0).
        let mut obs = 0.0;
        for (t, slice) in toy.panel.slices().iter().enumerate() {
            let mean_scale = toy.params.theta_c.dot(&slice.c);
            let fitted = &slice.b
                * (&toy.params.theta_b * mean_scale + &toy.params.loadings * &scores[t]);
            obs += (&slice.z - fitted).norm_squared();
        }
        assert!((value - (obs + 6.0)).abs() < 1e-10, "value {value} vs obs {obs} + 6");
    }

    #[test]
    fn complete_loglik_matches_dense_density() {
        // -2 log p(z | alpha) p(alpha) with the 2 pi constants removed.
        let toy = toy_instance(5, 1, 1, 3, 0.5, 0.6, 13);
        let scores = &toy.truth_scores;
        let value = neg2_complete_loglik(&toy.params, &toy.panel, scores).unwrap();

        let k = toy.params.ar_coefficients[(0, 0)];
        let s2 = toy.params.score_variances[0];
        // p(alpha): alpha_1 ~ N(0, s2 gamma_0) with gamma_0 = 1/(1-k^2)
        // under stationarity, then conditionals.
        let gamma0 = 1.0 / (1.0 - k * k);
        let mut neg2_alpha = (2.0 * std::f64::consts::PI * s2 * gamma0).ln()
            + scores[0][0] * scores[0][0] / (s2 * gamma0);
        for t in 1..5 {
            let mean = k * scores[t - 1][0];
            let d = scores[t][0] - mean;
            neg2_alpha += (2.0 * std::f64::consts::PI * s2).ln() + d * d / s2;
        }
        let mut neg2_obs = 0.0;
        let mut total = 0usize;
        for (t, slice) in toy.panel.slices().iter().enumerate() {
            let mean_scale = toy.params.theta_c.dot(&slice.c);
            let fitted = &slice.b
                * (&toy.params.theta_b * mean_scale + &toy.params.loadings * &scores[t]);
            neg2_obs += (&slice.z - fitted).norm_squared() / toy.params.sigma2
                + slice.n_obs() as f64
                    * (2.0 * std::f64::consts::PI * toy.params.sigma2).ln();
            total += slice.n_obs();
        }
        let dense = neg2_alpha + neg2_obs
            - ((total + 5) as f64) * (2.0 * std::f64::consts::PI).ln();
        assert!((value - dense).abs() < 1e-8, "{value} vs {dense}");
    }

    #[test]
    fn complete_loglik_rejects_nonstationary_ar() {
        let mut toy = toy_instance(3, 1, 1, 2, 1.0, 0.0, 7);
        toy.params.ar_coefficients[(0, 0)] = 1.2;
        let scores = vec![DVector::zeros(1); 3];
        assert!(matches!(
            neg2_complete_loglik(&toy.params, &toy.panel, &scores),
            Err(Error::NonStationary(_))
        ));
    }

    #[test]
    fn q_value_degenerates_to_complete_loglik() {
        // Zero penalties and deterministic moments: q equals the
        // complete-data objective at those scores.
        let toy = toy_instance(4, 2, 1, 5, 0.8, 0.3, 17);
        let moments = LatentMoments::deterministic(&toy.truth_scores, 1);
        let q = q_value(
            &toy.params,
            &moments,
            &Penalties::zero(),
            &toy.panel,
            &toy.gamma,
            &toy.pen_t,
        );
        let direct = neg2_complete_loglik(&toy.params, &toy.panel, &toy.truth_scores).unwrap();
        assert!((q - direct).abs() < 1e-8, "q {q} vs direct {direct}");
    }

    #[test]
    fn q_value_increases_with_pc_penalty() {
        let toy = toy_instance(4, 2, 1, 5, 0.8, 0.3, 19);
        let moments = LatentMoments::deterministic(&toy.truth_scores, 1);
        let q0 = q_value(&toy.params, &moments, &Penalties::zero(), &toy.panel, &toy.gamma, &toy.pen_t);
        let q1 = q_value(
            &toy.params,
            &moments,
            &Penalties { mean_spatial: 0.0, mean_temporal: 0.0, pc: 5.0 },
            &toy.panel,
            &toy.gamma,
            &toy.pen_t,
        );
        let q2 = q_value(
            &toy.params,
            &moments,
            &Penalties { mean_spatial: 0.0, mean_temporal: 0.0, pc: 10.0 },
            &toy.panel,
            &toy.gamma,
            &toy.pen_t,
        );
        assert!(q1 > q0 && q2 > q1, "q0 {q0} q1 {q1} q2 {q2}");
    }

    #[test]
    fn sphere_minimizer_isotropic_case() {
        // A = I: the constrained minimizer of |theta - m|^2 is m / |m|.
        let n = 7;
        let a = DMatrix::identity(n, n);
        let m = DVector::from_fn(n, |i, _| (i as f64 + 1.0) * 0.3 - 1.0);
        let start = DVector::from_fn(n, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let theta = sphere_minimize(&a, &m, &start).unwrap();
        let expect = m.normalize();
        assert!((theta - expect).norm() < 1e-6);
    }

    #[test]
    fn sphere_minimizer_stops_at_stationary_start() {
        let n = 5;
        let a = DMatrix::identity(n, n);
        let m = DVector::from_fn(n, |i, _| (i as f64) - 2.0);
        let start = m.normalize();
        let theta = sphere_minimize(&a, &m, &start).unwrap();
        assert!((theta - start).norm() < 1e-12);
    }

    #[test]
    fn sphere_minimizer_descends_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let n = 6;
            let half = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &half * half.transpose() + DMatrix::identity(n, n) * 0.5;
            let m = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let start = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let theta = sphere_minimize(&a, &m, &start).unwrap();
            let f = |x: &DVector<f64>| ((&a * (x - &m)).dot(&(x - &m)));
            assert!(f(&theta) <= f(&start) + 1e-12);
            let grad = &a * (&theta - &m) * 2.0;
            let projected = &grad - &theta * theta.dot(&grad);
            assert!(projected.norm() < 1e-6, "projected gradient {}", projected.norm());
        }
    }

    /// Central-difference gradient of q with respect to a parameter block.
    fn fd_gradient(
        mut eval: impl FnMut(f64, usize) -> f64,
        dims: usize,
        scale: f64,
    ) -> Vec<f64> {
        let h = 1e-6 * scale.max(1.0);
        (0..dims)
            .map(|i| (eval(h, i) - eval(-h, i)) / (2.0 * h))
            .collect()
    }

    #[test]
    fn theta_c_update_is_stationary_point() {
        let toy = toy_instance(6, 1, 1, 6, 0.4, 0.5, 29);
        let e = e_step(&toy.params, &toy.panel, StateInit::Zero).unwrap();
        let pen = Penalties { mean_spatial: 0.1, mean_temporal: 0.2, pc: 0.3 };
        let theta_c = update_theta_c(
            &toy.params.theta_b,
            &toy.params,
            &e.moments,
            &toy.panel,
            &pen,
            &toy.pen_t,
        )
        .unwrap();
        let mut probe = toy.params.clone();
        probe.theta_c = theta_c.clone();
        let q0 = q_value(&probe, &e.moments, &pen, &toy.panel, &toy.gamma, &toy.pen_t);
        let grad = fd_gradient(
            |h, i| {
                let mut p = probe.clone();
                p.theta_c[i] += h;
                q_value(&p, &e.moments, &pen, &toy.panel, &toy.gamma, &toy.pen_t)
            },
            theta_c.len(),
            theta_c.amax(),
        );
        for (i, g) in grad.iter().enumerate() {
            assert!(
                g.abs() <= 1e-4 * q0.abs().max(1.0),
                "theta_c gradient component {i} = {g} (q {q0})"
            );
        }
    }

    #[test]
    fn theta_c_reduces_to_ols_for_single_time_constant_basis() {
        // One time point, c_t = 1 (constant basis), no penalty: the update is
        // ordinary least squares of the residual on B theta_b.
        let mesh = square_mesh();
        let basis = Arc::new(orthonormal_basis(&mesh, 2, 0).unwrap());
        let temporal =
            Arc::new(build_temporal_basis(&TemporalBasisSpec::constant(), 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut locations = Vec::new();
        let mut values = Vec::new();
        for _ in 0..9 {
            locations.push(Point2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)));
            values.push(rng.gen_range(-1.0..1.0));
        }
        let raw = RawPanel { times: vec![RawTimeSlice { locations, values }] };
        let panel = ObservationPanel::build(&raw, &basis, &temporal).unwrap();
        let n_b = basis.n_basis();
        let theta_b = DVector::from_fn(n_b, |i, _| ((i + 2) as f64).sin()).normalize();
        let params = ModelParams {
            theta_b: theta_b.clone(),
            theta_c: DVector::from_element(1, 0.0),
            loadings: DMatrix::from_fn(n_b, 1, |r, _| if r == 0 { 1.0 } else { 0.0 }),
            ar_coefficients: DMatrix::zeros(1, 1),
            sigma2: 1.0,
            score_variances: vec![1.0],
        };
        let moments =
            LatentMoments::deterministic(&[DVector::zeros(1)], 1);
        let pen_t = temporal.curvature_matrix().unwrap();
        let theta_c =
            update_theta_c(&theta_b, &params, &moments, &panel, &Penalties::zero(), &pen_t)
                .unwrap();
        let slice = panel.slice(0);
        let u = &slice.b * &theta_b;
        let expect = u.dot(&slice.z) / u.norm_squared();
        assert!((theta_c[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sigma2_update_matches_fd_stationary_point_and_flags_degenerate() {
        let toy = toy_instance(5, 1, 1, 5, 0.3, 0.4, 37);
        let e = e_step(&toy.params, &toy.panel, StateInit::Zero).unwrap();
        let (s2, degenerate) =
            update_sigma2(&toy.params.theta_b, &toy.params.theta_c, &toy.params, &e.moments, &toy.panel)
                .unwrap();
        assert!(!degenerate);
        let mut probe = toy.params.clone();
        probe.sigma2 = s2;
        let pen = Penalties::zero();
        let q = |p: &ModelParams| q_value(p, &e.moments, &pen, &toy.panel, &toy.gamma, &toy.pen_t);
        let h = 1e-6 * s2;
        let mut plus = probe.clone();
        plus.sigma2 += h;
        let mut minus = probe.clone();
        minus.sigma2 -= h;
        let grad = (q(&plus) - q(&minus)) / (2.0 * h);
        assert!(grad.abs() < 1e-4 * q(&probe).abs().max(1.0), "sigma2 gradient {grad}");

        // Exact fit with zero smoothed covariance collapses the update.
        let scores = toy.truth_scores.clone();
        let moments = LatentMoments::deterministic(&scores, 1);
        let mut zero_resid = toy.panel.clone();
        let values: Vec<DVector<f64>> = toy
            .panel
            .slices()
            .iter()
            .enumerate()
            .map(|(t, slice)| {
                let mean_scale = toy.params.theta_c.dot(&slice.c);
                &slice.b
                    * (&toy.params.theta_b * mean_scale + &toy.params.loadings * &scores[t])
            })
            .collect();
        zero_resid = zero_resid.with_values(values).unwrap();
        let (s2_zero, degenerate_zero) = update_sigma2(
            &toy.params.theta_b,
            &toy.params.theta_c,
            &toy.params,
            &moments,
            &zero_resid,
        )
        .unwrap();
        assert!(degenerate_zero);
        assert!(s2_zero <= 1e-12);
    }

    #[test]
    fn score_variance_update_formula() {
        // S_j = n gives sigma_j^2 = 1.
        let n = 8;
        let scores: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_element(1, 1.0)).collect();
        let moments = LatentMoments::deterministic(&scores, 1);
        // With k = 1 the quadratic S_j(k) telescopes; easier: k = 0 gives
        // S_j = sum of squares = n.
        let k = DMatrix::zeros(1, 1);
        let vars = update_score_variances(&moments, &k);
        assert!((vars[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loading_update_is_stationary_point_before_rotation() {
        let toy = toy_instance(6, 2, 1, 6, 0.4, 0.5, 41);
        let e = e_step(&toy.params, &toy.panel, StateInit::Zero).unwrap();
        let pen = Penalties { mean_spatial: 0.05, mean_temporal: 0.05, pc: 0.4 };
        let new_loadings = update_loadings(
            &toy.params.theta_b,
            &toy.params.theta_c,
            toy.params.sigma2,
            &toy.params,
            &e.moments,
            &toy.panel,
            &pen,
            &toy.gamma,
        )
        .unwrap();
        // The last updated column (j = J-1) is the exact minimizer of its
        // block objective given every other current column.
        let col = toy.params.n_factors() - 1;
        let mut probe = toy.params.clone();
        probe.loadings = new_loadings.clone();
        // q_value requires orthonormal-ish loadings only for validate();
        // evaluate the objective directly.
        let q0 = q_value(&probe, &e.moments, &pen, &toy.panel, &toy.gamma, &toy.pen_t);
        let scale = new_loadings.column(col).amax();
        let grad = fd_gradient(
            |h, i| {
                let mut p = probe.clone();
                p.loadings[(i, col)] += h;
                q_value(&p, &e.moments, &pen, &toy.panel, &toy.gamma, &toy.pen_t)
            },
            new_loadings.nrows(),
            scale,
        );
        for (i, g) in grad.iter().enumerate() {
            assert!(
                g.abs() <= 1e-4 * q0.abs().max(1.0),
                "loading gradient component {i} = {g}"
            );
        }
    }

    #[test]
    fn reorthonormalization_preserves_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let n_b = 9;
        let j = 2;
        let loadings = DMatrix::from_fn(n_b, j, |_, _| rng.gen_range(-1.0..1.0));
        let vars = vec![2.0, 0.5];
        let (q, d, rotation, _) = reorthonormalize(&loadings, &vars).unwrap();
        // Theta H Theta' preserved exactly.
        let mut h_old = DMatrix::zeros(j, j);
        h_old[(0, 0)] = vars[0];
        h_old[(1, 1)] = vars[1];
        let before = &loadings * h_old * loadings.transpose();
        let mut h_new = DMatrix::zeros(j, j);
        h_new[(0, 0)] = d[0];
        h_new[(1, 1)] = d[1];
        let after = &q * h_new * q.transpose();
        assert!((before - after).amax() < 1e-12);
        assert!(d[0] >= d[1]);
        // Orthonormal replacement.
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(j, j)).amax() < 1e-12);
        // Theta alpha preserved through the rotation.
        for _ in 0..5 {
            let alpha = DVector::from_fn(j, |_, _| rng.gen_range(-1.0..1.0));
            let before = &loadings * &alpha;
            let after = &q * (&rotation * &alpha);
            assert!((before - after).amax() < 1e-10);
        }
    }

    #[test]
    fn reorthonormalization_fixed_point_up_to_sign() {
        let mesh = square_mesh();
        let basis = orthonormal_basis(&mesh, 2, 0).unwrap();
        let n_b = basis.n_basis();
        let mut loadings = DMatrix::zeros(n_b, 2);
        loadings[(0, 0)] = 1.0;
        loadings[(3, 1)] = 1.0;
        let vars = vec![3.0, 1.0];
        let (q, d, _, _) = reorthonormalize(&loadings, &vars).unwrap();
        for c in 0..2 {
            let dot = q.column(c).dot(&loadings.column(c)).abs();
            assert!((dot - 1.0).abs() < 1e-12, "column {c} changed direction");
        }
        assert!((d[0] - 3.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ar_update_recovers_coefficient_from_long_noiseless_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n = 10_000;
        let series = crate::ar::simulate(&[0.7], 1.0, n, 500, &mut rng).unwrap();
        let scores: Vec<DVector<f64>> =
            series.iter().map(|&v| DVector::from_element(1, v)).collect();
        let moments = LatentMoments::deterministic(&scores, 1);
        let (k, shrunk) = update_ar(&moments).unwrap();
        assert!(!shrunk);
        assert!((k[(0, 0)] - 0.7).abs() < 0.02, "recovered {}", k[(0, 0)]);
    }

    #[test]
    fn ar_update_rejects_rank_deficient_scores() {
        // All scores zero except the final time point: no lagged products
        // survive and the p x p design is singular.
        let mut scores = vec![DVector::zeros(1); 10];
        scores[9][0] = 1.0;
        let moments = LatentMoments::deterministic(&scores, 2);
        assert!(matches!(update_ar(&moments), Err(Error::Conditioning(_))));
    }

    #[test]
    fn ar_update_is_wls_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let series = crate::ar::simulate(&[0.5, 0.2], 1.0, 300, 500, &mut rng).unwrap();
        let scores: Vec<DVector<f64>> =
            series.iter().map(|&v| DVector::from_element(1, v)).collect();
        let moments = LatentMoments::deterministic(&scores, 2);
        let (k, _) = update_ar(&moments).unwrap();
        let best = moments.s_quadratic(0, &[k[(0, 0)], k[(1, 0)]]);
        for _ in 0..100 {
            let alt = [rng.gen_range(-0.9..0.9), rng.gen_range(-0.5..0.5)];
            assert!(best <= moments.s_quadratic(0, &alt) + 1e-9);
        }
    }

    #[test]
    fn e_step_with_zero_ar_matches_per_time_ridge_posterior() {
        let toy = toy_instance(5, 2, 1, 6, 0.5, 0.0, 59);
        let e = e_step(&toy.params, &toy.panel, StateInit::Zero).unwrap();
        let j = 2;
        for (t, slice) in toy.panel.slices().iter().enumerate() {
            let w = &slice.b * &toy.params.loadings;
            let mut prec = w.transpose() * &w / toy.params.sigma2;
            for jj in 0..j {
                prec[(jj, jj)] += 1.0 / toy.params.score_variances[jj];
            }
            let mean_scale = toy.params.theta_c.dot(&slice.c);
            let r = &slice.z - &slice.b * &toy.params.theta_b * mean_scale;
            let rhs = w.transpose() * r / toy.params.sigma2;
            let direct = prec.lu().solve(&rhs).unwrap();
            let gap = (&e.moments.alpha[t] - &direct).amax();
            assert!(gap < 1e-9, "time {t}: gap {gap}");
        }
    }

    #[test]
    fn doubling_noise_shrinks_scores() {
        let toy = toy_instance(6, 1, 1, 6, 0.4, 0.5, 61);
        let e1 = e_step(&toy.params, &toy.panel, StateInit::Zero).unwrap();
        let mut noisier = toy.params.clone();
        noisier.sigma2 *= 2.0;
        let e2 = e_step(&noisier, &toy.panel, StateInit::Zero).unwrap();
        let norm1: f64 = e1.moments.alpha.iter().map(|a| a.norm_squared()).sum();
        let norm2: f64 = e2.moments.alpha.iter().map(|a| a.norm_squared()).sum();
        assert!(norm2 < norm1, "{norm2} !< {norm1}");
    }

    #[test]
    fn fit_with_frozen_ar_keeps_k_zero() {
        let toy = toy_instance(12, 1, 1, 8, 0.2, 0.0, 67);
        let mut config = FitConfig::new(1, 1).with_penalties(Penalties::uniform(1e-4));
        config.freeze_ar = true;
        config.max_iter = 30;
        let model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        assert_eq!(model.params.ar_coefficients[(0, 0)], 0.0);
    }

    #[test]
    fn fit_invariants_hold_each_recorded_iteration() {
        let toy = toy_instance(16, 2, 1, 8, 0.2, 0.5, 71);
        let mut config = FitConfig::new(2, 1).with_penalties(Penalties::uniform(1e-4));
        config.max_iter = 25;
        config.detailed_trace = true;
        let model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        // Parameter invariants at the end (validate() ran inside fit).
        assert!((model.params.theta_b.norm() - 1.0).abs() < 1e-10);
        let gram = model.params.loadings.transpose() * &model.params.loadings;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-8);
        assert!(model.params.score_variances[0] > model.params.score_variances[1]);
        assert!(model.params.sigma2 > 0.0);
        // Sign canonicalization: largest-magnitude entry of theta_b positive.
        let lead = model.params.theta_b.iter().cloned().fold(0.0f64, |acc, v| {
            if v.abs() > acc.abs() {
                v
            } else {
                acc
            }
        });
        assert!(lead > 0.0);
        assert!(!model.trace.is_empty());
        assert!(!model.detailed_trace.is_empty());
    }

    #[test]
    fn reconstruct_matches_hand_assembly() {
        let toy = toy_instance(10, 2, 1, 7, 0.3, 0.4, 73);
        let config = FitConfig::new(2, 1).with_penalties(Penalties::uniform(1e-4));
        let model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let points: Vec<Point2> = (0..10)
            .map(|_| Point2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let t = 4;
        let got = reconstruct(&model, t, &points).unwrap();
        let b = model.basis.eval_design(&points).unwrap();
        let c = model.temporal.eval(t as f64);
        let expect = &b
            * (&model.params.theta_b * model.params.theta_c.dot(&c)
                + &model.params.loadings * &model.moments.alpha[t - 1]);
        assert!((got - expect).amax() < 1e-12);
    }

    #[test]
    fn reconstruct_with_zero_scores_is_the_mean_surface() {
        let toy = toy_instance(8, 1, 1, 6, 0.3, 0.4, 83);
        let config = FitConfig::new(1, 1).with_penalties(Penalties::uniform(1e-4));
        let mut model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        for a in &mut model.moments.alpha {
            a.fill(0.0);
        }
        let points = vec![Point2::new(0.3, 0.4), Point2::new(0.7, 0.2)];
        let got = reconstruct(&model, 3, &points).unwrap();
        let b = model.basis.eval_design(&points).unwrap();
        let c = model.temporal.eval(3.0);
        let mean = &b * &model.params.theta_b * model.params.theta_c.dot(&c);
        assert!((got - mean).amax() < 1e-12);
    }

    #[test]
    fn forecast_with_zero_ar_is_mean_plus_prior_spread() {
        let toy = toy_instance(8, 1, 1, 6, 0.3, 0.0, 89);
        let mut config = FitConfig::new(1, 1).with_penalties(Penalties::uniform(1e-4));
        config.freeze_ar = true;
        let model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        let points = vec![Point2::new(0.25, 0.5), Point2::new(0.8, 0.3)];
        let steps = forecast(&model, 2, &points).unwrap();
        let b = model.basis.eval_design(&points).unwrap();
        let n = model.n_times();
        for (h, step) in steps.iter().enumerate() {
            let c = model.temporal.eval((n + h + 1) as f64);
            let mean = &b * &model.params.theta_b * model.params.theta_c.dot(&c);
            assert!((&step.mean - mean).amax() < 1e-10, "step {h} mean is not the mean surface");
            // Predictive variance: Theta diag(sigma_j^2) Theta' through the
            // basis plus observation noise.
            for (i, point_row) in b.row_iter().enumerate() {
                let u = point_row.transpose();
                let spread = (&model.params.loadings.transpose() * &u)
                    .map(|v| v * v)
                    .dot(&DVector::from_column_slice(&model.params.score_variances));
                let expect = (spread + model.params.sigma2).sqrt();
                assert!((step.sd[i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_step_ar1_forecast_closed_form() {
        // AR(1), k = 0.5, final smoothed score 2 with zero uncertainty:
        // 2-step mean 0.5, variance sigma1^2 (1 + k^2).
        let toy = toy_instance(8, 1, 1, 6, 0.3, 0.5, 97);
        let config = FitConfig::new(1, 1).with_penalties(Penalties::uniform(1e-4));
        let mut model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        model.params.ar_coefficients[(0, 0)] = 0.5;
        model.params.theta_c.fill(0.0); // isolate the score term
        model.final_state_mean = DVector::from_column_slice(&[2.0, 0.0]);
        model.final_state_cov = DMatrix::zeros(2, 2);
        let s1 = model.params.score_variances[0];

        let points = vec![Point2::new(0.4, 0.6)];
        let steps = forecast(&model, 2, &points).unwrap();
        let b = model.basis.eval_design(&points).unwrap();
        let load = (b.row(0).transpose()).dot(&model.params.loadings.column(0).into_owned());
        // Step 2 score mean: k^2 * 2 = 0.5.
        assert!((steps[1].mean[0] - load * 0.5).abs() < 1e-10);
        let var2 = load * load * s1 * (1.0 + 0.25) + model.params.sigma2;
        assert!((steps[1].sd[0] - var2.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn one_step_forecast_equals_one_prediction_step() {
        let toy = toy_instance(9, 2, 2, 6, 0.4, 0.4, 101);
        let config = FitConfig::new(2, 2).with_penalties(Penalties::uniform(1e-4));
        let model = fit(&toy.panel, toy.basis.clone(), toy.temporal.clone(), config).unwrap();
        let points = vec![Point2::new(0.3, 0.3), Point2::new(0.6, 0.7)];
        let steps = forecast(&model, 1, &points).unwrap();

        // Direct single prediction applied to the final smoothed state.
        let spec = StateSpaceSpec::new(
            &model.params.ar_coefficients,
            &model.params.score_variances,
            model.params.sigma2,
            vec![DMatrix::zeros(0, 2)],
            vec![DVector::zeros(0)],
            StateInit::Zero,
        )
        .unwrap();
        let t_mat = spec.transition();
        let state = t_mat * &model.final_state_mean;
        let mut cov = t_mat * &model.final_state_cov * t_mat.transpose();
        for jj in 0..2 {
            cov[(jj, jj)] += model.params.score_variances[jj];
        }
        let b = model.basis.eval_design(&points).unwrap();
        let c = model.temporal.eval((model.n_times() + 1) as f64);
        let mean = &b
            * (&model.params.theta_b * model.params.theta_c.dot(&c)
                + &model.params.loadings * state.rows(0, 2));
        assert!((&steps[0].mean - mean).amax() < 1e-10);
    }
}

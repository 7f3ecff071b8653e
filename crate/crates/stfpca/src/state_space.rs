//! Companion-form linear-Gaussian state-space machinery: Kalman filter,
//! smoother, and the smoothed lag moments consumed by the EM E-step.
//!
//! The state stacks `p + 1` consecutive score vectors,
//! `beta_t = (alpha_t', alpha_{t-1}', ..., alpha_{t-p}')'`, so within-state
//! covariances provide every cross-lag moment up to lag `p`. Observation
//! noise is spherical, which lets the correction step process observations
//! one scalar at a time (Joseph-form updates); results match the block
//! formulas exactly while avoiding `n_t x n_t` solves.

use nalgebra::{DMatrix, DVector};

use crate::ar;
use crate::error::{Error, Result};

/// Pre-sample state convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateInit {
    /// `b_{0|0} = 0`, `Q_{0|0} = 0`: scores before time 1 are exactly zero.
    #[default]
    Zero,
    /// Draw the pre-sample state from the stationary AR distribution.
    Stationary,
}

/// Time-varying linear-Gaussian state-space model for the score process.
#[derive(Debug, Clone)]
pub struct StateSpaceSpec {
    n_factors: usize,
    ar_order: usize,
    transition: DMatrix<f64>,
    /// AR innovation variances, one per factor.
    innovation_var: Vec<f64>,
    sigma2: f64,
    /// Per-time observation matrix for the current-score block: `B_t Theta`.
    obs_map: Vec<DMatrix<f64>>,
    /// Per-time observation offset: `B_t theta_b theta_c' c_t`.
    offset: Vec<DVector<f64>>,
    init: StateInit,
}

impl StateSpaceSpec {
    pub fn new(
        ar_coefficients: &DMatrix<f64>,
        innovation_var: &[f64],
        sigma2: f64,
        obs_map: Vec<DMatrix<f64>>,
        offset: Vec<DVector<f64>>,
        init: StateInit,
    ) -> Result<Self> {
        let p = ar_coefficients.nrows();
        let j = ar_coefficients.ncols();
        if p == 0 || j == 0 {
            return Err(Error::Argument("need p >= 1 and J >= 1".into()));
        }
        if innovation_var.len() != j {
            return Err(Error::Argument("innovation variance count must equal J".into()));
        }
        if innovation_var.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Argument("innovation variances must be finite and >= 0".into()));
        }
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::Argument("observation variance must be finite and >= 0".into()));
        }
        if obs_map.len() != offset.len() {
            return Err(Error::Argument("obs_map and offset lengths differ".into()));
        }
        for (t, (m, o)) in obs_map.iter().zip(&offset).enumerate() {
            if m.ncols() != j || m.nrows() != o.len() {
                return Err(Error::Argument(format!("observation shapes at time {} differ", t + 1)));
            }
        }

        let m = (p + 1) * j;
        let mut transition = DMatrix::zeros(m, m);
        for lag in 0..p {
            for jj in 0..j {
                transition[(jj, lag * j + jj)] = ar_coefficients[(lag, jj)];
            }
        }
        for block in 0..p {
            for jj in 0..j {
                transition[((block + 1) * j + jj, block * j + jj)] = 1.0;
            }
        }
        Ok(StateSpaceSpec {
            n_factors: j,
            ar_order: p,
            transition,
            innovation_var: innovation_var.to_vec(),
            sigma2,
            obs_map,
            offset,
            init,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn ar_order(&self) -> usize {
        self.ar_order
    }

    pub fn n_times(&self) -> usize {
        self.obs_map.len()
    }

    /// State dimension `(p + 1) J`.
    pub fn state_dim(&self) -> usize {
        (self.ar_order + 1) * self.n_factors
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn obs_map(&self) -> &[DMatrix<f64>] {
        &self.obs_map
    }

    pub fn offset(&self) -> &[DVector<f64>] {
        &self.offset
    }

    /// `T Q T' + H~` with the rank-J innovation block added in place.
    fn predict_cov(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.transition * q * self.transition.transpose();
        for jj in 0..self.n_factors {
            out[(jj, jj)] += self.innovation_var[jj];
        }
        symmetrize(&mut out);
        out
    }

    fn initial_cov(&self) -> Result<DMatrix<f64>> {
        let m = self.state_dim();
        match self.init {
            StateInit::Zero => Ok(DMatrix::zeros(m, m)),
            StateInit::Stationary => {
                let p = self.ar_order;
                let j = self.n_factors;
                let mut q0 = DMatrix::zeros(m, m);
                for jj in 0..j {
                    let k: Vec<f64> =
                        (0..p).map(|lag| self.transition[(jj, lag * j + jj)]).collect();
                    let gamma = ar::stationary_autocovariances(&k, p + 1)?;
                    for a in 0..=p {
                        for b in 0..=p {
                            q0[(a * j + jj, b * j + jj)] =
                                self.innovation_var[jj] * gamma[a.abs_diff(b)];
                        }
                    }
                }
                Ok(q0)
            }
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Filter pass output; one entry per time point.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub predicted_mean: Vec<DVector<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    pub filtered_mean: Vec<DVector<f64>>,
    pub filtered_cov: Vec<DMatrix<f64>>,
    /// One-step innovation `z_t - o_t - Z_t b_{t|t-1}`.
    pub innovations: Vec<DVector<f64>>,
    /// Dense innovation covariances, only materialized on request.
    pub innovation_cov: Option<Vec<DMatrix<f64>>>,
    /// Observed-data Gaussian -2 log-likelihood from the innovation
    /// decomposition (includes the 2 pi constants).
    pub neg2_loglik: f64,
}

/// Runs the Kalman filter over `z`. Time points with zero observations take
/// the pure prediction step. `with_innovation_cov` additionally stores the
/// dense per-time innovation covariance matrices (diagnostics only).
pub fn kalman_filter(
    spec: &StateSpaceSpec,
    z: &[DVector<f64>],
    with_innovation_cov: bool,
) -> Result<FilterOutput> {
    let n = spec.n_times();
    if z.len() != n {
        return Err(Error::Argument("observation count differs from spec".into()));
    }
    for (t, zt) in z.iter().enumerate() {
        if zt.len() != spec.obs_map[t].nrows() {
            return Err(Error::Argument(format!("z length mismatch at time {}", t + 1)));
        }
        if zt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite observation at time {}", t + 1)));
        }
    }

    let m = spec.state_dim();
    let j = spec.n_factors;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut out = FilterOutput {
        predicted_mean: Vec::with_capacity(n),
        predicted_cov: Vec::with_capacity(n),
        filtered_mean: Vec::with_capacity(n),
        filtered_cov: Vec::with_capacity(n),
        innovations: Vec::with_capacity(n),
        innovation_cov: with_innovation_cov.then(Vec::new),
        neg2_loglik: 0.0,
    };

    let mut mean = DVector::zeros(m);
    let mut cov = spec.initial_cov()?;
    for t in 0..n {
        let pred_mean = &spec.transition * &mean;
        let pred_cov = spec.predict_cov(&cov);

        let w = &spec.obs_map[t];
        let n_t = w.nrows();
        let innovation =
            z[t].clone() - &spec.offset[t] - w * pred_mean.rows(0, j);
        if let Some(store) = out.innovation_cov.as_mut() {
            let qjj = pred_cov.view((0, 0), (j, j));
            let mut s = w * qjj * w.transpose();
            for i in 0..n_t {
                s[(i, i)] += spec.sigma2;
            }
            store.push(s);
        }

        mean = pred_mean.clone();
        cov = pred_cov.clone();
        for i in 0..n_t {
            let row = w.row(i);
            // u = Q z' where z is the sparse observation row (J leading
            // entries); only the first J columns of Q contribute.
            let u = cov.columns(0, j) * row.transpose();
            let quad = row.dot(&u.rows(0, j).transpose());
            // The quadratic form is PSD in exact arithmetic; tolerate
            // rounding at the zero boundary but reject real corruption.
            let scale = cov.diagonal().amax().max(1.0);
            if quad < -1e-8 * scale {
                return Err(Error::Numeric(format!(
                    "state covariance lost positive semidefiniteness at time {} ({quad})",
                    t + 1
                )));
            }
            let s = quad.max(0.0) + spec.sigma2;
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Conditioning(format!(
                    "innovation variance {s} at time {} is not invertible",
                    t + 1
                )));
            }
            let v = z[t][i] - spec.offset[t][i] - row.dot(&mean.rows(0, j).transpose());
            out.neg2_loglik += ln_2pi + s.ln() + v * v / s;
            let g = &u / s;
            mean.axpy(v, &g, 1.0);
            // Q <- Q - g u' - u g' + s g g'   (Joseph form, expanded)
            cov.ger(-1.0, &g, &u, 1.0);
            cov.ger(-1.0, &u, &g, 1.0);
            cov.ger(s, &g, &g, 1.0);
        }
        symmetrize(&mut cov);

        out.predicted_mean.push(pred_mean);
        out.predicted_cov.push(pred_cov);
        out.filtered_mean.push(mean.clone());
        out.filtered_cov.push(cov.clone());
        out.innovations.push(innovation);
    }
    Ok(out)
}

/// Smoothed means and covariances, one per time point.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

/// Backward smoothing pass. Singular one-step covariances (possible because
/// the innovation block is rank-deficient and the zero initialization is
/// exact) are inverted by Moore-Penrose pseudo-inverse with a relative
/// singular-value cutoff of 1e-12.
pub fn kalman_smoother(spec: &StateSpaceSpec, filter: &FilterOutput) -> Result<SmootherOutput> {
    let n = spec.n_times();
    if filter.filtered_mean.len() != n {
        return Err(Error::Argument("filter output length differs from spec".into()));
    }
    let mut mean = vec![DVector::zeros(0); n];
    let mut cov = vec![DMatrix::zeros(0, 0); n];
    mean[n - 1] = filter.filtered_mean[n - 1].clone();
    cov[n - 1] = filter.filtered_cov[n - 1].clone();
    for t in (0..n - 1).rev() {
        let pinv = pseudo_inverse(&filter.predicted_cov[t + 1])?;
        let l = &filter.filtered_cov[t] * spec.transition.transpose() * pinv;
        mean[t] = &filter.filtered_mean[t]
            + &l * (&mean[t + 1] - &filter.predicted_mean[t + 1]);
        let mut v = &filter.filtered_cov[t]
            + &l * (&cov[t + 1] - &filter.predicted_cov[t + 1]) * l.transpose();
        symmetrize(&mut v);
        cov[t] = v;
    }
    Ok(SmootherOutput { mean, cov })
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    svd.pseudo_inverse(1e-12 * m.amax().max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Conditioning(format!("pseudo-inverse failed: {e}")))
}

/// Smoothed moments of the score process: per-time means and covariances
/// plus every cross-lag moment matrix needed by the AR updates.
#[derive(Debug, Clone)]
pub struct LatentMoments {
    /// Smoothed score means, one J-vector per time.
    pub alpha: Vec<DVector<f64>>,
    /// Smoothed score covariances, one J x J matrix per time.
    pub sigma: Vec<DMatrix<f64>>,
    /// `lag[a][b] = sum_s E[alpha_{a+1+s} alpha_{b+1+s}' | z]` for
    /// 0-based `a, b <= p`, summed over the full overlap range.
    lag: Vec<Vec<DMatrix<f64>>>,
    n_factors: usize,
    ar_order: usize,
}

impl LatentMoments {
    /// Reassembles moments from stored pieces (archive loading). `lag` is
    /// indexed `lag[a][b]` for `a, b <= p`.
    pub fn from_parts(
        alpha: Vec<DVector<f64>>,
        sigma: Vec<DMatrix<f64>>,
        lag: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let j = alpha.first().map(|a| a.len()).unwrap_or(0);
        if j == 0 || alpha.len() != sigma.len() || lag.is_empty() {
            return Err(Error::Argument("inconsistent moment pieces".into()));
        }
        let p1 = lag.len();
        for row in &lag {
            if row.len() != p1 || row.iter().any(|g| g.nrows() != j || g.ncols() != j) {
                return Err(Error::Argument("lag moment shapes are inconsistent".into()));
            }
        }
        Ok(LatentMoments { alpha, sigma, lag, n_factors: j, ar_order: p1 - 1 })
    }

    /// Raw lag moment matrices (`lag[a][b]`), for serialization.
    pub fn lag_moments(&self) -> &[Vec<DMatrix<f64>>] {
        &self.lag
    }

    /// Moments of an exactly observed score path: zero covariances and plain
    /// product sums for the lag statistics.
    pub fn deterministic(scores: &[DVector<f64>], ar_order: usize) -> Self {
        let n = scores.len();
        let j = scores.first().map_or(0, |s| s.len());
        let p = ar_order;
        let mut lag = vec![vec![DMatrix::<f64>::zeros(j, j); p + 1]; p + 1];
        for a in 1..=p + 1 {
            for b in 1..=p + 1 {
                let mut g = DMatrix::zeros(j, j);
                if a + b <= n + 1 {
                    for s in 0..=(n + 1 - a - b) {
                        g.ger(1.0, &scores[a + s - 1], &scores[b + s - 1], 1.0);
                    }
                }
                lag[a - 1][b - 1] = g;
            }
        }
        LatentMoments {
            alpha: scores.to_vec(),
            sigma: vec![DMatrix::zeros(j, j); n],
            lag,
            n_factors: j,
            ar_order: p,
        }
    }

    pub fn n_times(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn ar_order(&self) -> usize {
        self.ar_order
    }

    /// The (p+1) x (p+1) matrix of smoothed lag statistics for factor `j`:
    /// entry (i, k) is `sum_s E[alpha_{j,i+1+s} alpha_{j,k+1+s} | z]`.
    pub fn d_stat(&self, j: usize) -> DMatrix<f64> {
        let p1 = self.ar_order + 1;
        DMatrix::from_fn(p1, p1, |a, b| self.lag[a][b][(j, j)])
    }

    /// Smoothed AR residual sum of squares
    /// `S_j(k) = D_11 - 2 sum_l k_l D_{1,l+1} + sum_{l,m} k_l k_m D_{l+1,m+1}`.
    pub fn s_quadratic(&self, j: usize, k: &[f64]) -> f64 {
        let d = self.d_stat(j);
        let mut s = d[(0, 0)];
        for (l, &kl) in k.iter().enumerate() {
            s -= 2.0 * kl * d[(0, l + 1)];
            for (m, &km) in k.iter().enumerate() {
                s += kl * km * d[(l + 1, m + 1)];
            }
        }
        s
    }

    /// Applies an orthogonal change of score coordinates `alpha -> R alpha`
    /// to every stored moment.
    pub fn rotate(&mut self, r: &DMatrix<f64>) {
        for a in &mut self.alpha {
            *a = r * &*a;
        }
        for s in &mut self.sigma {
            *s = r * &*s * r.transpose();
        }
        for row in &mut self.lag {
            for g in row {
                *g = r * &*g * r.transpose();
            }
        }
    }

    /// Applies a permutation of the factors, given as the new-to-old index
    /// map (`order[new] = old`).
    pub fn permute(&mut self, order: &[usize]) {
        let j = self.n_factors;
        let mut r = DMatrix::zeros(j, j);
        for (new, &old) in order.iter().enumerate() {
            r[(new, old)] = 1.0;
        }
        self.rotate(&r);
    }
}

/// Assembles smoothed score moments from the smoother output.
pub fn extract_moments(spec: &StateSpaceSpec, smoother: &SmootherOutput) -> LatentMoments {
    let n = spec.n_times();
    let j = spec.n_factors;
    let p = spec.ar_order;

    let alpha: Vec<DVector<f64>> =
        smoother.mean.iter().map(|m| m.rows(0, j).into_owned()).collect();
    let sigma: Vec<DMatrix<f64>> =
        smoother.cov.iter().map(|c| c.view((0, 0), (j, j)).into_owned()).collect();

    let mut lag = vec![vec![DMatrix::<f64>::zeros(j, j); p + 1]; p + 1];
    for a in 1..=p + 1 {
        for b in a..=p + 1 {
            let mut g = DMatrix::zeros(j, j);
            if a + b <= n + 1 {
                for s in 0..=(n + 1 - a - b) {
                    let ta = a + s; // 1-based times
                    let tb = b + s;
                    g.ger(1.0, &alpha[ta - 1], &alpha[tb - 1], 1.0);
                    // Both scores live inside the state at time tb:
                    // alpha_{ta} is block (tb - ta), alpha_{tb} is block 0.
                    let block = (tb - ta) * j;
                    g += smoother.cov[tb - 1].view((block, 0), (j, j));
                }
            }
            lag[a - 1][b - 1] = g.clone();
            lag[b - 1][a - 1] = g.transpose();
        }
    }
    LatentMoments { alpha, sigma, lag, n_factors: j, ar_order: p }
}

//! Shared test oracles.
//!
//! The dense joint-Gaussian oracle conditions the stacked score vector on
//! all observations at once, with no Kalman recursion, so it independently
//! checks the filter/smoother path.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Problem instance in raw state-space terms.
#[derive(Debug, Clone)]
pub struct DenseInstance {
    /// AR coefficients, `p x J` (column j drives factor j).
    pub k: DMatrix<f64>,
    /// AR innovation variances per factor.
    pub sigma_j2: Vec<f64>,
    /// Observation noise variance.
    pub sigma2: f64,
    /// Per-time observation maps `W_t` (`n_t x J`).
    pub obs_map: Vec<DMatrix<f64>>,
    /// Per-time observation offsets.
    pub offset: Vec<DVector<f64>>,
    /// Observations.
    pub z: Vec<DVector<f64>>,
}

/// Full conditional of the stacked scores given all observations.
#[derive(Debug, Clone)]
pub struct DenseConditional {
    /// Posterior mean of `(alpha_1', ..., alpha_n')'`.
    pub mean: DVector<f64>,
    /// Posterior covariance, `nJ x nJ`.
    pub cov: DMatrix<f64>,
    /// `-2 log` marginal Gaussian density of the stacked observations.
    pub neg2_loglik: f64,
    pub n_factors: usize,
    pub n_times: usize,
}

impl DenseInstance {
    pub fn n_times(&self) -> usize {
        self.obs_map.len()
    }

    pub fn n_factors(&self) -> usize {
        self.k.ncols()
    }

    /// Restriction to the first `t` time points.
    pub fn truncated(&self, t: usize) -> DenseInstance {
        DenseInstance {
            k: self.k.clone(),
            sigma_j2: self.sigma_j2.clone(),
            sigma2: self.sigma2,
            obs_map: self.obs_map[..t].to_vec(),
            offset: self.offset[..t].to_vec(),
            z: self.z[..t].to_vec(),
        }
    }

    /// Prior covariance of the stacked scores under the zero pre-sample
    /// convention: `alpha = L eta` with moving-average blocks
    /// `Psi_0 = I`, `Psi_m = sum_i K_i Psi_{m-i}`.
    pub fn prior_cov(&self) -> DMatrix<f64> {
        let n = self.n_times();
        let j = self.n_factors();
        let p = self.k.nrows();
        // Diagonal K_i, so Psi_m stays diagonal; track the diagonals.
        let mut psi: Vec<DVector<f64>> = vec![DVector::from_element(j, 1.0)];
        for m in 1..n {
            let mut next = DVector::zeros(j);
            for i in 1..=p.min(m) {
                for jj in 0..j {
                    next[jj] += self.k[(i - 1, jj)] * psi[m - i][jj];
                }
            }
            psi.push(next);
        }
        let mut l = DMatrix::zeros(n * j, n * j);
        for t in 0..n {
            for s in 0..=t {
                for jj in 0..j {
                    l[(t * j + jj, s * j + jj)] = psi[t - s][jj];
                }
            }
        }
        let mut h = DMatrix::zeros(n * j, n * j);
        for t in 0..n {
            for jj in 0..j {
                h[(t * j + jj, t * j + jj)] = self.sigma_j2[jj];
            }
        }
        let mut cov = &l * h * l.transpose();
        let cov_t = cov.transpose();
        cov += cov_t;
        cov *= 0.5;
        cov
    }

    /// Exact conditioning of the stacked scores on all observations.
    pub fn condition(&self) -> DenseConditional {
        let n = self.n_times();
        let j = self.n_factors();
        let prior = self.prior_cov();

        let total: usize = self.obs_map.iter().map(|w| w.nrows()).sum();
        if total == 0 {
            return DenseConditional {
                mean: DVector::zeros(n * j),
                cov: prior,
                neg2_loglik: 0.0,
                n_factors: j,
                n_times: n,
            };
        }
        let mut x = DMatrix::zeros(total, n * j);
        let mut centered = DVector::zeros(total);
        let mut row = 0;
        for t in 0..n {
            let w = &self.obs_map[t];
            for i in 0..w.nrows() {
                for jj in 0..j {
                    x[(row, t * j + jj)] = w[(i, jj)];
                }
                centered[row] = self.z[t][i] - self.offset[t][i];
                row += 1;
            }
        }
        let mut szz = &x * &prior * x.transpose();
        for i in 0..total {
            szz[(i, i)] += self.sigma2;
        }
        let chol = szz.clone().cholesky().expect("observation covariance is PD");
        let solve_c = chol.solve(&centered);
        let sxz = &prior * x.transpose();
        let mean = &sxz * &solve_c;
        let cov = &prior - &sxz * chol.solve(&sxz.transpose());

        let log_det: f64 = (0..total).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
        let neg2_loglik = total as f64 * (2.0 * std::f64::consts::PI).ln()
            + log_det
            + centered.dot(&solve_c);

        DenseConditional { mean, cov, neg2_loglik, n_factors: j, n_times: n }
    }
}

impl DenseConditional {
    /// Posterior mean of `alpha_t` (1-based `t`).
    pub fn alpha_mean(&self, t: usize) -> DVector<f64> {
        self.mean.rows((t - 1) * self.n_factors, self.n_factors).into_owned()
    }

    /// Posterior covariance of `(alpha_ta, alpha_tb)` as a J x J block
    /// (1-based times).
    pub fn alpha_cov(&self, ta: usize, tb: usize) -> DMatrix<f64> {
        let j = self.n_factors;
        self.cov.view(((ta - 1) * j, (tb - 1) * j), (j, j)).into_owned()
    }

    /// Direct evaluation of the smoothed lag statistic for factor `j`
    /// (0-based): entry (a, b) is
    /// `sum_s E[alpha_{j,a+1+s} alpha_{j,b+1+s} | z]`.
    pub fn d_stat(&self, p: usize, j: usize) -> DMatrix<f64> {
        let n = self.n_times;
        DMatrix::from_fn(p + 1, p + 1, |a0, b0| {
            let (a, b) = (a0 + 1, b0 + 1);
            let mut acc = 0.0;
            if a + b <= n + 1 {
                for s in 0..=(n + 1 - a - b) {
                    let (ta, tb) = (a + s, b + s);
                    acc += self.alpha_mean(ta)[j] * self.alpha_mean(tb)[j]
                        + self.alpha_cov(ta, tb)[(j, j)];
                }
            }
            acc
        })
    }
}

/// Random small instance with stable AR coefficients. Sizes follow the given
/// ranges; the observation maps and offsets are dense random values.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n_factors: usize,
    ar_order: usize,
    n_times: usize,
) -> DenseInstance {
    let k = loop {
        let cand = DMatrix::from_fn(ar_order, n_factors, |_, _| rng.gen_range(-0.7..0.7));
        let stable = (0..n_factors).all(|jj| {
            let col: Vec<f64> = (0..ar_order).map(|i| cand[(i, jj)]).collect();
            stfpca::ar::is_stationary(&col)
        });
        if stable {
            break cand;
        }
    };
    let mut sigma_j2: Vec<f64> = (0..n_factors).map(|_| rng.gen_range(0.3..2.0)).collect();
    sigma_j2.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma2 = rng.gen_range(0.05..0.8);
    let mut obs_map = Vec::new();
    let mut offset = Vec::new();
    let mut z = Vec::new();
    for t in 0..n_times {
        // Occasional empty time point.
        let n_t = if t == 2 && n_times > 4 { 0 } else { rng.gen_range(1..=4) };
        obs_map.push(DMatrix::from_fn(n_t, n_factors, |_, _| rng.gen_range(-1.0..1.0)));
        offset.push(DVector::from_fn(n_t, |_, _| rng.gen_range(-0.5..0.5)));
        z.push(DVector::from_fn(n_t, |_, _| rng.gen_range(-2.0..2.0)));
    }
    DenseInstance { k, sigma_j2, sigma2, obs_map, offset, z }
}

/// Builds the crate's state-space spec from a dense instance.
pub fn spec_from_instance(inst: &DenseInstance) -> stfpca::state_space::StateSpaceSpec {
    stfpca::state_space::StateSpaceSpec::new(
        &inst.k,
        &inst.sigma_j2,
        inst.sigma2,
        inst.obs_map.clone(),
        inst.offset.clone(),
        stfpca::state_space::StateInit::Zero,
    )
    .expect("valid spec")
}

//! Model parameters, fit configuration, and the fitted-model container.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ar;
use crate::basis2d::BivariateBasis;
use crate::error::{Error, Result};
use crate::state_space::{LatentMoments, StateInit};
use crate::temporal::TemporalBasis;

/// Everything the EM estimates.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Spatial mean coefficients, unit Euclidean norm.
    pub theta_b: DVector<f64>,
    /// Temporal mean coefficients.
    pub theta_c: DVector<f64>,
    /// Principal component loadings, `n_b x J`, orthonormal columns.
    pub loadings: DMatrix<f64>,
    /// AR coefficients, `p x J`; column j drives factor j.
    pub ar_coefficients: DMatrix<f64>,
    /// Observation noise variance.
    pub sigma2: f64,
    /// AR innovation variances, strictly decreasing.
    pub score_variances: Vec<f64>,
}

impl ModelParams {
    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn ar_order(&self) -> usize {
        self.ar_coefficients.nrows()
    }

    pub fn ar_column(&self, j: usize) -> Vec<f64> {
        (0..self.ar_order()).map(|i| self.ar_coefficients[(i, j)]).collect()
    }

    /// Checks the identifiability invariants.
    pub fn validate(&self) -> Result<()> {
        if (self.theta_b.norm() - 1.0).abs() > 1e-8 {
            return Err(Error::Argument(format!(
                "theta_b norm {} is not 1",
                self.theta_b.norm()
            )));
        }
        let j = self.n_factors();
        if self.score_variances.len() != j {
            return Err(Error::Argument("score variance count must equal J".into()));
        }
        let gram = self.loadings.transpose() * &self.loadings;
        let mut dev = 0.0f64;
        for r in 0..j {
            for c in 0..j {
                let target = if r == c { 1.0 } else { 0.0 };
                dev = dev.max((gram[(r, c)] - target).abs());
            }
        }
        if dev > 1e-8 {
            return Err(Error::Argument(format!("loadings not orthonormal (deviation {dev})")));
        }
        for w in self.score_variances.windows(2) {
            if !(w[0] > w[1]) {
                return Err(Error::Argument(format!(
                    "score variances must decrease strictly, got {:?}",
                    self.score_variances
                )));
            }
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Argument("sigma2 must be positive".into()));
        }
        for jj in 0..j {
            if !ar::is_stationary(&self.ar_column(jj)) {
                return Err(Error::NonStationary(format!("factor {jj}")));
            }
        }
        Ok(())
    }
}

/// Regularization weights for the mean surface, mean curve, and components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    pub mean_spatial: f64,
    pub mean_temporal: f64,
    pub pc: f64,
}

impl Penalties {
    pub fn new(mean_spatial: f64, mean_temporal: f64, pc: f64) -> Result<Self> {
        if mean_spatial < 0.0 || mean_temporal < 0.0 || pc < 0.0 {
            return Err(Error::Argument("penalties must be nonnegative".into()));
        }
        Ok(Penalties { mean_spatial, mean_temporal, pc })
    }

    pub fn zero() -> Self {
        Penalties { mean_spatial: 0.0, mean_temporal: 0.0, pc: 0.0 }
    }

    pub fn uniform(lambda: f64) -> Self {
        Penalties { mean_spatial: lambda, mean_temporal: lambda, pc: lambda }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.mean_spatial, self.mean_temporal, self.pc]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Penalties { mean_spatial: a[0], mean_temporal: a[1], pc: a[2] }
    }
}

/// EM driver configuration.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub n_factors: usize,
    pub ar_order: usize,
    pub penalties: Penalties,
    /// Relative q-value change below which the iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep the AR coefficients at zero (serially independent baseline).
    pub freeze_ar: bool,
    /// Iterations with the AR coefficients held at zero before the AR update
    /// engages; lets the mean claim the seasonal structure before the score
    /// dynamics can absorb it.
    pub ar_warmup: usize,
    pub state_init: StateInit,
    /// Record a labeled q value after every block update (diagnostics).
    pub detailed_trace: bool,
}

impl FitConfig {
    pub fn new(n_factors: usize, ar_order: usize) -> Self {
        FitConfig {
            n_factors,
            ar_order,
            penalties: Penalties::zero(),
            tol: 1e-6,
            max_iter: 200,
            freeze_ar: false,
            ar_warmup: 15,
            state_init: StateInit::Zero,
            detailed_trace: false,
        }
    }

    pub fn with_penalties(mut self, penalties: Penalties) -> Self {
        self.penalties = penalties;
        self
    }
}

/// Per-iteration objective record.
#[derive(Debug, Clone, Copy)]
pub struct IterationTrace {
    pub q_value: f64,
    pub observed_neg2_loglik: f64,
}

/// Per-iteration identifiability bookkeeping (recorded with the detailed
/// trace).
#[derive(Debug, Clone, Copy)]
pub struct InvariantRecord {
    /// `| ||theta_b|| - 1 |` after the iteration.
    pub mean_norm_deviation: f64,
    /// Max-abs deviation of `Theta' Theta` from the identity.
    pub loadings_orthonormality_deviation: f64,
    pub variances_strictly_decreasing: bool,
    pub sigma2: f64,
}

/// A fitted model with its smoothed moments and diagnostics.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    /// Smoothed moments under the final parameters.
    pub moments: LatentMoments,
    pub basis: Arc<BivariateBasis>,
    pub temporal: Arc<TemporalBasis>,
    pub trace: Vec<IterationTrace>,
    /// Labeled per-block q values when `detailed_trace` was set.
    pub detailed_trace: Vec<(&'static str, f64)>,
    /// Per-iteration invariant checks when `detailed_trace` was set.
    pub invariant_trace: Vec<InvariantRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
    /// Final smoothed state mean and covariance (forecasting seed).
    pub final_state_mean: DVector<f64>,
    pub final_state_cov: DMatrix<f64>,
    /// Per-time fitting residuals at the observation locations.
    pub residuals: Vec<DVector<f64>>,
    pub config: FitConfig,
}

impl FittedModel {
    pub fn n_times(&self) -> usize {
        self.moments.n_times()
    }
}

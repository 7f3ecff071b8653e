//! Two-stage preprocessing: additive penalized regression of the raw data on
//! a location main effect and a time main effect, pinned so the time effect
//! averages to zero over the observed time points.

use nalgebra::{DMatrix, DVector};

use crate::basis2d::BivariateBasis;
use crate::error::{Error, Result};
use crate::panel::ObservationPanel;
use crate::temporal::TemporalBasis;

/// Additive main-effect fit and the demeaned responses.
#[derive(Debug, Clone)]
pub struct DemeanFit {
    /// Coefficients of the location effect `mu(x, y)`.
    pub spatial_coeffs: DVector<f64>,
    /// Coefficients of the time effect `nu(t)` (mean zero over observed t).
    pub temporal_coeffs: DVector<f64>,
    /// Panel with `z - mu - nu` as responses.
    pub demeaned: ObservationPanel,
}

/// Solves the joint penalized least squares
/// `sum_t |z_t - B_t theta_mu - nu(t) 1|^2 + lam_s theta_mu' Gamma theta_mu
///  + lam_t theta_nu' P theta_nu` subject to
/// `sum_{observed t} nu(t) = 0` (a bordered KKT system). The overall level
/// is absorbed by the location effect.
pub fn demean_two_stage(
    panel: &ObservationPanel,
    basis: &BivariateBasis,
    temporal: &TemporalBasis,
    lambda_spatial: f64,
    lambda_temporal: f64,
) -> Result<DemeanFit> {
    if lambda_spatial < 0.0 || lambda_temporal < 0.0 {
        return Err(Error::Argument("penalties must be nonnegative".into()));
    }
    let n_b = panel.n_b();
    let n_c = panel.n_c();
    let dim = n_b + n_c + 1;

    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);

    let gamma = basis.energy_matrix()?;
    let pen_t = temporal.curvature_matrix()?;
    kkt.view_mut((0, 0), (n_b, n_b)).copy_from(&(&gamma * lambda_spatial));
    kkt.view_mut((n_b, n_b), (n_c, n_c)).copy_from(&(&pen_t * lambda_temporal));

    let mut pin = DVector::zeros(n_c);
    for slice in panel.slices() {
        if slice.n_obs() == 0 {
            continue;
        }
        let n_t = slice.n_obs() as f64;
        // Block B'B, cross term B'1 c', and n_t c c'.
        kkt.view_mut((0, 0), (n_b, n_b)).zip_apply(&slice.btb, |a, b| *a += b);
        let b_one = slice.b.transpose() * DVector::from_element(slice.n_obs(), 1.0);
        for r in 0..n_b {
            for c in 0..n_c {
                kkt[(r, n_b + c)] += b_one[r] * slice.c[c];
            }
        }
        for r in 0..n_c {
            for c in 0..n_c {
                kkt[(n_b + r, n_b + c)] += n_t * slice.c[r] * slice.c[c];
            }
        }
        rhs.rows_mut(0, n_b).zip_apply(&(slice.b.transpose() * &slice.z), |a, b| *a += b);
        rhs.rows_mut(n_b, n_c)
            .zip_apply(&(&slice.c * slice.z.sum()), |a, b| *a += b);
        pin += &slice.c;
    }
    // Mirror the cross block and install the pinning constraint row/column.
    for r in 0..n_b {
        for c in 0..n_c {
            kkt[(n_b + c, r)] = kkt[(r, n_b + c)];
        }
    }
    for c in 0..n_c {
        kkt[(n_b + c, n_b + n_c)] = pin[c];
        kkt[(n_b + n_c, n_b + c)] = pin[c];
    }

    let solution = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Conditioning("demeaning system is singular".into()))?;
    let spatial_coeffs = solution.rows(0, n_b).into_owned();
    let temporal_coeffs = solution.rows(n_b, n_c).into_owned();

    let mut values = Vec::with_capacity(panel.n_times());
    for slice in panel.slices() {
        if slice.n_obs() == 0 {
            values.push(DVector::zeros(0));
            continue;
        }
        let nu = temporal_coeffs.dot(&slice.c);
        let mu = &slice.b * &spatial_coeffs;
        values.push(&slice.z - mu - DVector::from_element(slice.n_obs(), nu));
    }
    let demeaned = panel.with_values(values)?;
    Ok(DemeanFit { spatial_coeffs, temporal_coeffs, demeaned })
}

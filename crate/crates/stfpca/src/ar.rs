//! Stationary AR(p) machinery: autocovariances, the unit-innovation precision
//! matrix of the initial states, stationarity checks, and simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest modulus among the companion-matrix eigenvalues (the reciprocals
/// of the characteristic roots).
pub fn companion_spectral_radius(k: &[f64]) -> f64 {
    let p = k.len();
    if p == 0 {
        return 0.0;
    }
    if p == 1 {
        return k[0].abs();
    }
    let mut c = DMatrix::zeros(p, p);
    for (i, &ki) in k.iter().enumerate() {
        c[(0, i)] = ki;
    }
    for i in 1..p {
        c[(i, i - 1)] = 1.0;
    }
    c.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Whether all characteristic roots of `1 - k_1 x - ... - k_p x^p` lie
/// outside the unit circle.
pub fn is_stationary(k: &[f64]) -> bool {
    companion_spectral_radius(k) < 1.0 - 1e-12
}

/// Stationary autocovariances `gamma_0..gamma_{lags-1}` of the AR(p) process
/// with unit innovation variance, from the extended Yule-Walker system.
pub fn stationary_autocovariances(k: &[f64], lags: usize) -> Result<Vec<f64>> {
    if !is_stationary(k) {
        return Err(Error::NonStationary(format!("coefficients {k:?}")));
    }
    let p = k.len();
    if p == 0 {
        return Ok((0..lags).map(|m| if m == 0 { 1.0 } else { 0.0 }).collect());
    }
    // Unknowns gamma_0..gamma_{p-1}; gamma_p is eliminated through the
    // Yule-Walker relation at lag p.
    let mut a = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    rhs[0] = 1.0;
    for m in 0..p {
        a[(m, m)] += 1.0;
        for i in 1..=p {
            let lag = m.abs_diff(i);
            if lag <= p - 1 {
                a[(m, lag)] -= k[i - 1];
            } else {
                // lag == p only occurs at m = 0, i = p.
                for j in 1..=p {
                    a[(m, p - j)] -= k[p - 1] * k[j - 1];
                }
            }
        }
    }
    let gamma_head = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Conditioning("Yule-Walker system is singular".into()))?;
    let mut gamma: Vec<f64> = gamma_head.iter().copied().collect();
    for m in p..lags.max(p) {
        let next: f64 = (1..=p).map(|i| k[i - 1] * gamma[m - i]).sum();
        gamma.push(next);
    }
    gamma.truncate(lags.max(1));
    Ok(gamma)
}

/// Precision matrix of the first `p` states scaled to unit innovation
/// variance, with its log determinant: the inverse of the Toeplitz
/// autocovariance matrix.
pub fn ar_precision(k: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let p = k.len();
    if p == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let gamma = stationary_autocovariances(k, p)?;
    let cov = DMatrix::from_fn(p, p, |i, j| gamma[i.abs_diff(j)]);
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("autocovariance matrix is not PD".into()))?;
    let log_det_cov: f64 = (0..p).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
    let m = chol.inverse();
    Ok((m, -log_det_cov))
}

/// Shrinks coefficients toward zero until every characteristic root has
/// modulus at least 1.01, scanning `c` over a 0.01 grid; returns the input
/// unchanged when it is already comfortably stationary.
pub fn stabilize(k: &[f64]) -> Vec<f64> {
    let target = 1.0 / 1.01;
    let radius = companion_spectral_radius(k);
    if radius <= target {
        return k.to_vec();
    }
    let mut c = (target / radius / 0.01).floor() * 0.01;
    c = c.clamp(0.0, 0.99);
    // Back off further if rounding left a root inside the target modulus.
    while c > 0.0 {
        let scaled: Vec<f64> =
            k.iter().enumerate().map(|(i, &ki)| ki * c.powi(i as i32 + 1)).collect();
        if companion_spectral_radius(&scaled) <= target {
            return scaled;
        }
        c -= 0.01;
    }
    vec![0.0; k.len()]
}

/// Simulates a stationary AR(p) path of length `n`, discarding `burn_in`
/// pre-sample steps that start from zero.
pub fn simulate(
    k: &[f64],
    innovation_variance: f64,
    n: usize,
    burn_in: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !is_stationary(k) {
        return Err(Error::NonStationary(format!("coefficients {k:?}")));
    }
    if innovation_variance < 0.0 {
        return Err(Error::Argument("innovation variance must be >= 0".into()));
    }
    let sd = innovation_variance.sqrt();
    let p = k.len();
    let mut history = vec![0.0f64; p];
    let mut out = Vec::with_capacity(n);
    for step in 0..burn_in + n {
        let mut value: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
        for i in 0..p {
            value += k[i] * history[i];
        }
        if p > 0 {
            history.rotate_right(1);
            history[0] = value;
        }
        if step >= burn_in {
            out.push(value);
        }
    }
    Ok(out)
}

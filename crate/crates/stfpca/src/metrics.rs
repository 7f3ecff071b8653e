//! Evaluation metrics: mean integrated absolute error over a grid and the
//! principal angle between estimated and true component subspaces.

use nalgebra::DMatrix;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::simulate::EvalGrid;

/// Mean integrated absolute error of per-time surfaces against the truth:
/// `(1/n) sum_t (area / G) sum_g |est - true|`.
pub fn miae(est: &[DVector<f64>], truth: &[DVector<f64>], grid: &EvalGrid) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Argument("surface counts differ".into()));
    }
    if est.is_empty() {
        return Err(Error::Argument("no surfaces".into()));
    }
    let g = grid.len();
    let mut acc = 0.0;
    for (e, t) in est.iter().zip(truth) {
        if e.len() != g || t.len() != g {
            return Err(Error::Argument("surface length differs from grid".into()));
        }
        let mut sum = 0.0;
        for i in 0..g {
            sum += (e[i] - t[i]).abs();
        }
        acc += grid.area / g as f64 * sum;
    }
    Ok(acc / est.len() as f64)
}

/// Principal angle in degrees between the column spans of two grid-evaluated
/// component matrices: both are QR-orthonormalized and the angle is
/// `acos(min singular value of Qa' Qb) * 180 / pi`.
///
/// Small angles are evaluated through the equivalent sine form
/// `asin(max singular value of (I - Qa Qa') Qb)`, which stays accurate where
/// the arc cosine flattens; the two branches agree to rounding at the
/// crossover.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::Argument("component matrices have different row counts".into()));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(Error::Argument("component matrices must be nonempty".into()));
    }
    let qa = thin_q(a)?;
    let qb = thin_q(b)?;
    let m = qa.transpose() * &qb;
    let svd = m.clone().svd(false, false);
    let rho = svd.singular_values.min().clamp(-1.0, 1.0);
    let radians = if rho * rho < 0.5 {
        rho.acos()
    } else {
        let residual = &qb - &qa * m;
        let sine = residual.svd(false, false).singular_values.max().clamp(-1.0, 1.0);
        sine.asin()
    };
    Ok(radians * 180.0 / std::f64::consts::PI)
}

fn thin_q(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = r.amax();
    for i in 0..m.ncols() {
        if r[(i, i)].abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Argument("component matrix is rank deficient".into()));
        }
    }
    Ok(qr.q())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid3() -> EvalGrid {
        EvalGrid {
            points: vec![
                crate::mesh::Point2::new(0.0, 0.0),
                crate::mesh::Point2::new(1.0, 0.0),
                crate::mesh::Point2::new(0.0, 1.0),
                crate::mesh::Point2::new(1.0, 1.0),
            ],
            area: 3.0,
        }
    }

    #[test]
    fn miae_zero_for_identical_surfaces() {
        let grid = grid3();
        let s = vec![DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0])];
        assert_eq!(miae(&s, &s, &grid).unwrap(), 0.0);
    }

    #[test]
    fn miae_constant_offset_times_area() {
        let grid = grid3();
        let truth = vec![DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]); 3];
        let est: Vec<DVector<f64>> =
            truth.iter().map(|t| t.map(|v| v + 1.0)).collect();
        let value = miae(&est, &truth, &grid).unwrap();
        assert!((value - 3.0).abs() < 1e-14);
    }

    #[test]
    fn miae_matches_double_loop_reference() {
        let grid = grid3();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est: Vec<DVector<f64>> =
            (0..5).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let truth: Vec<DVector<f64>> =
            (0..5).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let got = miae(&est, &truth, &grid).unwrap();
        // Plain reference: loop over times, loop over points.
        let mut reference = 0.0;
        for t in 0..5 {
            let mut inner = 0.0;
            for g in 0..4 {
                inner += (est[t][g] - truth[t][g]).abs();
            }
            reference += grid.area / 4.0 * inner;
        }
        reference /= 5.0;
        assert!((got - reference).abs() < 1e-12);
    }

    #[test]
    fn miae_rejects_grid_mismatch() {
        let grid = grid3();
        let est = vec![DVector::from_column_slice(&[1.0, 2.0])];
        let truth = vec![DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0])];
        assert!(miae(&est, &truth, &grid).is_err());
    }

    #[test]
    fn principal_angle_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = DMatrix::from_fn(30, 2, |_, _| rng.gen_range(-1.0..1.0));
        let angle = principal_angle(&v, &v).unwrap();
        assert!(angle.abs() < 1e-8);
    }

    #[test]
    fn principal_angle_orthogonal_spans_is_ninety() {
        let mut a = DMatrix::zeros(6, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let mut b = DMatrix::zeros(6, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        let angle = principal_angle(&a, &b).unwrap();
        assert!((angle - 90.0).abs() < 1e-8);
    }

    #[test]
    fn principal_angle_is_span_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = DMatrix::from_fn(25, 2, |_, _| rng.gen_range(-1.0..1.0));
        let r = DMatrix::from_column_slice(2, 2, &[2.0, -0.7, 1.1, 0.4]);
        let rotated = &v * r;
        let angle = principal_angle(&rotated, &v).unwrap();
        assert!(angle.abs() < 1e-8, "angle {angle}");
    }

    #[test]
    fn principal_angle_rejects_rank_deficiency() {
        let mut a = DMatrix::zeros(6, 2);
        a[(0, 0)] = 1.0;
        a[(0, 1)] = 2.0; // second column is a multiple of the first
        let b = DMatrix::identity(6, 2);
        assert!(principal_angle(&a, &b).is_err());
    }
}

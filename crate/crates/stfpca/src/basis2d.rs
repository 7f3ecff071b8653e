//! Orthonormal bivariate spline bases on triangulations.
//!
//! Piecewise Bernstein polynomials of degree `d` are glued with C^r
//! smoothness across shared edges and orthonormalized in the L2 inner
//! product of the domain, so that `integral b b' = I`. The construction is
//! deterministic: raw coefficients are ordered by (triangle, multi-index)
//! and the orthonormalization is a modified Gram-Schmidt with a fixed
//! column order.

use nalgebra::{DMatrix, DVector};

use crate::bernstein;
use crate::error::{Error, Result};
use crate::mesh::{Point2, Triangulation};

/// Orthonormal C^r spline basis over a triangulation.
#[derive(Debug, Clone)]
pub struct BivariateBasis {
    mesh: Triangulation,
    degree: usize,
    smoothness: usize,
    /// Maps orthonormal-basis coefficients to raw per-triangle Bernstein
    /// coefficients; `(M * n_d) x n_b`, blocks ordered by triangle.
    transform: DMatrix<f64>,
    gram_certified: bool,
}

/// Rank-reduced smoothness constraint matrix `H`: `H gamma = 0` iff the
/// piecewise polynomial with raw coefficients `gamma` is C^r across every
/// shared edge. Returns a matrix with linearly independent rows (possibly
/// zero rows when there is nothing to constrain).
pub fn smoothness_constraints(mesh: &Triangulation, d: usize, r: usize) -> Result<DMatrix<f64>> {
    let raw = constraint_rows(mesh, d, r)?;
    if raw.nrows() == 0 {
        return Ok(raw);
    }
    let svd = raw.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd computed with v");
    let smax = svd.singular_values.max();
    let tol = smax * (raw.nrows().max(raw.ncols()) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut h = DMatrix::zeros(rank, raw.ncols());
    for i in 0..rank {
        h.row_mut(i).copy_from(&(v_t.row(i) * svd.singular_values[i]));
    }
    Ok(h)
}

/// All cross-edge continuity equations, one row per (edge, order, edge
/// coefficient), without removing redundancies.
fn constraint_rows(mesh: &Triangulation, d: usize, r: usize) -> Result<DMatrix<f64>> {
    if r >= d {
        return Err(Error::Argument(format!(
            "smoothness order r = {r} must satisfy r < d = {d}"
        )));
    }
    let n_d = bernstein::dimension(d);
    let n_raw = mesh.triangles().len() * n_d;

    let mut rows: Vec<DVector<f64>> = Vec::new();
    for ((w1, w2), tris) in mesh.shared_edges() {
        let e = Point2::new(
            mesh.vertices()[w2].x - mesh.vertices()[w1].x,
            mesh.vertices()[w2].y - mesh.vertices()[w1].y,
        );
        let len = (e.x * e.x + e.y * e.y).sqrt();
        // Unit normal of the edge: transversal direction whose derivatives we
        // match on both sides.
        let u = (-e.y / len, e.x / len);

        // For each order m, express the m-th normal derivative restricted to
        // the edge in the univariate Bernstein basis along w1 -> w2, for each
        // of the two triangles.
        let mut side_maps: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(2);
        for &ti in &tris {
            let tri = &mesh.triangles()[ti];
            let verts = mesh.triangle_vertices(tri);
            let (ax, ay) = bernstein::direction_coordinates(verts);
            let a = [
                ax[0] * u.0 + ay[0] * u.1,
                ax[1] * u.0 + ay[1] * u.1,
                ax[2] * u.0 + ay[2] * u.1,
            ];
            let local_a = tri.v.iter().position(|&v| v == w1).expect("edge vertex");
            let local_b = tri.v.iter().position(|&v| v == w2).expect("edge vertex");

            let mut maps = Vec::with_capacity(r + 1);
            let mut deriv = DMatrix::identity(n_d, n_d);
            for m in 0..=r {
                if m > 0 {
                    deriv = bernstein::derivative_matrix(d - m + 1, a) * deriv;
                }
                let deg = d - m;
                let idx = bernstein::multi_indices(deg);
                // Selector: coefficient of the univariate Bernstein beta_q(s)
                // along the edge is the raw coefficient with zero off-edge
                // index, (deg - q) at w1 and q at w2.
                let mut sel = DMatrix::zeros(deg + 1, idx.len());
                for q in 0..=deg {
                    let mut multi = [0usize; 3];
                    multi[local_a] = deg - q;
                    multi[local_b] = q;
                    let pos = idx
                        .iter()
                        .position(|&(i, j, k)| (i, j, k) == (multi[0], multi[1], multi[2]))
                        .expect("edge multi-index");
                    sel[(q, pos)] = 1.0;
                }
                maps.push(sel * &deriv);
            }
            side_maps.push(maps);
        }

        for m in 0..=r {
            let deg = d - m;
            for q in 0..=deg {
                let mut row = DVector::zeros(n_raw);
                for (side, &ti) in tris.iter().enumerate() {
                    let sign = if side == 0 { 1.0 } else { -1.0 };
                    let map = &side_maps[side][m];
                    for c in 0..n_d {
                        row[ti * n_d + c] += sign * map[(q, c)];
                    }
                }
                rows.push(row);
            }
        }
    }

    let mut h = DMatrix::zeros(rows.len(), n_raw);
    for (i, row) in rows.iter().enumerate() {
        h.row_mut(i).copy_from(&row.transpose());
    }
    Ok(h)
}

/// Block-diagonal Gram matrix of all raw per-triangle Bernstein polynomials,
/// from the closed-form product integrals.
pub fn gram_matrix_raw(mesh: &Triangulation, d: usize) -> DMatrix<f64> {
    let n_d = bernstein::dimension(d);
    let m = mesh.triangles().len();
    let mut g = DMatrix::zeros(m * n_d, m * n_d);
    for ti in 0..m {
        let block = bernstein::product_integrals(d, mesh.triangle_area(ti));
        g.view_mut((ti * n_d, ti * n_d), (n_d, n_d)).copy_from(&block);
    }
    g
}

/// Builds the orthonormal C^r basis of degree `d` over `mesh`.
pub fn orthonormal_basis(mesh: &Triangulation, d: usize, r: usize) -> Result<BivariateBasis> {
    if d < 1 {
        return Err(Error::Argument("degree must be at least 1".into()));
    }
    certify_gram_blocks(mesh, d)?;
    if d >= 2 {
        certify_gram_blocks(mesh, d - 2)?;
    }

    let h = constraint_rows(mesh, d, r)?;
    let n_d = bernstein::dimension(d);
    let n_raw = mesh.triangles().len() * n_d;

    // Null space of the constraints: orthonormal row-space basis from the
    // (thin) SVD, completed to the full space by Gram-Schmidt over the
    // standard basis vectors in index order.
    let null_basis: Vec<DVector<f64>> = if h.nrows() == 0 {
        (0..n_raw)
            .map(|i| {
                let mut e = DVector::zeros(n_raw);
                e[i] = 1.0;
                e
            })
            .collect()
    } else {
        let svd = h.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd computed with v");
        let smax = svd.singular_values.max();
        let tol = smax * (h.nrows().max(h.ncols()) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        let row_space: Vec<DVector<f64>> =
            (0..rank).map(|i| v_t.row(i).transpose()).collect();

        let target = n_raw - rank;
        let mut collected: Vec<DVector<f64>> = Vec::with_capacity(target);
        for i in 0..n_raw {
            if collected.len() == target {
                break;
            }
            let mut w = DVector::zeros(n_raw);
            w[i] = 1.0;
            for _ in 0..2 {
                for q in row_space.iter().chain(collected.iter()) {
                    let c = w.dot(q);
                    w.axpy(-c, q, 1.0);
                }
            }
            let norm = w.norm();
            if norm > 1e-6 {
                collected.push(w / norm);
            }
        }
        if collected.len() != target {
            return Err(Error::Numeric(
                "failed to complete a basis of the constraint null space".into(),
            ));
        }
        for col in &mut collected {
            // Canonical sign: largest-magnitude entry positive.
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
        collected
    };
    if null_basis.is_empty() {
        return Err(Error::Numeric("smoothness constraints leave an empty basis".into()));
    }

    // Modified Gram-Schmidt in the L2 inner product, with one
    // re-orthogonalization pass.
    let areas: Vec<f64> = (0..mesh.triangles().len()).map(|ti| mesh.triangle_area(ti)).collect();
    let gram_blocks: Vec<DMatrix<f64>> =
        areas.iter().map(|&a| bernstein::product_integrals(d, a)).collect();
    let apply_g = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(n_raw);
        for (ti, block) in gram_blocks.iter().enumerate() {
            let seg = v.rows(ti * n_d, n_d);
            out.rows_mut(ti * n_d, n_d).copy_from(&(block * seg));
        }
        out
    };

    let mut ortho: Vec<(DVector<f64>, DVector<f64>)> = Vec::new(); // (q, G q)
    for v in null_basis {
        let mut w = v;
        for _ in 0..2 {
            for (q, gq) in &ortho {
                let c = w.dot(gq);
                w.axpy(-c, q, 1.0);
            }
        }
        let gw = apply_g(&w);
        let norm2 = w.dot(&gw);
        if norm2 <= 1e-24 {
            return Err(Error::Numeric(
                "null-space vector collapsed during orthonormalization".into(),
            ));
        }
        let scale = norm2.sqrt();
        ortho.push((w / scale, gw / scale));
    }

    let n_b = ortho.len();
    let mut transform = DMatrix::zeros(n_raw, n_b);
    for (c, (q, _)) in ortho.iter().enumerate() {
        transform.column_mut(c).copy_from(q);
    }

    let basis = BivariateBasis {
        mesh: mesh.clone(),
        degree: d,
        smoothness: r,
        transform,
        gram_certified: true,
    };
    Ok(basis)
}

/// Validates the closed-form Gram blocks against the symmetric quadrature
/// rule to 1e-10 on every triangle.
fn certify_gram_blocks(mesh: &Triangulation, d: usize) -> Result<()> {
    let quad = bernstein::TriangleQuadrature::for_degree(d);
    let n_d = bernstein::dimension(d);
    for ti in 0..mesh.triangles().len() {
        let area = mesh.triangle_area(ti);
        let block = bernstein::product_integrals(d, area);
        for a in 0..n_d {
            for b in a..n_d {
                let byq = quad.integrate(area, |bary| {
                    let v = bernstein::eval(d, bary);
                    v[a] * v[b]
                });
                if (block[(a, b)] - byq).abs() > 1e-10 {
                    return Err(Error::Numeric(format!(
                        "Gram block on triangle {ti} disagrees with quadrature: \
                         entry ({a},{b}) closed form {} vs {byq}",
                        block[(a, b)]
                    )));
                }
            }
        }
    }
    Ok(())
}

impl BivariateBasis {
    /// Reassembles a basis from stored parts (used when loading archives).
    /// The transform is taken as-is.
    pub fn from_parts(
        mesh: Triangulation,
        degree: usize,
        smoothness: usize,
        transform: DMatrix<f64>,
        gram_certified: bool,
    ) -> Result<Self> {
        let n_raw = mesh.triangles().len() * bernstein::dimension(degree);
        if transform.nrows() != n_raw {
            return Err(Error::Argument(format!(
                "transform has {} rows, expected {n_raw}",
                transform.nrows()
            )));
        }
        Ok(BivariateBasis { mesh, degree, smoothness, transform, gram_certified })
    }

    pub fn mesh(&self) -> &Triangulation {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn smoothness(&self) -> usize {
        self.smoothness
    }

    /// Dimension of the basis.
    pub fn n_basis(&self) -> usize {
        self.transform.ncols()
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn gram_certified(&self) -> bool {
        self.gram_certified
    }

    /// Evaluates the basis vector at a single point inside the domain.
    pub fn eval_at(&self, p: Point2) -> Result<DVector<f64>> {
        let ti = self
            .mesh
            .locate(p)
            .ok_or(Error::OutsideDomain { x: p.x, y: p.y })?;
        Ok(self.eval_on_triangle(ti, p))
    }

    /// Design matrix with one row per point: `B[i, .] = b(x_i, y_i)'`.
    pub fn eval_design(&self, points: &[Point2]) -> Result<DMatrix<f64>> {
        let mut b = DMatrix::zeros(points.len(), self.n_basis());
        for (i, &p) in points.iter().enumerate() {
            let row = self.eval_at(p)?;
            b.row_mut(i).copy_from(&row.transpose());
        }
        Ok(b)
    }

    /// Evaluates using triangle `ti`'s polynomial regardless of whether the
    /// point lies in that triangle (polynomials extend smoothly).
    pub fn eval_on_triangle(&self, ti: usize, p: Point2) -> DVector<f64> {
        let n_d = bernstein::dimension(self.degree);
        let bary = self
            .mesh
            .barycentric(ti, p)
            .expect("valid triangle in constructed mesh");
        let raw = bernstein::eval(self.degree, (bary.0, bary.1, bary.2));
        self.transform.rows(ti * n_d, n_d).transpose() * raw
    }

    /// Directional derivative of every basis function, evaluated with
    /// triangle `ti`'s polynomial.
    pub fn eval_directional_derivative_on_triangle(
        &self,
        ti: usize,
        p: Point2,
        dir: (f64, f64),
    ) -> DVector<f64> {
        let d = self.degree;
        let n_d = bernstein::dimension(d);
        let verts = self.mesh.triangle_vertices(&self.mesh.triangles()[ti]);
        let (ax, ay) = bernstein::direction_coordinates(verts);
        let a = [
            ax[0] * dir.0 + ay[0] * dir.1,
            ax[1] * dir.0 + ay[1] * dir.1,
            ax[2] * dir.0 + ay[2] * dir.1,
        ];
        let dmap = bernstein::derivative_matrix(d, a);
        let bary = self.mesh.barycentric(ti, p).expect("valid triangle");
        let low = bernstein::eval(d - 1, (bary.0, bary.1, bary.2));
        (dmap * self.transform.rows(ti * n_d, n_d)).transpose() * low
    }

    /// Thin-plate energy matrix
    /// `Gamma = integral (b_xx b_xx' + 2 b_xy b_xy' + b_yy b_yy')`,
    /// assembled from exact degree-(d-2) product integrals.
    pub fn energy_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.degree;
        if d < 2 {
            return Err(Error::Argument(
                "thin-plate energy requires degree at least 2".into(),
            ));
        }
        let n_d = bernstein::dimension(d);
        let n_b = self.n_basis();
        let mut gamma = DMatrix::zeros(n_b, n_b);
        for ti in 0..self.mesh.triangles().len() {
            let verts = self.mesh.triangle_vertices(&self.mesh.triangles()[ti]);
            let (ax, ay) = bernstein::direction_coordinates(verts);
            let dx = bernstein::derivative_matrix(d, ax);
            let dy = bernstein::derivative_matrix(d, ay);
            let dxx = bernstein::derivative_matrix(d - 1, ax) * &dx;
            let dxy = bernstein::derivative_matrix(d - 1, ay) * &dx;
            let dyy = bernstein::derivative_matrix(d - 1, ay) * &dy;
            let g2 = bernstein::product_integrals(d - 2, self.mesh.triangle_area(ti));
            let block = dxx.transpose() * &g2 * &dxx
                + (dxy.transpose() * &g2 * &dxy) * 2.0
                + dyy.transpose() * &g2 * &dyy;
            let t_block = self.transform.rows(ti * n_d, n_d);
            gamma += t_block.transpose() * block * t_block;
        }
        // Exactly symmetrize; assembly introduces rounding asymmetry.
        let gamma = (&gamma + gamma.transpose()) * 0.5;
        Ok(gamma)
    }

    /// Gram matrix of the basis computed by quadrature only; an independent
    /// check of the construction path.
    pub fn gram_by_quadrature(&self) -> DMatrix<f64> {
        let quad = bernstein::TriangleQuadrature::for_degree(self.degree);
        let n_b = self.n_basis();
        let mut g = DMatrix::zeros(n_b, n_b);
        for ti in 0..self.mesh.triangles().len() {
            let area = self.mesh.triangle_area(ti);
            let verts = self.mesh.triangle_vertices(&self.mesh.triangles()[ti]);
            for (q, &(b1, b2, b3)) in quad.nodes.iter().enumerate() {
                let p = Point2::new(
                    b1 * verts[0].x + b2 * verts[1].x + b3 * verts[2].x,
                    b1 * verts[0].y + b2 * verts[1].y + b3 * verts[2].y,
                );
                let v = self.eval_on_triangle(ti, p);
                g.syger(quad.weights[q] * area, &v, &v, 1.0);
            }
        }
        g.fill_upper_triangle_with_lower_triangle();
        g
    }

    /// Coefficients of the L2 projection of the piecewise polynomial with
    /// raw coefficients `raw` onto the basis. Exact when the function lies in
    /// the constrained spline space.
    pub fn project_raw(&self, raw: &DVector<f64>) -> DVector<f64> {
        let d = self.degree;
        let n_d = bernstein::dimension(d);
        let mut g_raw = DVector::zeros(raw.len());
        for ti in 0..self.mesh.triangles().len() {
            let block = bernstein::product_integrals(d, self.mesh.triangle_area(ti));
            let seg = raw.rows(ti * n_d, n_d);
            g_raw.rows_mut(ti * n_d, n_d).copy_from(&(block * seg));
        }
        self.transform.transpose() * g_raw
    }
}

/// Raw per-triangle Bernstein coefficients interpolating `f` at the domain
/// points of every triangle; exact for polynomials of degree <= d.
pub fn raw_interpolant(
    mesh: &Triangulation,
    d: usize,
    mut f: impl FnMut(f64, f64) -> f64,
) -> DVector<f64> {
    let idx = bernstein::multi_indices(d);
    let n_d = idx.len();
    let mut raw = DVector::zeros(mesh.triangles().len() * n_d);
    for ti in 0..mesh.triangles().len() {
        let verts = mesh.triangle_vertices(&mesh.triangles()[ti]);
        let mut design = DMatrix::zeros(n_d, n_d);
        let mut values = DVector::zeros(n_d);
        for (row, &(i, j, k)) in idx.iter().enumerate() {
            let b = (
                i as f64 / d as f64,
                j as f64 / d as f64,
                k as f64 / d as f64,
            );
            let p = Point2::new(
                b.0 * verts[0].x + b.1 * verts[1].x + b.2 * verts[2].x,
                b.0 * verts[0].y + b.1 * verts[1].y + b.2 * verts[2].y,
            );
            design.row_mut(row).copy_from(&bernstein::eval(d, b).transpose());
            values[row] = f(p.x, p.y);
        }
        let coeffs = design
            .lu()
            .solve(&values)
            .expect("Bernstein interpolation system is invertible");
        raw.rows_mut(ti * n_d, n_d).copy_from(&coeffs);
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Triangle;
    use crate::simulate::simulation_mesh;
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

    fn single_triangle() -> Triangulation {
        Triangulation::new(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)],
            vec![Triangle { v: [0, 1, 2] }],
        )
        .unwrap()
    }

    #[test]
    fn no_constraints_on_a_single_triangle() {
        let h = smoothness_constraints(&single_triangle(), 2, 1).unwrap();
        assert_eq!(h.nrows(), 0);
    }

    #[test]
    fn square_d1_r0_has_two_constraints() {
        let h = smoothness_constraints(&square_mesh(), 1, 0).unwrap();
        assert_eq!(h.nrows(), 2);
    }

    #[test]
    fn r_not_below_d_is_rejected() {
        let err = smoothness_constraints(&square_mesh(), 2, 2).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn dimension_matches_rank_nullity() {
        let mesh = simulation_mesh();
        let h = smoothness_constraints(&mesh, 3, 1).unwrap();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let n_raw = mesh.triangles().len() * bernstein::dimension(3);
        assert_eq!(basis.n_basis(), n_raw - h.nrows());
    }

    #[test]
    fn construction_is_deterministic() {
        let mesh = simulation_mesh();
        let a = orthonormal_basis(&mesh, 3, 1).unwrap();
        let b = orthonormal_basis(&mesh, 3, 1).unwrap();
        assert_eq!(a.transform, b.transform);
    }

    #[test]
    fn gram_is_identity_by_quadrature() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        assert!(basis.gram_certified());
        let g = basis.gram_by_quadrature();
        let n = basis.n_basis();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let target = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((g[(r, c)] - target).abs());
            }
        }
        assert!(worst < 1e-8, "max Gram deviation {worst}");
    }

    #[test]
    fn smoothness_holds_for_random_members() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let edges: Vec<_> = mesh.shared_edges().collect();
        for _ in 0..10 {
            let theta =
                DVector::from_fn(basis.n_basis(), |_, _| rng.gen_range(-1.0..1.0));
            for &((w1, w2), [ta, tb]) in &edges {
                let a = mesh.vertices()[w1];
                let b = mesh.vertices()[w2];
                for s in 1..50 {
                    let s = s as f64 / 50.0;
                    let p = Point2::new(a.x + s * (b.x - a.x), a.y + s * (b.y - a.y));
                    let va = basis.eval_on_triangle(ta, p).dot(&theta);
                    let vb = basis.eval_on_triangle(tb, p).dot(&theta);
                    assert!((va - vb).abs() < 1e-9, "value jump {} at edge", va - vb);
                    // First derivatives by central differences inside each
                    // triangle's own polynomial.
                    let h = 1e-5;
                    for dir in [(1.0, 0.0), (0.0, 1.0)] {
                        let fd = |ti: usize| {
                            let plus = Point2::new(p.x + h * dir.0, p.y + h * dir.1);
                            let minus = Point2::new(p.x - h * dir.0, p.y - h * dir.1);
                            (basis.eval_on_triangle(ti, plus).dot(&theta)
                                - basis.eval_on_triangle(ti, minus).dot(&theta))
                                / (2.0 * h)
                        };
                        let da = fd(ta);
                        let db = fd(tb);
                        assert!(
                            (da - db).abs() < 1e-6,
                            "derivative jump {} across edge",
                            da - db
                        );
                        // Analytic derivatives agree far more tightly.
                        let ga = basis
                            .eval_directional_derivative_on_triangle(ta, p, dir)
                            .dot(&theta);
                        let gb = basis
                            .eval_directional_derivative_on_triangle(tb, p, dir)
                            .dot(&theta);
                        assert!((ga - gb).abs() < 1e-9);
                        assert!((ga - da).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn energy_annihilates_affine_functions() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let gamma = basis.energy_matrix().unwrap();
        for (a, b, c) in [(0.0, 0.0, 1.0), (2.0, -1.0, 0.0), (0.3, 0.7, -2.5)] {
            let raw = raw_interpolant(&mesh, 3, |x, y| a * x + b * y + c);
            let theta = basis.project_raw(&raw);
            let energy = (gamma.clone() * &theta).dot(&theta);
            assert!(energy.abs() < 1e-10, "affine energy {energy}");
        }
    }

    #[test]
    fn energy_of_x_squared_is_four_area() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let gamma = basis.energy_matrix().unwrap();
        let raw = raw_interpolant(&mesh, 3, |x, _| x * x);
        let theta = basis.project_raw(&raw);
        let energy = (gamma * &theta).dot(&theta);
        let expect = 4.0 * mesh.area();
        assert!(
            (energy - expect).abs() < 1e-8 * expect,
            "energy {energy} vs {expect}"
        );
    }

    #[test]
    fn energy_matrix_is_psd() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let gamma = basis.energy_matrix().unwrap();
        let eig = gamma.symmetric_eigenvalues();
        let scale = eig.amax();
        assert!(eig.min() > -1e-10 * scale.max(1.0), "min eigenvalue {}", eig.min());
    }

    #[test]
    fn energy_requires_degree_two() {
        let basis = orthonormal_basis(&square_mesh(), 1, 0).unwrap();
        assert!(matches!(basis.energy_matrix(), Err(Error::Argument(_))));
    }

    #[test]
    fn eval_design_rejects_hole_points() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let err = basis.eval_design(&[Point2::new(1.0, 1.0)]).unwrap_err();
        match err {
            Error::OutsideDomain { x, y } => {
                assert_eq!((x, y), (1.0, 1.0));
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn eval_design_row_is_bounded() {
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let b = basis.eval_design(&[Point2::new(0.21, 0.37)]).unwrap();
        // Coarse bound from the transform: |b_l(x)| <= max |B| * column norm1.
        let bound = basis
            .transform()
            .column_iter()
            .map(|c| c.amax())
            .fold(0.0f64, f64::max)
            * bernstein::dimension(3) as f64;
        for v in b.iter() {
            assert!(v.is_finite() && v.abs() <= bound);
        }
    }

    #[test]
    fn monte_carlo_gram_approaches_identity_over_area() {
        // Dense uniform sampling of (1/n) sum b b' should approach I / area.
        let mesh = simulation_mesh();
        let basis = orthonormal_basis(&mesh, 3, 1).unwrap();
        let n_b = basis.n_basis();
        let area = mesh.area();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut acc = DMatrix::<f64>::zeros(n_b, n_b);
        let mut count = 0usize;
        while count < 1_000_000 {
            let x = rng.gen_range(0.0..2.0);
            let y = rng.gen_range(0.0..2.0);
            if x > 0.5 && x < 1.5 && y > 0.5 && y < 1.5 {
                continue;
            }
            let p = Point2::new(x, y);
            if let Ok(v) = basis.eval_at(p) {
                acc.syger(1.0, &v, &v, 1.0);
                count += 1;
            }
        }
        acc.fill_upper_triangle_with_lower_triangle();
        acc /= count as f64;
        let mut worst = 0.0f64;
        for r in 0..n_b {
            for c in 0..n_b {
                let target = if r == c { 1.0 / area } else { 0.0 };
                worst = worst.max((acc[(r, c)] - target).abs());
            }
        }
        assert!(worst < 5e-2, "max deviation {worst}");
    }
}

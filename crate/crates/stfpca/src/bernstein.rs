//! Bernstein polynomials on a triangle: evaluation, directional derivatives,
//! exact product integrals, and a quadrature rule used to cross-check the
//! closed forms.

use nalgebra::{DMatrix, DVector};

use crate::mesh::Point2;

/// Number of Bernstein polynomials of degree `d` on a triangle.
pub fn dimension(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

/// Multi-indices (i, j, k) with i + j + k = d, ordered with i descending,
/// then j descending. This fixed ordering makes every construction in the
/// crate reproducible.
pub fn multi_indices(d: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(dimension(d));
    for i in (0..=d).rev() {
        for j in (0..=d - i).rev() {
            out.push((i, j, d - i - j));
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Evaluates all degree-`d` Bernstein polynomials at the barycentric triple
/// `(b1, b2, b3)`: `B_{ijk} = d!/(i! j! k!) b1^i b2^j b3^k`.
pub fn eval(d: usize, bary: (f64, f64, f64)) -> DVector<f64> {
    let (b1, b2, b3) = bary;
    let idx = multi_indices(d);
    let mut out = DVector::zeros(idx.len());
    let d_fact = factorial(d);
    for (row, &(i, j, k)) in idx.iter().enumerate() {
        let coef = d_fact / (factorial(i) * factorial(j) * factorial(k));
        out[row] = coef * b1.powi(i as i32) * b2.powi(j as i32) * b3.powi(k as i32);
    }
    out
}

/// Linear map from degree-`d` coefficients to the degree-`(d-1)` coefficients
/// of the directional derivative with barycentric direction coordinates `a`
/// (a1 + a2 + a3 = 0 for a genuine direction).
pub fn derivative_matrix(d: usize, a: [f64; 3]) -> DMatrix<f64> {
    assert!(d >= 1, "cannot differentiate a degree-0 expansion");
    let lo = multi_indices(d - 1);
    let hi = multi_indices(d);
    let pos: std::collections::BTreeMap<(usize, usize, usize), usize> =
        hi.iter().copied().zip(0..).collect();
    let mut m = DMatrix::zeros(lo.len(), hi.len());
    for (row, &(i, j, k)) in lo.iter().enumerate() {
        m[(row, pos[&(i + 1, j, k)])] += d as f64 * a[0];
        m[(row, pos[&(i, j + 1, k)])] += d as f64 * a[1];
        m[(row, pos[&(i, j, k + 1)])] += d as f64 * a[2];
    }
    m
}

/// Barycentric direction coordinates of the Cartesian unit directions for a
/// triangle with the given vertices; returns `(a_x, a_y)` where
/// `a_x[i] = d b_i / dx` and `a_y[i] = d b_i / dy`.
pub fn direction_coordinates(verts: [Point2; 3]) -> ([f64; 3], [f64; 3]) {
    let [v1, v2, v3] = verts;
    let twice_area = (v2.x - v1.x) * (v3.y - v1.y) - (v3.x - v1.x) * (v2.y - v1.y);
    let ax = [
        (v2.y - v3.y) / twice_area,
        (v3.y - v1.y) / twice_area,
        (v1.y - v2.y) / twice_area,
    ];
    let ay = [
        (v3.x - v2.x) / twice_area,
        (v1.x - v3.x) / twice_area,
        (v2.x - v1.x) / twice_area,
    ];
    (ax, ay)
}

/// Exact integral of `b1^p b2^q b3^r` over a triangle of area `area`:
/// `2 area p! q! r! / (p + q + r + 2)!`.
fn monomial_integral(p: usize, q: usize, r: usize, area: f64) -> f64 {
    2.0 * area * factorial(p) * factorial(q) * factorial(r) / factorial(p + q + r + 2)
}

/// Exact Gram matrix of the degree-`d` Bernstein polynomials on a triangle of
/// the given area.
pub fn product_integrals(d: usize, area: f64) -> DMatrix<f64> {
    let idx = multi_indices(d);
    let d_fact = factorial(d);
    let coef: Vec<f64> = idx
        .iter()
        .map(|&(i, j, k)| d_fact / (factorial(i) * factorial(j) * factorial(k)))
        .collect();
    let mut g = DMatrix::zeros(idx.len(), idx.len());
    for (r, &(i1, j1, k1)) in idx.iter().enumerate() {
        for (c, &(i2, j2, k2)) in idx.iter().enumerate().skip(r) {
            let val = coef[r] * coef[c] * monomial_integral(i1 + i2, j1 + j2, k1 + k2, area);
            g[(r, c)] = val;
            g[(c, r)] = val;
        }
    }
    g
}

/// Exact integral of each degree-`d` Bernstein polynomial over a triangle of
/// the given area; every entry equals `2 area / ((d+1)(d+2))`.
pub fn integrals(d: usize, area: f64) -> DVector<f64> {
    let value = 2.0 * area / ((d + 1) as f64 * (d + 2) as f64);
    DVector::from_element(dimension(d), value)
}

/// A quadrature rule on the reference triangle in barycentric form. The
/// weights sum to one, so `integral = area * sum_q w_q f(node_q)`.
#[derive(Debug, Clone)]
pub struct TriangleQuadrature {
    pub nodes: Vec<(f64, f64, f64)>,
    pub weights: Vec<f64>,
}

impl TriangleQuadrature {
    /// Gauss-Legendre rule pushed onto the triangle through the collapsed
    /// square map and symmetrized over all six vertex orderings. Exact for
    /// polynomials of total degree `2 n - 2` at least; `n` points per axis.
    pub fn with_points(n: usize) -> Self {
        let (gx, gw) = gauss_legendre_01(n);
        let mut raw_nodes = Vec::with_capacity(n * n);
        let mut raw_weights = Vec::with_capacity(n * n);
        for (i, &u) in gx.iter().enumerate() {
            for (j, &v) in gx.iter().enumerate() {
                // xi = u, eta = v (1 - u); Jacobian (1 - u); reference area 1/2.
                let xi = u;
                let eta = v * (1.0 - u);
                raw_nodes.push((1.0 - xi - eta, xi, eta));
                raw_weights.push(gw[i] * gw[j] * (1.0 - u) * 2.0);
            }
        }
        // Average over the six permutations of the barycentric coordinates.
        let perms: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut nodes = Vec::with_capacity(6 * raw_nodes.len());
        let mut weights = Vec::with_capacity(6 * raw_nodes.len());
        for perm in perms {
            for (q, &(b1, b2, b3)) in raw_nodes.iter().enumerate() {
                let b = [b1, b2, b3];
                nodes.push((b[perm[0]], b[perm[1]], b[perm[2]]));
                weights.push(raw_weights[q] / 6.0);
            }
        }
        TriangleQuadrature { nodes, weights }
    }

    /// Rule adequate for products of two degree-`d` polynomials.
    pub fn for_degree(d: usize) -> Self {
        Self::with_points(d + 2)
    }

    /// Integrates `f` (given barycentric coordinates) over a triangle of the
    /// given area.
    pub fn integrate(&self, area: f64, mut f: impl FnMut((f64, f64, f64)) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&node, &w)| w * f(node))
            .sum::<f64>()
            * area
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on Legendre polynomials over [-1, 1], then mapped.
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes.push(0.5 * (1.0 - x)); // map and reverse so nodes ascend
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Legendre polynomial P_n and its derivative at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

//! Triangulated planar domains.
//!
//! A [`Triangulation`] is a list of vertices plus counter-clockwise triangles
//! covering an irregular region (holes are simply absent from the triangle
//! list). It is the geometric backbone for the bivariate spline bases.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Barycentric tolerance used by [`Triangulation::locate`].
pub const LOCATE_EPS: f64 = 1e-12;

/// A point in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }
}

/// Three vertex indices, stored in counter-clockwise order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triangle {
    pub v: [usize; 3],
}

/// Twice the signed area of the triangle (a, b, c); positive when
/// counter-clockwise.
fn cross2(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)
}

/// Barycentric coordinates of `p` with respect to the triangle with the given
/// vertices. The coordinates sum to one up to rounding; a point outside the
/// triangle has at least one negative coordinate.
pub fn barycentric(verts: [Point2; 3], p: Point2) -> Result<(f64, f64, f64)> {
    let denom = cross2(verts[0], verts[1], verts[2]);
    if denom.abs() < f64::MIN_POSITIVE || !denom.is_finite() {
        return Err(Error::Geometry("degenerate triangle in barycentric".into()));
    }
    let b1 = cross2(p, verts[1], verts[2]) / denom;
    let b2 = cross2(verts[0], p, verts[2]) / denom;
    Ok((b1, b2, 1.0 - b1 - b2))
}

/// A validated triangulation of a planar domain.
#[derive(Debug, Clone)]
pub struct Triangulation {
    vertices: Vec<Point2>,
    triangles: Vec<Triangle>,
    /// Undirected edge (lo, hi) -> indices of the (at most two) triangles
    /// sharing it.
    edge_adjacency: BTreeMap<(usize, usize), Vec<usize>>,
}

impl Triangulation {
    /// Builds and validates a triangulation. Triangles given in clockwise
    /// order are flipped to counter-clockwise.
    pub fn new(vertices: Vec<Point2>, mut triangles: Vec<Triangle>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::Geometry("empty triangulation".into()));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.x.is_finite() || !v.y.is_finite() {
                return Err(Error::Geometry(format!("non-finite vertex {i}")));
            }
        }
        let (min_x, max_x) = min_max(vertices.iter().map(|v| v.x));
        let (min_y, max_y) = min_max(vertices.iter().map(|v| v.y));
        let diam2 = (max_x - min_x).powi(2) + (max_y - min_y).powi(2);
        let area_floor = 1e-12 * diam2.max(f64::MIN_POSITIVE);

        for (ti, tri) in triangles.iter_mut().enumerate() {
            let [a, b, c] = tri.v;
            if a == b || b == c || a == c {
                return Err(Error::Geometry(format!("triangle {ti} repeats a vertex")));
            }
            if a >= vertices.len() || b >= vertices.len() || c >= vertices.len() {
                return Err(Error::Geometry(format!("triangle {ti} references a missing vertex")));
            }
            let twice = cross2(vertices[a], vertices[b], vertices[c]);
            if twice < 0.0 {
                tri.v.swap(1, 2);
            }
            if twice.abs() * 0.5 < area_floor {
                return Err(Error::Geometry(format!(
                    "triangle {ti} is degenerate (area {} below threshold {area_floor})",
                    twice.abs() * 0.5
                )));
            }
        }

        let mut edge_adjacency: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (ti, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                let a = tri.v[e];
                let b = tri.v[(e + 1) % 3];
                edge_adjacency.entry(key(a, b)).or_default().push(ti);
            }
        }
        for (&(a, b), tris) in &edge_adjacency {
            if tris.len() > 2 {
                return Err(Error::Geometry(format!(
                    "edge ({a}, {b}) is shared by {} triangles",
                    tris.len()
                )));
            }
            if tris.len() == 2 {
                // Consistent orientation: the shared edge must be traversed in
                // opposite directions by the two triangles.
                let d0 = directed(&triangles[tris[0]], a, b);
                let d1 = directed(&triangles[tris[1]], a, b);
                if d0 == d1 {
                    return Err(Error::Geometry(format!(
                        "edge ({a}, {b}) has inconsistent orientation between triangles {} and {}",
                        tris[0], tris[1]
                    )));
                }
            }
        }

        let mesh = Triangulation { vertices, triangles, edge_adjacency };
        mesh.check_connected()?;
        mesh.check_overlap()?;
        Ok(mesh)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.triangles.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut by_vertex: BTreeMap<usize, usize> = BTreeMap::new();
        for (ti, tri) in self.triangles.iter().enumerate() {
            for &v in &tri.v {
                if let Some(&other) = by_vertex.get(&v) {
                    let (a, b) = (find(&mut parent, ti), find(&mut parent, other));
                    parent[a] = b;
                } else {
                    by_vertex.insert(v, ti);
                }
            }
        }
        let root = find(&mut parent, 0);
        for i in 1..n {
            if find(&mut parent, i) != root {
                return Err(Error::Geometry("triangulation is not connected".into()));
            }
        }
        Ok(())
    }

    /// Cheap overlap screen: the centroid of each triangle must not lie
    /// strictly inside any other triangle.
    fn check_overlap(&self) -> Result<()> {
        for (ti, tri) in self.triangles.iter().enumerate() {
            let c = self.centroid(tri);
            for (tj, other) in self.triangles.iter().enumerate() {
                if ti == tj {
                    continue;
                }
                let (b1, b2, b3) = barycentric(self.triangle_vertices(other), c)?;
                if b1 > LOCATE_EPS && b2 > LOCATE_EPS && b3 > LOCATE_EPS {
                    return Err(Error::Geometry(format!(
                        "triangles {ti} and {tj} overlap"
                    )));
                }
            }
        }
        Ok(())
    }

    fn centroid(&self, tri: &Triangle) -> Point2 {
        let [a, b, c] = tri.v;
        Point2::new(
            (self.vertices[a].x + self.vertices[b].x + self.vertices[c].x) / 3.0,
            (self.vertices[a].y + self.vertices[b].y + self.vertices[c].y) / 3.0,
        )
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn triangle_vertices(&self, tri: &Triangle) -> [Point2; 3] {
        [self.vertices[tri.v[0]], self.vertices[tri.v[1]], self.vertices[tri.v[2]]]
    }

    /// Area of triangle `ti`.
    pub fn triangle_area(&self, ti: usize) -> f64 {
        let [a, b, c] = self.triangles[ti].v;
        0.5 * cross2(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    /// Total area of the domain.
    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|ti| self.triangle_area(ti)).sum()
    }

    /// Barycentric coordinates of `p` with respect to triangle `ti`.
    pub fn barycentric(&self, ti: usize, p: Point2) -> Result<(f64, f64, f64)> {
        barycentric(self.triangle_vertices(&self.triangles[ti]), p)
    }

    /// Index of a triangle containing `p` (all barycentric coordinates
    /// >= -1e-12), or `None` when `p` is outside the domain. Points on shared
    /// edges resolve to the lowest triangle index.
    pub fn locate(&self, p: Point2) -> Option<usize> {
        for ti in 0..self.triangles.len() {
            if let Ok((b1, b2, b3)) = self.barycentric(ti, p) {
                if b1 >= -LOCATE_EPS && b2 >= -LOCATE_EPS && b3 >= -LOCATE_EPS {
                    return Some(ti);
                }
            }
        }
        None
    }

    /// Interior edges together with the pair of triangles sharing them.
    pub fn shared_edges(&self) -> impl Iterator<Item = ((usize, usize), [usize; 2])> + '_ {
        self.edge_adjacency.iter().filter_map(|(&edge, tris)| {
            (tris.len() == 2).then(|| (edge, [tris[0], tris[1]]))
        })
    }

    pub fn edge_adjacency(&self) -> &BTreeMap<(usize, usize), Vec<usize>> {
        &self.edge_adjacency
    }

    /// Reads the plain-text format: a header `V T`, then `V` lines `x y`,
    /// then `T` lines `i j k` with 0-based vertex indices.
    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty mesh file".into() })?;
        let mut it = header.split_whitespace();
        let nv: usize = parse_field(it.next(), line_no + 1, "vertex count")?;
        let nt: usize = parse_field(it.next(), line_no + 1, "triangle count")?;

        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| Error::Parse { line: nv + 1, msg: "missing vertex line".into() })?;
            let mut f = row.split_whitespace();
            let x: f64 = parse_field(f.next(), ln + 1, "x")?;
            let y: f64 = parse_field(f.next(), ln + 1, "y")?;
            vertices.push(Point2::new(x, y));
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, row) = lines.next().ok_or_else(|| Error::Parse {
                line: nv + nt + 1,
                msg: "missing triangle line".into(),
            })?;
            let mut f = row.split_whitespace();
            let a: usize = parse_field(f.next(), ln + 1, "i")?;
            let b: usize = parse_field(f.next(), ln + 1, "j")?;
            let c: usize = parse_field(f.next(), ln + 1, "k")?;
            triangles.push(Triangle { v: [a, b, c] });
        }
        Self::new(vertices, triangles)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.vertices.len(), self.triangles.len()));
        for v in &self.vertices {
            out.push_str(&format!("{} {}\n", v.x, v.y));
        }
        for t in &self.triangles {
            out.push_str(&format!("{} {} {}\n", t.v[0], t.v[1], t.v[2]));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Whether the triangle traverses the edge as a -> b (rather than b -> a).
fn directed(tri: &Triangle, a: usize, b: usize) -> bool {
    for e in 0..3 {
        if tri.v[e] == a && tri.v[(e + 1) % 3] == b {
            return true;
        }
    }
    false
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, line: usize, what: &str) -> Result<T> {
    s.ok_or_else(|| Error::Parse { line, msg: format!("missing {what}") })?
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad {what}") })
}

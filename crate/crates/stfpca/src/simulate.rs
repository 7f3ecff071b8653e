//! Synthetic data generation on the square-with-hole benchmark domain, the
//! closed-form truth functions, and the evaluation grid.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ar;
use crate::error::{Error, Result};
use crate::mesh::{Point2, Triangle, Triangulation};
use crate::panel::{RawPanel, RawTimeSlice};

/// The benchmark domain: a 2 x 2 square with a centered 1 x 1 hole,
/// triangulated on a half-unit grid (24 vertices, 24 triangles). The hole is
/// simply absent from the triangle list.
pub fn simulation_mesh() -> Triangulation {
    let step = 0.5;
    let mut vertices = Vec::new();
    let mut index = vec![[usize::MAX; 5]; 5];
    for gy in 0..5 {
        for gx in 0..5 {
            // Skip the single grid vertex strictly inside the hole.
            if gx == 2 && gy == 2 {
                continue;
            }
            index[gy][gx] = vertices.len();
            vertices.push(Point2::new(gx as f64 * step, gy as f64 * step));
        }
    }
    let mut triangles = Vec::new();
    for cy in 0..4 {
        for cx in 0..4 {
            let in_hole = (1..=2).contains(&cx) && (1..=2).contains(&cy);
            if in_hole {
                continue;
            }
            let v00 = index[cy][cx];
            let v10 = index[cy][cx + 1];
            let v01 = index[cy + 1][cx];
            let v11 = index[cy + 1][cx + 1];
            triangles.push(Triangle { v: [v00, v10, v11] });
            triangles.push(Triangle { v: [v00, v11, v01] });
        }
    }
    Triangulation::new(vertices, triangles).expect("benchmark mesh is valid")
}

/// Whether a point lies strictly inside the hole of the benchmark domain.
fn in_hole(x: f64, y: f64) -> bool {
    x > 0.5 && x < 1.5 && y > 0.5 && y < 1.5
}

/// Evaluation grid used by the error metrics: points with an attached domain
/// area so sums approximate integrals as `area / len * sum`.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub points: Vec<Point2>,
    pub area: f64,
}

impl EvalGrid {
    /// The 51 x 51 grid over the square with the 625 strict-interior hole
    /// points removed, leaving 1976 points; domain area 3.
    pub fn standard_sim() -> Self {
        let mut points = Vec::new();
        for iy in 0..51 {
            for ix in 0..51 {
                let x = ix as f64 * 2.0 / 50.0;
                let y = iy as f64 * 2.0 / 50.0;
                if !in_hole(x, y) {
                    points.push(Point2::new(x, y));
                }
            }
        }
        assert_eq!(points.len(), 1976);
        EvalGrid { points, area: 3.0 }
    }

    /// Evenly spaced grid over a mesh's bounding box, keeping only points
    /// inside the domain.
    pub fn from_mesh(mesh: &Triangulation, nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Argument("grid needs at least 2 points per axis".into()));
        }
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in mesh.vertices() {
            min_x = min_x.min(v.x);
            max_x = max_x.max(v.x);
            min_y = min_y.min(v.y);
            max_y = max_y.max(v.y);
        }
        let mut points = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let p = Point2::new(
                    min_x + ix as f64 * (max_x - min_x) / (nx - 1) as f64,
                    min_y + iy as f64 * (max_y - min_y) / (ny - 1) as f64,
                );
                if mesh.locate(p).is_some() {
                    points.push(p);
                }
            }
        }
        if points.is_empty() {
            return Err(Error::Argument("grid contains no domain points".into()));
        }
        Ok(EvalGrid { points, area: mesh.area() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Closed-form mean and principal component surfaces of the benchmark.
#[derive(Debug, Clone, Copy)]
pub struct TruthFunctions {
    pub varying_mean: bool,
}

impl TruthFunctions {
    pub fn mu1(x: f64, y: f64) -> f64 {
        let s = (0.1 * x * x + 0.2 * y).sqrt();
        5.0 * (s.exp() + (-s).exp())
    }

    pub fn mu2(&self, t: f64, n: usize) -> f64 {
        if self.varying_mean {
            (2.0 * std::f64::consts::PI * t / 12.0).cos() + t / n as f64
        } else {
            1.0
        }
    }

    pub fn phi1(x: f64, y: f64) -> f64 {
        0.8578 * (x * x + 0.5 * y * y).sin()
    }

    pub fn phi2(x: f64, y: f64) -> f64 {
        0.8721 * (0.3 * x * x + 0.6 * y * y).sin() - 0.2988 * (x * x + 0.5 * y * y).sin()
    }
}

/// Benchmark configuration identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetupId {
    I,
    Ii,
    Iii,
    Iv,
}

impl SetupId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(SetupId::I),
            "ii" | "2" => Ok(SetupId::Ii),
            "iii" | "3" => Ok(SetupId::Iii),
            "iv" | "4" => Ok(SetupId::Iv),
            other => Err(Error::Argument(format!("unknown setup `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SetupId::I => "i",
            SetupId::Ii => "ii",
            SetupId::Iii => "iii",
            SetupId::Iv => "iv",
        }
    }

    /// Time-varying mean in setups i and ii; constant mean otherwise.
    pub fn varying_mean(&self) -> bool {
        matches!(self, SetupId::I | SetupId::Ii)
    }

    /// AR(2) coefficients shared by both score series.
    pub fn ar_coefficients(&self) -> [f64; 2] {
        match self {
            SetupId::I | SetupId::Iii => [0.8, 0.1],
            SetupId::Ii | SetupId::Iv => [0.0, 0.0],
        }
    }
}

/// Noise scale: `High` is sigma^2 = 1 with score variances (1, 0.1); `Low`
/// is sigma^2 = 0.1 with (0.1, 0.01).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceLevel {
    High,
    Low,
}

impl VarianceLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" | "1" | "1.0" => Ok(VarianceLevel::High),
            "low" | "0.1" => Ok(VarianceLevel::Low),
            other => Err(Error::Argument(format!("unknown variance level `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VarianceLevel::High => "high",
            VarianceLevel::Low => "low",
        }
    }

    pub fn sigma2(&self) -> f64 {
        match self {
            VarianceLevel::High => 1.0,
            VarianceLevel::Low => 0.1,
        }
    }

    pub fn score_variances(&self) -> [f64; 2] {
        match self {
            VarianceLevel::High => [1.0, 0.1],
            VarianceLevel::Low => [0.1, 0.01],
        }
    }
}

/// One benchmark cell.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub id: SetupId,
    pub variance: VarianceLevel,
    pub n_times: usize,
    /// Inclusive range for the per-time number of sampled locations.
    pub locations_per_time: (usize, usize),
    pub seed: u64,
}

impl SimSetup {
    pub fn new(id: SetupId, variance: VarianceLevel, seed: u64) -> Self {
        SimSetup { id, variance, n_times: 500, locations_per_time: (50, 60), seed }
    }
}

/// Output of the generator.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub panel: RawPanel,
    /// True noiseless surfaces on `grid`, one per time point.
    pub truth_surfaces: Vec<DVector<f64>>,
    /// True mean surfaces on `grid`, one per time point.
    pub truth_means: Vec<DVector<f64>>,
    /// Simulated scores, `n_times x 2`.
    pub scores: DMatrix<f64>,
    pub grid: EvalGrid,
}

/// Number of pre-sample AR steps discarded so recorded scores start from the
/// stationary distribution.
pub const SCORE_BURN_IN: usize = 500;

/// Draws a panel from the benchmark model: stationary AR(2) scores, uniform
/// locations on the square-with-hole via rejection sampling, and white
/// observation noise.
pub fn generate(setup: &SimSetup) -> Result<SimulatedData> {
    let truth = TruthFunctions { varying_mean: setup.id.varying_mean() };
    let k = setup.id.ar_coefficients();
    let sigma2 = setup.variance.sigma2();
    let score_var = setup.variance.score_variances();
    let n = setup.n_times;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);

    let mut scores = DMatrix::zeros(n, 2);
    for j in 0..2 {
        let series = ar::simulate(&k, score_var[j], n, SCORE_BURN_IN, &mut rng)?;
        for t in 0..n {
            scores[(t, j)] = series[t];
        }
    }

    let grid = EvalGrid::standard_sim();
    let mu1_grid: Vec<f64> =
        grid.points.iter().map(|p| TruthFunctions::mu1(p.x, p.y)).collect();
    let phi_grid: Vec<(f64, f64)> = grid
        .points
        .iter()
        .map(|p| (TruthFunctions::phi1(p.x, p.y), TruthFunctions::phi2(p.x, p.y)))
        .collect();

    let (lo, hi) = setup.locations_per_time;
    let mut panel = RawPanel { times: Vec::with_capacity(n) };
    let mut truth_surfaces = Vec::with_capacity(n);
    let mut truth_means = Vec::with_capacity(n);
    for t in 0..n {
        let t1 = (t + 1) as f64;
        let mu2 = truth.mu2(t1, n);
        let mean_t = DVector::from_iterator(grid.len(), mu1_grid.iter().map(|&m| m * mu2));
        let mut surface = mean_t.clone();
        for (g, &(p1, p2)) in phi_grid.iter().enumerate() {
            surface[g] += scores[(t, 0)] * p1 + scores[(t, 1)] * p2;
        }
        truth_means.push(mean_t);
        truth_surfaces.push(surface);

        let count = rng.gen_range(lo..=hi);
        let mut locations = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        while locations.len() < count {
            let x = rng.gen_range(0.0..2.0);
            let y = rng.gen_range(0.0..2.0);
            if in_hole(x, y) {
                continue;
            }
            let signal = TruthFunctions::mu1(x, y) * mu2
                + scores[(t, 0)] * TruthFunctions::phi1(x, y)
                + scores[(t, 1)] * TruthFunctions::phi2(x, y);
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * sigma2.sqrt();
            locations.push(Point2::new(x, y));
            values.push(signal + noise);
        }
        panel.times.push(RawTimeSlice { locations, values });
    }

    Ok(SimulatedData { panel, truth_surfaces, truth_means, scores, grid })
}

/// Which estimators a study run compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Serially correlated fit (AR scores estimated).
    Sfpc,
    /// Serially independent baseline: AR coefficients frozen at zero,
    /// constant-in-time mean, two-step mean removal when the true mean
    /// varies.
    Mfpc,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Sfpc => "sfpc",
            Method::Mfpc => "mfpc",
        }
    }
}

/// Study-wide fit options.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub penalties: crate::model::Penalties,
    pub tol: f64,
    pub max_iter: usize,
    /// Override of the per-cell time count (None keeps the benchmark 500).
    pub n_times: Option<usize>,
    pub methods: Vec<Method>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            penalties: crate::model::Penalties {
                mean_spatial: 1e-3,
                mean_temporal: 1e-3,
                pc: 1.0,
            },
            tol: 1e-6,
            max_iter: 200,
            n_times: None,
            methods: vec![Method::Sfpc, Method::Mfpc],
        }
    }
}

/// One aggregated table cell.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub setup: SetupId,
    pub variance: VarianceLevel,
    pub method: Method,
    pub metric: &'static str,
    pub mean: f64,
    pub se: f64,
    pub runs_completed: usize,
}

/// Aggregated study results plus per-run metric values.
#[derive(Debug, Clone, Default)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    /// (setup, variance, method, metric) -> per-run values, in run order.
    pub per_run: Vec<((SetupId, VarianceLevel, Method, &'static str), Vec<f64>)>,
    pub failures: usize,
}

impl StudyTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("setup,variance_level,method,metric,mean,se,runs_completed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.setup.label(),
                r.variance.label(),
                r.method.label(),
                r.metric,
                r.mean,
                r.se,
                r.runs_completed
            ));
        }
        out
    }

    pub fn cell(&self, setup: SetupId, variance: VarianceLevel, method: Method, metric: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| {
            r.setup == setup && r.variance == variance && r.method == method && r.metric == metric
        })
    }
}

/// Metric values from one estimator on one replicate.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub principal_angle: f64,
    pub miae_mean: f64,
    pub miae_surface: f64,
}

/// Runs the simulation comparison: generates `runs` replicates per cell and
/// fits the requested estimators, reporting per-metric means and standard
/// errors. Replicates run in parallel with per-run seeds derived from
/// `master_seed`; failed replicates are dropped and counted.
pub fn run_study(
    cells: &[(SetupId, VarianceLevel)],
    runs: usize,
    master_seed: u64,
    options: &StudyOptions,
) -> Result<StudyTable> {
    use crate::basis2d::orthonormal_basis;
    use crate::temporal::{build_temporal_basis, TemporalBasisSpec};

    let mesh = simulation_mesh();
    let basis = std::sync::Arc::new(orthonormal_basis(&mesh, 3, 1)?);
    let grid = EvalGrid::standard_sim();
    let b_grid = basis.eval_design(&grid.points)?;
    let truth_matrix = nalgebra::DMatrix::from_fn(grid.len(), 2, |g, c| {
        let p = grid.points[g];
        if c == 0 {
            TruthFunctions::phi1(p.x, p.y)
        } else {
            TruthFunctions::phi2(p.x, p.y)
        }
    });

    let mut table = StudyTable::default();
    for (cell_idx, &(setup_id, variance)) in cells.iter().enumerate() {
        let n_times = options.n_times.unwrap_or(500);
        let temporal = std::sync::Arc::new(build_temporal_basis(
            &TemporalBasisSpec::cubic_plus_fourier(),
            n_times,
        )?);
        let mfpc_temporal = std::sync::Arc::new(build_temporal_basis(
            &TemporalBasisSpec::constant(),
            n_times,
        )?);

        let results: Vec<Result<Vec<(Method, RunMetrics)>>> =
            crate::parallel::map_indexed(runs, |run| {
                let seed =
                    crate::rng::derive_seed(master_seed, (cell_idx * runs + run) as u64);
                let mut setup = SimSetup::new(setup_id, variance, seed);
                setup.n_times = n_times;
                let data = generate(&setup)?;
                let mut out = Vec::new();
                for &method in &options.methods {
                    let metrics = match method {
                        Method::Sfpc => fit_sfpc_run(
                            &data, &basis, &temporal, &b_grid, &truth_matrix, &grid, options,
                        )?,
                        Method::Mfpc => fit_mfpc_run(
                            &data,
                            &basis,
                            &temporal,
                            &mfpc_temporal,
                            &b_grid,
                            &truth_matrix,
                            &grid,
                            options,
                            setup_id.varying_mean(),
                        )?,
                    };
                    out.push((method, metrics));
                }
                Ok(out)
            });

        for &method in &options.methods {
            let mut pa = Vec::new();
            let mut m_mu = Vec::new();
            let mut m_z = Vec::new();
            for r in &results {
                if let Ok(list) = r {
                    if let Some((_, m)) = list.iter().find(|(mm, _)| *mm == method) {
                        pa.push(m.principal_angle);
                        m_mu.push(m.miae_mean);
                        m_z.push(m.miae_surface);
                    }
                }
            }
            for (metric, values) in
                [("pa", &pa), ("miae_mu", &m_mu), ("miae_z", &m_z)]
            {
                let (mean, se) = mean_se(values);
                table.rows.push(StudyRow {
                    setup: setup_id,
                    variance,
                    method,
                    metric,
                    mean,
                    se,
                    runs_completed: values.len(),
                });
                table
                    .per_run
                    .push(((setup_id, variance, method, metric), values.clone()));
            }
        }
        table.failures += results.iter().filter(|r| r.is_err()).count();
    }
    Ok(table)
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[allow(clippy::too_many_arguments)]
fn fit_sfpc_run(
    data: &SimulatedData,
    basis: &std::sync::Arc<crate::basis2d::BivariateBasis>,
    temporal: &std::sync::Arc<crate::temporal::TemporalBasis>,
    b_grid: &nalgebra::DMatrix<f64>,
    truth_matrix: &nalgebra::DMatrix<f64>,
    grid: &EvalGrid,
    options: &StudyOptions,
) -> Result<RunMetrics> {
    use crate::model::FitConfig;
    let panel = crate::panel::ObservationPanel::build(&data.panel, basis, temporal)?;
    let mut config = FitConfig::new(2, 2).with_penalties(options.penalties);
    config.tol = options.tol;
    config.max_iter = options.max_iter;
    let model = crate::em::fit(&panel, basis.clone(), temporal.clone(), config)?;

    let est_components = b_grid * &model.params.loadings;
    let principal_angle = crate::metrics::principal_angle(&est_components, truth_matrix)?;

    let n = panel.n_times();
    let mu_dir = b_grid * &model.params.theta_b;
    let mut est_means = Vec::with_capacity(n);
    let mut est_surfaces = Vec::with_capacity(n);
    for t in 0..n {
        let scale = model.params.theta_c.dot(&temporal.eval((t + 1) as f64));
        let mean = &mu_dir * scale;
        let surface = &mean + &est_components * &model.moments.alpha[t];
        est_means.push(mean);
        est_surfaces.push(surface);
    }
    let miae_mean = crate::metrics::miae(&est_means, &data.truth_means, grid)?;
    let miae_surface = crate::metrics::miae(&est_surfaces, &data.truth_surfaces, grid)?;
    Ok(RunMetrics { principal_angle, miae_mean, miae_surface })
}

#[allow(clippy::too_many_arguments)]
fn fit_mfpc_run(
    data: &SimulatedData,
    basis: &std::sync::Arc<crate::basis2d::BivariateBasis>,
    temporal: &std::sync::Arc<crate::temporal::TemporalBasis>,
    mfpc_temporal: &std::sync::Arc<crate::temporal::TemporalBasis>,
    b_grid: &nalgebra::DMatrix<f64>,
    truth_matrix: &nalgebra::DMatrix<f64>,
    grid: &EvalGrid,
    options: &StudyOptions,
    two_step_mean: bool,
) -> Result<RunMetrics> {
    use crate::model::FitConfig;
    use nalgebra::{DMatrix, DVector};

    let n = data.panel.n_times();
    // Two-step mean removal when the true mean varies with time: first an
    // overall time effect from the temporal basis alone, then a spatial
    // amplitude for it.
    let (mean_grid_parts, residual_panel): (Vec<DVector<f64>>, crate::panel::RawPanel) =
        if two_step_mean {
            let panel = crate::panel::ObservationPanel::build(&data.panel, basis, temporal)?;
            let n_c = temporal.n_basis();
            let mut a = DMatrix::zeros(n_c, n_c);
            let mut rhs = DVector::zeros(n_c);
            for slice in panel.slices() {
                if slice.n_obs() == 0 {
                    continue;
                }
                a.syger(slice.n_obs() as f64, &slice.c, &slice.c, 1.0);
                rhs += &slice.c * slice.z.sum();
            }
            a.fill_upper_triangle_with_lower_triangle();
            for i in 0..n_c {
                a[(i, i)] += 1e-8;
            }
            let gamma_t = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Conditioning("time-effect regression".into()))?;
            let nu: Vec<f64> =
                (0..n).map(|t| gamma_t.dot(&temporal.eval((t + 1) as f64))).collect();

            let n_b = basis.n_basis();
            let mut a2 = DMatrix::zeros(n_b, n_b);
            let mut rhs2 = DVector::zeros(n_b);
            for (t, slice) in panel.slices().iter().enumerate() {
                if slice.n_obs() == 0 {
                    continue;
                }
                a2.zip_apply(&slice.btb, |a, b| *a += nu[t] * nu[t] * b);
                rhs2 += slice.b.transpose() * &slice.z * nu[t];
            }
            for i in 0..n_b {
                a2[(i, i)] += 1e-8;
            }
            let theta = a2
                .lu()
                .solve(&rhs2)
                .ok_or_else(|| Error::Conditioning("amplitude regression".into()))?;

            let mut residual = data.panel.clone();
            for (t, slice_raw) in residual.times.iter_mut().enumerate() {
                let slice = panel.slice(t);
                let fitted = &slice.b * &theta * nu[t];
                for (i, v) in slice_raw.values.iter_mut().enumerate() {
                    *v -= fitted[i];
                }
            }
            let mu_grid_dir = b_grid * &theta;
            let parts: Vec<DVector<f64>> =
                (0..n).map(|t| &mu_grid_dir * nu[t]).collect();
            (parts, residual)
        } else {
            (
                (0..n).map(|_| DVector::zeros(grid.len())).collect(),
                data.panel.clone(),
            )
        };

    let panel = crate::panel::ObservationPanel::build(&residual_panel, basis, mfpc_temporal)?;
    let mut config = FitConfig::new(2, 1).with_penalties(options.penalties);
    config.tol = options.tol;
    config.max_iter = options.max_iter;
    config.freeze_ar = true;
    let model = crate::em::fit(&panel, basis.clone(), mfpc_temporal.clone(), config)?;

    let est_components = b_grid * &model.params.loadings;
    let principal_angle = crate::metrics::principal_angle(&est_components, truth_matrix)?;

    let mu_dir = b_grid * &model.params.theta_b;
    let mut est_means = Vec::with_capacity(n);
    let mut est_surfaces = Vec::with_capacity(n);
    for t in 0..n {
        let scale = model.params.theta_c.dot(&mfpc_temporal.eval((t + 1) as f64));
        let mean = &mean_grid_parts[t] + &mu_dir * scale;
        let surface = &mean + &est_components * &model.moments.alpha[t];
        est_means.push(mean);
        est_surfaces.push(surface);
    }
    let miae_mean = crate::metrics::miae(&est_means, &data.truth_means, grid)?;
    let miae_surface = crate::metrics::miae(&est_surfaces, &data.truth_surfaces, grid)?;
    Ok(RunMetrics { principal_angle, miae_mean, miae_surface })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_covers_three_square_units() {
        let mesh = simulation_mesh();
        assert_eq!(mesh.triangles().len(), 24);
        assert!((mesh.area() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn standard_grid_has_expected_count() {
        let grid = EvalGrid::standard_sim();
        assert_eq!(grid.len(), 1976);
        assert_eq!(grid.area, 3.0);
    }

    #[test]
    fn truth_functions_are_near_orthonormal_on_domain() {
        // Monte-Carlo moments cross-checked against an exact quadrature of
        // the same closed forms over the mesh triangles; this pins the
        // transcription of the formulas. The published constants make phi1
        // unit norm to 1e-3; phi2's norm comes out near 0.975 with a small
        // residual inner product, so only near-orthonormality is asserted.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut n11 = 0.0;
        let mut n22 = 0.0;
        let mut n12 = 0.0;
        let samples = 1_000_000usize;
        let mut kept = 0usize;
        while kept < samples {
            let x = rng.gen_range(0.0..2.0);
            let y = rng.gen_range(0.0..2.0);
            if in_hole(x, y) {
                continue;
            }
            let p1 = TruthFunctions::phi1(x, y);
            let p2 = TruthFunctions::phi2(x, y);
            n11 += p1 * p1;
            n22 += p2 * p2;
            n12 += p1 * p2;
            kept += 1;
        }
        let area = 3.0;
        let scale = area / samples as f64;
        let mc = [n11 * scale, n22 * scale, n12 * scale];

        let mesh = simulation_mesh();
        let quad = crate::bernstein::TriangleQuadrature::with_points(12);
        let mut exact = [0.0f64; 3];
        for ti in 0..mesh.triangles().len() {
            let verts = mesh.triangle_vertices(&mesh.triangles()[ti]);
            let at = |b: (f64, f64, f64), f: &dyn Fn(f64, f64) -> f64| {
                let x = b.0 * verts[0].x + b.1 * verts[1].x + b.2 * verts[2].x;
                let y = b.0 * verts[0].y + b.1 * verts[1].y + b.2 * verts[2].y;
                f(x, y)
            };
            let area_t = mesh.triangle_area(ti);
            exact[0] += quad.integrate(area_t, |b| at(b, &TruthFunctions::phi1).powi(2));
            exact[1] += quad.integrate(area_t, |b| at(b, &TruthFunctions::phi2).powi(2));
            exact[2] += quad.integrate(area_t, |b| {
                at(b, &TruthFunctions::phi1) * at(b, &TruthFunctions::phi2)
            });
        }
        for i in 0..3 {
            assert!(
                (mc[i] - exact[i]).abs() < 1e-2,
                "moment {i}: MC {} vs quadrature {}",
                mc[i],
                exact[i]
            );
        }
        assert!((exact[0] - 1.0).abs() < 1e-2, "norm phi1 {}", exact[0]);
        assert!((exact[1] - 1.0).abs() < 3e-2, "norm phi2 {}", exact[1]);
        assert!(exact[2].abs() < 4e-2, "inner product {}", exact[2]);
    }

    #[test]
    fn generator_is_deterministic() {
        let mut setup = SimSetup::new(SetupId::I, VarianceLevel::High, 42);
        setup.n_times = 20;
        let a = generate(&setup).unwrap();
        let b = generate(&setup).unwrap();
        assert_eq!(a.scores, b.scores);
        for (sa, sb) in a.panel.times.iter().zip(&b.panel.times) {
            assert_eq!(sa.values, sb.values);
            assert_eq!(sa.locations, sb.locations);
        }
    }

    #[test]
    fn all_locations_avoid_the_hole() {
        let mut setup = SimSetup::new(SetupId::Iii, VarianceLevel::Low, 9);
        setup.n_times = 30;
        let data = generate(&setup).unwrap();
        for slice in &data.panel.times {
            assert!(!slice.locations.is_empty());
            for loc in &slice.locations {
                assert!(!in_hole(loc.x, loc.y));
            }
        }
    }

    #[test]
    fn location_counts_stay_in_range() {
        let mut setup = SimSetup::new(SetupId::I, VarianceLevel::High, 3);
        setup.n_times = 50;
        let data = generate(&setup).unwrap();
        for slice in &data.panel.times {
            assert!((50..=60).contains(&slice.locations.len()));
        }
    }

    #[test]
    fn score_autocorrelation_matches_yule_walker() {
        // Long AR(2) path; the empirical lag-1 autocorrelation must match
        // k1 / (1 - k2).
        let k = [0.8, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let series = ar::simulate(&k, 1.0, 100_000, SCORE_BURN_IN, &mut rng).unwrap();
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let cov1: f64 = series
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let rho1 = cov1 / var;
        let expect = k[0] / (1.0 - k[1]);
        assert!((rho1 - expect).abs() < 0.02, "rho1 {rho1} vs {expect}");
    }

    #[test]
    fn mean_over_replicates_converges_to_mu1() {
        // Setup iv has constant mean and centered scores, so averaging the
        // true surfaces over many replicates recovers mu1 pointwise.
        let grid = EvalGrid::standard_sim();
        let check_points = [0usize, 400, 900, 1500, 1975];
        let reps = 300;
        let mut acc = vec![0.0; check_points.len()];
        for rep in 0..reps {
            let mut setup = SimSetup::new(SetupId::Iv, VarianceLevel::High, 1000 + rep);
            setup.n_times = 1;
            let data = generate(&setup).unwrap();
            for (i, &g) in check_points.iter().enumerate() {
                acc[i] += data.truth_surfaces[0][g];
            }
        }
        for (i, &g) in check_points.iter().enumerate() {
            let mean = acc[i] / reps as f64;
            let p = grid.points[g];
            let expect = TruthFunctions::mu1(p.x, p.y);
            // Var of one draw at a point: sigma1^2 phi1^2 + sigma2^2 phi2^2.
            let var = 1.0 * TruthFunctions::phi1(p.x, p.y).powi(2)
                + 0.1 * TruthFunctions::phi2(p.x, p.y).powi(2);
            let se = (var / reps as f64).sqrt();
            assert!(
                (mean - expect).abs() < 3.0 * se + 1e-9,
                "grid point {g}: mean {mean} vs {expect} (se {se})"
            );
        }
    }
}

//! Versioned model archive: a text manifest followed by named binary matrix
//! records (dimension header, row-major 8-byte little-endian reals).
//! Round trips are bit-exact; every floating value travels in the binary
//! section.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis2d::BivariateBasis;
use crate::error::{Error, Result};
use crate::mesh::{Point2, Triangle, Triangulation};
use crate::model::{FitConfig, FittedModel, ModelParams, Penalties};
use crate::state_space::{LatentMoments, StateInit};
use crate::temporal::{build_temporal_basis, TemporalBasisSpec};

const MAGIC: &str = "STFPCA-MODEL v1";

struct Records {
    entries: Vec<(String, DMatrix<f64>)>,
}

impl Records {
    fn new() -> Self {
        Records { entries: Vec::new() }
    }

    fn push(&mut self, name: &str, m: DMatrix<f64>) {
        self.entries.push((name.to_string(), m));
    }

    fn push_vector(&mut self, name: &str, v: &DVector<f64>) {
        self.push(name, DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    }

    fn push_scalar(&mut self, name: &str, v: f64) {
        self.push(name, DMatrix::from_element(1, 1, v));
    }
}

/// Serializes a fitted model. Residuals are not stored; they are
/// recomputable from the model and the panel.
pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    let mut manifest: Vec<(String, String)> = Vec::new();
    let push = |m: &mut Vec<(String, String)>, k: &str, v: String| m.push((k.to_string(), v));
    push(&mut manifest, "degree", model.basis.degree().to_string());
    push(&mut manifest, "smoothness", model.basis.smoothness().to_string());
    push(&mut manifest, "gram_certified", (model.basis.gram_certified() as u8).to_string());
    push(&mut manifest, "n_factors", model.params.n_factors().to_string());
    push(&mut manifest, "ar_order", model.params.ar_order().to_string());
    push(&mut manifest, "n_times", model.n_times().to_string());
    push(&mut manifest, "trend_order", model.temporal.spec().trend_order.to_string());
    push(&mut manifest, "fourier_pairs", model.temporal.spec().fourier_pairs.to_string());
    push(&mut manifest, "horizon", model.temporal.horizon().to_string());
    push(&mut manifest, "converged", (model.converged as u8).to_string());
    push(&mut manifest, "iterations", model.iterations.to_string());
    push(&mut manifest, "max_iter", model.config.max_iter.to_string());
    push(&mut manifest, "freeze_ar", (model.config.freeze_ar as u8).to_string());
    push(&mut manifest, "ar_warmup", model.config.ar_warmup.to_string());
    push(
        &mut manifest,
        "state_init",
        match model.config.state_init {
            StateInit::Zero => "zero".to_string(),
            StateInit::Stationary => "stationary".to_string(),
        },
    );
    push(&mut manifest, "warnings", model.warnings.len().to_string());
    for (i, w) in model.warnings.iter().enumerate() {
        push(&mut manifest, &format!("warning_{i}"), w.replace('\n', " "));
    }

    let mesh = model.basis.mesh();
    let mut records = Records::new();
    records.push(
        "mesh_vertices",
        DMatrix::from_fn(mesh.vertices().len(), 2, |r, c| {
            if c == 0 {
                mesh.vertices()[r].x
            } else {
                mesh.vertices()[r].y
            }
        }),
    );
    records.push(
        "mesh_triangles",
        DMatrix::from_fn(mesh.triangles().len(), 3, |r, c| mesh.triangles()[r].v[c] as f64),
    );
    records.push("transform", model.basis.transform().clone());
    records.push_vector("theta_b", &model.params.theta_b);
    records.push_vector("theta_c", &model.params.theta_c);
    records.push("loadings", model.params.loadings.clone());
    records.push("ar_coefficients", model.params.ar_coefficients.clone());
    records.push_scalar("sigma2", model.params.sigma2);
    records.push_vector(
        "score_variances",
        &DVector::from_column_slice(&model.params.score_variances),
    );
    records.push_vector("temporal_knots", &DVector::from_column_slice(&model.temporal.spec().knots));
    records.push_scalar("temporal_period", model.temporal.spec().period);
    records.push_scalar("tol", model.config.tol);
    records.push(
        "penalties",
        DMatrix::from_column_slice(3, 1, &model.config.penalties.as_array()),
    );

    let n = model.n_times();
    let j = model.params.n_factors();
    let p = model.params.ar_order();
    records.push(
        "alpha",
        DMatrix::from_fn(n, j, |t, c| model.moments.alpha[t][c]),
    );
    let mut sigma_stack = DMatrix::zeros(n * j, j);
    for t in 0..n {
        sigma_stack.view_mut((t * j, 0), (j, j)).copy_from(&model.moments.sigma[t]);
    }
    records.push("sigma_t", sigma_stack);
    let mut lag_stack = DMatrix::zeros((p + 1) * (p + 1) * j, j);
    for a in 0..=p {
        for b in 0..=p {
            lag_stack
                .view_mut(((a * (p + 1) + b) * j, 0), (j, j))
                .copy_from(&model.moments.lag_moments()[a][b]);
        }
    }
    records.push("lag_moments", lag_stack);
    records.push_vector("final_state_mean", &model.final_state_mean);
    records.push("final_state_cov", model.final_state_cov.clone());
    let mut trace = DMatrix::zeros(model.trace.len(), 2);
    for (i, t) in model.trace.iter().enumerate() {
        trace[(i, 0)] = t.q_value;
        trace[(i, 1)] = t.observed_neg2_loglik;
    }
    records.push("trace", trace);

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (k, v) in &manifest {
        out.extend_from_slice(format!("{k} {v}\n").as_bytes());
    }
    out.push(b'\n');
    for (name, matrix) in &records.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
        for r in 0..matrix.nrows() {
            for c in 0..matrix.ncols() {
                out.extend_from_slice(&matrix[(r, c)].to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Loads a model archive written by [`save_model`].
pub fn load_model(path: &Path) -> Result<FittedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Data("archive has no manifest terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Data("archive manifest is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Data("not a model archive (bad magic)".into()));
    }
    let mut manifest: BTreeMap<String, String> = BTreeMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once(' ') {
            manifest.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        manifest.get(k).ok_or_else(|| Error::Data(format!("archive missing key `{k}`")))
    };
    let get_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Data(format!("bad integer for `{k}`")))
    };

    let mut records: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    let mut pos = header_end + 2;
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(
            bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Data("truncated record header".into()))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 4;
        let name = std::str::from_utf8(
            bytes.get(pos..pos + name_len).ok_or_else(|| Error::Data("truncated name".into()))?,
        )
        .map_err(|_| Error::Data("record name is not UTF-8".into()))?
        .to_string();
        pos += name_len;
        let rows = u64::from_le_bytes(
            bytes
                .get(pos..pos + 8)
                .ok_or_else(|| Error::Data("truncated dims".into()))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 8;
        let cols = u64::from_le_bytes(
            bytes
                .get(pos..pos + 8)
                .ok_or_else(|| Error::Data("truncated dims".into()))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 8;
        let need = rows * cols * 8;
        let data = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Data(format!("truncated data for `{name}`")))?;
        pos += need;
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let offset = (r * cols + c) * 8;
                m[(r, c)] = f64::from_le_bytes(data[offset..offset + 8].try_into().unwrap());
            }
        }
        records.insert(name, m);
    }
    let take = |records: &mut BTreeMap<String, DMatrix<f64>>, k: &str| -> Result<DMatrix<f64>> {
        records.remove(k).ok_or_else(|| Error::Data(format!("archive missing record `{k}`")))
    };

    let vertices_m = take(&mut records, "mesh_vertices")?;
    let vertices: Vec<Point2> = (0..vertices_m.nrows())
        .map(|r| Point2::new(vertices_m[(r, 0)], vertices_m[(r, 1)]))
        .collect();
    let triangles_m = take(&mut records, "mesh_triangles")?;
    let triangles: Vec<Triangle> = (0..triangles_m.nrows())
        .map(|r| Triangle {
            v: [
                triangles_m[(r, 0)] as usize,
                triangles_m[(r, 1)] as usize,
                triangles_m[(r, 2)] as usize,
            ],
        })
        .collect();
    let mesh = Triangulation::new(vertices, triangles)?;
    let basis = Arc::new(BivariateBasis::from_parts(
        mesh,
        get_usize("degree")?,
        get_usize("smoothness")?,
        take(&mut records, "transform")?,
        get("gram_certified")? == "1",
    )?);

    let knots_m = take(&mut records, "temporal_knots")?;
    let spec = TemporalBasisSpec {
        trend_order: get_usize("trend_order")?,
        knots: knots_m.iter().copied().collect(),
        fourier_pairs: get_usize("fourier_pairs")?,
        period: take(&mut records, "temporal_period")?[(0, 0)],
    };
    let temporal = Arc::new(build_temporal_basis(&spec, get_usize("horizon")?)?);

    let j = get_usize("n_factors")?;
    let p = get_usize("ar_order")?;
    let n = get_usize("n_times")?;
    let params = ModelParams {
        theta_b: DVector::from_column_slice(take(&mut records, "theta_b")?.as_slice()),
        theta_c: DVector::from_column_slice(take(&mut records, "theta_c")?.as_slice()),
        loadings: take(&mut records, "loadings")?,
        ar_coefficients: take(&mut records, "ar_coefficients")?,
        sigma2: take(&mut records, "sigma2")?[(0, 0)],
        score_variances: take(&mut records, "score_variances")?.iter().copied().collect(),
    };

    let alpha_m = take(&mut records, "alpha")?;
    let alpha: Vec<DVector<f64>> =
        (0..n).map(|t| alpha_m.row(t).transpose()).collect();
    let sigma_m = take(&mut records, "sigma_t")?;
    let sigma: Vec<DMatrix<f64>> =
        (0..n).map(|t| sigma_m.view((t * j, 0), (j, j)).into_owned()).collect();
    let lag_m = take(&mut records, "lag_moments")?;
    let mut lag = vec![vec![DMatrix::zeros(j, j); p + 1]; p + 1];
    for a in 0..=p {
        for b in 0..=p {
            lag[a][b] = lag_m.view(((a * (p + 1) + b) * j, 0), (j, j)).into_owned();
        }
    }
    let moments = LatentMoments::from_parts(alpha, sigma, lag)?;

    let trace_m = take(&mut records, "trace")?;
    let trace = (0..trace_m.nrows())
        .map(|i| crate::model::IterationTrace {
            q_value: trace_m[(i, 0)],
            observed_neg2_loglik: trace_m[(i, 1)],
        })
        .collect();

    let config = FitConfig {
        n_factors: j,
        ar_order: p,
        penalties: Penalties::from_array({
            let pm = take(&mut records, "penalties")?;
            [pm[(0, 0)], pm[(1, 0)], pm[(2, 0)]]
        }),
        tol: take(&mut records, "tol")?[(0, 0)],
        max_iter: get_usize("max_iter")?,
        freeze_ar: get("freeze_ar")? == "1",
        ar_warmup: get_usize("ar_warmup")?,
        state_init: match get("state_init")?.as_str() {
            "stationary" => StateInit::Stationary,
            _ => StateInit::Zero,
        },
        detailed_trace: false,
    };

    let warnings = (0..get_usize("warnings")?)
        .map(|i| get(&format!("warning_{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;

    Ok(FittedModel {
        params,
        moments,
        basis,
        temporal,
        trace,
        detailed_trace: Vec::new(),
        invariant_trace: Vec::new(),
        converged: get("converged")? == "1",
        iterations: get_usize("iterations")?,
        warnings,
        final_state_mean: DVector::from_column_slice(
            take(&mut records, "final_state_mean")?.as_slice(),
        ),
        final_state_cov: take(&mut records, "final_state_cov")?,
        residuals: Vec::new(),
        config,
    })
}

/// Recomputes the per-time fitting residuals of a (possibly loaded) model
/// against its panel.
pub fn recompute_residuals(model: &mut FittedModel, panel: &ObservationPanelRef) -> Result<()> {
    let panel = panel.0;
    if panel.n_times() != model.n_times() {
        return Err(Error::Argument("panel length differs from model".into()));
    }
    model.residuals = panel
        .slices()
        .iter()
        .enumerate()
        .map(|(t, slice)| {
            if slice.n_obs() == 0 {
                DVector::zeros(0)
            } else {
                let mean_scale = model.params.theta_c.dot(&slice.c);
                &slice.z
                    - &slice.b
                        * (&model.params.theta_b * mean_scale
                            + &model.params.loadings * &model.moments.alpha[t])
            }
        })
        .collect();
    Ok(())
}

/// Thin wrapper so the helper reads clearly at call sites.
pub struct ObservationPanelRef<'a>(pub &'a crate::panel::ObservationPanel);

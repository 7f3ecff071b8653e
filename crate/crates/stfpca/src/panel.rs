//! Observation panels: per-time location/response lists with cached design
//! matrices, plus the long-format CSV loader.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis2d::BivariateBasis;
use crate::error::{Error, Result};
use crate::mesh::{Point2, Triangulation};
use crate::temporal::TemporalBasis;

/// Unprocessed panel: one (locations, values) pair per time point,
/// `times[t - 1]` holding time `t`. Time points may be empty.
#[derive(Debug, Clone, Default)]
pub struct RawPanel {
    pub times: Vec<RawTimeSlice>,
}

#[derive(Debug, Clone, Default)]
pub struct RawTimeSlice {
    pub locations: Vec<Point2>,
    pub values: Vec<f64>,
}

impl RawPanel {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn total_observations(&self) -> usize {
        self.times.iter().map(|s| s.values.len()).sum()
    }
}

/// A row skipped by the loader, with the reason.
#[derive(Debug, Clone)]
pub struct RejectedRow {
    pub line: usize,
    pub x: f64,
    pub y: f64,
    pub reason: String,
}

/// Reads the long format `t,x,y,value[,station]`. The time column accepts
/// either positive integers or `YYYY-MM`; year-months are mapped to 1-based
/// indices starting at the earliest month present. Rows whose location falls
/// outside the triangulated domain are collected in the rejection report
/// rather than failing the load. Time points with no surviving rows are kept
/// as empty.
pub fn load_long_csv(path: &Path, mesh: &Triangulation) -> Result<(RawPanel, Vec<RejectedRow>)> {
    let text = std::fs::read_to_string(path)?;
    parse_long_csv(&text, mesh)
}

pub fn parse_long_csv(text: &str, mesh: &Triangulation) -> Result<(RawPanel, Vec<RejectedRow>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4
        || cols[0] != "t"
        || cols[1] != "x"
        || cols[2] != "y"
        || cols[3] != "value"
    {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `t,x,y,value[,station]`, found `{header}`"),
        });
    }

    enum TimeKey {
        Index(usize),
        Month(i64),
    }
    let mut rows: Vec<(usize, TimeKey, f64, f64, f64)> = Vec::new();
    let mut saw_index = false;
    let mut saw_month = false;
    for (i, raw_line) in lines {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw_line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(Error::Parse { line, msg: "fewer than 4 fields".into() });
        }
        let t_field = fields[0];
        let key = if let Some((yy, mm)) = t_field.split_once('-') {
            let year: i64 = yy
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad year `{yy}`") })?;
            let month: i64 = mm
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad month `{mm}`") })?;
            if !(1..=12).contains(&month) {
                return Err(Error::Parse { line, msg: format!("month {month} out of range") });
            }
            saw_month = true;
            TimeKey::Month(year * 12 + month - 1)
        } else {
            let t: usize = t_field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad time index `{t_field}`") })?;
            if t == 0 {
                return Err(Error::Parse { line, msg: "time index must be >= 1".into() });
            }
            saw_index = true;
            TimeKey::Index(t)
        };
        let x: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad x `{}`", fields[1]) })?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad y `{}`", fields[2]) })?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("bad value `{}`", fields[3]) })?;
        if !x.is_finite() || !y.is_finite() || !value.is_finite() {
            return Err(Error::Parse { line, msg: "non-finite field".into() });
        }
        rows.push((line, key, x, y, value));
    }
    if saw_index && saw_month {
        return Err(Error::Data(
            "time column mixes integer indices and year-months".into(),
        ));
    }

    let month_base = rows
        .iter()
        .filter_map(|(_, k, ..)| match k {
            TimeKey::Month(m) => Some(*m),
            TimeKey::Index(_) => None,
        })
        .min();

    let mut grouped: BTreeMap<usize, Vec<(usize, f64, f64, f64)>> = BTreeMap::new();
    for (line, key, x, y, value) in rows {
        let t = match key {
            TimeKey::Index(t) => t,
            TimeKey::Month(m) => (m - month_base.unwrap() + 1) as usize,
        };
        grouped.entry(t).or_default().push((line, x, y, value));
    }
    let n = grouped.keys().max().copied().unwrap_or(0);

    let mut panel = RawPanel { times: vec![RawTimeSlice::default(); n] };
    let mut rejected = Vec::new();
    for (t, entries) in grouped {
        let slice = &mut panel.times[t - 1];
        for (line, x, y, value) in entries {
            if mesh.locate(Point2::new(x, y)).is_none() {
                rejected.push(RejectedRow {
                    line,
                    x,
                    y,
                    reason: "location outside triangulated domain".into(),
                });
                continue;
            }
            slice.locations.push(Point2::new(x, y));
            slice.values.push(value);
        }
    }
    Ok((panel, rejected))
}

/// Writes a panel back out in the long format with integer time indices.
pub fn write_long_csv(panel: &RawPanel, path: &Path) -> Result<()> {
    let mut out = String::from("t,x,y,value\n");
    for (t, slice) in panel.times.iter().enumerate() {
        for (loc, v) in slice.locations.iter().zip(&slice.values) {
            out.push_str(&format!("{},{},{},{}\n", t + 1, loc.x, loc.y, v));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One time point with cached design pieces.
#[derive(Debug, Clone)]
pub struct TimeSlice {
    pub locations: Vec<Point2>,
    pub z: DVector<f64>,
    /// Spatial design matrix, one row per observation.
    pub b: DMatrix<f64>,
    /// Temporal basis vector at this time.
    pub c: DVector<f64>,
    /// Cached `B' B`.
    pub btb: DMatrix<f64>,
}

impl TimeSlice {
    pub fn n_obs(&self) -> usize {
        self.z.len()
    }
}

/// Panel with design matrices evaluated against a fixed pair of bases.
#[derive(Debug, Clone)]
pub struct ObservationPanel {
    slices: Vec<TimeSlice>,
    n_b: usize,
    n_c: usize,
}

impl ObservationPanel {
    pub fn build(
        raw: &RawPanel,
        basis: &BivariateBasis,
        tbasis: &TemporalBasis,
    ) -> Result<Self> {
        if raw.times.is_empty() {
            return Err(Error::Data("panel has no time points".into()));
        }
        let n_b = basis.n_basis();
        let mut slices = Vec::with_capacity(raw.times.len());
        for (i, slice) in raw.times.iter().enumerate() {
            if slice.locations.len() != slice.values.len() {
                return Err(Error::Data(format!(
                    "time {} has {} locations but {} values",
                    i + 1,
                    slice.locations.len(),
                    slice.values.len()
                )));
            }
            let b = basis.eval_design(&slice.locations)?;
            let btb = b.transpose() * &b;
            slices.push(TimeSlice {
                locations: slice.locations.clone(),
                z: DVector::from_column_slice(&slice.values),
                b,
                c: tbasis.eval((i + 1) as f64),
                btb,
            });
        }
        Ok(ObservationPanel { slices, n_b, n_c: tbasis.n_basis() })
    }

    pub fn n_times(&self) -> usize {
        self.slices.len()
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn slices(&self) -> &[TimeSlice] {
        &self.slices
    }

    pub fn slice(&self, t: usize) -> &TimeSlice {
        &self.slices[t]
    }

    pub fn total_observations(&self) -> usize {
        self.slices.iter().map(|s| s.n_obs()).sum()
    }

    /// Same panel with replaced response vectors (demeaning shares the
    /// cached design matrices).
    pub fn with_values(&self, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != self.slices.len() {
            return Err(Error::Argument("value list length mismatch".into()));
        }
        let mut out = self.clone();
        for (slice, z) in out.slices.iter_mut().zip(values) {
            if z.len() != slice.n_obs() {
                return Err(Error::Argument("value vector length mismatch".into()));
            }
            slice.z = z;
        }
        Ok(out)
    }

    /// Panel with the listed per-time rows removed; reuses the cached design
    /// rows. `drop[t]` holds row indices to remove at time `t`.
    pub fn without_rows(&self, drop: &[Vec<usize>]) -> Result<Self> {
        if drop.len() != self.slices.len() {
            return Err(Error::Argument("drop list length mismatch".into()));
        }
        let mut slices = Vec::with_capacity(self.slices.len());
        for (slice, gone) in self.slices.iter().zip(drop) {
            let keep: Vec<usize> =
                (0..slice.n_obs()).filter(|i| !gone.contains(i)).collect();
            let b = slice.b.select_rows(keep.iter());
            let btb = b.transpose() * &b;
            slices.push(TimeSlice {
                locations: keep.iter().map(|&i| slice.locations[i]).collect(),
                z: DVector::from_iterator(keep.len(), keep.iter().map(|&i| slice.z[i])),
                b,
                c: slice.c.clone(),
                btb,
            });
        }
        Ok(ObservationPanel { slices, n_b: self.n_b, n_c: self.n_c })
    }
}

//! Flat key-value run configuration with `[section]` headers. No quoting, no
//! escapes; `#` starts a comment. Chosen for diffability and dependency-free
//! parsing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stfpca::error::{Error, Result};
use stfpca::model::Penalties;
use stfpca::state_space::StateInit;
use stfpca::temporal::TemporalBasisSpec;

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(RawConfig { values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing config key `{key}`")))
    }

    pub fn get_parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{s}` for `{key}`"))),
        }
    }

    pub fn require_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.require(key)?;
        s.parse().map_err(|_| Error::Config(format!("bad value `{s}` for `{key}`")))
    }
}

/// How the regularization weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyMode {
    Fixed(Penalties),
    Select,
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub triangulation: PathBuf,
    pub output: PathBuf,
    pub n_factors: usize,
    pub ar_order: usize,
    pub degree: usize,
    pub smoothness: usize,
    pub temporal: TemporalBasisSpec,
    pub penalties: PenaltyMode,
    pub cv_folds: usize,
    pub cv_seed: u64,
    pub cv_budget: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub freeze_ar: bool,
    pub ar_warmup: usize,
    pub state_init: StateInit,
    pub demean: bool,
    pub demean_spatial: f64,
    pub demean_temporal: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = RawConfig::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };

        let data = resolve(raw.require("paths.data")?);
        let triangulation = resolve(raw.require("paths.triangulation")?);
        let output = resolve(raw.get("paths.output").unwrap_or("out"));
        for (label, file) in [("data", &data), ("triangulation", &triangulation)] {
            if !file.exists() {
                return Err(Error::Config(format!(
                    "{label} file {} does not exist",
                    file.display()
                )));
            }
        }

        let knots: Vec<f64> = match raw.get("model.knots") {
            None | Some("") => vec![],
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad knot `{s}`")))
                })
                .collect::<Result<_>>()?,
        };
        let temporal = TemporalBasisSpec {
            trend_order: raw.get_parse("model.trend_order", 3)?,
            knots,
            fourier_pairs: raw.get_parse("model.fourier_pairs", 5)?,
            period: raw.get_parse("model.period", 12.0)?,
        };

        let penalties = match raw.get("penalties.mode").unwrap_or("fixed") {
            "select" => PenaltyMode::Select,
            "fixed" => PenaltyMode::Fixed(Penalties::new(
                raw.get_parse("penalties.mean_spatial", 1e-3)?,
                raw.get_parse("penalties.mean_temporal", 1e-3)?,
                raw.get_parse("penalties.pc", 1.0)?,
            )?),
            other => {
                return Err(Error::Config(format!("unknown penalties.mode `{other}`")));
            }
        };

        let state_init = match raw.get("fit.state_init").unwrap_or("zero") {
            "zero" => StateInit::Zero,
            "stationary" => StateInit::Stationary,
            other => return Err(Error::Config(format!("unknown state_init `{other}`"))),
        };

        Ok(RunConfig {
            data,
            triangulation,
            output,
            n_factors: raw.require_parse("model.factors")?,
            ar_order: raw.require_parse("model.ar_order")?,
            degree: raw.get_parse("model.degree", 3)?,
            smoothness: raw.get_parse("model.smoothness", 1)?,
            temporal,
            penalties,
            cv_folds: raw.get_parse("cv.folds", 5)?,
            cv_seed: raw.get_parse("cv.seed", 1)?,
            cv_budget: raw.get_parse("cv.budget", 60)?,
            tol: raw.get_parse("fit.tol", 1e-6)?,
            max_iter: raw.get_parse("fit.max_iter", 200)?,
            freeze_ar: raw.get_parse("fit.freeze_ar", false)?,
            ar_warmup: raw.get_parse("fit.ar_warmup", 15)?,
            state_init,
            demean: raw.get_parse("fit.demean", false)?,
            demean_spatial: raw.get_parse("fit.demean_spatial", 1e-2)?,
            demean_temporal: raw.get_parse("fit.demean_temporal", 1e-2)?,
        })
    }
}

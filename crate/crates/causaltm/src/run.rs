//! The data pipeline behind the subcommands: ingest, assemble, fit, infer and
//! write.

use std::fs;
use std::path::{Path, PathBuf};

use causaltm_core::design::{DesignBundle, DesignError};
use causaltm_core::inference::{
    self, CurveSet, DrawOptions, GroupSpec, InferenceError, Posterior, Summary,
};
use causaltm_core::likelihood::{self, DerivativeCheck};
use causaltm_core::optimizer::{self, FitError, FitOptions, FitResult};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, GroupFilter, RunConfig};
use crate::ingest::{self, IngestError, Ingested, Roles};
use crate::output::{self, NonFinite};

/// Largest relative error of the analytic score accepted by `check`.
pub const SCORE_CHECK_LIMIT: f64 = 1e-5;
/// Largest relative error of the analytic Hessian accepted by `check`.
pub const HESSIAN_CHECK_LIMIT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("model specification: {0}")]
    Design(#[from] DesignError),
    #[error("data: {0}")]
    Ingest(#[from] IngestError),
    #[error("data file {path} changed since the manifest was written")]
    DataChanged { path: PathBuf },
    #[error("fit failed: {0}")]
    Fit(#[from] FitError),
    #[error("{model} fit did not converge (gradient norm {gradient_norm:e})")]
    NotConverged { model: &'static str, gradient_norm: f64 },
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("output: {0}")]
    NonFinite(#[from] NonFinite),
    #[error("no rows with {0}")]
    EmptyGroup(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("derivative check failed: score error {score:e}, Hessian error {hessian:e}")]
    Check { score: f64, hessian: f64 },
    #[error("simulation: {0}")]
    Simulate(#[from] causaltm_core::simulate::SimulateError),
}

impl RunError {
    /// Process exit status: 2 configuration, 3 ingestion, 4 non-convergence,
    /// 5 inference, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Design(_) | RunError::Manifest(_) | RunError::Simulate(_) => 2,
            RunError::Ingest(_) | RunError::DataChanged { .. } | RunError::EmptyGroup(_) => 3,
            RunError::Fit(_) | RunError::NotConverged { .. } => 4,
            RunError::Inference(_) | RunError::NonFinite(_) => 5,
            RunError::Io { .. } | RunError::Check { .. } => 1,
        }
    }
}

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Read a configuration file. A relative `data` path is taken relative to the
/// file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig, RunError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let (Some(d), Some(dir)) = (&cfg.data, path.parent()) {
        if d.is_relative() {
            let joined = dir.join(d);
            cfg.data = Some(std::path::absolute(&joined).unwrap_or(joined));
        }
    }
    Ok(cfg)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Data and design matrices for one configuration.
#[derive(Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub ingested: Ingested,
    pub bundle: DesignBundle,
    pub data_sha256: String,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared, RunError> {
    config.require_model()?;
    let path = config.data.clone().ok_or(ConfigError::Missing("data"))?;
    let bytes = fs::read(&path).map_err(|source| IngestError::Io { path: path.clone(), source })?;
    let roles = Roles {
        time: config.time.clone(),
        status: config.status.clone(),
        treatment: config.treatment.clone(),
        covariates: config.covariates(),
        categorical: config.categorical.clone(),
    };
    let ingested = ingest::ingest_reader(bytes.as_slice(), &roles)?;
    let spec = config.model_spec();
    spec.validate(Some(&ingested.data))?;
    let bundle = DesignBundle::assemble(&spec, &ingested.data)?;
    Ok(Prepared { config: config.clone(), ingested, bundle, data_sha256: sha256_hex(&bytes) })
}

/// One fitted model with its posterior and coefficient table.
#[derive(Debug, Clone)]
pub struct Model {
    pub fit: FitResult,
    pub posterior: Posterior,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub joint: Model,
    /// The `rho = 0` pair of univariate models.
    pub univariate: Option<Model>,
}

fn fit_one(p: &Prepared, options: &FitOptions, model: &'static str) -> Result<Model, RunError> {
    let fit = optimizer::fit(&p.bundle, options)?;
    if !fit.convergence.converged {
        return Err(RunError::NotConverged { model, gradient_norm: fit.convergence.gradient_norm });
    }
    let posterior = inference::covariance(&p.bundle, &fit)?;
    let summary = inference::summary(&p.bundle, &fit, &posterior, p.config.theta);
    Ok(Model { fit, posterior, summary })
}

pub fn fit_models(p: &Prepared) -> Result<Fitted, RunError> {
    let joint = fit_one(p, &p.config.fit, "joint")?;
    let univariate = if p.config.univariate {
        let opts = FitOptions { fixed_rho_star: Some(0.0), ..p.config.fit.clone() };
        Some(fit_one(p, &opts, "univariate")?)
    } else {
        None
    };
    Ok(Fitted { joint, univariate })
}

pub fn summary_json(p: &Prepared, f: &Fitted) -> Result<Value, RunError> {
    let labels = &p.bundle.layout.column_labels;
    let d = &p.ingested.data;
    let mut data = Map::new();
    data.insert("n".into(), Value::from(d.n()));
    data.insert("events".into(), Value::from(d.event.iter().filter(|&&e| e).count()));
    data.insert("treated".into(), Value::from(d.treatment.iter().filter(|&&t| t).count()));
    data.insert("sha256".into(), Value::String(p.data_sha256.clone()));
    let mut m = Map::new();
    m.insert("data".into(), Value::Object(data));
    m.insert("levels".into(), output::levels_json(&p.ingested.levels));
    m.insert("theta".into(), output::number(p.config.theta, "theta")?);
    m.insert("joint".into(), output::model_json(&f.joint.fit, &f.joint.summary, labels)?);
    let uni = match &f.univariate {
        Some(u) => output::model_json(&u.fit, &u.summary, labels)?,
        None => Value::Null,
    };
    m.insert("univariate".into(), uni);
    Ok(Value::Object(m))
}

fn draw_options(c: &RunConfig) -> DrawOptions {
    DrawOptions { theta: c.theta, draws: c.draws, seed: c.seed }
}

fn filter_rows(p: &Prepared, g: &GroupFilter) -> Result<Vec<usize>, RunError> {
    match ingest::rows_matching(&p.ingested.data, &g.column, &g.level) {
        Some(rows) if !rows.is_empty() => Ok(rows),
        _ => Err(RunError::EmptyGroup(g.label())),
    }
}

/// Curve grid: `curves.points` equally spaced times from the smallest to the
/// largest observed time.
pub fn curve_grid(p: &Prepared) -> Vec<f64> {
    let t = &p.ingested.data.time;
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    inference::linear_grid(lo, hi, p.config.curve_points)
}

/// Counterfactual treated and control curves for all rows, or for each
/// configured group.
pub fn curves(p: &Prepared, model: &Model) -> Result<CurveSet, RunError> {
    let groups = if p.config.groups.is_empty() {
        inference::treatment_groups(&p.bundle)
    } else {
        let mut out = Vec::new();
        for g in &p.config.groups {
            let rows = filter_rows(p, g)?;
            for (name, d) in [("treated", true), ("control", false)] {
                out.push(GroupSpec { label: format!("{}:{name}", g.label()), rows: rows.clone(), treatment: Some(d) });
            }
        }
        out
    };
    Ok(inference::survival_curves(&p.bundle, &model.posterior, &curve_grid(p), &groups, &draw_options(&p.config))?)
}

/// SATE at the configured times (the curve grid when none are given),
/// averaged over all rows or the rows of `sate.group`.
pub fn sate(p: &Prepared, model: &Model) -> Result<CurveSet, RunError> {
    let grid = if p.config.sate_times.is_empty() { curve_grid(p) } else { p.config.sate_times.clone() };
    let opts = draw_options(&p.config);
    let set = match &p.config.sate_group {
        None => inference::sate(&p.bundle, &model.posterior, &grid, &opts, false)?,
        Some(g) => {
            let group = GroupSpec { label: g.label(), rows: filter_rows(p, g)?, treatment: None };
            inference::sate_for(&p.bundle, &model.posterior, &grid, &group, &opts, false)?
        }
    };
    Ok(set)
}

/// Analytic against finite-difference derivatives at the joint estimate.
pub fn check(p: &Prepared) -> Result<(DerivativeCheck, FitResult), RunError> {
    let fit = optimizer::fit(&p.bundle, &p.config.fit)?;
    let c = likelihood::derivative_check(&p.bundle, &fit.delta).map_err(FitError::from)?;
    Ok((c, fit))
}

/// Record of a run: enough to repeat it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub subcommand: String,
    pub config: String,
    pub seed: u64,
    pub data_sha256: Option<String>,
}

impl Manifest {
    pub fn to_json(&self) -> Value {
        let mut versions = Map::new();
        versions.insert("causaltm".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        versions.insert("causaltm-core".into(), Value::String(causaltm_core::VERSION.into()));
        let mut m = Map::new();
        m.insert("subcommand".into(), Value::String(self.subcommand.clone()));
        m.insert("config".into(), Value::String(self.config.clone()));
        m.insert("seed".into(), Value::from(self.seed));
        m.insert("data_sha256".into(), self.data_sha256.clone().map_or(Value::Null, Value::String));
        m.insert("versions".into(), Value::Object(versions));
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self, RunError> {
        let field = |k: &str| v.get(k).ok_or_else(|| RunError::Manifest(format!("missing `{k}`")));
        let string = |k: &str| -> Result<String, RunError> {
            field(k)?.as_str().map(str::to_string).ok_or_else(|| RunError::Manifest(format!("`{k}` is not a string")))
        };
        Ok(Self {
            subcommand: string("subcommand")?,
            config: string("config")?,
            seed: field("seed")?.as_u64().ok_or_else(|| RunError::Manifest("`seed` is not an integer".into()))?,
            data_sha256: match field("data_sha256")? {
                Value::Null => None,
                Value::String(s) => Some(s.clone()),
                _ => return Err(RunError::Manifest("`data_sha256` is not a string".into())),
            },
        })
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| RunError::Manifest(e.to_string()))?;
        Self::from_json(&v)
    }
}

pub fn write(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
    }
    fs::write(path, text).map_err(io_error(path))
}

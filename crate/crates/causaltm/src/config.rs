//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. `outcome`, `selection`,
//! `curves.group` and `sate.time` may repeat. A term is one of
//!
//! ```text
//! monotone J | linear COL | smooth COL J | ridge COL | treatment | interaction COL
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use causaltm_core::design::{ModelSpec, Term};
use causaltm_core::optimizer::{FitOptions, Smoothing};
use causaltm_core::simulate::{Censoring, DgpConfig, ErrorLaw};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Repeated { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// `column=level` row filter.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFilter {
    pub column: String,
    pub level: String,
}

impl GroupFilter {
    pub fn parse(s: &str) -> Result<Self, String> {
        let (c, l) = s.split_once('=').ok_or_else(|| format!("`{s}` is not of the form column=level"))?;
        let (c, l) = (c.trim(), l.trim());
        if c.is_empty() || l.is_empty() {
            return Err(format!("`{s}` is not of the form column=level"));
        }
        Ok(Self { column: c.to_string(), level: l.to_string() })
    }

    pub fn label(&self) -> String {
        format!("{}={}", self.column, self.level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub dgp: DgpConfig,
    /// Requested `corr(eps1, eps2)`, kept so the canonical text is exact.
    pub rho: f64,
    pub replicates: usize,
    pub basis_size: usize,
    pub univariate: bool,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub time: String,
    pub status: String,
    pub treatment: String,
    pub instruments: Vec<String>,
    pub categorical: Vec<String>,
    pub outcome: Vec<Term>,
    pub selection: Vec<Term>,
    pub fit: FitOptions,
    pub univariate: bool,
    pub theta: f64,
    pub draws: usize,
    pub seed: u64,
    pub curve_points: usize,
    pub groups: Vec<GroupFilter>,
    pub sate_times: Vec<f64>,
    pub sate_group: Option<GroupFilter>,
    pub output: PathBuf,
    pub simulation: SimulationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            time: String::from("time"),
            status: String::from("status"),
            treatment: String::from("treatment"),
            instruments: Vec::new(),
            categorical: Vec::new(),
            outcome: Vec::new(),
            selection: Vec::new(),
            fit: FitOptions::default(),
            univariate: true,
            theta: 0.05,
            draws: 100,
            seed: 1,
            curve_points: 100,
            groups: Vec::new(),
            sate_times: Vec::new(),
            sate_group: None,
            output: PathBuf::from("out"),
            simulation: SimulationConfig {
                dgp: DgpConfig::with_rho(2000, 0.5),
                rho: 0.5,
                replicates: 250,
                basis_size: 8,
                univariate: true,
                draws: 100,
            },
        }
    }
}

const REPEATABLE: &[&str] = &["outcome", "selection", "curves.group", "sate.time", "instrument"];

const KEYS: &[&str] = &[
    "data",
    "time",
    "status",
    "treatment",
    "instrument",
    "categorical",
    "outcome",
    "selection",
    "fit.univariate",
    "fit.smoothing",
    "fit.max_outer_iters",
    "fit.max_tr_iters",
    "fit.gradient_tolerance",
    "fit.initial_trust_radius",
    "fit.lambda_halfwidth",
    "inference.theta",
    "inference.draws",
    "inference.seed",
    "curves.points",
    "curves.group",
    "sate.time",
    "sate.group",
    "output",
    "sim.n",
    "sim.rho",
    "sim.treatment_effect",
    "sim.instrument_strength",
    "sim.selection_intercept",
    "sim.errors",
    "sim.censoring",
    "sim.replicates",
    "sim.basis",
    "sim.univariate",
    "sim.draws",
];

fn parse_term(s: &str) -> Result<Term, String> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    let size = |v: &str| v.parse::<usize>().map_err(|_| format!("basis size `{v}` is not a positive integer"));
    match parts.as_slice() {
        ["monotone", j] => Ok(Term::Monotone { basis_size: size(j)? }),
        ["linear", c] => Ok(Term::Parametric { column: c.to_string() }),
        ["smooth", c, j] => Ok(Term::Smooth { column: c.to_string(), basis_size: size(j)? }),
        ["smooth", c] => Ok(Term::Smooth { column: c.to_string(), basis_size: 10 }),
        ["ridge", c] => Ok(Term::Ridge { column: c.to_string() }),
        ["treatment"] => Ok(Term::Treatment),
        ["interaction", c] => Ok(Term::Interaction { modifier: c.to_string() }),
        _ => Err(format!("`{s}` is not a term")),
    }
}

fn term_text(t: &Term) -> String {
    match t {
        Term::Monotone { basis_size } => format!("monotone {basis_size}"),
        Term::Parametric { column } => format!("linear {column}"),
        Term::Smooth { column, basis_size } => format!("smooth {column} {basis_size}"),
        Term::Ridge { column } => format!("ridge {column}"),
        Term::Treatment => String::from("treatment"),
        Term::Interaction { modifier } => format!("interaction {modifier}"),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|_| format!("`{v}` is not a number")))
        .collect()
}

fn parse_smoothing(s: &str) -> Result<Smoothing, String> {
    let s = s.trim();
    if s == "aic" {
        return Ok(Smoothing::Aic);
    }
    if let Some(rest) = s.strip_prefix("fixed") {
        return Ok(Smoothing::Fixed(parse_list(rest)?));
    }
    if let Some(rest) = s.strip_prefix("grid") {
        return Ok(Smoothing::Grid(parse_list(rest)?));
    }
    Err(format!("`{s}` is not aic, fixed L1,L2,... or grid G1,G2,..."))
}

fn smoothing_text(s: &Smoothing) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    match s {
        Smoothing::Aic => String::from("aic"),
        Smoothing::Fixed(v) => format!("fixed {}", join(v)),
        Smoothing::Grid(v) => format!("grid {}", join(v)),
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse::<T>().map_err(|_| format!("`{s}` is not a valid number"))
}

fn parse_errors(s: &str) -> Result<ErrorLaw, String> {
    match s {
        "gaussian" => Ok(ErrorLaw::Gaussian),
        _ => match s.strip_prefix("t") {
            Some(df) => Ok(ErrorLaw::StudentT { df: parse_num(df.trim())? }),
            None => Err(format!("`{s}` is not gaussian or tDF")),
        },
    }
}

fn errors_text(e: &ErrorLaw) -> String {
    match e {
        ErrorLaw::Gaussian => String::from("gaussian"),
        ErrorLaw::StudentT { df } => format!("t{df:?}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let (mut sim_rho, mut sim_effect, mut sim_strength, mut sim_intercept) = (None, None, None, None);
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if !REPEATABLE.contains(&key) {
                if seen.iter().any(|s| s == key) {
                    return Err(ConfigError::Repeated { line, key: key.to_string() });
                }
                seen.push(key.to_string());
            }
            let err = |reason: String| ConfigError::Value { line, key: key.to_string(), reason };
            match key {
                "data" => cfg.data = Some(PathBuf::from(value)),
                "time" => cfg.time = value.to_string(),
                "status" => cfg.status = value.to_string(),
                "treatment" => cfg.treatment = value.to_string(),
                "instrument" => cfg.instruments.extend(value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty())),
                "categorical" => cfg.categorical = value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect(),
                "outcome" => cfg.outcome.push(parse_term(value).map_err(err)?),
                "selection" => cfg.selection.push(parse_term(value).map_err(err)?),
                "fit.univariate" => cfg.univariate = parse_bool(value).map_err(err)?,
                "fit.smoothing" => cfg.fit.smoothing = parse_smoothing(value).map_err(err)?,
                "fit.max_outer_iters" => cfg.fit.max_outer_iters = parse_num(value).map_err(err)?,
                "fit.max_tr_iters" => cfg.fit.max_tr_iters = parse_num(value).map_err(err)?,
                "fit.gradient_tolerance" => cfg.fit.gradient_tolerance = parse_num(value).map_err(err)?,
                "fit.initial_trust_radius" => cfg.fit.initial_trust_radius = parse_num(value).map_err(err)?,
                "fit.lambda_halfwidth" => cfg.fit.lambda_search_halfwidth = parse_num(value).map_err(err)?,
                "inference.theta" => cfg.theta = parse_num(value).map_err(err)?,
                "inference.draws" => cfg.draws = parse_num(value).map_err(err)?,
                "inference.seed" => cfg.seed = parse_num(value).map_err(err)?,
                "curves.points" => cfg.curve_points = parse_num(value).map_err(err)?,
                "curves.group" => cfg.groups.push(GroupFilter::parse(value).map_err(err)?),
                "sate.time" => cfg.sate_times.extend(parse_list::<f64>(value).map_err(err)?),
                "sate.group" => cfg.sate_group = Some(GroupFilter::parse(value).map_err(err)?),
                "output" => cfg.output = PathBuf::from(value),
                "sim.n" => cfg.simulation.dgp.n = parse_num(value).map_err(err)?,
                "sim.rho" => sim_rho = Some(parse_num::<f64>(value).map_err(err)?),
                "sim.treatment_effect" => sim_effect = Some(parse_num::<f64>(value).map_err(err)?),
                "sim.instrument_strength" => sim_strength = Some(parse_num::<f64>(value).map_err(err)?),
                "sim.selection_intercept" => sim_intercept = Some(parse_num::<f64>(value).map_err(err)?),
                "sim.errors" => cfg.simulation.dgp.errors = parse_errors(value).map_err(err)?,
                "sim.censoring" => {
                    cfg.simulation.dgp.censoring = if value == "none" {
                        Censoring::None
                    } else {
                        Censoring::Rate(parse_num(value).map_err(err)?)
                    }
                }
                "sim.replicates" => cfg.simulation.replicates = parse_num(value).map_err(err)?,
                "sim.basis" => cfg.simulation.basis_size = parse_num(value).map_err(err)?,
                "sim.univariate" => cfg.simulation.univariate = parse_bool(value).map_err(err)?,
                "sim.draws" => cfg.simulation.draws = parse_num(value).map_err(err)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if let Some(rho) = sim_rho {
            let keep = &cfg.simulation.dgp;
            cfg.simulation.dgp = DgpConfig {
                errors: keep.errors.clone(),
                censoring: keep.censoring.clone(),
                ..DgpConfig::with_rho(keep.n, rho)
            };
            cfg.simulation.rho = rho;
        }
        let d = &mut cfg.simulation.dgp;
        if let Some(v) = sim_effect {
            d.treatment_effect = v;
        }
        if let Some(v) = sim_strength {
            d.instrument_strength = v;
        }
        if let Some(v) = sim_intercept {
            d.selection_intercept = v;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(ConfigError::Invalid(format!("inference.theta = {} must lie in (0, 1)", self.theta)));
        }
        if self.draws == 0 {
            return Err(ConfigError::Invalid(String::from("inference.draws must be positive")));
        }
        if self.curve_points < 2 {
            return Err(ConfigError::Invalid(String::from("curves.points must be at least 2")));
        }
        let names = [&self.time, &self.status, &self.treatment];
        if names[0] == names[1] || names[0] == names[2] || names[1] == names[2] {
            return Err(ConfigError::Invalid(String::from("time, status and treatment must be distinct columns")));
        }
        Ok(())
    }

    /// Checks needed before fitting a data set.
    pub fn require_model(&self) -> Result<(), ConfigError> {
        if self.data.is_none() {
            return Err(ConfigError::Missing("data"));
        }
        if self.outcome.is_empty() {
            return Err(ConfigError::Missing("outcome"));
        }
        if self.selection.is_empty() {
            return Err(ConfigError::Missing("selection"));
        }
        self.model_spec().validate(None).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { outcome: self.outcome.clone(), selection: self.selection.clone(), instruments: self.instruments.clone() }
    }

    /// Columns the model reads besides time, status and treatment.
    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |c: &str| {
            if !out.iter().any(|o| o == c) {
                out.push(c.to_string());
            }
        };
        for t in self.outcome.iter().chain(&self.selection) {
            match t {
                Term::Parametric { column } | Term::Ridge { column } | Term::Smooth { column, .. } => push(column),
                Term::Interaction { modifier } => push(modifier),
                Term::Monotone { .. } | Term::Treatment => {}
            }
        }
        for g in self.groups.iter().chain(&self.sate_group) {
            push(&g.column);
        }
        out
    }

    /// Canonical text: every key with its effective value, parseable by
    /// [`RunConfig::parse`] into an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        kv("time", self.time.clone());
        kv("status", self.status.clone());
        kv("treatment", self.treatment.clone());
        for i in &self.instruments {
            kv("instrument", i.clone());
        }
        if !self.categorical.is_empty() {
            kv("categorical", self.categorical.join(", "));
        }
        for t in &self.outcome {
            kv("outcome", term_text(t));
        }
        for t in &self.selection {
            kv("selection", term_text(t));
        }
        kv("fit.univariate", self.univariate.to_string());
        kv("fit.smoothing", smoothing_text(&self.fit.smoothing));
        kv("fit.max_outer_iters", self.fit.max_outer_iters.to_string());
        kv("fit.max_tr_iters", self.fit.max_tr_iters.to_string());
        kv("fit.gradient_tolerance", format!("{:?}", self.fit.gradient_tolerance));
        kv("fit.initial_trust_radius", format!("{:?}", self.fit.initial_trust_radius));
        kv("fit.lambda_halfwidth", format!("{:?}", self.fit.lambda_search_halfwidth));
        kv("inference.theta", format!("{:?}", self.theta));
        kv("inference.draws", self.draws.to_string());
        kv("inference.seed", self.seed.to_string());
        kv("curves.points", self.curve_points.to_string());
        for g in &self.groups {
            kv("curves.group", g.label());
        }
        for t in &self.sate_times {
            kv("sate.time", format!("{t:?}"));
        }
        if let Some(g) = &self.sate_group {
            kv("sate.group", g.label());
        }
        kv("output", self.output.display().to_string());
        let sim = &self.simulation;
        let d = &sim.dgp;
        kv("sim.n", d.n.to_string());
        kv("sim.rho", format!("{:?}", sim.rho));
        kv("sim.treatment_effect", format!("{:?}", d.treatment_effect));
        kv("sim.instrument_strength", format!("{:?}", d.instrument_strength));
        kv("sim.selection_intercept", format!("{:?}", d.selection_intercept));
        kv("sim.errors", errors_text(&d.errors));
        kv(
            "sim.censoring",
            match d.censoring {
                Censoring::None => String::from("none"),
                Censoring::Rate(r) => format!("{r:?}"),
                Censoring::Uniform { upper } => format!("{upper:?}"),
            },
        );
        kv("sim.replicates", sim.replicates.to_string());
        kv("sim.basis", sim.basis_size.to_string());
        kv("sim.univariate", sim.univariate.to_string());
        kv("sim.draws", sim.draws.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HIE: &str = "
        data = hie.csv
        time = unemp.dur
        status = status
        treatment = agree
        instrument = bonus
        categorical = gender, ethnicity, bonus
        outcome = monotone 10
        outcome = linear gender
        outcome = treatment
        outcome = interaction gender   # effect modifier
        outcome = smooth age 10
        selection = ridge bonus
        selection = linear age
    ";

    #[test]
    fn parses_terms_and_round_trips() {
        let c = RunConfig::parse(HIE).unwrap();
        assert_eq!(c.outcome.len(), 5);
        assert_eq!(c.outcome[4], Term::Smooth { column: "age".into(), basis_size: 10 });
        assert_eq!(c.selection[0], Term::Ridge { column: "bonus".into() });
        assert_eq!(c.instruments, vec!["bonus".to_string()]);
        c.require_model().unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.covariates(), vec!["gender", "age", "bonus"]);
    }

    #[test]
    fn rejects_bad_keys_and_values() {
        assert_eq!(
            RunConfig::parse("dat = x.csv"),
            Err(ConfigError::UnknownKey { line: 1, key: "dat".into() })
        );
        assert!(matches!(RunConfig::parse("\noutcome = wiggly x"), Err(ConfigError::Value { line: 2, .. })));
        assert!(matches!(RunConfig::parse("time = a\ntime = b"), Err(ConfigError::Repeated { line: 2, .. })));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("inference.theta = 2"), Err(ConfigError::Invalid(_))));
        assert_eq!(RunConfig::parse("").unwrap().require_model(), Err(ConfigError::Missing("data")));
    }

    #[test]
    fn smoothing_and_simulation_keys() {
        let c = RunConfig::parse("fit.smoothing = fixed 1, 2.5\nsim.rho = 0.3\nsim.errors = t5\nsim.n = 500").unwrap();
        assert_eq!(c.fit.smoothing, Smoothing::Fixed(vec![1.0, 2.5]));
        assert!((c.simulation.dgp.rho() - 0.3).abs() < 1e-15);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.simulation.dgp.n, 500);
        assert_eq!(c.simulation.dgp.errors, ErrorLaw::StudentT { df: 5.0 });
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap().fit.smoothing, c.fit.smoothing);
    }
}

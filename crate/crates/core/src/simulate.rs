//! Data from the structural model with controllable confounding and
//! instrument strength, and replication studies of the estimators.
//!
//! Errors are built as `eps_k = beta_kU U + e_k` with `U ~ N(0, sigma_U^2)`
//! and `var(e_k) = 1 - beta_kU^2 sigma_U^2`, so `corr(eps1, eps2) = rho =
//! beta_1U beta_2U sigma_U^2`. Event times solve
//! `H(T) = -(x' beta + beta_d D) - eps1`, which makes `S(t | x, D) =
//! Phi(-(H(t) + x' beta + beta_d D))` and the fitted coefficients target the
//! configured ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{Column, DataError, DataSet};
use crate::design::{DesignBundle, ModelSpec, Term};
use crate::inference::{covariance, rho_interval, sate, DrawOptions, InferenceError};
use crate::numerics::{norm_cdf, norm_quantile, student_t_cdf};
use crate::optimizer::{fit, FitOptions};

/// Pilot sample size used to calibrate censoring and the SATE grid.
const PILOT_SIZE: usize = 20_000;
/// Stream reserved for the pilot sample.
const PILOT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulateError {
    #[error("invalid data-generating configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("at least one replicate is required")]
    NoReplicates,
}

/// Fixed increasing transformation `H` of the event time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transformation {
    /// `H(t) = log t`.
    Log,
    /// `H(t) = shape * log t` (Weibull-type), `shape > 0`.
    ScaledLog { shape: f64 },
}

impl Transformation {
    pub fn apply(&self, t: f64) -> f64 {
        match *self {
            Transformation::Log => libm::log(t),
            Transformation::ScaledLog { shape } => shape * libm::log(t),
        }
    }

    pub fn invert(&self, h: f64) -> f64 {
        match *self {
            Transformation::Log => libm::exp(h),
            Transformation::ScaledLog { shape } => libm::exp(h / shape),
        }
    }

    fn validate(&self) -> Result<(), SimulateError> {
        match *self {
            Transformation::Log => Ok(()),
            Transformation::ScaledLog { shape } if shape > 0.0 && shape.is_finite() => Ok(()),
            Transformation::ScaledLog { shape } => {
                Err(SimulateError::Config(format!("H(t) = {shape} log t is not increasing")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Censoring {
    None,
    /// `C ~ Uniform(0, upper)`.
    Uniform { upper: f64 },
    /// Uniform censoring with the upper limit calibrated to this expected rate.
    Rate(f64),
}

/// Joint law of `(eps1, eps2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorLaw {
    Gaussian,
    /// Bivariate t with `df > 2`, scaled to unit variances, same correlation.
    StudentT { df: f64 },
}

/// A covariate `x ~ N(0, 1)` entering both equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confounder {
    pub outcome: f64,
    pub selection: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub n: usize,
    pub sigma_u: f64,
    pub beta_1u: f64,
    pub beta_2u: f64,
    pub outcome_intercept: f64,
    pub treatment_effect: f64,
    pub selection_intercept: f64,
    pub confounders: Vec<Confounder>,
    /// `P(Z = 1)` of the binary instrument.
    pub instrument_prob: f64,
    /// Coefficient of the instrument in the selection equation.
    pub instrument_strength: f64,
    pub transformation: Transformation,
    pub censoring: Censoring,
    pub errors: ErrorLaw,
}

impl DgpConfig {
    /// Strong-instrument, correctly specified scenario with correlation `rho`:
    /// one confounder, `beta_d = 0.5`, instrument coefficient 2, about 30%
    /// censoring.
    pub fn with_rho(n: usize, rho: f64) -> Self {
        let root = libm::sqrt(rho.abs());
        Self {
            n,
            sigma_u: 1.0,
            beta_1u: if rho < 0.0 { -root } else { root },
            beta_2u: root,
            outcome_intercept: 0.0,
            treatment_effect: 0.5,
            selection_intercept: -1.0,
            confounders: vec![Confounder { outcome: 0.5, selection: 0.5 }],
            instrument_prob: 0.5,
            instrument_strength: 2.0,
            transformation: Transformation::Log,
            censoring: Censoring::Rate(0.3),
            errors: ErrorLaw::Gaussian,
        }
    }

    /// The same scenario with a weak instrument (coefficient 0.2).
    pub fn weak_instrument(n: usize, rho: f64) -> Self {
        Self { instrument_strength: 0.2, selection_intercept: -0.1, ..Self::with_rho(n, rho) }
    }

    /// Implied `corr(eps1, eps2)`.
    pub fn rho(&self) -> f64 {
        self.beta_1u * self.beta_2u * self.sigma_u * self.sigma_u
    }

    /// `(sigma_1, sigma_2)` from the unit-variance normalization.
    pub fn idiosyncratic_sd(&self) -> (f64, f64) {
        let s2 = self.sigma_u * self.sigma_u;
        (
            libm::sqrt(1.0 - self.beta_1u * self.beta_1u * s2),
            libm::sqrt(1.0 - self.beta_2u * self.beta_2u * s2),
        )
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::Config(m));
        if self.n == 0 {
            return bad(String::from("n must be positive"));
        }
        if !(self.sigma_u >= 0.0) {
            return bad(format!("sigma_U = {} must be non-negative", self.sigma_u));
        }
        let s2 = self.sigma_u * self.sigma_u;
        for (name, b) in [("beta_1U", self.beta_1u), ("beta_2U", self.beta_2u)] {
            if !(b * b * s2 < 1.0) {
                return bad(format!("{name}^2 sigma_U^2 = {} must be below 1", b * b * s2));
            }
        }
        if !(self.instrument_prob > 0.0 && self.instrument_prob < 1.0) {
            return bad(format!("instrument probability {} must lie in (0, 1)", self.instrument_prob));
        }
        match self.censoring {
            Censoring::Uniform { upper } if !(upper > 0.0) => return bad(format!("censoring limit {upper} must be positive")),
            Censoring::Rate(r) if !(r > 0.0 && r < 0.95) => return bad(format!("censoring rate {r} must lie in (0, 0.95)")),
            _ => {}
        }
        if let ErrorLaw::StudentT { df } = self.errors {
            if !(df > 2.0) {
                return bad(format!("t errors need df > 2 for unit variance, got {df}"));
            }
        }
        self.transformation.validate()
    }

    fn confounder_name(k: usize) -> String {
        format!("x{}", k + 1)
    }

    /// Correctly specified model for data from this configuration.
    pub fn model_spec(&self, basis_size: usize) -> ModelSpec {
        let xs: Vec<Term> =
            (0..self.confounders.len()).map(|k| Term::Parametric { column: Self::confounder_name(k) }).collect();
        let mut outcome = vec![Term::Monotone { basis_size }];
        outcome.extend(xs.iter().cloned());
        outcome.push(Term::Treatment);
        let mut selection = xs;
        selection.push(Term::Parametric { column: String::from("z") });
        ModelSpec { outcome, selection, instruments: vec![String::from("z")] }
    }

    /// `S(t | x, d)` under the true model for a given linear part.
    fn survival(&self, h: f64) -> f64 {
        match self.errors {
            ErrorLaw::Gaussian => norm_cdf(-h),
            ErrorLaw::StudentT { df } => student_t_cdf(-h * libm::sqrt(df / (df - 2.0)), df),
        }
    }
}

/// A simulated sample together with its latent quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: DataSet,
    pub eps1: Vec<f64>,
    pub eps2: Vec<f64>,
    /// Uncensored event times.
    pub latent_time: Vec<f64>,
    /// `x_i' beta` of the outcome equation (without treatment).
    pub outcome_linear: Vec<f64>,
}

struct Draw {
    x: Vec<f64>,
    z: usize,
    d: bool,
    t: f64,
    eps1: f64,
    eps2: f64,
    linear: f64,
}

fn draw_subject(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Draw {
    let (s1, s2) = config.idiosyncratic_sd();
    let x: Vec<f64> = config.confounders.iter().map(|_| StandardNormal.sample(&mut *rng)).collect();
    let z = usize::from(rng.gen::<f64>() < config.instrument_prob);
    let u: f64 = StandardNormal.sample(&mut *rng);
    let e1: f64 = StandardNormal.sample(&mut *rng);
    let e2: f64 = StandardNormal.sample(&mut *rng);
    let mut eps1 = config.beta_1u * config.sigma_u * u + s1 * e1;
    let mut eps2 = config.beta_2u * config.sigma_u * u + s2 * e2;
    if let ErrorLaw::StudentT { df } = config.errors {
        let w: f64 = ChiSquared::new(df).map(|c| c.sample(&mut *rng)).unwrap_or(df);
        let k = libm::sqrt((df - 2.0) / w);
        eps1 *= k;
        eps2 *= k;
    }
    let mut linear = config.outcome_intercept;
    let mut sel = config.selection_intercept + config.instrument_strength * z as f64;
    for (c, xv) in config.confounders.iter().zip(&x) {
        linear += c.outcome * xv;
        sel += c.selection * xv;
    }
    let d = sel + eps2 > 0.0;
    let h = -(linear + if d { config.treatment_effect } else { 0.0 }) - eps1;
    let t = config.transformation.invert(h);
    Draw { x, z, d, t, eps1, eps2, linear }
}

fn pilot_times(config: &DgpConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PILOT_STREAM);
    (0..PILOT_SIZE).map(|_| draw_subject(config, &mut rng).t).collect()
}

/// Upper limit `c` of `C ~ U(0, c)` giving censoring rate `rate` on `times`:
/// `P(C < T) = mean(min(T, c)) / c`.
fn calibrate_censoring(times: &[f64], rate: f64) -> f64 {
    let rate_at = |c: f64| times.iter().map(|t| t.min(c)).sum::<f64>() / (c * times.len() as f64);
    let (mut lo, mut hi) = (1e-12_f64, 1e12_f64);
    for _ in 0..200 {
        let mid = libm::sqrt(lo * hi);
        // rate_at decreases in c
        if rate_at(mid) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    libm::sqrt(lo * hi)
}

fn censoring_limit(config: &DgpConfig, seed: u64) -> Option<f64> {
    match config.censoring {
        Censoring::None => None,
        Censoring::Uniform { upper } => Some(upper),
        Censoring::Rate(r) => Some(calibrate_censoring(&pilot_times(config, seed), r)),
    }
}

fn sample(config: &DgpConfig, rng: &mut ChaCha8Rng, limit: Option<f64>) -> Result<Simulated, SimulateError> {
    let n = config.n;
    let mut xs = vec![Vec::with_capacity(n); config.confounders.len()];
    let (mut z, mut time, mut event, mut treat) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut eps1, mut eps2, mut latent, mut linear) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let s = draw_subject(config, rng);
        let c = limit.map(|u| u * rng.gen::<f64>());
        for (col, v) in xs.iter_mut().zip(&s.x) {
            col.push(*v);
        }
        z.push(s.z);
        let (y, ev) = match c {
            Some(c) if c < s.t => (c, false),
            _ => (s.t, true),
        };
        time.push(y.max(f64::MIN_POSITIVE));
        event.push(ev);
        treat.push(s.d);
        eps1.push(s.eps1);
        eps2.push(s.eps2);
        latent.push(s.t);
        linear.push(s.linear);
    }
    let mut columns: Vec<Column> =
        xs.into_iter().enumerate().map(|(k, v)| Column::numeric(DgpConfig::confounder_name(k), v)).collect();
    columns.push(Column::categorical("z", &z, vec![String::from("0"), String::from("1")]));
    let data = DataSet::new("time", "treat", time, event, treat, columns)?;
    Ok(Simulated { data, eps1, eps2, latent_time: latent, outcome_linear: linear })
}

/// One sample with its latent errors. The censoring limit (for
/// [`Censoring::Rate`]) comes from a pilot sample on a reserved stream.
pub fn generate_detailed(config: &DgpConfig, seed: u64) -> Result<Simulated, SimulateError> {
    config.validate()?;
    let limit = censoring_limit(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(config, &mut rng, limit)
}

pub fn generate(config: &DgpConfig, seed: u64) -> Result<DataSet, SimulateError> {
    Ok(generate_detailed(config, seed)?.data)
}

/// Replicate `r` of a study with master seed `seed`: stream `r` of the seed.
pub fn generate_replicate(config: &DgpConfig, seed: u64, r: u64, limit: Option<f64>) -> Result<Simulated, SimulateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    sample(config, &mut rng, limit)
}

/// Sample SATE under the true model at the given covariate linear parts.
pub fn true_sate(config: &DgpConfig, linear: &[f64], t: f64) -> f64 {
    let h = config.transformation.apply(t);
    let sum: f64 = linear
        .iter()
        .map(|l| config.survival(h + l + config.treatment_effect) - config.survival(h + l))
        .sum();
    sum / linear.len() as f64
}

/// Study settings besides the data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub replicates: usize,
    pub seed: u64,
    pub basis_size: usize,
    pub fit: FitOptions,
    /// Also fit the `rho = 0` univariate pair.
    pub univariate: bool,
    /// Posterior draws for the SATE bands (0 skips SATE).
    pub sate_draws: usize,
    pub level: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            replicates: 250,
            seed: 1,
            basis_size: 8,
            fit: FitOptions::default(),
            univariate: true,
            sate_draws: 100,
            level: 0.95,
        }
    }
}

/// Estimates from one model on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub converged: bool,
    pub beta_d: f64,
    pub beta_d_interval: (f64, f64),
    pub rho: f64,
    pub rho_interval: (f64, f64),
    pub sate: Vec<f64>,
    pub sate_interval: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub true_sate: Vec<f64>,
    pub joint: Option<ModelEstimate>,
    pub univariate: Option<ModelEstimate>,
    /// Why a fit is missing, if one is.
    pub error: Option<String>,
}

/// Everything shared by the replicates of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyPlan {
    pub config: DgpConfig,
    pub options: StudyOptions,
    pub censoring_limit: Option<f64>,
    /// Five SATE evaluation times: the 10, 30, 50, 70 and 90% points of the
    /// observed follow-up in the pilot sample.
    pub grid: Vec<f64>,
}

pub fn plan_study(config: &DgpConfig, options: &StudyOptions) -> Result<StudyPlan, SimulateError> {
    config.validate()?;
    if options.replicates == 0 {
        return Err(SimulateError::NoReplicates);
    }
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(SimulateError::Config(format!("interval level {} must lie in (0, 1)", options.level)));
    }
    let limit = censoring_limit(config, options.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(PILOT_STREAM - 1);
    let pilot = sample(&DgpConfig { n: PILOT_SIZE, ..config.clone() }, &mut rng, limit)?;
    let mut y = pilot.data.time.clone();
    y.sort_by(f64::total_cmp);
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|p| y[(p * (y.len() - 1) as f64) as usize]).collect();
    Ok(StudyPlan { config: config.clone(), options: options.clone(), censoring_limit: limit, grid })
}

fn estimate(bundle: &DesignBundle, plan: &StudyPlan, options: &FitOptions) -> Result<ModelEstimate, String> {
    let f = fit(bundle, options).map_err(|e| format!("{e}"))?;
    let post = covariance(bundle, &f).map_err(|e| format!("{e}"))?;
    let theta = 1.0 - plan.options.level;
    let z = norm_quantile(1.0 - 0.5 * theta).unwrap_or(1.96);
    let j = bundle.layout.treatment;
    let (bd, se) = (f.delta[j], post.std_error(j));
    let rho = rho_interval(bundle, &f, &post, theta);
    let (sate_est, sate_int) = if plan.options.sate_draws > 0 {
        let draw = DrawOptions { theta, draws: plan.options.sate_draws, seed: plan.options.seed };
        match sate(bundle, &post, &plan.grid, &draw, false) {
            Ok(c) => {
                let c = &c.curves[0];
                (c.estimate.clone(), c.lower.iter().copied().zip(c.upper.iter().copied()).collect())
            }
            Err(InferenceError::OutsideGrid { .. }) => (Vec::new(), Vec::new()),
            Err(e) => return Err(format!("{e}")),
        }
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ModelEstimate {
        converged: f.convergence.converged,
        beta_d: bd,
        beta_d_interval: (bd - z * se, bd + z * se),
        rho: rho.estimate,
        rho_interval: (rho.lower, rho.upper),
        sate: sate_est,
        sate_interval: sate_int,
    })
}

/// Generate and fit replicate `r`. Failures leave the estimate empty.
pub fn run_replicate(plan: &StudyPlan, r: usize) -> ReplicateOutcome {
    let mut out = ReplicateOutcome { replicate: r, true_sate: Vec::new(), joint: None, univariate: None, error: None };
    let sim = match generate_replicate(&plan.config, plan.options.seed, r as u64, plan.censoring_limit) {
        Ok(s) => s,
        Err(e) => {
            out.error = Some(format!("{e}"));
            return out;
        }
    };
    out.true_sate = plan.grid.iter().map(|&t| true_sate(&plan.config, &sim.outcome_linear, t)).collect();
    let spec = plan.config.model_spec(plan.options.basis_size);
    let bundle = match DesignBundle::assemble(&spec, &sim.data) {
        Ok(b) => b,
        Err(e) => {
            out.error = Some(format!("{e}"));
            return out;
        }
    };
    let mut errors = Vec::new();
    out.joint = estimate(&bundle, plan, &plan.options.fit).map_err(|e| errors.push(format!("joint: {e}"))).ok();
    if plan.options.univariate {
        let opts = FitOptions { fixed_rho_star: Some(0.0), ..plan.options.fit.clone() };
        out.univariate = estimate(&bundle, plan, &opts).map_err(|e| errors.push(format!("univariate: {e}"))).ok();
    }
    if !errors.is_empty() {
        out.error = Some(errors.join("; "));
    }
    out
}

/// Bias, RMSE and interval coverage of one quantity over replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub truth: f64,
    pub count: usize,
    pub mean: f64,
    pub bias: f64,
    pub variance: f64,
    pub rmse: f64,
    pub coverage: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
}

impl ParameterSummary {
    /// From `(estimate, truth, (lower, upper))` triples; `truth` is averaged.
    pub fn from_triples(items: &[(f64, f64, (f64, f64))]) -> Option<Self> {
        let count = items.len();
        if count == 0 {
            return None;
        }
        let m = count as f64;
        let mean = items.iter().map(|i| i.0).sum::<f64>() / m;
        let truth = items.iter().map(|i| i.1).sum::<f64>() / m;
        let bias = items.iter().map(|i| i.0 - i.1).sum::<f64>() / m;
        let variance = if count > 1 { items.iter().map(|i| (i.0 - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
        let mse = items.iter().map(|i| (i.0 - i.1).powi(2)).sum::<f64>() / m;
        let covered = items.iter().filter(|i| i.2 .0 <= i.1 && i.1 <= i.2 .1).count();
        Some(Self {
            truth,
            count,
            mean,
            bias,
            variance,
            rmse: libm::sqrt(mse),
            coverage: covered as f64 / m,
            mc_se: libm::sqrt(variance / m),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub fitted: usize,
    pub converged: usize,
    pub beta_d: Option<ParameterSummary>,
    pub rho: Option<ParameterSummary>,
    pub sate: Vec<Option<ParameterSummary>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationReport {
    pub replicates: usize,
    pub rho_true: f64,
    pub beta_d_true: f64,
    pub grid: Vec<f64>,
    pub joint: ModelReport,
    pub univariate: Option<ModelReport>,
    /// Replicates whose joint fit failed or did not converge.
    pub failures: usize,
}

fn model_report(
    plan: &StudyPlan,
    outcomes: &[ReplicateOutcome],
    pick: fn(&ReplicateOutcome) -> Option<&ModelEstimate>,
    estimates_rho: bool,
) -> ModelReport {
    let fits: Vec<(&ReplicateOutcome, &ModelEstimate)> =
        outcomes.iter().filter_map(|o| pick(o).map(|e| (o, e))).filter(|(_, e)| e.converged).collect();
    let bd: Vec<_> = fits.iter().map(|(_, e)| (e.beta_d, plan.config.treatment_effect, e.beta_d_interval)).collect();
    let rho: Vec<_> = fits.iter().map(|(_, e)| (e.rho, plan.config.rho(), e.rho_interval)).collect();
    let sate = (0..plan.grid.len())
        .map(|k| {
            let items: Vec<_> = fits
                .iter()
                .filter(|(o, e)| e.sate.len() > k && o.true_sate.len() > k)
                .map(|(o, e)| (e.sate[k], o.true_sate[k], e.sate_interval[k]))
                .collect();
            ParameterSummary::from_triples(&items)
        })
        .collect();
    ModelReport {
        fitted: outcomes.iter().filter(|o| pick(o).is_some()).count(),
        converged: fits.len(),
        beta_d: ParameterSummary::from_triples(&bd),
        rho: if estimates_rho { ParameterSummary::from_triples(&rho) } else { None },
        sate,
    }
}

/// Aggregate replicate outcomes (in replicate order) into a report.
pub fn summarize(plan: &StudyPlan, outcomes: &[ReplicateOutcome]) -> ReplicationReport {
    let joint = model_report(plan, outcomes, |o| o.joint.as_ref(), plan.options.fit.fixed_rho_star.is_none());
    let univariate = plan.options.univariate.then(|| model_report(plan, outcomes, |o| o.univariate.as_ref(), false));
    ReplicationReport {
        replicates: outcomes.len(),
        rho_true: plan.config.rho(),
        beta_d_true: plan.config.treatment_effect,
        grid: plan.grid.clone(),
        failures: outcomes.len() - joint.converged,
        joint,
        univariate,
    }
}

/// Run all replicates sequentially. The std crate runs them in parallel with
/// the same per-replicate streams, so both give the same report.
pub fn run_study(config: &DgpConfig, options: &StudyOptions) -> Result<ReplicationReport, SimulateError> {
    let plan = plan_study(config, options)?;
    let outcomes: Vec<ReplicateOutcome> = (0..options.replicates).map(|r| run_replicate(&plan, r)).collect();
    Ok(summarize(&plan, &outcomes))
}

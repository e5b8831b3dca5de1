//! Penalized maximum likelihood by a scaled trust-region Newton method, with
//! smoothing parameters chosen to minimize `AIC = -2 l + 2 edf`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::design::DesignBundle;
use crate::likelihood::{evaluate, penalized_loglik, Evaluation, LikelihoodError};
use crate::linalg::{cholesky_with_shift, symmetrize};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("no valid starting point: {0}")]
    InvalidStart(LikelihoodError),
    #[error("smoothing parameter vector has length {found}, expected {expected}")]
    LambdaLength { expected: usize, found: usize },
    #[error("invalid fit options: {0}")]
    Options(&'static str),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

/// How the smoothing parameters are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Smoothing {
    /// Use the given `lambda` (one entry per penalty).
    Fixed(Vec<f64>),
    /// Evaluate AIC with every penalty set to each grid value and keep the best.
    Grid(Vec<f64>),
    /// Coordinate-wise search on `log lambda` minimizing AIC.
    Aic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_outer_iters: usize,
    pub max_tr_iters: usize,
    pub gradient_tolerance: f64,
    pub initial_trust_radius: f64,
    pub smoothing: Smoothing,
    /// Hold `rho*` at this value (0 gives the pair of univariate models).
    pub fixed_rho_star: Option<f64>,
    /// Half-width of the `log lambda` search window around each penalty's scale.
    pub lambda_search_halfwidth: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 25,
            max_tr_iters: 200,
            gradient_tolerance: 1e-7,
            initial_trust_radius: 1.0,
            smoothing: Smoothing::Aic,
            fixed_rho_star: None,
            lambda_search_halfwidth: 12.0,
        }
    }
}

impl FitOptions {
    pub fn univariate() -> Self {
        Self { fixed_rho_star: Some(0.0), ..Self::default() }
    }

    fn validate(&self) -> Result<(), FitError> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(FitError::Options("gradient tolerance must be positive"));
        }
        if !(self.initial_trust_radius > 0.0) {
            return Err(FitError::Options("initial trust radius must be positive"));
        }
        if self.max_tr_iters == 0 {
            return Err(FitError::Options("at least one trust-region iteration is needed"));
        }
        if !(self.lambda_search_halfwidth > 0.0) {
            return Err(FitError::Options("lambda search half-width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    /// Trust-region iterations of the final inner fit.
    pub iterations: usize,
    pub gradient_norm: f64,
    pub rejections: usize,
    /// Smoothing-parameter sweeps.
    pub outer_iterations: usize,
    /// Inner fits run while selecting the smoothing parameters.
    pub criterion_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub delta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub loglik: f64,
    pub penalized_loglik: f64,
    /// Unpenalized Hessian `H(delta_hat)`.
    pub hessian: DMatrix<f64>,
    /// `H(delta_hat) - S_lambda`, exactly.
    pub penalized_hessian: DMatrix<f64>,
    /// Multiple of the identity added to `-H_p` so that it factorizes (0 when
    /// it is already positive definite).
    pub repair_shift: f64,
    /// Coordinates that were estimated (false for a held `rho*`).
    pub free: Vec<bool>,
    /// `(-H_p + shift I)^{-1}` on the free coordinates, zero elsewhere.
    pub covariance: DMatrix<f64>,
    pub edf: f64,
    /// Per term of `layout.terms`, in the same order.
    pub term_edf: Vec<f64>,
    pub aic: f64,
    pub convergence: Convergence,
}

struct Inner {
    delta: Vec<f64>,
    eval: Evaluation,
    penalized: f64,
    iterations: usize,
    rejections: usize,
    gradient_norm: f64,
    converged: bool,
}

fn free_mask(bundle: &DesignBundle, options: &FitOptions) -> Vec<bool> {
    let mut free = vec![true; bundle.dim()];
    if options.fixed_rho_star.is_some() {
        free[bundle.layout.rho_index()] = false;
    }
    free
}

fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn sub_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// Penalized value, gradient and Hessian at `delta`.
fn penalized_eval(bundle: &DesignBundle, delta: &[f64], lambda: &[f64]) -> Result<(Evaluation, f64), LikelihoodError> {
    let mut e = evaluate(bundle, delta)?;
    let lay = &bundle.layout;
    let pen = lay.penalty_quadratic(delta, lambda);
    let penalized = e.loglik - 0.5 * pen;
    e.gradient -= lay.penalty_gradient(delta, lambda);
    e.hessian -= lay.penalty_matrix(lambda);
    Ok((e, penalized))
}

/// Dogleg step for `min g'p + p'Bp/2` subject to `|p| <= radius`.
fn dogleg(g: &DVector<f64>, b: &DMatrix<f64>, newton: &DVector<f64>, radius: f64) -> DVector<f64> {
    if newton.norm() <= radius {
        return newton.clone();
    }
    let gnorm = g.norm();
    let gbg = (g.transpose() * b * g)[(0, 0)];
    if gbg <= 0.0 {
        return -g * (radius / gnorm);
    }
    let cauchy = -g * (gnorm * gnorm / gbg);
    let cn = cauchy.norm();
    if cn >= radius {
        return -g * (radius / gnorm);
    }
    // solve |c + t (n - c)| = radius for t in [0, 1]
    let d = newton - &cauchy;
    let a = d.norm_squared();
    let bq = 2.0 * cauchy.dot(&d);
    let c = cn * cn - radius * radius;
    let t = (-bq + libm::sqrt(bq * bq - 4.0 * a * c)) / (2.0 * a);
    cauchy + d * t.clamp(0.0, 1.0)
}

fn maximize(
    bundle: &DesignBundle,
    lambda: &[f64],
    start: &[f64],
    free: &[bool],
    options: &FitOptions,
) -> Result<Inner, LikelihoodError> {
    let idx: Vec<usize> = (0..free.len()).filter(|&j| free[j]).collect();
    let mut delta = start.to_vec();
    let (mut eval, mut value) = penalized_eval(bundle, &delta, lambda)?;
    let mut radius = f64::NAN;
    let mut scale = DVector::<f64>::zeros(idx.len());
    let mut rejections = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut gradient_norm = f64::INFINITY;
    let mut noise_steps = 0;
    while iterations < options.max_tr_iters {
        let g = -sub_vector(&eval.gradient, &idx);
        let b = -sub_matrix(&eval.hessian, &idx);
        gradient_norm = g.amax();
        for (j, s) in scale.iter_mut().enumerate() {
            *s = s.max(libm::sqrt(b[(j, j)].abs())).max(1e-8);
        }
        let gs = g.component_div(&scale);
        let mut bs = b.clone();
        for i in 0..idx.len() {
            for j in 0..idx.len() {
                bs[(i, j)] /= scale[i] * scale[j];
            }
        }
        symmetrize(&mut bs);
        let Some((chol, shift)) = cholesky_with_shift(&bs) else { break };
        let newton = -chol.solve(&gs);
        let decrement = -gs.dot(&newton);
        let tol = options.gradient_tolerance * (1.0 + value.abs());
        if gradient_norm <= tol && (shift > 0.0 || decrement <= 1e-9 * (1.0 + value.abs())) {
            converged = true;
            break;
        }
        if radius.is_nan() {
            radius = if shift == 0.0 { newton.norm().max(options.initial_trust_radius) } else { options.initial_trust_radius };
        }
        iterations += 1;
        let step_s = dogleg(&gs, &bs, &newton, radius);
        let predicted = -(gs.dot(&step_s) + 0.5 * (step_s.transpose() * &bs * &step_s)[(0, 0)]);
        let step_norm = step_s.norm();
        let mut trial = delta.clone();
        for (k, &j) in idx.iter().enumerate() {
            trial[j] += step_s[k] / scale[k];
        }
        let noise = 1e-13 * (1.0 + value.abs());
        if !(predicted > 0.0) || predicted <= noise {
            // The model predicts progress below the resolution of the objective.
            // Steps are then judged by the gradient, within a small budget.
            noise_steps += 1;
            let improved = match penalized_eval(bundle, &trial, lambda) {
                Ok((e, v)) if v - value >= -noise && sub_vector(&e.gradient, &idx).amax() < gradient_norm => {
                    delta = trial;
                    eval = e;
                    value = v;
                    true
                }
                _ => false,
            };
            if !improved || noise_steps > 10 {
                gradient_norm = sub_vector(&eval.gradient, &idx).amax();
                converged = gradient_norm <= tol;
                break;
            }
            continue;
        }
        let actual = match penalized_loglik(bundle, &trial, lambda) {
            Ok(v) if v.is_finite() => v - value,
            _ => f64::NEG_INFINITY,
        };
        let ratio = actual / predicted;
        if ratio < 0.25 {
            radius = 0.25 * step_norm;
        } else if ratio > 0.75 && step_norm >= 0.99 * radius {
            radius = (2.0 * radius).min(1e8);
        }
        if ratio > 1e-4 {
            match penalized_eval(bundle, &trial, lambda) {
                Ok((e, v)) => {
                    delta = trial;
                    eval = e;
                    value = v;
                }
                Err(_) => {
                    rejections += 1;
                    radius = 0.25 * step_norm;
                }
            }
        } else {
            rejections += 1;
        }
        if radius < 1e-14 {
            break;
        }
    }
    Ok(Inner { delta, eval, penalized: value, iterations, rejections, gradient_norm, converged })
}

/// A strictly increasing linear ramp for the time transformation spanning
/// `[-span/2, span/2]` over the monotone term's interval, zero elsewhere.
fn ramp_start(bundle: &DesignBundle, span: f64) -> Vec<f64> {
    let mut delta = vec![0.0; bundle.dim()];
    let tb = bundle.layout.time_block.clone();
    let step = libm::log(span / tb.len() as f64);
    for j in tb {
        delta[j] = step;
    }
    delta[0] = -0.5 * span;
    delta
}

/// Starting values: a ramp for the time transformation, then the `rho* = 0`
/// fit (a probit for the treatment and a univariate survival model, which
/// separate at zero correlation), then `rho*` set to 0 or its held value.
pub fn initial_values(bundle: &DesignBundle, lambda: &[f64], options: &FitOptions) -> Result<Vec<f64>, FitError> {
    let mut span = 6.0;
    let mut start = ramp_start(bundle, span);
    let mut last_err = None;
    for _ in 0..12 {
        match penalized_loglik(bundle, &start, lambda) {
            Ok(_) => {
                last_err = None;
                break;
            }
            Err(e) => {
                last_err = Some(e);
                span *= 0.5;
                start = ramp_start(bundle, span);
            }
        }
    }
    if let Some(e) = last_err {
        return Err(FitError::InvalidStart(e));
    }
    let mut free = vec![true; bundle.dim()];
    free[bundle.layout.rho_index()] = false;
    let mut delta = match maximize(bundle, lambda, &start, &free, options) {
        Ok(inner) if inner.penalized.is_finite() => inner.delta,
        _ => start,
    };
    delta[bundle.layout.rho_index()] = options.fixed_rho_star.unwrap_or(0.0);
    Ok(delta)
}

/// Default smoothing parameters: each penalty at its curvature scale.
pub fn default_lambda(bundle: &DesignBundle) -> Vec<f64> {
    bundle.layout.penalties.iter().map(|p| p.scale).collect()
}

/// Effective degrees of freedom `tr[-H (-H_p)^{-1}]` in total and per term.
fn edf_parts(bundle: &DesignBundle, hessian: &DMatrix<f64>, covariance: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let a = covariance * (-hessian);
    let total = a.trace();
    let per_term = bundle.layout.terms.iter().map(|t| t.range.clone().map(|j| a[(j, j)]).sum()).collect();
    (total, per_term)
}

fn finalize(
    bundle: &DesignBundle,
    inner: Inner,
    lambda: Vec<f64>,
    free: Vec<bool>,
    outer: usize,
    evaluations: usize,
) -> Result<FitResult, FitError> {
    let dim = bundle.dim();
    let idx: Vec<usize> = (0..dim).filter(|&j| free[j]).collect();
    let s = bundle.layout.penalty_matrix(&lambda);
    let penalized_hessian = inner.eval.hessian.clone();
    let hessian = &penalized_hessian + &s;
    let neg = -sub_matrix(&penalized_hessian, &idx);
    let (chol, shift) =
        cholesky_with_shift(&neg).ok_or(FitError::Options("penalized Hessian could not be repaired"))?;
    let v_free = chol.inverse();
    let mut covariance = DMatrix::zeros(dim, dim);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            covariance[(i, j)] = v_free[(a, b)];
        }
    }
    symmetrize(&mut covariance);
    let mut h_free = DMatrix::zeros(dim, dim);
    for &i in &idx {
        for &j in &idx {
            h_free[(i, j)] = hessian[(i, j)];
        }
    }
    let (edf, term_edf) = edf_parts(bundle, &h_free, &covariance);
    let loglik = inner.eval.loglik;
    Ok(FitResult {
        delta: inner.delta,
        lambda,
        loglik,
        penalized_loglik: inner.penalized,
        hessian,
        penalized_hessian,
        repair_shift: shift,
        free,
        covariance,
        edf,
        term_edf,
        aic: -2.0 * loglik + 2.0 * edf,
        convergence: Convergence {
            converged: inner.converged,
            iterations: inner.iterations,
            gradient_norm: inner.gradient_norm,
            rejections: inner.rejections,
            outer_iterations: outer,
            criterion_evaluations: evaluations,
        },
    })
}

/// Fit at fixed smoothing parameters from a given start.
pub fn fit_at(
    bundle: &DesignBundle,
    lambda: &[f64],
    start: &[f64],
    options: &FitOptions,
) -> Result<FitResult, FitError> {
    options.validate()?;
    check_lambda(bundle, lambda)?;
    let free = free_mask(bundle, options);
    let mut start = start.to_vec();
    if let Some(r) = options.fixed_rho_star {
        start[bundle.layout.rho_index()] = r;
    }
    let inner = maximize(bundle, lambda, &start, &free, options)?;
    finalize(bundle, inner, lambda.to_vec(), free, 0, 1)
}

fn check_lambda(bundle: &DesignBundle, lambda: &[f64]) -> Result<(), FitError> {
    let k = bundle.layout.penalties.len();
    if lambda.len() != k {
        return Err(FitError::LambdaLength { expected: k, found: lambda.len() });
    }
    if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(FitError::Options("smoothing parameters must be finite and non-negative"));
    }
    Ok(())
}

/// AIC of the inner optimum at `lambda`, or `None` when the trial fails.
struct Trial {
    aic: f64,
    delta: Vec<f64>,
}

fn criterion(
    bundle: &DesignBundle,
    lambda: &[f64],
    start: &[f64],
    free: &[bool],
    options: &FitOptions,
) -> Option<Trial> {
    let inner = maximize(bundle, lambda, start, free, options).ok()?;
    let delta = inner.delta.clone();
    let fit = finalize(bundle, inner, lambda.to_vec(), free.to_vec(), 0, 0).ok()?;
    fit.aic.is_finite().then_some(Trial { aic: fit.aic, delta })
}

/// Smoothing parameters by coordinate-wise search on `log lambda`: a coarse
/// grid followed by golden-section refinement for each penalty in turn,
/// repeated until no coordinate moves.
pub fn select_smoothing(
    bundle: &DesignBundle,
    start: &[f64],
    options: &FitOptions,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize), FitError> {
    let free = free_mask(bundle, options);
    let centres: Vec<f64> = bundle.layout.penalties.iter().map(|p| libm::log(p.scale)).collect();
    let mut log_lambda = centres.clone();
    let to_lambda = |ll: &[f64]| ll.iter().map(|v| libm::exp(*v)).collect::<Vec<_>>();
    let mut best_delta = start.to_vec();
    let mut best = criterion(bundle, &to_lambda(&log_lambda), start, &free, options)
        .ok_or(FitError::InvalidStart(LikelihoodError::InvalidPoint { row: 0, reason: "no fit at the initial smoothing parameters" }))?;
    best_delta.clone_from(&best.delta);
    let mut evaluations = 1;
    let mut sweeps = 0;
    let hw = options.lambda_search_halfwidth;
    while sweeps < options.max_outer_iters {
        sweeps += 1;
        let mut moved = false;
        for k in 0..log_lambda.len() {
            let old = log_lambda[k];
            let mut eval_at = |v: f64, best: &mut Trial, best_ll: &mut Vec<f64>| -> f64 {
                let mut ll = best_ll.clone();
                ll[k] = v;
                evaluations += 1;
                match criterion(bundle, &to_lambda(&ll), &best.delta, &free, options) {
                    Some(t) => {
                        let a = t.aic;
                        if a < best.aic {
                            *best = t;
                            *best_ll = ll;
                        }
                        a
                    }
                    None => f64::INFINITY,
                }
            };
            let (lo, hi, step) = if sweeps == 1 { (centres[k] - hw, centres[k] + hw, 3.0) } else { (old - 3.0, old + 3.0, 1.5) };
            let mut v = lo;
            while v <= hi + 1e-12 {
                if (v - log_lambda[k]).abs() > 1e-12 {
                    eval_at(v, &mut best, &mut log_lambda);
                }
                v += step;
            }
            // golden-section refinement around the incumbent
            let centre = log_lambda[k];
            let (mut a, mut b) = ((centre - step).max(lo - step), (centre + step).min(hi + step));
            let inv_phi = 0.5 * (libm::sqrt(5.0) - 1.0);
            let mut c = b - inv_phi * (b - a);
            let mut d = a + inv_phi * (b - a);
            let mut fc = eval_at(c, &mut best, &mut log_lambda);
            let mut fd = eval_at(d, &mut best, &mut log_lambda);
            while b - a > 0.05 {
                if fc < fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - inv_phi * (b - a);
                    fc = eval_at(c, &mut best, &mut log_lambda);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + inv_phi * (b - a);
                    fd = eval_at(d, &mut best, &mut log_lambda);
                }
            }
            if (log_lambda[k] - old).abs() > 0.1 {
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    best_delta.clone_from(&best.delta);
    Ok((to_lambda(&log_lambda), best_delta, sweeps, evaluations))
}

/// Fit the model: starting values, smoothing-parameter selection and the final
/// inner fit. Non-convergence is reported in the result, not as an error.
pub fn fit(bundle: &DesignBundle, options: &FitOptions) -> Result<FitResult, FitError> {
    options.validate()?;
    let free = free_mask(bundle, options);
    let k = bundle.layout.penalties.len();
    let lambda0 = match &options.smoothing {
        Smoothing::Fixed(l) => {
            check_lambda(bundle, l)?;
            l.clone()
        }
        _ => default_lambda(bundle),
    };
    let start = initial_values(bundle, &lambda0, options)?;
    let (lambda, start, outer, evals) = match &options.smoothing {
        Smoothing::Fixed(l) => (l.clone(), start, 0, 0),
        _ if k == 0 => (Vec::new(), start, 0, 0),
        Smoothing::Grid(values) => {
            if values.is_empty() {
                return Err(FitError::Options("empty smoothing-parameter grid"));
            }
            let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
            for &v in values {
                let l = vec![v; k];
                check_lambda(bundle, &l)?;
                if let Some(t) = criterion(bundle, &l, &start, &free, options) {
                    if best.as_ref().map_or(true, |b| t.aic < b.0) {
                        best = Some((t.aic, l, t.delta));
                    }
                }
            }
            let (_, l, d) = best.ok_or(FitError::Options("no grid value produced a valid fit"))?;
            (l, d, 1, values.len())
        }
        Smoothing::Aic => select_smoothing(bundle, &start, options)?,
    };
    let inner = maximize(bundle, &lambda, &start, &free, options)?;
    finalize(bundle, inner, lambda, free, outer, evals)
}

/// AIC at fixed smoothing parameters; exposed for grid inspection.
pub fn aic_at(bundle: &DesignBundle, lambda: &[f64], start: &[f64], options: &FitOptions) -> Option<f64> {
    let free = free_mask(bundle, options);
    criterion(bundle, lambda, start, &free, options).map(|t| t.aic)
}

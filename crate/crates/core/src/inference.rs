//! Post-fit uncertainty: Bayesian covariance, effective degrees of freedom,
//! Wald summaries, and posterior-simulation bands for survival curves and the
//! survival average treatment effect (SATE).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::design::{DesignBundle, DesignError, Equation};
use crate::linalg::{min_eigenvalue, sorted_symmetric_eigen, symmetrize, weighted_cross};
use crate::numerics::{chi_square_sf, norm_cdf, norm_quantile};
use crate::optimizer::FitResult;
use crate::splines::TermKind;

/// Normwise relative residual allowed in `(-H_p) V = I` after equilibration.
pub const COVARIANCE_RESIDUAL: f64 = 1e-8;
/// Slack allowed when counting increases along a survival curve.
pub const MONOTONE_TOLERANCE: f64 = 1e-12;
/// Survival at `t = 0` below this is flagged.
pub const LEFT_BOUNDARY_FLAG: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("the fit did not converge")]
    NotConverged,
    #[error("negative penalized Hessian is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    Singular { min_eigenvalue: f64 },
    #[error("covariance residual {residual:e} exceeds {limit:e}")]
    Residual { residual: f64, limit: f64 },
    #[error("time grid is empty")]
    EmptyGrid,
    #[error("time {value} is outside [0, {upper}]")]
    OutsideGrid { value: f64, upper: f64 },
    #[error("group {0} has no rows")]
    EmptyGroup(String),
    #[error("invalid inference options: {0}")]
    Options(&'static str),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Gaussian approximation `delta ~ N(delta_hat, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    /// `f(delta_hat)`, monotone coefficients exponentiated.
    pub mean_tilde: Vec<f64>,
    /// `V = (-H_p)^{-1}` on the free coordinates, zero for held ones.
    pub covariance: DMatrix<f64>,
    /// `diag(E) V diag(E)`.
    pub covariance_tilde: DMatrix<f64>,
    pub free: Vec<bool>,
    /// Equilibrated Cholesky factor of `-H_p`, scale and factor.
    scale: Vec<f64>,
    factor: DMatrix<f64>,
}

impl Posterior {
    pub fn std_error(&self, j: usize) -> f64 {
        libm::sqrt(self.covariance_tilde[(j, j)].max(0.0))
    }

    /// One draw from `N(mean, V)` on the free coordinates: `D L^{-T} z`.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = self.scale.len();
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut *rng));
        let x = self.factor.transpose().solve_upper_triangular(&z).unwrap_or(z);
        let mut out = self.mean.clone();
        let mut a = 0;
        for (j, &f) in self.free.iter().enumerate() {
            if f {
                out[j] += self.scale[a] * x[a];
                a += 1;
            }
        }
        out
    }
}

/// `|A V - I|_inf / (|A|_inf |V|_inf)`, the backward error of an inverse.
fn relative_residual(a: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let k = a.nrows();
    let row_norm = |m: &DMatrix<f64>| (0..k).map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let r = a * v - DMatrix::<f64>::identity(k, k);
    row_norm(&r) / (row_norm(a) * row_norm(v)).max(1.0)
}

fn free_indices(free: &[bool]) -> Vec<usize> {
    (0..free.len()).filter(|&j| free[j]).collect()
}

/// `V = (-H_p + shift I)^{-1}` with `shift` the optimizer's repair (0 when
/// `-H_p` is positive definite). The inverse is formed from the Cholesky factor
/// of the diagonally equilibrated matrix and its residual is checked there.
pub fn covariance(bundle: &DesignBundle, fit: &FitResult) -> Result<Posterior, InferenceError> {
    if !fit.convergence.converged {
        return Err(InferenceError::NotConverged);
    }
    let dim = bundle.dim();
    let idx = free_indices(&fit.free);
    let k = idx.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        -fit.penalized_hessian[(idx[i], idx[j])] + if i == j { fit.repair_shift } else { 0.0 }
    });
    let singular = || InferenceError::Singular { min_eigenvalue: min_eigenvalue(&a) };
    if (0..k).any(|j| !(a[(j, j)] > 0.0)) {
        return Err(singular());
    }
    let scale: Vec<f64> = (0..k).map(|j| 1.0 / libm::sqrt(a[(j, j)])).collect();
    let mut ae = DMatrix::from_fn(k, k, |i, j| a[(i, j)] * scale[i] * scale[j]);
    symmetrize(&mut ae);
    let chol = ae.clone().cholesky().ok_or_else(singular)?;
    let ve = chol.inverse();
    let residual = relative_residual(&ae, &ve);
    if !(residual <= COVARIANCE_RESIDUAL) {
        return Err(InferenceError::Residual { residual, limit: COVARIANCE_RESIDUAL });
    }
    let mut v = DMatrix::zeros(dim, dim);
    for (a_, &i) in idx.iter().enumerate() {
        for (b_, &j) in idx.iter().enumerate() {
            v[(i, j)] = ve[(a_, b_)] * scale[a_] * scale[b_];
        }
    }
    symmetrize(&mut v);
    let e = bundle.layout.e_vector(&fit.delta);
    let vt = DMatrix::from_fn(dim, dim, |i, j| e[i] * v[(i, j)] * e[j]);
    Ok(Posterior {
        mean: fit.delta.clone(),
        mean_tilde: bundle.reparametrize(&fit.delta).iter().copied().collect(),
        covariance: v,
        covariance_tilde: vt,
        free: fit.free.clone(),
        scale,
        factor: chol.l(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edf {
    /// `tr[-H V]`.
    pub total: f64,
    /// `psi - tr[V S_lambda]`, the same quantity by the other route.
    pub total_from_penalty: f64,
    /// Per term of `layout.terms`.
    pub per_term: Vec<f64>,
    /// Contribution of `rho*`, which belongs to no term.
    pub rho: f64,
}

pub fn edf(bundle: &DesignBundle, fit: &FitResult, posterior: &Posterior) -> Edf {
    let dim = bundle.dim();
    let mut h = DMatrix::zeros(dim, dim);
    let idx = free_indices(&fit.free);
    for &i in &idx {
        for &j in &idx {
            h[(i, j)] = fit.hessian[(i, j)];
        }
    }
    let a = &posterior.covariance * (-h);
    let s = bundle.layout.penalty_matrix(&fit.lambda);
    let total_from_penalty = idx.len() as f64 - (&posterior.covariance * s).trace();
    let per_term = bundle.layout.terms.iter().map(|t| t.range.clone().map(|j| a[(j, j)]).sum()).collect();
    let j = bundle.layout.rho_index();
    Edf { total: a.trace(), total_from_penalty, per_term, rho: a[(j, j)] }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Parametric,
    Smooth,
    Ridge,
    Monotone,
}

/// One line of the coefficient table. Parametric rows carry an estimate and
/// Wald statistic; smooth and ridge rows a chi-square test on the term; the
/// monotone time term only its edf.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub equation: Equation,
    pub kind: RowKind,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    /// `z` for parametric rows, the chi-square statistic for smooth terms.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub edf: Option<f64>,
    /// Reference degrees of freedom of the smooth-term test.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub rho: RhoInterval,
    pub edf: Edf,
    pub loglik: f64,
    pub aic: f64,
}

/// Two-sided Wald p-value; 1 for a zero statistic.
pub fn wald_p_value(estimate: f64, std_error: f64) -> Option<f64> {
    if !(std_error > 0.0) {
        return None;
    }
    let z = estimate / std_error;
    Some(2.0 * norm_cdf(-z.abs()))
}

/// `f' (V_f)^-_r f` for `f = X beta` and `V_f = X V X'`, computed as
/// `(R beta)' (R V R')^-_r (R beta)` with `X'X = R'R`.
fn smooth_wald(x: &DMatrix<f64>, beta: &DVector<f64>, v: &DMatrix<f64>, rank: usize) -> Option<f64> {
    let xtx = weighted_cross(x, &vec![1.0; x.nrows()]);
    let (vals, vecs) = sorted_symmetric_eigen(&xtx);
    // R = Lambda^{1/2} U' is a square root of X'X that tolerates rank deficiency
    let k = vals.len();
    let r = DMatrix::from_fn(k, k, |i, j| libm::sqrt(vals[i].max(0.0)) * vecs[(j, i)]);
    let rb = &r * beta;
    let mut rvr = &r * v * r.transpose();
    symmetrize(&mut rvr);
    let (ev, eu) = sorted_symmetric_eigen(&rvr);
    let mut stat = 0.0;
    for i in 0..rank.min(k) {
        if !(ev[i] > ev[0] * 1e-12) {
            return None;
        }
        let c = eu.column(i).dot(&rb);
        stat += c * c / ev[i];
    }
    Some(stat)
}

pub fn rho_interval(bundle: &DesignBundle, fit: &FitResult, posterior: &Posterior, theta: f64) -> RhoInterval {
    let j = bundle.layout.rho_index();
    let z = norm_quantile(1.0 - 0.5 * theta).unwrap_or(f64::INFINITY);
    let se = posterior.std_error(j);
    let r = fit.delta[j];
    RhoInterval { estimate: libm::tanh(r), lower: libm::tanh(r - z * se), upper: libm::tanh(r + z * se) }
}

pub fn summary(bundle: &DesignBundle, fit: &FitResult, posterior: &Posterior, theta: f64) -> Summary {
    let lay = &bundle.layout;
    let e = edf(bundle, fit, posterior);
    let mut rows = Vec::new();
    for (t, slot) in lay.terms.iter().enumerate() {
        let term_edf = e.per_term[t];
        match slot.kind {
            TermKind::Parametric => {
                for j in slot.range.clone() {
                    let est = posterior.mean_tilde[j];
                    let se = posterior.std_error(j);
                    rows.push(SummaryRow {
                        label: lay.column_labels[j].clone(),
                        equation: slot.equation,
                        kind: RowKind::Parametric,
                        estimate: Some(est),
                        std_error: Some(se),
                        statistic: (se > 0.0).then(|| est / se),
                        p_value: wald_p_value(est, se),
                        edf: None,
                        rank: None,
                    });
                }
            }
            TermKind::Monotone => rows.push(SummaryRow {
                label: slot.label.clone(),
                equation: slot.equation,
                kind: RowKind::Monotone,
                estimate: None,
                std_error: None,
                statistic: None,
                p_value: None,
                edf: Some(term_edf),
                rank: None,
            }),
            TermKind::Smooth | TermKind::Ridge => {
                let x = bundle.term_design(slot);
                let beta = DVector::from_column_slice(&posterior.mean_tilde[slot.range.clone()]);
                let v = posterior
                    .covariance_tilde
                    .view((slot.range.start, slot.range.start), (slot.range.len(), slot.range.len()))
                    .into_owned();
                let rank = (libm::round(term_edf) as usize).clamp(1, slot.range.len());
                let stat = smooth_wald(&x, &beta, &v, rank);
                rows.push(SummaryRow {
                    label: slot.label.clone(),
                    equation: slot.equation,
                    kind: if slot.kind == TermKind::Smooth { RowKind::Smooth } else { RowKind::Ridge },
                    estimate: None,
                    std_error: None,
                    statistic: stat,
                    p_value: stat.map(|s| chi_square_sf(s, rank as f64)),
                    edf: Some(term_edf),
                    rank: Some(rank),
                });
            }
        }
    }
    Summary { rows, rho: rho_interval(bundle, fit, posterior, theta), edf: e, loglik: fit.loglik, aic: fit.aic }
}

/// Posterior simulation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawOptions {
    /// Bands are the `(theta/2, 1 - theta/2)` quantiles.
    pub theta: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for DrawOptions {
    fn default() -> Self {
        Self { theta: 0.05, draws: 100, seed: 0 }
    }
}

impl DrawOptions {
    fn validate(&self) -> Result<(), InferenceError> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(InferenceError::Options("theta must lie in (0, 1)"));
        }
        if self.draws == 0 {
            return Err(InferenceError::Options("at least one posterior draw is needed"));
        }
        Ok(())
    }
}

/// Rows averaged into one survival curve. `treatment` sets every subject's
/// treatment (a counterfactual curve); `None` keeps the observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub label: String,
    pub rows: Vec<usize>,
    pub treatment: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub grid: Vec<f64>,
    pub theta: f64,
    pub draws: usize,
    pub seed: u64,
    pub curves: Vec<Curve>,
    /// Increases larger than [`MONOTONE_TOLERANCE`] over all point and drawn
    /// survival curves (always 0 for a valid fit).
    pub monotonicity_violations: usize,
    /// Model survival at `t = 0` per curve (survival curves only).
    pub survival_at_zero: Vec<f64>,
    /// Some curve starts below [`LEFT_BOUNDARY_FLAG`] at `t = 0`.
    pub low_left_boundary: bool,
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Band from draws, widened if needed so that it contains the estimate.
fn band(values: &mut [f64], theta: f64, estimate: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let lo = quantile_sorted(values, 0.5 * theta);
    let hi = quantile_sorted(values, 1.0 - 0.5 * theta);
    (lo.min(estimate), hi.max(estimate))
}

fn check_grid(bundle: &DesignBundle, grid: &[f64]) -> Result<(), InferenceError> {
    if grid.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    let (_, upper) = bundle.time_basis.interval();
    for &t in grid {
        if !(t >= 0.0 && t <= upper) {
            return Err(InferenceError::OutsideGrid { value: t, upper });
        }
    }
    Ok(())
}

/// Ingredients of `eta1(t, i, d) = h(t) + s_i + d e_i` for one coefficient vector.
struct Predictor {
    h: Vec<f64>,
    statics: Vec<f64>,
    effects: Vec<f64>,
}

fn predictor(bundle: &DesignBundle, delta: &[f64], grid: &[f64]) -> Result<Predictor, InferenceError> {
    let h = grid.iter().map(|&t| bundle.time_transform(delta, t)).collect::<Result<Vec<_>, _>>()?;
    let (statics, effects) = bundle.counterfactual_parts(delta)?;
    Ok(Predictor { h, statics, effects })
}

fn group_curve(p: &Predictor, bundle: &DesignBundle, g: &GroupSpec) -> Vec<f64> {
    let m = g.rows.len() as f64;
    p.h.iter()
        .map(|&h| {
            let mut acc = 0.0;
            for &i in &g.rows {
                let d = g.treatment.unwrap_or(bundle.treatment[i]);
                let eta = h + p.statics[i] + if d { p.effects[i] } else { 0.0 };
                acc += norm_cdf(-eta);
            }
            acc / m
        })
        .collect()
}

fn sate_curve(p: &Predictor, rows: &[usize]) -> Vec<f64> {
    let n = rows.len() as f64;
    p.h.iter()
        .map(|&h| {
            let mut acc = 0.0;
            for &i in rows {
                let s = p.statics[i];
                acc += norm_cdf(-(h + s + p.effects[i])) - norm_cdf(-(h + s));
            }
            acc / n
        })
        .collect()
}

fn increases(curve: &[f64]) -> usize {
    curve.windows(2).filter(|w| w[1] > w[0] + MONOTONE_TOLERANCE).count()
}

fn draws(posterior: &Posterior, options: &DrawOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    (0..options.draws).map(|_| posterior.draw(&mut rng)).collect()
}

fn assemble_curve(label: String, estimate: Vec<f64>, drawn: &[Vec<f64>], theta: f64) -> Curve {
    let mut lower = Vec::with_capacity(estimate.len());
    let mut upper = Vec::with_capacity(estimate.len());
    let mut column = vec![0.0; drawn.len()];
    for (k, &est) in estimate.iter().enumerate() {
        for (c, d) in column.iter_mut().zip(drawn) {
            *c = d[k];
        }
        let (lo, hi) = band(&mut column, theta, est);
        lower.push(lo);
        upper.push(hi);
    }
    Curve { label, estimate, lower, upper }
}

/// Mean survival per group with posterior-simulation bands. Draws are made on
/// `delta` and mapped through `f`, so every drawn time transformation stays
/// increasing.
pub fn survival_curves(
    bundle: &DesignBundle,
    posterior: &Posterior,
    grid: &[f64],
    groups: &[GroupSpec],
    options: &DrawOptions,
) -> Result<CurveSet, InferenceError> {
    options.validate()?;
    check_grid(bundle, grid)?;
    for g in groups {
        if g.rows.is_empty() {
            return Err(InferenceError::EmptyGroup(g.label.clone()));
        }
    }
    let point = predictor(bundle, &posterior.mean, grid)?;
    let estimates: Vec<Vec<f64>> = groups.iter().map(|g| group_curve(&point, bundle, g)).collect();
    let mut violations = estimates.iter().map(|c| increases(c)).sum::<usize>();
    let mut drawn: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(options.draws); groups.len()];
    for delta in draws(posterior, options) {
        let p = predictor(bundle, &delta, grid)?;
        for (k, g) in groups.iter().enumerate() {
            let c = group_curve(&p, bundle, g);
            violations += increases(&c);
            drawn[k].push(c);
        }
    }
    let at_zero = predictor(bundle, &posterior.mean, &[0.0])?;
    let survival_at_zero: Vec<f64> = groups.iter().map(|g| group_curve(&at_zero, bundle, g)[0]).collect();
    let curves = groups
        .iter()
        .zip(estimates)
        .zip(&drawn)
        .map(|((g, est), d)| assemble_curve(g.label.clone(), est, d, options.theta))
        .collect();
    Ok(CurveSet {
        grid: grid.to_vec(),
        theta: options.theta,
        draws: options.draws,
        seed: options.seed,
        curves,
        monotonicity_violations: violations,
        low_left_boundary: survival_at_zero.iter().any(|&s| s < LEFT_BOUNDARY_FLAG),
        survival_at_zero,
    })
}

/// `SATE(t) = mean_i [S(t | x_i, 1) - S(t | x_i, 0)]` over all rows, with
/// posterior bands. `swap_roles` reports `S(t | x, 0) - S(t | x, 1)`, the
/// effect with the treatment labels exchanged, as an exact negation.
pub fn sate(
    bundle: &DesignBundle,
    posterior: &Posterior,
    grid: &[f64],
    options: &DrawOptions,
    swap_roles: bool,
) -> Result<CurveSet, InferenceError> {
    let all = GroupSpec { label: String::from("SATE"), rows: (0..bundle.n()).collect(), treatment: None };
    sate_for(bundle, posterior, grid, &all, options, swap_roles)
}

/// SATE averaged over the rows of `group` (its `treatment` is ignored).
pub fn sate_for(
    bundle: &DesignBundle,
    posterior: &Posterior,
    grid: &[f64],
    group: &GroupSpec,
    options: &DrawOptions,
    swap_roles: bool,
) -> Result<CurveSet, InferenceError> {
    options.validate()?;
    check_grid(bundle, grid)?;
    if group.rows.is_empty() {
        return Err(InferenceError::EmptyGroup(group.label.clone()));
    }
    let rows = &group.rows;
    let estimate = sate_curve(&predictor(bundle, &posterior.mean, grid)?, rows);
    let drawn = draws(posterior, options)
        .iter()
        .map(|d| Ok(sate_curve(&predictor(bundle, d, grid)?, rows)))
        .collect::<Result<Vec<_>, InferenceError>>()?;
    let mut curve = assemble_curve(group.label.clone(), estimate, &drawn, options.theta);
    if swap_roles {
        // negate after the quantiles so that the bands mirror exactly
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        curve = Curve {
            label: curve.label,
            estimate: neg(&curve.estimate),
            lower: neg(&curve.upper),
            upper: neg(&curve.lower),
        };
    }
    Ok(CurveSet {
        grid: grid.to_vec(),
        theta: options.theta,
        draws: options.draws,
        seed: options.seed,
        curves: vec![curve],
        monotonicity_violations: 0,
        survival_at_zero: Vec::new(),
        low_left_boundary: false,
    })
}

/// Treated and untreated counterfactual groups over all rows.
pub fn treatment_groups(bundle: &DesignBundle) -> Vec<GroupSpec> {
    let rows: Vec<usize> = (0..bundle.n()).collect();
    vec![
        GroupSpec { label: String::from("treated"), rows: rows.clone(), treatment: Some(true) },
        GroupSpec { label: String::from("control"), rows, treatment: Some(false) },
    ]
}

/// `count` equally spaced points on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let mut g: Vec<f64> = (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect();
            g[count - 1] = hi;
            g
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{ModelSpec, Term};
    use crate::numerics::norm_pdf;
    use crate::optimizer::tests::{joint_data, joint_spec};
    use crate::optimizer::{fit, fit_at, initial_values, FitOptions, Smoothing};

    fn fitted(n: usize, seed: u64, options: &FitOptions) -> (DesignBundle, FitResult) {
        let data = joint_data(n, 0.5, seed);
        let b = DesignBundle::assemble(&joint_spec(8), &data).unwrap();
        let f = fit(&b, options).unwrap();
        assert!(f.convergence.converged);
        (b, f)
    }

    fn fixed(l: f64) -> FitOptions {
        FitOptions { smoothing: Smoothing::Fixed(vec![l]), ..FitOptions::default() }
    }

    /// Probit by Newton's method on the observed information.
    fn newton_probit(x: &DMatrix<f64>, y: &[bool]) -> (DVector<f64>, DMatrix<f64>) {
        let p = x.ncols();
        let mut beta = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for _ in 0..100 {
            let eta = x * &beta;
            let mut grad = DVector::zeros(p);
            info.fill(0.0);
            for i in 0..x.nrows() {
                let u = if y[i] { eta[i] } else { -eta[i] };
                let sign = if y[i] { 1.0 } else { -1.0 };
                let lam = norm_pdf(u) / norm_cdf(u);
                let row = x.row(i).transpose();
                grad += &row * (sign * lam);
                info += &row * row.transpose() * (lam * (u + lam));
            }
            let step = info.clone().cholesky().unwrap().solve(&grad);
            beta += &step;
            if step.amax() < 1e-13 {
                break;
            }
        }
        (beta, info.try_inverse().unwrap())
    }

    #[test]
    fn covariance_inverts_penalized_hessian() {
        let (b, f) = fitted(400, 3, &fixed(1.0));
        let post = covariance(&b, &f).unwrap();
        let a = -&f.penalized_hessian;
        let r = (&a * &post.covariance - DMatrix::<f64>::identity(b.dim(), b.dim())).amax();
        assert!(r < 1e-7, "{r}");
        for j in 0..b.dim() {
            assert!(post.covariance[(j, j)] > 0.0);
            for k in 0..b.dim() {
                assert_eq!(post.covariance[(j, k)], post.covariance[(k, j)]);
                if !b.layout.reparametrized[j] && !b.layout.reparametrized[k] {
                    assert_eq!(post.covariance_tilde[(j, k)], post.covariance[(j, k)]);
                }
            }
        }
    }

    #[test]
    fn selection_standard_errors_match_probit() {
        let (b, f) = fitted(600, 5, &FitOptions { smoothing: Smoothing::Fixed(vec![1.0]), ..FitOptions::univariate() });
        let post = covariance(&b, &f).unwrap();
        let (beta, cov) = newton_probit(&b.selection, &b.treatment);
        let sel = b.layout.selection_range();
        for (k, j) in sel.enumerate() {
            assert!((f.delta[j] - beta[k]).abs() < 1e-6);
            assert!((post.std_error(j) - libm::sqrt(cov[(k, k)])).abs() < 1e-4, "{k}");
        }
        let rho = rho_interval(&b, &f, &post, 0.05);
        assert_eq!((rho.estimate, rho.lower, rho.upper), (0.0, 0.0, 0.0));
    }

    #[test]
    fn edf_traces_agree_and_hit_limits() {
        let data = joint_data(400, 0.5, 8);
        let b = DesignBundle::assemble(&joint_spec(8), &data).unwrap();
        let psi = b.dim() as f64;
        let zeta = b.layout.penalty_rank() as f64;
        for (lambda, target) in [(0.0, psi), (1e10, psi - zeta)] {
            let opts = fixed(lambda);
            let start = initial_values(&b, &[lambda], &opts).unwrap();
            let f = fit_at(&b, &[lambda], &start, &opts).unwrap();
            let post = covariance(&b, &f).unwrap();
            let e = edf(&b, &f, &post);
            assert!((e.total - e.total_from_penalty).abs() < 1e-8, "{e:?}");
            assert!((e.total - target).abs() < 0.01, "lambda {lambda}: {} vs {target}", e.total);
            assert!((e.per_term.iter().sum::<f64>() + e.rho - e.total).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_estimate_has_unit_p_value() {
        assert_eq!(wald_p_value(0.0, 0.3), Some(1.0));
        assert_eq!(wald_p_value(1.0, 0.0), None);
        assert!((wald_p_value(1.96, 1.0).unwrap() - 0.05).abs() < 1e-4);
    }

    #[test]
    fn rho_interval_maps_through_tanh() {
        let (b, f) = fitted(300, 4, &fixed(1.0));
        let mut post = covariance(&b, &f).unwrap();
        let mut f0 = f.clone();
        let j = b.layout.rho_index();
        f0.delta[j] = 0.0;
        post.covariance_tilde[(j, j)] = 0.04;
        let r = rho_interval(&b, &f0, &post, 0.05);
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.lower, -r.upper);
        assert!((r.upper - libm::tanh(1.959963984540054 * 0.2)).abs() < 1e-12);
        post.covariance_tilde[(j, j)] = 1e6;
        let r = rho_interval(&b, &f0, &post, 0.05);
        assert!(r.lower >= -1.0 && r.upper <= 1.0 && r.upper > 0.999);
    }

    #[test]
    fn summary_lists_every_coefficient() {
        let (b, f) = fitted(400, 6, &fixed(1.0));
        let post = covariance(&b, &f).unwrap();
        let s = summary(&b, &f, &post, 0.05);
        let labels: Vec<&str> = s.rows.iter().map(|r| r.label.as_str()).collect();
        assert!(labels.contains(&"mono(t)") && labels.contains(&"d") && labels.contains(&"z:1"));
        let d = s.rows.iter().find(|r| r.label == "d").unwrap();
        assert!(d.p_value.unwrap() < 0.01 && d.estimate.unwrap() > 0.0);
        let mono = s.rows.iter().find(|r| r.kind == RowKind::Monotone).unwrap();
        assert!(mono.p_value.is_none() && mono.edf.unwrap() > 1.0);
    }

    #[test]
    fn smooth_term_test_detects_signal_and_accepts_null() {
        use crate::data::{Column, DataSet};
        use rand::{Rng, SeedableRng};
        let base = joint_data(800, 0.0, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..800).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        // shift log T by a strong sine of w, keep a pure-noise covariate v
        let time: Vec<f64> = base.time.iter().zip(&w).map(|(t, w)| t * libm::exp(-libm::sin(3.0 * w))).collect();
        let v: Vec<f64> = (0..800).map(|_| rng.gen::<f64>()).collect();
        let mut cols = base.columns.clone();
        cols.push(Column::numeric("w", w));
        cols.push(Column::numeric("v", v));
        let data = DataSet::new("t", "d", time, base.event.clone(), base.treatment.clone(), cols).unwrap();
        let spec = ModelSpec {
            outcome: vec![
                Term::Monotone { basis_size: 8 },
                Term::Parametric { column: "x".into() },
                Term::Smooth { column: "w".into(), basis_size: 8 },
                Term::Smooth { column: "v".into(), basis_size: 8 },
                Term::Treatment,
            ],
            ..joint_spec(8)
        };
        let b = DesignBundle::assemble(&spec, &data).unwrap();
        let f = fit(&b, &FitOptions::univariate()).unwrap();
        let post = covariance(&b, &f).unwrap();
        let s = summary(&b, &f, &post, 0.05);
        let sw = s.rows.iter().find(|r| r.label == "s(w)").unwrap();
        let sv = s.rows.iter().find(|r| r.label == "s(v)").unwrap();
        assert!(sw.p_value.unwrap() < 1e-6 && sw.edf.unwrap() > 3.0, "{sw:?}");
        assert!(sv.p_value.unwrap() > 0.01, "{sv:?}");
    }

    #[test]
    fn sate_vanishes_without_effect_and_negates_on_swap() {
        let (b, f) = fitted(300, 7, &fixed(1.0));
        let mut post = covariance(&b, &f).unwrap();
        let grid = linear_grid(0.0, 3.0, 7);
        let opts = DrawOptions { draws: 20, ..DrawOptions::default() };
        let s = sate(&b, &post, &grid, &opts, false).unwrap();
        let w = sate(&b, &post, &grid, &opts, true).unwrap();
        for k in 0..grid.len() {
            assert_eq!(s.curves[0].estimate[k], -w.curves[0].estimate[k]);
            assert_eq!(s.curves[0].lower[k], -w.curves[0].upper[k]);
            assert!(s.curves[0].lower[k] <= s.curves[0].estimate[k] && s.curves[0].estimate[k] <= s.curves[0].upper[k]);
            assert!(s.curves[0].estimate[k].abs() <= 1.0);
        }
        assert!(s.curves[0].estimate[3] < 0.0);
        post.mean[b.layout.treatment] = 0.0;
        let z = sate(&b, &post, &grid, &opts, false).unwrap();
        assert!(z.curves[0].estimate.iter().all(|&v| v == 0.0));
        assert_eq!(sate(&b, &post, &[], &opts, false), Err(InferenceError::EmptyGrid));
    }

    #[test]
    fn curves_are_monotone_reproducible_and_nested() {
        let (b, f) = fitted(300, 9, &fixed(1.0));
        let post = covariance(&b, &f).unwrap();
        let grid = linear_grid(0.0, 4.0, 200);
        let groups = treatment_groups(&b);
        let opts = DrawOptions { draws: 50, seed: 11, ..DrawOptions::default() };
        let c = survival_curves(&b, &post, &grid, &groups, &opts).unwrap();
        assert_eq!(c.monotonicity_violations, 0);
        assert_eq!(c, survival_curves(&b, &post, &grid, &groups, &opts).unwrap());
        let other = survival_curves(&b, &post, &grid, &groups, &DrawOptions { seed: 12, ..opts }).unwrap();
        assert_eq!(other.curves[0].estimate, c.curves[0].estimate);
        assert_ne!(other.curves[0].lower, c.curves[0].lower);
        let wide = survival_curves(&b, &post, &grid, &groups, &DrawOptions { theta: 0.01, ..opts }).unwrap();
        for k in 0..grid.len() {
            // positive treatment coefficient shortens durations
            assert!(c.curves[0].estimate[k] <= c.curves[1].estimate[k]);
            assert!(wide.curves[0].lower[k] <= c.curves[0].lower[k]);
            assert!(wide.curves[0].upper[k] >= c.curves[0].upper[k]);
        }
        assert_eq!(c.survival_at_zero.len(), 2);
        assert_eq!(c.low_left_boundary, c.survival_at_zero.iter().any(|&s| s < 0.99));
        assert!(matches!(
            survival_curves(&b, &post, &[1e9], &groups, &opts),
            Err(InferenceError::OutsideGrid { .. })
        ));
    }

    #[test]
    fn band_quantiles_stabilize_with_many_draws() {
        let opts = FitOptions { smoothing: Smoothing::Fixed(vec![1.0]), ..FitOptions::univariate() };
        let (b, f) = fitted(2000, 10, &opts);
        let post = covariance(&b, &f).unwrap();
        let grid = [0.3, 0.6, 1.0, 1.5, 2.5];
        let small = sate(&b, &post, &grid, &DrawOptions { draws: 100, seed: 1, ..DrawOptions::default() }, false).unwrap();
        let large = sate(&b, &post, &grid, &DrawOptions { draws: 10_000, seed: 2, ..DrawOptions::default() }, false).unwrap();
        for k in 0..grid.len() {
            assert!((small.curves[0].lower[k] - large.curves[0].lower[k]).abs() <= 0.01, "{k}");
            assert!((small.curves[0].upper[k] - large.curves[0].upper[k]).abs() <= 0.01, "{k}");
        }
    }

    #[test]
    fn type7_quantile() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
        assert_eq!(linear_grid(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
    }
}

//! Censored joint log-likelihood of treatment and event time, its analytic
//! score and Hessian in `delta = (beta1, beta2, rho*)`, and the conditional
//! bias diagnostics.
//!
//! With `s = 2d - 1`, `rho = tanh(rho*)` and `m = d eta1 / dy`, each row
//! contributes
//!
//! * censored: `log Phi2(s eta2, -eta1; -s rho)`, which is `P00` for `d = 0`
//!   and `S - P00` for `d = 1`;
//! * event: `log phi(eta1) + log m + log Phi(w)` with
//!   `w = s (eta2 cosh rho* - eta1 sinh rho*)`, the density of the event time
//!   times the conditional treatment probability.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::design::{DesignBundle, DesignError};
use crate::linalg::{cross_vector, symmetrize, weighted_cross, weighted_cross2};
use crate::numerics::{bvn_cdf_unchecked, bvn_pdf, log_norm_cdf, log_norm_pdf, mills_ratio, norm_cdf, norm_pdf};

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-300;
/// Largest `|rho*|` treated as a valid point; beyond it `1 - rho^2` loses all precision.
pub const MAX_RHO_STAR: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LikelihoodError {
    #[error("invalid point at row {row}: {reason}")]
    InvalidPoint { row: usize, reason: &'static str },
    #[error(transparent)]
    Design(#[from] DesignError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    UntreatedCensored,
    TreatedCensored,
    UntreatedEvent,
    TreatedEvent,
}

/// Per-row pieces of the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowPart {
    pub case: Case,
    /// `P(D = 0, T > y)`.
    pub p00: f64,
    /// `-dP00/dy`, the event density jointly with `D = 0`.
    pub p01: f64,
    /// `S(y) = Phi(-eta1)`.
    pub survival: f64,
    pub loglik: f64,
}

/// Log-likelihood, score and Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct RowDerivs {
    l: f64,
    l1: f64,
    l2: f64,
    lt: f64,
    lm: f64,
    l11: f64,
    l12: f64,
    l22: f64,
    l1t: f64,
    l2t: f64,
    ltt: f64,
    lmm: f64,
}

struct Predictors {
    eta1: DVector<f64>,
    eta2: DVector<f64>,
    slope: DVector<f64>,
    theta: f64,
}

fn predictors(bundle: &DesignBundle, delta: &[f64]) -> Result<Predictors, LikelihoodError> {
    let eta1 = bundle.eta1(delta)?;
    let eta2 = bundle.eta2(delta)?;
    let slope = bundle.deta1_dy(delta)?;
    let theta = delta[bundle.layout.rho_index()];
    if !theta.is_finite() || theta.abs() > MAX_RHO_STAR {
        return Err(LikelihoodError::InvalidPoint { row: 0, reason: "correlation at the boundary" });
    }
    Ok(Predictors { eta1, eta2, slope, theta })
}

fn check_row(row: usize, p: &Predictors, event: bool) -> Result<(), LikelihoodError> {
    let (e1, e2) = (p.eta1[row], p.eta2[row]);
    if !(e1.is_finite() && e2.is_finite()) {
        return Err(LikelihoodError::InvalidPoint { row, reason: "non-finite predictor" });
    }
    if event && !(p.slope[row] > 0.0 && p.slope[row].is_finite()) {
        return Err(LikelihoodError::InvalidPoint { row, reason: "non-increasing time transformation" });
    }
    Ok(())
}

fn sign(d: bool) -> f64 {
    if d {
        1.0
    } else {
        -1.0
    }
}

/// Value-only contribution of one row.
fn row_loglik(event: bool, d: bool, eta1: f64, eta2: f64, slope: f64, theta: f64) -> Option<f64> {
    let s = sign(d);
    let v = if event {
        let w = s * (eta2 * libm::cosh(theta) - eta1 * libm::sinh(theta));
        log_norm_pdf(eta1) + libm::log(slope) + log_norm_cdf(w)
    } else {
        let f = bvn_cdf_unchecked(s * eta2, -eta1, -s * libm::tanh(theta));
        if !(f > 0.0) {
            return None;
        }
        libm::log(f.max(LOG_FLOOR))
    };
    v.is_finite().then_some(v)
}

fn row_derivs(event: bool, d: bool, eta1: f64, eta2: f64, slope: f64, theta: f64) -> Option<RowDerivs> {
    let s = sign(d);
    if event {
        let (c, sh) = (libm::cosh(theta), libm::sinh(theta));
        let w = s * (eta2 * c - eta1 * sh);
        let (lam, _) = mills_ratio(w);
        let g1 = lam;
        let g2 = -lam * (lam + w);
        let w1 = -s * sh;
        let w2 = s * c;
        let wt = s * (eta2 * sh - eta1 * c);
        let l = log_norm_pdf(eta1) + libm::log(slope) + log_norm_cdf(w);
        let out = RowDerivs {
            l,
            l1: -eta1 + g1 * w1,
            l2: g1 * w2,
            lt: g1 * wt,
            lm: 1.0 / slope,
            l11: -1.0 + g2 * w1 * w1,
            l12: g2 * w1 * w2,
            l22: g2 * w2 * w2,
            l1t: g2 * w1 * wt + g1 * (-s * c),
            l2t: g2 * w2 * wt + g1 * (s * sh),
            ltt: g2 * wt * wt + g1 * w,
            lmm: -1.0 / (slope * slope),
        };
        return out.l.is_finite().then_some(out);
    }
    let rho = libm::tanh(theta);
    let one_m = 1.0 - rho * rho;
    let (a, b, tau) = (s * eta2, -eta1, -s * rho);
    let f = bvn_cdf_unchecked(a, b, tau);
    if !(f > LOG_FLOOR) {
        return None;
    }
    let r2 = 1.0 - tau * tau;
    let r = libm::sqrt(r2);
    let ua = (b - tau * a) / r;
    let ub = (a - tau * b) / r;
    let pa = norm_pdf(a);
    let pb = norm_pdf(b);
    let (ca, cb) = (norm_cdf(ua), norm_cdf(ub));
    let phi2 = bvn_pdf(a, b, tau);
    let fa = pa * ca;
    let fb = pb * cb;
    let ft = phi2;
    let faa = -a * pa * ca - pa * norm_pdf(ua) * tau / r;
    let fbb = -b * pb * cb - pb * norm_pdf(ub) * tau / r;
    let fab = phi2;
    let fat = -phi2 * (a - tau * b) / r2;
    let fbt = -phi2 * (b - tau * a) / r2;
    let q = a * a - 2.0 * tau * a * b + b * b;
    let ftt = phi2 * (tau / r2 + a * b / r2 - tau * q / (r2 * r2));
    let (la, lb, lt) = (fa / f, fb / f, ft / f);
    let laa = faa / f - la * la;
    let lbb = fbb / f - lb * lb;
    let lab = fab / f - la * lb;
    let lat = fat / f - la * lt;
    let lbt = fbt / f - lb * lt;
    let ltt = ftt / f - lt * lt;
    let dt = -s * one_m;
    let d2t = 2.0 * s * rho * one_m;
    let out = RowDerivs {
        l: libm::log(f),
        l1: -lb,
        l2: s * la,
        lt: lt * dt,
        lm: 0.0,
        l11: lbb,
        l12: -s * lab,
        l22: laa,
        l1t: -lbt * dt,
        l2t: s * lat * dt,
        ltt: ltt * dt * dt + lt * d2t,
        lmm: 0.0,
    };
    let all = [out.l, out.l1, out.l2, out.lt, out.l11, out.l12, out.l22, out.l1t, out.l2t, out.ltt];
    all.iter().all(|v| v.is_finite()).then_some(out)
}

/// Joint log-likelihood. Rows are summed in order, so the value does not
/// depend on how the caller schedules work.
pub fn loglik(bundle: &DesignBundle, delta: &[f64]) -> Result<f64, LikelihoodError> {
    let p = predictors(bundle, delta)?;
    let mut total = 0.0;
    for i in 0..bundle.n() {
        check_row(i, &p, bundle.event[i])?;
        total += row_loglik(bundle.event[i], bundle.treatment[i], p.eta1[i], p.eta2[i], p.slope[i], p.theta)
            .ok_or(LikelihoodError::InvalidPoint { row: i, reason: "zero probability" })?;
    }
    Ok(total)
}

/// `l(delta) - delta^T S_lambda delta / 2`.
pub fn penalized_loglik(bundle: &DesignBundle, delta: &[f64], lambda: &[f64]) -> Result<f64, LikelihoodError> {
    Ok(loglik(bundle, delta)? - 0.5 * bundle.layout.penalty_quadratic(delta, lambda))
}

/// Per-row probabilities and contributions.
pub fn case_parts(bundle: &DesignBundle, delta: &[f64]) -> Result<Vec<RowPart>, LikelihoodError> {
    let p = predictors(bundle, delta)?;
    let rho = libm::tanh(p.theta);
    let mut out = Vec::with_capacity(bundle.n());
    for i in 0..bundle.n() {
        let (event, d) = (bundle.event[i], bundle.treatment[i]);
        check_row(i, &p, event)?;
        let (e1, e2) = (p.eta1[i], p.eta2[i]);
        let case = match (d, event) {
            (false, false) => Case::UntreatedCensored,
            (true, false) => Case::TreatedCensored,
            (false, true) => Case::UntreatedEvent,
            (true, true) => Case::TreatedEvent,
        };
        let p00 = bvn_cdf_unchecked(-e2, -e1, rho);
        let dens = norm_pdf(e1) * p.slope[i];
        let p01 = dens * norm_cdf(-(e2 - rho * e1) / libm::sqrt(1.0 - rho * rho));
        let loglik = row_loglik(event, d, e1, e2, p.slope[i], p.theta)
            .ok_or(LikelihoodError::InvalidPoint { row: i, reason: "zero probability" })?;
        out.push(RowPart { case, p00, p01, survival: norm_cdf(-e1), loglik });
    }
    Ok(out)
}

/// Log-likelihood with its analytic gradient and Hessian.
pub fn evaluate(bundle: &DesignBundle, delta: &[f64]) -> Result<Evaluation, LikelihoodError> {
    let p = predictors(bundle, delta)?;
    let n = bundle.n();
    let lay = &bundle.layout;
    let (p1, p2) = (lay.outcome_dim, lay.selection_dim);
    let mut rows = vec![RowDerivs::default(); n];
    for (i, r) in rows.iter_mut().enumerate() {
        check_row(i, &p, bundle.event[i])?;
        *r = row_derivs(bundle.event[i], bundle.treatment[i], p.eta1[i], p.eta2[i], p.slope[i], p.theta)
            .ok_or(LikelihoodError::InvalidPoint { row: i, reason: "zero probability" })?;
    }
    let w = |f: fn(&RowDerivs) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let e = lay.e_vector(delta);
    let e1 = e.rows(0, p1).into_owned();
    let ebar = lay.e_bar(delta);

    // A = X~ diag(E1), A' = X~' diag(E1)
    let mut a = bundle.outcome.clone();
    let mut ap = bundle.outcome_derivative.clone();
    for j in 0..p1 {
        if e1[j] != 1.0 {
            a.column_mut(j).scale_mut(e1[j]);
            ap.column_mut(j).scale_mut(e1[j]);
        }
    }
    let raw1 = cross_vector(&bundle.outcome, &w(|r| r.l1)) + cross_vector(&bundle.outcome_derivative, &w(|r| r.lm));
    let g1 = raw1.component_mul(&e1);
    let g2 = cross_vector(&bundle.selection, &w(|r| r.l2));
    let gt: f64 = rows.iter().map(|r| r.lt).sum();

    let dim = lay.dim();
    let mut gradient = DVector::zeros(dim);
    gradient.rows_mut(0, p1).copy_from(&g1);
    gradient.rows_mut(p1, p2).copy_from(&g2);
    gradient[dim - 1] = gt;

    let mut h11 = weighted_cross(&a, &w(|r| r.l11));
    if bundle.event.iter().any(|&ev| ev) {
        h11 += weighted_cross(&ap, &w(|r| r.lmm));
    }
    for j in 0..p1 {
        h11[(j, j)] += ebar[j] * raw1[j];
    }
    let h12 = weighted_cross2(&a, &w(|r| r.l12), &bundle.selection);
    let h22 = weighted_cross(&bundle.selection, &w(|r| r.l22));
    let h1t = cross_vector(&a, &w(|r| r.l1t));
    let h2t = cross_vector(&bundle.selection, &w(|r| r.l2t));
    let htt: f64 = rows.iter().map(|r| r.ltt).sum();

    let mut hessian = DMatrix::zeros(dim, dim);
    hessian.view_mut((0, 0), (p1, p1)).copy_from(&h11);
    hessian.view_mut((0, p1), (p1, p2)).copy_from(&h12);
    hessian.view_mut((p1, 0), (p2, p1)).copy_from(&h12.transpose());
    hessian.view_mut((p1, p1), (p2, p2)).copy_from(&h22);
    hessian.view_mut((0, dim - 1), (p1, 1)).copy_from(&h1t);
    hessian.view_mut((dim - 1, 0), (1, p1)).copy_from(&h1t.transpose());
    hessian.view_mut((p1, dim - 1), (p2, 1)).copy_from(&h2t);
    hessian.view_mut((dim - 1, p1), (1, p2)).copy_from(&h2t.transpose());
    hessian[(dim - 1, dim - 1)] = htt;
    symmetrize(&mut hessian);

    let loglik = rows.iter().map(|r| r.l).sum();
    Ok(Evaluation { loglik, gradient, hessian })
}

pub fn score(bundle: &DesignBundle, delta: &[f64]) -> Result<DVector<f64>, LikelihoodError> {
    Ok(evaluate(bundle, delta)?.gradient)
}

pub fn hessian(bundle: &DesignBundle, delta: &[f64]) -> Result<DMatrix<f64>, LikelihoodError> {
    Ok(evaluate(bundle, delta)?.hessian)
}

/// Hessian by central differences of the analytic score; a verification oracle.
pub fn fd_hessian(bundle: &DesignBundle, delta: &[f64], step: f64) -> Result<DMatrix<f64>, LikelihoodError> {
    let dim = bundle.dim();
    let mut h = DMatrix::zeros(dim, dim);
    let mut x = delta.to_vec();
    for j in 0..dim {
        let hj = step * delta[j].abs().max(1.0);
        x[j] = delta[j] + hj;
        let up = score(bundle, &x)?;
        x[j] = delta[j] - hj;
        let dn = score(bundle, &x)?;
        x[j] = delta[j];
        h.column_mut(j).copy_from(&((up - dn) / (2.0 * hj)));
    }
    symmetrize(&mut h);
    Ok(h)
}

/// Score by central differences of the log-likelihood with one Richardson
/// extrapolation step (`h` and `h/2`); a verification oracle.
pub fn fd_score(bundle: &DesignBundle, delta: &[f64], step: f64) -> Result<DVector<f64>, LikelihoodError> {
    let mut x = delta.to_vec();
    let mut central = |j: usize, h: f64| -> Result<f64, LikelihoodError> {
        x[j] = delta[j] + h;
        let up = loglik(bundle, &x)?;
        x[j] = delta[j] - h;
        let dn = loglik(bundle, &x)?;
        x[j] = delta[j];
        Ok((up - dn) / (2.0 * h))
    };
    let mut g = DVector::zeros(delta.len());
    for j in 0..delta.len() {
        let coarse = central(j, step)?;
        let fine = central(j, 0.5 * step)?;
        g[j] = (4.0 * fine - coarse) / 3.0;
    }
    Ok(g)
}

/// Largest discrepancies between analytic and finite-difference derivatives,
/// each measured as `|analytic - numeric| / max(|analytic|, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub score_error: f64,
    pub hessian_error: f64,
}

pub fn derivative_check(bundle: &DesignBundle, delta: &[f64]) -> Result<DerivativeCheck, LikelihoodError> {
    let e = evaluate(bundle, delta)?;
    let fs = fd_score(bundle, delta, 1e-4)?;
    let fh = fd_hessian(bundle, delta, 1e-6)?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1.0);
    let score_error = e.gradient.iter().zip(fs.iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    let hessian_error = e.hessian.iter().zip(fh.iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    Ok(DerivativeCheck { score_error, hessian_error })
}

/// Mean and variance of the transformed time given `D = 1` for one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfoundingDiagnostics {
    pub mean: f64,
    pub variance: f64,
    /// The Mills ratio was taken from its asymptotic expansion because
    /// `Phi(eta2)` underflows.
    pub mills_clamped: bool,
}

/// Conditional mean and variance of `H(T)` among the treated, with the
/// selection term `rho * phi(eta2) / Phi(eta2)` adding to the treatment effect.
pub fn confounding_diagnostics(
    bundle: &DesignBundle,
    delta: &[f64],
    row: usize,
) -> Result<ConfoundingDiagnostics, LikelihoodError> {
    let (statics, effects) = bundle.counterfactual_parts(delta)?;
    if row >= bundle.n() {
        return Err(LikelihoodError::InvalidPoint { row, reason: "row index out of range" });
    }
    let eta2 = bundle.eta2(delta)?[row];
    let rho = libm::tanh(delta[bundle.layout.rho_index()]);
    let (mean, variance, mills_clamped) = conditional_moments(statics[row] + effects[row], eta2, rho);
    Ok(ConfoundingDiagnostics { mean, variance, mills_clamped })
}

/// `(mean, variance, clamped)` of `base + eps1` given `eta2 + eps2 > 0`.
pub fn conditional_moments(base: f64, eta2: f64, rho: f64) -> (f64, f64, bool) {
    let (lam, clamped) = mills_ratio(eta2);
    let mean = base + rho * lam;
    let variance = rho * rho * (1.0 - eta2 * lam - lam * lam - 1.0) + 1.0;
    (mean, variance.max(0.0), clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, DataSet};
    use crate::design::{ModelSpec, Term};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn data(n: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let age: Vec<f64> = (0..n).map(|_| 20.0 + 40.0 * rng.gen::<f64>()).collect();
        let iv: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let sex: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let time: Vec<f64> = (0..n).map(|_| 0.2 + 5.0 * rng.gen::<f64>()).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.7).collect();
        let treat: Vec<bool> = (0..n).map(|i| rng.gen::<f64>() < 0.3 + 0.4 * iv[i] as f64).collect();
        DataSet::new(
            "y",
            "d",
            time,
            event,
            treat,
            vec![
                Column::numeric("x", x),
                Column::numeric("age", age),
                Column::categorical("iv", &iv, vec!["a".into(), "b".into()]),
                Column::categorical("sex", &sex, vec!["f".into(), "m".into()]),
            ],
        )
        .unwrap()
    }

    fn spec() -> ModelSpec {
        ModelSpec {
            outcome: vec![
                Term::Monotone { basis_size: 7 },
                Term::Parametric { column: "x".into() },
                Term::Smooth { column: "age".into(), basis_size: 5 },
                Term::Treatment,
                Term::Interaction { modifier: "sex".into() },
            ],
            selection: vec![Term::Parametric { column: "x".into() }, Term::Ridge { column: "iv".into() }],
            instruments: vec!["iv".into()],
        }
    }

    fn point(bundle: &DesignBundle, rng: &mut ChaCha8Rng, rho_star: f64) -> Vec<f64> {
        let mut delta: Vec<f64> = (0..bundle.dim()).map(|_| 0.4 * (rng.gen::<f64>() - 0.5)).collect();
        delta[0] = -1.0;
        delta[bundle.layout.rho_index()] = rho_star;
        delta
    }

    fn univariate_probit(eta2: &DVector<f64>, d: &[bool]) -> f64 {
        eta2.iter()
            .zip(d)
            .map(|(&e, &t)| libm::log(if t { norm_cdf(e) } else { norm_cdf(-e) }))
            .sum()
    }

    fn univariate_survival(eta1: &DVector<f64>, slope: &DVector<f64>, ev: &[bool]) -> f64 {
        (0..ev.len())
            .map(|i| {
                if ev[i] {
                    libm::log(norm_pdf(eta1[i]) * slope[i])
                } else {
                    libm::log(norm_cdf(-eta1[i]))
                }
            })
            .sum()
    }

    #[test]
    fn single_row_at_zero_is_log_quarter() {
        let d = DataSet::new("y", "d", vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![false; 5], vec![false; 5], vec![]).unwrap();
        // zero predictors with independence: P00 = 0.5 * 0.5
        assert!((row_loglik(false, false, 0.0, 0.0, 1.0, 0.0).unwrap() - libm::log(0.25)).abs() < 1e-15);
        assert!(d.n() == 5);
    }

    #[test]
    fn independence_decomposes_into_univariate_fits() {
        let data = data(50, 1);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let delta = point(&b, &mut rng, 0.0);
            let joint = loglik(&b, &delta).unwrap();
            let sel = univariate_probit(&b.eta2(&delta).unwrap(), &data.treatment);
            let surv = univariate_survival(&b.eta1(&delta).unwrap(), &b.deta1_dy(&delta).unwrap(), &data.event);
            assert!((joint - sel - surv).abs() < 1e-10, "{joint} vs {}", sel + surv);
        }
    }

    #[test]
    fn treated_event_contribution_is_finite() {
        let v = row_loglik(true, true, 0.3, -0.4, 0.7, 0.5).unwrap();
        assert!(v.is_finite());
        // equals log(phi(eta1) m - P01) computed the long way
        let (e1, e2, m, rho) = (0.3, -0.4, 0.7, libm::tanh(0.5));
        let p01 = norm_pdf(e1) * m * norm_cdf((-e2 + rho * e1) / libm::sqrt(1.0 - rho * rho));
        assert!((v - libm::log(norm_pdf(e1) * m - p01)).abs() < 1e-12);
    }

    #[test]
    fn case_probabilities_respect_bounds() {
        let data = data(80, 3);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta = point(&b, &mut rng, 0.7);
        let eta2 = b.eta2(&delta).unwrap();
        for (i, p) in case_parts(&b, &delta).unwrap().iter().enumerate() {
            assert!(p.p00 >= 0.0 && p.p00 <= norm_cdf(-eta2[i]).min(p.survival) + 1e-15);
            assert!(p.p01 >= 0.0);
        }
    }

    #[test]
    fn penalty_augmentation() {
        let data = data(60, 5);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let delta = point(&b, &mut rng, 0.2);
        let k = b.layout.penalties.len();
        let l = loglik(&b, &delta).unwrap();
        assert_eq!(penalized_loglik(&b, &delta, &vec![0.0; k]).unwrap(), l);
        let lambda: Vec<f64> = (0..k).map(|i| 0.5 + i as f64).collect();
        let base = penalized_loglik(&b, &delta, &lambda).unwrap();
        let mut doubled = lambda.clone();
        doubled[1] *= 2.0;
        let p = &b.layout.penalties[1];
        let bk = DVector::from_column_slice(&delta[p.range.clone()]);
        let quad = (bk.transpose() * &p.matrix * &bk)[(0, 0)];
        let changed = penalized_loglik(&b, &delta, &doubled).unwrap();
        assert!((changed - base + lambda[1] * quad / 2.0).abs() < 1e-10);
        // a point in the null space of every penalty: constant monotone
        // working coefficients, linear smooth part, zero ridge coefficient
        let mut null = delta.clone();
        for p in &b.layout.penalties {
            for j in p.range.clone() {
                null[j] = 0.0;
            }
        }
        let smooth = &b.layout.penalties[1];
        null[smooth.range.end - 1] = 0.3;
        for j in b.layout.time_block.clone() {
            null[j] = -0.2;
        }
        assert!((penalized_loglik(&b, &null, &lambda).unwrap() - loglik(&b, &null).unwrap()).abs() < 1e-12);
    }

    /// Central differences with one Richardson extrapolation step.
    fn fd_gradient(b: &DesignBundle, delta: &[f64], h: f64) -> DVector<f64> {
        fd_score(b, delta, h).unwrap()
    }

    #[test]
    fn score_matches_finite_differences() {
        let data = data(150, 7);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &rs in &[0.0, 0.6, -1.1] {
            let delta = point(&b, &mut rng, rs);
            let g = score(&b, &delta).unwrap();
            let fd = fd_gradient(&b, &delta, 1e-4);
            let r = b.layout.rho_index();
            for j in 0..b.dim() {
                let tol = if j == r { 1e-5 } else { 1e-6 };
                let rel = (g[j] - fd[j]).abs() / g[j].abs().max(1.0);
                assert!(rel < tol, "rho*={rs} coef {j}: {} vs {}", g[j], fd[j]);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let data = data(150, 9);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &rs in &[0.0, 0.8, -0.5] {
            let delta = point(&b, &mut rng, rs);
            let h = hessian(&b, &delta).unwrap();
            let fd = fd_hessian(&b, &delta, 1e-6).unwrap();
            let scale = h.amax().max(1.0);
            for i in 0..b.dim() {
                for j in 0..b.dim() {
                    assert_eq!(h[(i, j)], h[(j, i)]);
                    let rel = (h[(i, j)] - fd[(i, j)]).abs() / h[(i, j)].abs().max(1e-3 * scale);
                    assert!(rel < 1e-4, "rho*={rs} ({i},{j}): {} vs {}", h[(i, j)], fd[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn cross_block_at_independence() {
        let data = data(100, 11);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let delta = point(&b, &mut rng, 0.0);
        let h = hessian(&b, &delta).unwrap();
        let fd = fd_hessian(&b, &delta, 1e-6).unwrap();
        for i in b.layout.outcome_range() {
            for j in b.layout.selection_range() {
                assert!((h[(i, j)] - fd[(i, j)]).abs() < 1e-6 * h[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn second_derivative_of_predictor_vanishes_off_time_block() {
        // with no event rows and rho* = 0 the outcome block Hessian is
        // A' diag(l11) A + diag(E_bar * score); the extra diagonal only touches
        // reparametrized coefficients
        let data = data(60, 13);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let delta = point(&b, &mut rng, 0.3);
        let ebar = b.layout.e_bar(&delta);
        for j in 0..b.dim() {
            if !b.layout.reparametrized[j] {
                assert_eq!(ebar[j], 0.0);
            }
        }
        assert!(b.layout.time_block.clone().all(|j| ebar[j] > 0.0));
    }

    #[test]
    fn invalid_points_are_signalled() {
        let data = data(30, 15);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut delta = vec![0.0; b.dim()];
        delta[b.layout.rho_index()] = 40.0;
        assert!(matches!(loglik(&b, &delta), Err(LikelihoodError::InvalidPoint { .. })));
        let mut delta = vec![0.0; b.dim()];
        delta[0] = f64::NAN;
        assert!(matches!(evaluate(&b, &delta), Err(LikelihoodError::InvalidPoint { .. })));
        // a huge intercept drives the survival of censored rows to zero
        let mut delta = vec![0.0; b.dim()];
        delta[0] = 60.0;
        assert!(matches!(loglik(&b, &delta), Err(LikelihoodError::InvalidPoint { .. })));
    }

    #[test]
    fn event_density_integrates_to_marginal() {
        // P(D = 1, T > t0) + integral over (t0, tmax) of the treated event density
        // + P(D = 1, T > tmax) ... reduces to P(D = 1, T > t0) - P(D = 1, T > tmax)
        let (eta2, theta, beta) = (0.3, 0.6, 0.8);
        let rho = libm::tanh(theta);
        let h = |t: f64| -1.0 + beta * t;
        let treated_surv = |t: f64| bvn_cdf_unchecked(eta2, -h(t), -rho);
        let (t0, t1) = (0.1, 4.0);
        let m = 20_000;
        let dt = (t1 - t0) / m as f64;
        let mut integral = 0.0;
        for k in 0..m {
            let t = t0 + (k as f64 + 0.5) * dt;
            integral += libm::exp(row_loglik(true, true, h(t), eta2, beta, theta).unwrap()) * dt;
        }
        assert!((integral - (treated_surv(t0) - treated_surv(t1))).abs() < 1e-7);
        // and the four cases add up to P(D = 1) + P(D = 0) at t0 = 0 horizon
        let untreated_surv = |t: f64| bvn_cdf_unchecked(-eta2, -h(t), rho);
        let mut i0 = 0.0;
        for k in 0..m {
            let t = t0 + (k as f64 + 0.5) * dt;
            i0 += libm::exp(row_loglik(true, false, h(t), eta2, beta, theta).unwrap()) * dt;
        }
        let total = treated_surv(t1) + integral + untreated_surv(t1) + i0;
        assert!((total - (treated_surv(t0) + untreated_surv(t0))).abs() < 1e-7);
    }

    #[test]
    fn diagnostics_reduce_without_confounding() {
        let (mean, var, clamped) = conditional_moments(1.5, 0.4, 0.0);
        assert_eq!((mean, var, clamped), (1.5, 1.0, false));
        let (mean, _, _) = conditional_moments(0.0, 0.0, 0.5);
        assert!((mean - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((mills_ratio(0.0).0 - 0.797_884_560_802_865_4).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (rho, eta2) = (0.5f64, 0.0);
        let (mut sum, mut sum2, mut kept) = (0.0, 0.0, 0usize);
        for _ in 0..1_000_000 {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let e1 = z1;
            let e2 = rho * z1 + libm::sqrt(1.0 - rho * rho) * z2;
            if eta2 + e2 > 0.0 {
                sum += e1;
                sum2 += e1 * e1;
                kept += 1;
            }
        }
        let mc_mean = sum / kept as f64;
        let mc_var = sum2 / kept as f64 - mc_mean * mc_mean;
        let (mean, var, _) = conditional_moments(0.0, eta2, rho);
        assert!((mean - mc_mean).abs() < 1e-2);
        assert!((var - mc_var).abs() < 1e-2);
    }

    #[test]
    fn diagnostic_variance_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let rho = 2.0 * rng.gen::<f64>() - 1.0;
            let eta2 = 20.0 * rng.gen::<f64>() - 10.0;
            assert!(conditional_moments(0.0, eta2, rho).1 >= 0.0);
        }
        assert!(conditional_moments(0.0, -40.0, 0.5).2);
    }

    #[test]
    fn bundle_diagnostics_use_treated_predictor() {
        let data = data(40, 18);
        let b = DesignBundle::assemble(&spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut delta = point(&b, &mut rng, 0.0);
        let diag = confounding_diagnostics(&b, &delta, 3).unwrap();
        let (s, e) = b.counterfactual_parts(&delta).unwrap();
        assert!((diag.mean - s[3] - e[3]).abs() < 1e-15);
        assert_eq!(diag.variance, 1.0);
        delta[b.layout.rho_index()] = 0.4;
        let diag = confounding_diagnostics(&b, &delta, 3).unwrap();
        assert!(diag.variance < 1.0);
    }
}

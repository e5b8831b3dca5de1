//! Basis and penalty construction for the term types of an additive predictor.
//!
//! * parametric terms: raw covariate columns (dummy coded when categorical), no penalty;
//! * ridge terms: indicator columns with an identity penalty;
//! * smooth terms: a rank-`J` thin-plate-type radial basis in one dimension with
//!   a second-derivative penalty, centred and reparametrized so the penalty is
//!   diagonal;
//! * monotone terms: cubic B-splines on equally spaced knots whose coefficients
//!   are constrained to be non-decreasing through a cumulative sum of
//!   exponentials, penalized by squared differences of the working coefficients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{null_space_of_columns, null_space_of_vector, sorted_symmetric_eigen};

pub const CUBIC_ORDER: usize = 4;
pub const DEFAULT_SMOOTH_BASIS: usize = 10;
pub const DEFAULT_MONOTONE_BASIS: usize = 10;
/// Cap on the number of distinct covariate values used as thin-plate knots.
pub const MAX_SMOOTH_KNOTS: usize = 300;
/// Relative extension of the monotone term's interval beyond the largest time.
pub const MONOTONE_UPPER_PAD: f64 = 1.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("value {value} at index {index} lies outside [{lower}, {upper}]")]
    OutsideInterval { index: usize, value: f64, lower: f64, upper: f64 },
    #[error("{0}")]
    Configuration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Parametric,
    Ridge,
    Smooth,
    Monotone,
}

/// B-spline basis of a given order on equally spaced knots over `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    order: usize,
    num_basis: usize,
    lower: f64,
    upper: f64,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(num_basis: usize, order: usize, lower: f64, upper: f64) -> Result<Self, SplineError> {
        if order < 2 {
            return Err(SplineError::Configuration(format!("B-spline order must be at least 2, got {order}")));
        }
        if num_basis < order + 1 {
            return Err(SplineError::Configuration(format!(
                "basis dimension {num_basis} must be at least order + 1 = {}",
                order + 1
            )));
        }
        if !(lower.is_finite() && upper.is_finite() && upper > lower) {
            return Err(SplineError::Configuration(format!("invalid interval [{lower}, {upper}]")));
        }
        let intervals = num_basis - order + 1;
        let h = (upper - lower) / intervals as f64;
        let degree = order - 1;
        let knots = (0..num_basis + order)
            .map(|i| lower + (i as f64 - degree as f64) * h)
            .collect();
        Ok(Self { order, num_basis, lower, upper, knots })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Evaluate all basis functions at `x` into `out` (length `num_basis`).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> Result<(), SplineError> {
        if !(x >= self.lower && x <= self.upper) {
            return Err(SplineError::OutsideInterval { index: 0, value: x, lower: self.lower, upper: self.upper });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let degree = self.order - 1;
        let h = (self.upper - self.lower) / (self.num_basis - degree) as f64;
        let last = self.num_basis - 1;
        let span = (degree + ((x - self.lower) / h) as usize).min(last);
        let t = &self.knots;
        // de Boor / Cox recursion on the non-zero functions N_{span-degree..=span}
        let mut n = [0.0f64; 16];
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (r, value) in n.iter().take(degree + 1).enumerate() {
            out[span - degree + r] = *value;
        }
        Ok(())
    }

    pub fn row(&self, x: f64) -> Result<Vec<f64>, SplineError> {
        let mut out = vec![0.0; self.num_basis];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    pub fn design(&self, xs: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        let mut m = DMatrix::<f64>::zeros(xs.len(), self.num_basis);
        let mut row = vec![0.0; self.num_basis];
        for (i, &x) in xs.iter().enumerate() {
            self.eval_into(x, &mut row).map_err(|e| match e {
                SplineError::OutsideInterval { value, lower, upper, .. } => {
                    SplineError::OutsideInterval { index: i, value, lower, upper }
                }
                other => other,
            })?;
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }
}

/// Evaluate a B-spline design over `x`.
pub fn build_bspline_basis(
    x: &[f64],
    num_basis: usize,
    order: usize,
    interval: (f64, f64),
) -> Result<(BSplineBasis, DMatrix<f64>), SplineError> {
    let basis = BSplineBasis::new(num_basis, order, interval.0, interval.1)?;
    let design = basis.design(x)?;
    Ok((basis, design))
}

/// Cumulative-exponential reparametrization of monotone spline coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReparam {
    pub sigma: DMatrix<f64>,
    /// `S*`, the `(J-2) × J` difference operator on the working coefficients.
    pub difference: DMatrix<f64>,
    /// `S*^T S*`.
    pub difference_penalty: DMatrix<f64>,
    pub order: usize,
    pub interval: (f64, f64),
}

impl MonotoneReparam {
    pub fn new(num_basis: usize, order: usize, interval: (f64, f64)) -> Self {
        let j = num_basis;
        let sigma = DMatrix::from_fn(j, j, |r, c| if r >= c { 1.0 } else { 0.0 });
        let rows = j.saturating_sub(2);
        let mut difference = DMatrix::<f64>::zeros(rows, j);
        for i in 0..rows {
            difference[(i, i + 1)] = 1.0;
            difference[(i, i + 2)] = -1.0;
        }
        let difference_penalty = difference.transpose() * &difference;
        Self { sigma, difference, difference_penalty, order, interval }
    }

    pub fn num_basis(&self) -> usize {
        self.sigma.nrows()
    }

    /// `Sigma (b_1, exp(b_2), ..., exp(b_J))^T`.
    pub fn apply(&self, working: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(working.len());
        let mut acc = 0.0;
        for (j, &b) in working.iter().enumerate() {
            acc += if j == 0 { b } else { libm::exp(b) };
            out.push(acc);
        }
        out
    }
}

/// Precomputed pieces of a one-dimensional thin-plate-type smooth.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothBasis {
    shift: f64,
    scale: f64,
    knots: Vec<f64>,
    /// Maps radial evaluations at the knots to the constrained wiggly basis.
    wiggly: DMatrix<f64>,
    /// Maps the raw `J` columns to the centred, penalty-diagonal `J - 1` columns.
    transform: DMatrix<f64>,
}

impl SmoothBasis {
    /// Covariate on the internal unit scale.
    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn raw_row(&self, u: f64) -> Vec<f64> {
        let k = self.wiggly.ncols();
        let mut out = vec![0.0; k + 2];
        for (i, &kappa) in self.knots.iter().enumerate() {
            let e = radial(u - kappa);
            if e == 0.0 {
                continue;
            }
            for (l, o) in out.iter_mut().take(k).enumerate() {
                *o += e * self.wiggly[(i, l)];
            }
        }
        out[k] = 1.0;
        out[k + 1] = u;
        out
    }

    pub fn row(&self, x: f64) -> Vec<f64> {
        let raw = self.raw_row(self.standardize(x));
        let raw = DVector::from_vec(raw);
        (self.transform.transpose() * raw).iter().copied().collect()
    }

    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        let cols = self.transform.ncols();
        let mut m = DMatrix::zeros(xs.len(), cols);
        for (i, &x) in xs.iter().enumerate() {
            for (j, v) in self.row(x).into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Thin-plate radial function for one dimension and a second-order penalty.
#[inline]
fn radial(r: f64) -> f64 {
    let a = r.abs();
    a * a * a / 12.0
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermEvaluator {
    Columns,
    BSpline(BSplineBasis),
    Smooth(SmoothBasis),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermBasis {
    pub kind: TermKind,
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    /// Map from the term's coefficients to raw basis coefficients, when the
    /// term was constrained or reparametrized.
    pub constraint: Option<DMatrix<f64>>,
    pub knots: Vec<f64>,
    pub evaluator: TermEvaluator,
}

impl TermBasis {
    pub fn num_columns(&self) -> usize {
        self.design.ncols()
    }

    /// Evaluate the basis at new covariate values (smooth and monotone terms).
    pub fn evaluate(&self, xs: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        match &self.evaluator {
            TermEvaluator::Smooth(s) => Ok(s.design(xs)),
            TermEvaluator::BSpline(b) => b.design(xs),
            TermEvaluator::Columns => Err(SplineError::Configuration(String::from(
                "column terms cannot be evaluated at new covariate values",
            ))),
        }
    }
}

/// Monotone increasing B-spline term for the follow-up times.
pub fn build_monotone_term(y: &[f64], num_basis: usize) -> Result<(TermBasis, MonotoneReparam), SplineError> {
    if num_basis < CUBIC_ORDER + 1 {
        return Err(SplineError::Configuration(format!(
            "monotone term needs at least {} basis functions, got {num_basis}",
            CUBIC_ORDER + 1
        )));
    }
    let (lo, hi) = min_max(y).ok_or_else(|| SplineError::Configuration(String::from("empty time vector")))?;
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 {
        return Err(SplineError::Configuration(String::from("follow-up times must be finite and non-negative")));
    }
    if hi <= lo {
        return Err(SplineError::Configuration(String::from(
            "follow-up times are all equal; the monotone term is not identifiable",
        )));
    }
    let interval = (0.0, hi * MONOTONE_UPPER_PAD);
    let (basis, design) = build_bspline_basis(y, num_basis, CUBIC_ORDER, interval)?;
    let reparam = MonotoneReparam::new(num_basis, CUBIC_ORDER, interval);
    let term = TermBasis {
        kind: TermKind::Monotone,
        design,
        penalty: reparam.difference_penalty.clone(),
        constraint: Some(reparam.sigma.clone()),
        knots: basis.knots().to_vec(),
        evaluator: TermEvaluator::BSpline(basis),
    };
    Ok((term, reparam))
}

/// Rank-`J` thin-plate-type smooth of one covariate.
///
/// The basis is built on the covariate mapped to `[0, 1]`; the returned
/// penalty is the exact integrated squared second derivative on that scale.
/// One sum-to-zero constraint is absorbed, leaving `J - 1` columns, and the
/// columns are rotated so the penalty is diagonal with its one-dimensional
/// null space (the centred linear trend) in the last column.
pub fn build_smooth_term(x: &[f64], num_basis: usize) -> Result<TermBasis, SplineError> {
    if num_basis < 3 {
        return Err(SplineError::Configuration(format!("smooth term needs J >= 3, got {num_basis}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SplineError::Configuration(String::from("smooth covariate contains non-finite values")));
    }
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < num_basis {
        return Err(SplineError::Configuration(format!(
            "smooth term with J = {num_basis} needs at least {num_basis} distinct values, found {}",
            distinct.len()
        )));
    }
    let shift = distinct[0];
    let scale = distinct[distinct.len() - 1] - shift;
    let knots: Vec<f64> = if distinct.len() > MAX_SMOOTH_KNOTS {
        let m = distinct.len() - 1;
        (0..MAX_SMOOTH_KNOTS)
            .map(|i| {
                let idx = (i * m + (MAX_SMOOTH_KNOTS - 1) / 2) / (MAX_SMOOTH_KNOTS - 1);
                (distinct[idx] - shift) / scale
            })
            .collect()
    } else {
        distinct.iter().map(|v| (v - shift) / scale).collect()
    };
    let kk = knots.len();
    let e = DMatrix::from_fn(kk, kk, |i, j| radial(knots[i] - knots[j]));
    let (values, vectors) = sorted_symmetric_eigen(&e);
    // keep the J eigenpairs of largest magnitude
    let mut order: Vec<usize> = (0..kk).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    let keep = &order[..num_basis];
    let uk = DMatrix::from_fn(kk, num_basis, |i, l| vectors[(i, keep[l])]);
    let dk = DVector::from_fn(num_basis, |l, _| values[keep[l]]);
    let t = DMatrix::from_fn(kk, 2, |i, c| if c == 0 { 1.0 } else { knots[i] });
    let zt = null_space_of_columns(&(uk.transpose() * &t));
    let wiggly = &uk * &zt;
    let wiggly_penalty = zt.transpose() * DMatrix::from_diagonal(&dk) * &zt;

    let raw_cols = num_basis;
    let mut raw_penalty = DMatrix::<f64>::zeros(raw_cols, raw_cols);
    raw_penalty
        .view_mut((0, 0), (raw_cols - 2, raw_cols - 2))
        .copy_from(&wiggly_penalty);

    let provisional = SmoothBasis {
        shift,
        scale,
        knots: knots.clone(),
        wiggly,
        transform: DMatrix::identity(raw_cols, raw_cols),
    };
    let raw_design = provisional.design(x);
    let column_sums = DVector::from_fn(raw_cols, |j, _| raw_design.column(j).sum());
    let centring = null_space_of_vector(&column_sums);
    let centred_penalty = centring.transpose() * &raw_penalty * &centring;
    let (pen_values, pen_vectors) = sorted_symmetric_eigen(&centred_penalty);
    let top = pen_values.first().copied().unwrap_or(0.0).max(0.0);
    let diag: Vec<f64> = pen_values
        .iter()
        .map(|&v| if v <= 1e-10 * top { 0.0 } else { v })
        .collect();
    let transform = &centring * &pen_vectors;
    let design = &raw_design * &transform;
    let smooth = SmoothBasis { transform: transform.clone(), ..provisional };
    Ok(TermBasis {
        kind: TermKind::Smooth,
        design,
        penalty: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        constraint: Some(transform),
        knots: knots.iter().map(|u| shift + scale * u).collect(),
        evaluator: TermEvaluator::Smooth(smooth),
    })
}

/// Indicator columns for every level but the first, with an identity penalty.
pub fn build_ridge_term(levels: &[usize]) -> Result<TermBasis, SplineError> {
    let design = indicator_columns(levels)?;
    let k = design.ncols();
    Ok(TermBasis {
        kind: TermKind::Ridge,
        design,
        penalty: DMatrix::identity(k, k),
        constraint: None,
        knots: Vec::new(),
        evaluator: TermEvaluator::Columns,
    })
}

/// Unpenalized columns: the values themselves, or dummy coding when
/// `categorical` is set.
pub fn build_parametric_term(values: &[f64], categorical: bool) -> Result<TermBasis, SplineError> {
    let design = if categorical {
        let codes: Vec<usize> = values.iter().map(|&v| v as usize).collect();
        indicator_columns(&codes)?
    } else {
        DMatrix::from_column_slice(values.len(), 1, values)
    };
    let k = design.ncols();
    Ok(TermBasis {
        kind: TermKind::Parametric,
        design,
        penalty: DMatrix::zeros(k, k),
        constraint: None,
        knots: Vec::new(),
        evaluator: TermEvaluator::Columns,
    })
}

/// Distinct level codes in increasing order.
pub fn distinct_levels(codes: &[usize]) -> Vec<usize> {
    let mut levels = codes.to_vec();
    levels.sort_unstable();
    levels.dedup();
    levels
}

fn indicator_columns(codes: &[usize]) -> Result<DMatrix<f64>, SplineError> {
    let levels = distinct_levels(codes);
    if levels.len() < 2 {
        return Err(SplineError::Configuration(String::from(
            "categorical term has a single observed level and no variation",
        )));
    }
    let mut m = DMatrix::zeros(codes.len(), levels.len() - 1);
    for (i, c) in codes.iter().enumerate() {
        let pos = levels.binary_search(c).unwrap_or(0);
        if pos > 0 {
            m[(i, pos - 1)] = 1.0;
        }
    }
    Ok(m)
}

fn min_max(v: &[f64]) -> Option<(f64, f64)> {
    let first = *v.first()?;
    Some(v.iter().fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x))))
}

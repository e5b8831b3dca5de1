//! Model specification, parameter layout and design assembly for the two
//! equations of the joint (treatment, survival) model.
//!
//! The outcome predictor is
//! `eta1 = intercept + sum_j exp(b_j) C_j(y) + confounder terms + beta_d d + d * modifier terms`,
//! where `C_j(y) = sum_{k >= j} B_k(y)` are the cumulated cubic B-splines of the
//! monotone time term. The first monotone coefficient coincides with the
//! outcome intercept (the B-splines sum to one), so it is stored there.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{Column, DataSet};
use crate::splines::{
    build_monotone_term, build_parametric_term, build_ridge_term, build_smooth_term, distinct_levels, BSplineBasis,
    MonotoneReparam, SplineError, TermEvaluator, TermKind,
};

/// Relative finite-difference step for `d eta1 / dy`, as a fraction of the
/// monotone term's interval.
pub const DERIVATIVE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("invalid model specification: {0}")]
    Specification(String),
    #[error("term {term} is collinear with {}", with.join(", "))]
    Collinear { term: String, with: Vec<String> },
    #[error("coefficient vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// Monotone increasing transformation of the follow-up time.
    Monotone { basis_size: usize },
    /// Unpenalized column(s); categorical columns are dummy coded.
    Parametric { column: String },
    /// Indicator columns with an identity penalty.
    Ridge { column: String },
    /// Penalized smooth function of a numeric column.
    Smooth { column: String, basis_size: usize },
    /// The binary treatment indicator.
    Treatment,
    /// Treatment times a modifier column.
    Interaction { modifier: String },
}

impl Term {
    fn column(&self) -> Option<&str> {
        match self {
            Term::Parametric { column } | Term::Ridge { column } | Term::Smooth { column, .. } => Some(column),
            Term::Interaction { modifier } => Some(modifier),
            Term::Monotone { .. } | Term::Treatment => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    Outcome,
    Selection,
}

/// Declarative description of both equations. Each equation carries an
/// implicit intercept. The outcome link is `-probit` (`S = Phi(-eta1)`), the
/// selection link is probit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub outcome: Vec<Term>,
    pub selection: Vec<Term>,
    pub instruments: Vec<String>,
}

impl ModelSpec {
    /// Structural checks; column existence is checked against `data` when given.
    pub fn validate(&self, data: Option<&DataSet>) -> Result<(), DesignError> {
        let spec_err = |m: &str| Err(DesignError::Specification(m.to_string()));
        let monotone = self.outcome.iter().filter(|t| matches!(t, Term::Monotone { .. })).count();
        if monotone != 1 {
            return spec_err("the outcome equation needs exactly one monotone time term");
        }
        let treatment = self.outcome.iter().filter(|t| matches!(t, Term::Treatment)).count();
        if treatment != 1 {
            return spec_err("the outcome equation needs exactly one treatment term");
        }
        for t in &self.selection {
            match t {
                Term::Monotone { .. } => return spec_err("the selection equation cannot contain a time term"),
                Term::Treatment | Term::Interaction { .. } => {
                    return spec_err("the treatment cannot appear in its own equation")
                }
                _ => {}
            }
        }
        for iv in &self.instruments {
            if self.outcome.iter().any(|t| t.column() == Some(iv.as_str())) {
                return Err(DesignError::Specification(format!("instrument {iv} appears in the outcome equation")));
            }
            if !self.selection.iter().any(|t| t.column() == Some(iv.as_str())) {
                return Err(DesignError::Specification(format!("instrument {iv} is not used in the selection equation")));
            }
        }
        if let Some(data) = data {
            for t in self.outcome.iter().chain(&self.selection) {
                if let Some(c) = t.column() {
                    let col = data.column(c).ok_or_else(|| DesignError::UnknownColumn(c.to_string()))?;
                    if matches!(t, Term::Smooth { .. }) && col.is_categorical() {
                        return Err(DesignError::Specification(format!("smooth term on categorical column {c}")));
                    }
                    if matches!(t, Term::Ridge { .. })
                        && !col.is_categorical()
                        && col.values.iter().any(|v| v.fract() != 0.0 || *v < 0.0)
                    {
                        return Err(DesignError::Specification(format!(
                            "ridge term on {c} needs a categorical or non-negative integer column"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Where one term's coefficients live in `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSlot {
    pub label: String,
    pub kind: TermKind,
    pub equation: Equation,
    pub range: Range<usize>,
    pub penalty: Option<usize>,
    /// Dimension of the unpenalized subspace of the term.
    pub null_space_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub term: usize,
    pub range: Range<usize>,
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// Typical magnitude of the matching log-likelihood curvature, used to
    /// centre smoothing-parameter searches.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub outcome_dim: usize,
    pub selection_dim: usize,
    pub terms: Vec<TermSlot>,
    pub penalties: Vec<PenaltyBlock>,
    pub column_labels: Vec<String>,
    /// Coefficients entering the predictor as `exp(beta)`.
    pub reparametrized: Vec<bool>,
    pub treatment: usize,
    /// Interaction coefficients, in the column order of `DesignBundle::modifiers`.
    pub interactions: Vec<usize>,
    pub time_block: Range<usize>,
}

impl ParameterLayout {
    /// Total number of parameters, `dim(beta1) + dim(beta2) + 1`.
    pub fn dim(&self) -> usize {
        self.outcome_dim + self.selection_dim + 1
    }

    pub fn rho_index(&self) -> usize {
        self.outcome_dim + self.selection_dim
    }

    pub fn outcome_range(&self) -> Range<usize> {
        0..self.outcome_dim
    }

    pub fn selection_range(&self) -> Range<usize> {
        self.outcome_dim..self.outcome_dim + self.selection_dim
    }

    /// `E`: `exp(beta_j)` for reparametrized coefficients, 1 otherwise.
    pub fn e_vector(&self, delta: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| if self.reparametrized[j] { libm::exp(delta[j]) } else { 1.0 })
    }

    /// `E_bar`: `exp(beta_j)` for reparametrized coefficients, 0 otherwise.
    pub fn e_bar(&self, delta: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| if self.reparametrized[j] { libm::exp(delta[j]) } else { 0.0 })
    }

    /// Number of coefficients with a nonzero penalty row.
    pub fn penalized_count(&self) -> usize {
        self.penalties
            .iter()
            .map(|p| (0..p.matrix.nrows()).filter(|&r| p.matrix.row(r).iter().any(|v| *v != 0.0)).count())
            .sum()
    }

    /// Total rank of the penalty.
    pub fn penalty_rank(&self) -> usize {
        self.penalties.iter().map(|p| p.rank).sum()
    }

    /// `S_lambda`, the `dim × dim` block-diagonal penalty.
    pub fn penalty_matrix(&self, lambda: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.dim(), self.dim());
        for (p, &l) in self.penalties.iter().zip(lambda) {
            let r = p.range.clone();
            let mut view = s.view_mut((r.start, r.start), (r.len(), r.len()));
            view += &p.matrix * l;
        }
        s
    }

    /// `delta^T S_lambda delta`.
    pub fn penalty_quadratic(&self, delta: &[f64], lambda: &[f64]) -> f64 {
        self.penalties
            .iter()
            .zip(lambda)
            .map(|(p, &l)| {
                let b = DVector::from_column_slice(&delta[p.range.clone()]);
                l * (b.transpose() * &p.matrix * &b)[(0, 0)]
            })
            .sum()
    }

    /// `S_lambda delta`.
    pub fn penalty_gradient(&self, delta: &[f64], lambda: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (p, &l) in self.penalties.iter().zip(lambda) {
            let b = DVector::from_column_slice(&delta[p.range.clone()]);
            let sb = &p.matrix * b * l;
            g.rows_mut(p.range.start, p.range.len()).copy_from(&sb);
        }
        g
    }

    pub fn term(&self, label: &str) -> Option<&TermSlot> {
        self.terms.iter().find(|t| t.label == label)
    }
}

/// Assembled design matrices and the metadata needed to evaluate both predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    /// Outcome design `X~` (`n × dim(beta1)`), time block holding cumulated B-splines.
    pub outcome: DMatrix<f64>,
    /// `d X~ / dy` (`n × dim(beta1)`), nonzero only in the time block.
    pub outcome_derivative: DMatrix<f64>,
    /// Selection design `Z` (`n × dim(beta2)`).
    pub selection: DMatrix<f64>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub treatment: Vec<bool>,
    /// Modifier values for each interaction coefficient (`n × interactions`).
    pub modifiers: DMatrix<f64>,
    pub layout: ParameterLayout,
    pub time_basis: BSplineBasis,
    pub reparam: MonotoneReparam,
    pub derivative_step: f64,
}

struct Block {
    label: String,
    kind: TermKind,
    design: DMatrix<f64>,
    penalty: Option<(DMatrix<f64>, usize)>,
    labels: Vec<String>,
    null_space_dim: usize,
}

fn level_labels(name: &str, col: &Column) -> Vec<String> {
    let levels = distinct_levels(&col.codes());
    levels[1..].iter().map(|&l| format!("{name}:{}", col.level_label(l))).collect()
}

fn column<'a>(data: &'a DataSet, name: &str) -> Result<&'a Column, DesignError> {
    data.column(name).ok_or_else(|| DesignError::UnknownColumn(name.to_string()))
}

fn unpenalized(label: String, design: DMatrix<f64>, labels: Vec<String>) -> Block {
    let k = design.ncols();
    Block { label, kind: TermKind::Parametric, design, penalty: None, labels, null_space_dim: k }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let (values, _) = crate::linalg::sorted_symmetric_eigen(m);
    let top = values.first().copied().unwrap_or(0.0).abs();
    values.iter().filter(|&&v| v > 1e-10 * top).count()
}

/// Build the blocks of one equation (without the intercept). The time term and
/// the interactions are handled here as well; the layout is fixed by the order
/// of the terms in the specification.
fn build_blocks(
    terms: &[Term],
    data: &DataSet,
    monotone: &mut Option<(BSplineBasis, MonotoneReparam)>,
    modifiers: &mut Vec<Vec<f64>>,
) -> Result<Vec<Block>, DesignError> {
    let n = data.n();
    let d: Vec<f64> = data.treatment.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let mut blocks = Vec::with_capacity(terms.len());
    for term in terms {
        let block = match term {
            Term::Monotone { basis_size } => {
                let (tb, reparam) = build_monotone_term(&data.time, *basis_size)?;
                let basis = match tb.evaluator {
                    TermEvaluator::BSpline(b) => b,
                    _ => unreachable!("monotone terms use a B-spline evaluator"),
                };
                let j = *basis_size;
                let design = DMatrix::from_fn(n, j - 1, |i, c| (c + 1..j).map(|k| tb.design[(i, k)]).sum());
                let diff = reparam.difference.columns(1, j - 1).into_owned();
                let penalty = diff.transpose() * &diff;
                let label = format!("mono({})", data.time_name);
                let labels = (2..=j).map(|k| format!("{label}.{k}")).collect();
                *monotone = Some((basis, reparam));
                Block { label, kind: TermKind::Monotone, design, penalty: Some((penalty, j - 2)), labels, null_space_dim: 1 }
            }
            Term::Parametric { column: name } => {
                let col = column(data, name)?;
                let tb = build_parametric_term(&col.values, col.is_categorical())?;
                let labels = if col.is_categorical() { level_labels(name, col) } else { vec![name.clone()] };
                unpenalized(name.clone(), tb.design, labels)
            }
            Term::Ridge { column: name } => {
                let col = column(data, name)?;
                let tb = build_ridge_term(&col.codes())?;
                let label = format!("re({name})");
                let labels = level_labels(&label, col);
                let k = tb.num_columns();
                Block { label, kind: TermKind::Ridge, design: tb.design, penalty: Some((tb.penalty, k)), labels, null_space_dim: 0 }
            }
            Term::Smooth { column: name, basis_size } => {
                let col = column(data, name)?;
                let tb = build_smooth_term(&col.values, *basis_size)?;
                let label = format!("s({name})");
                let k = tb.num_columns();
                let rank = numerical_rank(&tb.penalty);
                let labels = (1..=k).map(|c| format!("{label}.{c}")).collect();
                Block {
                    label,
                    kind: TermKind::Smooth,
                    design: tb.design,
                    penalty: Some((tb.penalty, rank)),
                    labels,
                    null_space_dim: k - rank,
                }
            }
            Term::Treatment => {
                let design = DMatrix::from_column_slice(n, 1, &d);
                unpenalized(data.treatment_name.clone(), design, vec![data.treatment_name.clone()])
            }
            Term::Interaction { modifier } => {
                let col = column(data, modifier)?;
                let base = build_parametric_term(&col.values, col.is_categorical())?.design;
                let label = format!("{}:{modifier}", data.treatment_name);
                let labels =
                    if col.is_categorical() { level_labels(&label, col) } else { vec![label.clone()] };
                for c in 0..base.ncols() {
                    modifiers.push(base.column(c).iter().copied().collect());
                }
                let design = DMatrix::from_fn(n, base.ncols(), |i, c| d[i] * base[(i, c)]);
                unpenalized(label, design, labels)
            }
        };
        blocks.push(block);
    }
    Ok(blocks)
}

/// Modified Gram–Schmidt over the unpenalized columns of one equation.
fn check_collinearity(design: &DMatrix<f64>, owners: &[String], unpenalized: &[usize]) -> Result<(), DesignError> {
    let mut basis: Vec<(DVector<f64>, usize)> = Vec::new();
    for &c in unpenalized {
        let original = design.column(c).into_owned();
        let norm0 = original.norm();
        let mut v = original.clone();
        let mut involved = Vec::new();
        for (q, owner) in &basis {
            let proj = q.dot(&v);
            if proj.abs() > 1e-8 * norm0.max(1e-300) {
                involved.push(*owner);
            }
            v.axpy(-proj, q, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0.max(1.0) {
            let mut with: Vec<String> = involved.iter().map(|&o| owners[o].clone()).collect();
            with.dedup();
            if with.is_empty() {
                with.push(String::from("zero column"));
            }
            return Err(DesignError::Collinear { term: owners[c].clone(), with });
        }
        basis.push((v / norm, c));
    }
    Ok(())
}

struct Assembled {
    design: DMatrix<f64>,
    slots: Vec<TermSlot>,
    penalties: Vec<PenaltyBlock>,
    labels: Vec<String>,
    reparametrized: Vec<bool>,
}

fn assemble_equation(
    equation: Equation,
    blocks: Vec<Block>,
    n: usize,
    offset: usize,
    first_term: usize,
) -> Result<Assembled, DesignError> {
    let p = 1 + blocks.iter().map(|b| b.design.ncols()).sum::<usize>();
    let mut design = DMatrix::zeros(n, p);
    design.column_mut(0).fill(1.0);
    let mut labels = vec![String::from(match equation {
        Equation::Outcome => "(Intercept)",
        Equation::Selection => "(Intercept):selection",
    })];
    let mut owners = vec![labels[0].clone()];
    let mut unpen = vec![0usize];
    let mut slots = vec![TermSlot {
        label: labels[0].clone(),
        kind: TermKind::Parametric,
        equation,
        range: offset..offset + 1,
        penalty: None,
        null_space_dim: 1,
    }];
    let mut penalties = Vec::new();
    let mut reparametrized = vec![false];
    let mut col = 1;
    for block in blocks {
        let k = block.design.ncols();
        design.columns_mut(col, k).copy_from(&block.design);
        let range = offset + col..offset + col + k;
        let penalty = block.penalty.map(|(matrix, rank)| {
            let gram = block.design.transpose() * &block.design;
            let scale = (gram.trace() / matrix.trace().max(1e-300)).max(1e-300);
            for r in 0..k {
                if matrix.row(r).iter().all(|v| *v == 0.0) {
                    unpen.push(col + r);
                }
            }
            penalties.push(PenaltyBlock { term: first_term + slots.len(), range: range.clone(), matrix, rank, scale });
            penalties.len() - 1
        });
        if penalty.is_none() {
            unpen.extend(col..col + k);
        }
        let monotone = block.kind == TermKind::Monotone;
        reparametrized.extend(core::iter::repeat(monotone).take(k));
        owners.extend(core::iter::repeat(block.label.clone()).take(k));
        labels.extend(block.labels);
        slots.push(TermSlot {
            label: block.label,
            kind: block.kind,
            equation,
            range,
            penalty,
            null_space_dim: block.null_space_dim,
        });
        col += k;
    }
    // the monotone time block is unpenalized in its leading direction but is
    // never collinear with the intercept, so only genuinely free columns are checked
    check_collinearity(&design, &owners, &unpen)?;
    Ok(Assembled { design, slots, penalties, labels, reparametrized })
}

impl DesignBundle {
    pub fn assemble(spec: &ModelSpec, data: &DataSet) -> Result<Self, DesignError> {
        spec.validate(Some(data))?;
        let n = data.n();
        let mut monotone = None;
        let mut modifiers = Vec::new();
        let out_blocks = build_blocks(&spec.outcome, data, &mut monotone, &mut modifiers)?;
        let sel_blocks = build_blocks(&spec.selection, data, &mut None, &mut Vec::new())?;
        let (time_basis, reparam) = monotone.expect("validated: one monotone term");

        let out = assemble_equation(Equation::Outcome, out_blocks, n, 0, 0)?;
        let p1 = out.design.ncols();
        let sel = assemble_equation(Equation::Selection, sel_blocks, n, p1, out.slots.len())?;
        let p2 = sel.design.ncols();

        let mut terms = out.slots;
        terms.extend(sel.slots);
        let mut penalties = out.penalties;
        penalties.extend(sel.penalties);
        let mut column_labels = out.labels;
        column_labels.extend(sel.labels);
        column_labels.push(String::from("rho*"));
        let mut reparametrized = out.reparametrized;
        reparametrized.extend(sel.reparametrized);
        reparametrized.push(false);

        let time_slot = terms.iter().find(|t| t.kind == TermKind::Monotone).expect("monotone slot");
        let time_block = time_slot.range.clone();
        let treatment = terms
            .iter()
            .find(|t| t.equation == Equation::Outcome && t.label == data.treatment_name && t.kind == TermKind::Parametric)
            .map(|t| t.range.start)
            .ok_or_else(|| DesignError::Specification(String::from("treatment term missing")))?;
        let prefix = format!("{}:", data.treatment_name);
        let interactions: Vec<usize> = terms
            .iter()
            .filter(|t| t.equation == Equation::Outcome && t.label.starts_with(&prefix))
            .flat_map(|t| t.range.clone())
            .collect();
        let modifiers = DMatrix::from_fn(n, modifiers.len(), |i, c| modifiers[c][i]);

        let layout = ParameterLayout {
            outcome_dim: p1,
            selection_dim: p2,
            terms,
            penalties,
            column_labels,
            reparametrized,
            treatment,
            interactions,
            time_block,
        };
        let (a, b) = time_basis.interval();
        let mut bundle = Self {
            outcome: out.design,
            outcome_derivative: DMatrix::zeros(n, p1),
            selection: sel.design,
            time: data.time.clone(),
            event: data.event.clone(),
            treatment: data.treatment.clone(),
            modifiers,
            layout,
            time_basis,
            reparam,
            derivative_step: DERIVATIVE_STEP * (b - a),
        };
        bundle.outcome_derivative = bundle.derivative_design(bundle.derivative_step);
        Ok(bundle)
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn check_dim(&self, delta: &[f64]) -> Result<(), DesignError> {
        if delta.len() != self.dim() {
            return Err(DesignError::Dimension { expected: self.dim(), found: delta.len() });
        }
        Ok(())
    }

    /// Cumulated B-spline row `(C_2(t), ..., C_J(t))` of the time block.
    pub fn time_row(&self, t: f64) -> Result<Vec<f64>, DesignError> {
        let b = self.time_basis.row(t)?;
        let j = b.len();
        let mut out = vec![0.0; j - 1];
        let mut acc = 0.0;
        for k in (1..j).rev() {
            acc += b[k];
            out[k - 1] = acc;
        }
        Ok(out)
    }

    /// Central differences of the time block (one-sided at the interval ends).
    pub fn derivative_design(&self, step: f64) -> DMatrix<f64> {
        let (a, b) = self.time_basis.interval();
        let mut m = DMatrix::zeros(self.n(), self.layout.outcome_dim);
        let start = self.layout.time_block.start;
        for (i, &y) in self.time.iter().enumerate() {
            let lo = (y - step).max(a);
            let hi = (y + step).min(b);
            let (Ok(r_hi), Ok(r_lo)) = (self.time_row(hi), self.time_row(lo)) else { continue };
            let h = hi - lo;
            for (c, (u, l)) in r_hi.iter().zip(&r_lo).enumerate() {
                m[(i, start + c)] = (u - l) / h;
            }
        }
        m
    }

    /// `f(delta)`: reparametrized coefficients replaced by their exponentials.
    pub fn reparametrize(&self, delta: &[f64]) -> DVector<f64> {
        DVector::from_fn(delta.len(), |j, _| {
            if self.layout.reparametrized.get(j).copied().unwrap_or(false) {
                libm::exp(delta[j])
            } else {
                delta[j]
            }
        })
    }

    fn beta1_tilde(&self, delta: &[f64]) -> DVector<f64> {
        self.reparametrize(delta).rows(0, self.layout.outcome_dim).into_owned()
    }

    pub fn eta1(&self, delta: &[f64]) -> Result<DVector<f64>, DesignError> {
        self.check_dim(delta)?;
        Ok(&self.outcome * self.beta1_tilde(delta))
    }

    pub fn eta1_row(&self, delta: &[f64], row: usize) -> Result<f64, DesignError> {
        self.check_dim(delta)?;
        Ok(self.outcome.row(row).dot(&self.beta1_tilde(delta).transpose()))
    }

    pub fn eta2(&self, delta: &[f64]) -> Result<DVector<f64>, DesignError> {
        self.check_dim(delta)?;
        let b2 = DVector::from_column_slice(&delta[self.layout.selection_range()]);
        Ok(&self.selection * b2)
    }

    /// `d eta1 / dy` with the default step.
    pub fn deta1_dy(&self, delta: &[f64]) -> Result<DVector<f64>, DesignError> {
        self.check_dim(delta)?;
        Ok(&self.outcome_derivative * self.beta1_tilde(delta))
    }

    pub fn deta1_dy_with_step(&self, delta: &[f64], step: f64) -> Result<DVector<f64>, DesignError> {
        self.check_dim(delta)?;
        if !(step > 0.0) {
            return Err(DesignError::Specification(format!("finite-difference step must be positive, got {step}")));
        }
        Ok(self.derivative_design(step) * self.beta1_tilde(delta))
    }

    /// Split of `eta1` for counterfactual evaluation:
    /// `eta1(t, i, d) = h(t) + static_i + d * effect_i`, where `h` is the time
    /// block alone. Returns `(static, effect)` per row.
    pub fn counterfactual_parts(&self, delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DesignError> {
        self.check_dim(delta)?;
        let bt = self.beta1_tilde(delta);
        let tb = self.layout.time_block.clone();
        let mut statics = Vec::with_capacity(self.n());
        let mut effects = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let mut s = 0.0;
            for c in 0..self.layout.outcome_dim {
                if tb.contains(&c) || c == self.layout.treatment || self.layout.interactions.contains(&c) {
                    continue;
                }
                s += self.outcome[(i, c)] * bt[c];
            }
            let mut e = bt[self.layout.treatment];
            for (k, &c) in self.layout.interactions.iter().enumerate() {
                e += bt[c] * self.modifiers[(i, k)];
            }
            statics.push(s);
            effects.push(e);
        }
        Ok((statics, effects))
    }

    /// Time block `h(t) = sum_j exp(b_j) C_j(t)`.
    pub fn time_transform(&self, delta: &[f64], t: f64) -> Result<f64, DesignError> {
        self.check_dim(delta)?;
        let row = self.time_row(t)?;
        let tb = self.layout.time_block.clone();
        Ok(row.iter().zip(&delta[tb]).map(|(c, b)| c * libm::exp(*b)).sum())
    }

    /// Column block of one term in its equation's design matrix.
    pub fn term_design(&self, slot: &TermSlot) -> DMatrix<f64> {
        match slot.equation {
            Equation::Outcome => self.outcome.columns(slot.range.start, slot.range.len()).into_owned(),
            Equation::Selection => self
                .selection
                .columns(slot.range.start - self.layout.outcome_dim, slot.range.len())
                .into_owned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm_cdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_data(n: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let age: Vec<f64> = (0..n).map(|_| 20.0 + 40.0 * rng.gen::<f64>()).collect();
        let iv: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let sex: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let time: Vec<f64> = (0..n).map(|_| 0.1 + 10.0 * rng.gen::<f64>()).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.7).collect();
        let treat: Vec<bool> = (0..n).map(|i| rng.gen::<f64>() < 0.3 + 0.4 * iv[i] as f64).collect();
        DataSet::new(
            "dur",
            "agree",
            time,
            event,
            treat,
            vec![
                Column::numeric("x", x),
                Column::numeric("age", age),
                Column::categorical("bonus", &iv, vec!["no".into(), "yes".into()]),
                Column::categorical("gender", &sex, vec!["f".into(), "m".into()]),
            ],
        )
        .unwrap()
    }

    pub(crate) fn toy_spec() -> ModelSpec {
        ModelSpec {
            outcome: vec![
                Term::Monotone { basis_size: 8 },
                Term::Parametric { column: "x".into() },
                Term::Smooth { column: "age".into(), basis_size: 6 },
                Term::Treatment,
                Term::Interaction { modifier: "gender".into() },
                Term::Parametric { column: "gender".into() },
            ],
            selection: vec![Term::Parametric { column: "x".into() }, Term::Ridge { column: "bonus".into() }],
            instruments: vec!["bonus".into()],
        }
    }

    fn random_delta(bundle: &DesignBundle, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..bundle.dim()).map(|_| rng.gen::<f64>() - 0.5).collect()
    }

    #[test]
    fn intercept_and_binary_covariate() {
        let data = DataSet::new(
            "t",
            "d",
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, false, true, true],
            vec![false, true, false, true],
            vec![Column::numeric("x", vec![0.0, 1.0, 1.0, 0.0])],
        )
        .unwrap();
        let spec = ModelSpec {
            outcome: vec![Term::Monotone { basis_size: 5 }, Term::Treatment],
            selection: vec![Term::Parametric { column: "x".into() }],
            instruments: vec!["x".into()],
        };
        let b = DesignBundle::assemble(&spec, &data).unwrap();
        assert_eq!(b.selection.ncols(), 2);
        assert_eq!(b.selection.column(0).as_slice(), &[1.0; 4]);
        assert_eq!(b.selection.column(1).as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        // intercept + 4 time columns + treatment; 2 selection; rho*
        assert_eq!(b.dim(), 6 + 2 + 1);
        assert_eq!(b.layout.dim(), b.layout.outcome_dim + b.layout.selection_dim + 1);
    }

    #[test]
    fn block_layout_follows_specification() {
        let data = toy_data(200, 1);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let labels: Vec<&str> = b.layout.terms.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(
            labels,
            ["(Intercept)", "mono(dur)", "x", "s(age)", "agree", "agree:gender", "gender", "(Intercept):selection", "x", "re(bonus)"]
        );
        assert_eq!(b.layout.time_block, 1..8);
        assert_eq!(b.layout.penalties.len(), 3);
        assert!(b.layout.e_vector(&vec![0.3; b.dim()]).iter().all(|&e| e > 0.0));
        // interaction columns are products of treatment and modifier
        let slot = b.layout.term("agree:gender").unwrap();
        let col = b.outcome.column(slot.range.start);
        let sex = &data.column("gender").unwrap().values;
        for i in 0..data.n() {
            let d = if data.treatment[i] { 1.0 } else { 0.0 };
            assert_eq!(col[i], d * sex[i]);
        }
        assert_eq!(b.layout.interactions, vec![slot.range.start]);
    }

    #[test]
    fn duplicated_covariate_is_rejected() {
        let mut data = toy_data(50, 2);
        let x = data.column("x").unwrap().values.clone();
        data.columns.push(Column::numeric("x_copy", x.iter().map(|v| 2.0 * v).collect()));
        let mut spec = toy_spec();
        spec.outcome.push(Term::Parametric { column: "x_copy".into() });
        match DesignBundle::assemble(&spec, &data) {
            Err(DesignError::Collinear { term, with }) => {
                assert_eq!(term, "x_copy");
                assert!(with.contains(&String::from("x")));
            }
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn specification_rules() {
        let data = toy_data(30, 3);
        let mut spec = toy_spec();
        spec.outcome.retain(|t| !matches!(t, Term::Monotone { .. }));
        assert!(matches!(spec.validate(Some(&data)), Err(DesignError::Specification(_))));
        let mut spec = toy_spec();
        spec.outcome.push(Term::Parametric { column: "bonus".into() });
        assert!(matches!(spec.validate(Some(&data)), Err(DesignError::Specification(_))));
        let mut spec = toy_spec();
        spec.selection.push(Term::Parametric { column: "nope".into() });
        assert_eq!(spec.validate(Some(&data)), Err(DesignError::UnknownColumn("nope".into())));
    }

    #[test]
    fn zero_working_coefficients_give_ramp() {
        let r = MonotoneReparam::new(3, 4, (0.0, 1.0));
        assert_eq!(r.apply(&[0.0, 0.0, 0.0]), vec![0.0, 1.0, 2.0]);
        let data = toy_data(60, 4);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let delta = vec![0.0; b.dim()];
        let eta = b.eta1(&delta).unwrap();
        // time block equals sum_j (j-1) B_j(y) for a zero working vector
        for i in 0..data.n() {
            let row = b.time_basis.row(data.time[i]).unwrap();
            let expected: f64 = row.iter().enumerate().map(|(j, v)| j as f64 * v).sum();
            assert!((eta[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_selection_predictor_is_even_odds() {
        let data = toy_data(20, 5);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let eta2 = b.eta2(&vec![0.0; b.dim()]).unwrap();
        assert!(eta2.iter().all(|&e| norm_cdf(-e) == 0.5));
        assert!(matches!(b.eta2(&[0.0; 3]), Err(DesignError::Dimension { .. })));
    }

    #[test]
    fn treatment_contrast_is_linear() {
        let data = toy_data(80, 6);
        let swapped = data.with_swapped_treatment();
        let spec = toy_spec();
        let b0 = DesignBundle::assemble(&spec, &data).unwrap();
        let b1 = DesignBundle::assemble(&spec, &swapped).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = random_delta(&b0, &mut rng);
        let e0 = b0.eta1(&delta).unwrap();
        let e1 = b1.eta1(&delta).unwrap();
        let sex = &data.column("gender").unwrap().values;
        let bd = delta[b0.layout.treatment];
        let bi = delta[b0.layout.interactions[0]];
        for i in 0..data.n() {
            let sign = if data.treatment[i] { 1.0 } else { -1.0 };
            assert!((e0[i] - e1[i] - sign * (bd + bi * sex[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_transformation_has_constant_derivative() {
        let data = toy_data(100, 7);
        let spec = ModelSpec {
            outcome: vec![Term::Monotone { basis_size: 10 }, Term::Treatment],
            selection: vec![Term::Parametric { column: "bonus".into() }],
            instruments: vec![],
        };
        let b = DesignBundle::assemble(&spec, &data).unwrap();
        // zero working coefficients give the ramp (0, 1, 2, ...) which, on
        // equally spaced knots, reproduces a linear function of y
        let d = b.deta1_dy(&vec![0.0; b.dim()]).unwrap();
        let (lo, hi) = b.time_basis.interval();
        let slope = (b.time_basis.num_basis() - 3) as f64 / (hi - lo);
        for v in d.iter() {
            assert!((v / slope - 1.0).abs() < 1e-8, "{v} vs {slope}");
        }
    }

    #[test]
    fn derivative_matches_dense_grid_secant() {
        let data = toy_data(100, 8);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let delta = random_delta(&b, &mut rng);
        let d = b.deta1_dy(&delta).unwrap();
        let (lo, hi) = b.time_basis.interval();
        let m = 10_000;
        let h = (hi - lo) / m as f64;
        for i in 0..data.n() {
            let y = data.time[i];
            let k = (((y - lo) / h) as usize).min(m - 1);
            let (a, c) = (lo + k as f64 * h, lo + (k + 1) as f64 * h);
            // secant slope around y on the grid, re-centred to second order
            let secant = (b.time_transform(&delta, c).unwrap() - b.time_transform(&delta, a).unwrap()) / h;
            let mid = 0.5 * (a + c);
            let lo2 = (y - h).max(lo);
            let hi2 = (y + h).min(hi);
            let local = (b.time_transform(&delta, hi2).unwrap() - b.time_transform(&delta, lo2).unwrap()) / (hi2 - lo2);
            let oracle = if (y - mid).abs() < 0.25 * h { secant } else { local };
            assert!((d[i] - oracle).abs() <= 1e-4 * oracle.abs(), "row {i}: {} vs {oracle}", d[i]);
        }
    }

    #[test]
    fn halving_the_step_changes_derivative_at_second_order() {
        let data = toy_data(50, 10);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta = random_delta(&b, &mut rng);
        let (lo, hi) = b.time_basis.interval();
        let eps = 1e-2 * (hi - lo);
        let d1 = b.deta1_dy_with_step(&delta, eps).unwrap();
        let d2 = b.deta1_dy_with_step(&delta, eps / 2.0).unwrap();
        let d4 = b.deta1_dy_with_step(&delta, eps / 4.0).unwrap();
        for i in 0..data.n() {
            let y = data.time[i];
            // the third derivative jumps at knots; keep stencils inside one span
            let straddles = b.time_basis.knots().iter().any(|k| (y - eps..=y + eps).contains(k));
            if straddles || y - eps < lo || y + eps > hi {
                continue;
            }
            let a = (d1[i] - d2[i]).abs();
            let c = (d2[i] - d4[i]).abs();
            // an O(eps^2) error shrinks four-fold
            if a > 1e-10 {
                assert!((a / c - 4.0).abs() < 0.05, "row {i}: {a} then {c}");
            }
        }
    }

    #[test]
    fn penalty_assembly_matches_blockwise_sum() {
        let data = toy_data(120, 11);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let delta = random_delta(&b, &mut rng);
            let lambda: Vec<f64> = (0..b.layout.penalties.len()).map(|_| libm::exp(rng.gen::<f64>() * 6.0 - 3.0)).collect();
            let s = b.layout.penalty_matrix(&lambda);
            let dv = DVector::from_column_slice(&delta);
            let full = (dv.transpose() * &s * &dv)[(0, 0)];
            let blockwise = b.layout.penalty_quadratic(&delta, &lambda);
            assert!((full - blockwise).abs() <= 1e-12 * full.abs().max(1.0));
            let grad = b.layout.penalty_gradient(&delta, &lambda);
            assert!((grad - &s * &dv).amax() < 1e-12);
            // rho* is unpenalized
            let r = b.layout.rho_index();
            assert!(s.row(r).iter().all(|v| *v == 0.0));
        }
        // monotone (J - 1 rows), smooth (J - 2) and ridge (1) rows are penalized
        assert_eq!(b.layout.penalized_count(), 7 + 4 + 1);
        assert_eq!(b.layout.penalty_rank(), 6 + 4 + 1);
    }

    #[test]
    fn chain_rule_through_exponentials() {
        let data = toy_data(40, 12);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let delta = random_delta(&b, &mut rng);
        let e = b.layout.e_vector(&delta);
        let h = 1e-6;
        for j in 0..b.layout.outcome_dim {
            let mut up = delta.clone();
            let mut dn = delta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (b.eta1(&up).unwrap() - b.eta1(&dn).unwrap()) / (2.0 * h);
            let analytic = b.outcome.column(j) * e[j];
            for i in 0..data.n() {
                let scale = analytic[i].abs().max(1e-3);
                assert!((fd[i] - analytic[i]).abs() <= 1e-6 * scale, "coef {j} row {i}");
            }
        }
        let bar = b.layout.e_bar(&delta);
        for j in 0..b.dim() {
            assert_eq!(bar[j] == 0.0, !b.layout.reparametrized[j]);
        }
    }

    #[test]
    fn counterfactual_parts_reproduce_eta1() {
        let data = toy_data(60, 13);
        let b = DesignBundle::assemble(&toy_spec(), &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let delta = random_delta(&b, &mut rng);
        let (s, e) = b.counterfactual_parts(&delta).unwrap();
        let eta = b.eta1(&delta).unwrap();
        for i in 0..data.n() {
            let d = if data.treatment[i] { 1.0 } else { 0.0 };
            let h = b.time_transform(&delta, data.time[i]).unwrap();
            assert!((h + s[i] + d * e[i] - eta[i]).abs() < 1e-12);
        }
    }
}

//! JSON and TSV writers. Floats are written with 17 significant digits so
//! that outputs round-trip and compare byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use causaltm_core::design::Equation;
use causaltm_core::inference::{CurveSet, RowKind, Summary};
use causaltm_core::optimizer::FitResult;
use causaltm_core::simulate::{ModelReport, ParameterSummary, ReplicationReport};
use serde_json::{Map, Number, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("non-finite value in `{0}`")]
pub struct NonFinite(pub String);

/// A finite float as a JSON number in `{:.16e}` form.
pub fn number(x: f64, what: &str) -> Result<Value, NonFinite> {
    if !x.is_finite() {
        return Err(NonFinite(what.to_string()));
    }
    let n: Number = serde_json::from_str(&format!("{x:.16e}")).expect("formatted float is valid JSON");
    Ok(Value::Number(n))
}

fn opt_number(x: Option<f64>, what: &str) -> Result<Value, NonFinite> {
    match x {
        Some(v) => number(v, what),
        None => Ok(Value::Null),
    }
}

fn numbers(xs: &[f64], what: &str) -> Result<Value, NonFinite> {
    xs.iter().map(|&x| number(x, what)).collect::<Result<Vec<_>, _>>().map(Value::Array)
}

fn tsv_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn equation_name(e: Equation) -> &'static str {
    match e {
        Equation::Outcome => "outcome",
        Equation::Selection => "selection",
    }
}

fn kind_name(k: RowKind) -> &'static str {
    match k {
        RowKind::Parametric => "parametric",
        RowKind::Smooth => "smooth",
        RowKind::Ridge => "ridge",
        RowKind::Monotone => "monotone",
    }
}

/// Coefficients, `rho` interval, edf, fit statistics and convergence of one
/// model.
pub fn model_json(fit: &FitResult, summary: &Summary, labels: &[String]) -> Result<Value, NonFinite> {
    let mut m = Map::new();
    let mut rows = Vec::new();
    for r in &summary.rows {
        let mut o = Map::new();
        o.insert("label".into(), Value::String(r.label.clone()));
        o.insert("equation".into(), Value::String(equation_name(r.equation).into()));
        o.insert("kind".into(), Value::String(kind_name(r.kind).into()));
        o.insert("estimate".into(), opt_number(r.estimate, &r.label)?);
        o.insert("std_error".into(), opt_number(r.std_error, &r.label)?);
        o.insert("statistic".into(), opt_number(r.statistic, &r.label)?);
        o.insert("p_value".into(), opt_number(r.p_value, &r.label)?);
        o.insert("edf".into(), opt_number(r.edf, &r.label)?);
        o.insert("rank".into(), r.rank.map_or(Value::Null, |k| Value::from(k)));
        rows.push(Value::Object(o));
    }
    m.insert("coefficients".into(), Value::Array(rows));
    let mut rho = Map::new();
    rho.insert("estimate".into(), number(summary.rho.estimate, "rho")?);
    rho.insert("lower".into(), number(summary.rho.lower, "rho")?);
    rho.insert("upper".into(), number(summary.rho.upper, "rho")?);
    m.insert("rho".into(), Value::Object(rho));
    let mut edf = Map::new();
    edf.insert("total".into(), number(summary.edf.total, "edf")?);
    edf.insert("total_from_penalty".into(), number(summary.edf.total_from_penalty, "edf")?);
    edf.insert("rho".into(), number(summary.edf.rho, "edf")?);
    edf.insert("per_term".into(), numbers(&summary.edf.per_term, "edf")?);
    m.insert("edf".into(), Value::Object(edf));
    m.insert("loglik".into(), number(summary.loglik, "loglik")?);
    m.insert("aic".into(), number(summary.aic, "aic")?);
    m.insert("lambda".into(), numbers(&fit.lambda, "lambda")?);
    m.insert("parameters".into(), Value::Array(labels.iter().map(|l| Value::String(l.clone())).collect()));
    m.insert("delta".into(), numbers(&fit.delta, "delta")?);
    let c = &fit.convergence;
    let mut conv = Map::new();
    conv.insert("converged".into(), Value::Bool(c.converged));
    conv.insert("iterations".into(), Value::from(c.iterations));
    conv.insert("gradient_norm".into(), number(c.gradient_norm, "gradient_norm")?);
    conv.insert("rejections".into(), Value::from(c.rejections));
    conv.insert("outer_iterations".into(), Value::from(c.outer_iterations));
    conv.insert("criterion_evaluations".into(), Value::from(c.criterion_evaluations));
    conv.insert("repair_shift".into(), number(fit.repair_shift, "repair_shift")?);
    m.insert("convergence".into(), Value::Object(conv));
    Ok(Value::Object(m))
}

pub fn levels_json(levels: &BTreeMap<String, Vec<String>>) -> Value {
    Value::Object(
        levels
            .iter()
            .map(|(k, v)| (k.clone(), Value::Array(v.iter().map(|l| Value::String(l.clone())).collect())))
            .collect(),
    )
}

/// `t  group  estimate  lo  hi`, one line per group and grid point.
pub fn curves_tsv(set: &CurveSet) -> String {
    let mut s = String::from("t\tgroup\testimate\tlo\thi\n");
    for c in &set.curves {
        for (k, &t) in set.grid.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                tsv_float(t),
                c.label,
                tsv_float(c.estimate[k]),
                tsv_float(c.lower[k]),
                tsv_float(c.upper[k])
            );
        }
    }
    s
}

/// `t  estimate  lo  hi`, with a leading group column when `group` is given.
pub fn sate_tsv(set: &CurveSet, group: Option<&str>) -> String {
    let mut s = String::from(if group.is_some() { "group\tt\testimate\tlo\thi\n" } else { "t\testimate\tlo\thi\n" });
    let c = &set.curves[0];
    for (k, &t) in set.grid.iter().enumerate() {
        if let Some(g) = group {
            let _ = write!(s, "{g}\t");
        }
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            tsv_float(t),
            tsv_float(c.estimate[k]),
            tsv_float(c.lower[k]),
            tsv_float(c.upper[k])
        );
    }
    s
}

fn parameter_json(p: &Option<ParameterSummary>) -> Result<Value, NonFinite> {
    let Some(p) = p else { return Ok(Value::Null) };
    let mut m = Map::new();
    m.insert("truth".into(), number(p.truth, "truth")?);
    m.insert("count".into(), Value::from(p.count));
    m.insert("mean".into(), number(p.mean, "mean")?);
    m.insert("bias".into(), number(p.bias, "bias")?);
    m.insert("variance".into(), number(p.variance, "variance")?);
    m.insert("rmse".into(), number(p.rmse, "rmse")?);
    m.insert("coverage".into(), number(p.coverage, "coverage")?);
    m.insert("mc_se".into(), number(p.mc_se, "mc_se")?);
    Ok(Value::Object(m))
}

fn model_report_json(r: &ModelReport) -> Result<Value, NonFinite> {
    let mut m = Map::new();
    m.insert("fitted".into(), Value::from(r.fitted));
    m.insert("converged".into(), Value::from(r.converged));
    m.insert("beta_d".into(), parameter_json(&r.beta_d)?);
    m.insert("rho".into(), parameter_json(&r.rho)?);
    m.insert("sate".into(), Value::Array(r.sate.iter().map(parameter_json).collect::<Result<_, _>>()?));
    Ok(Value::Object(m))
}

pub fn study_json(r: &ReplicationReport) -> Result<Value, NonFinite> {
    let mut m = Map::new();
    m.insert("replicates".into(), Value::from(r.replicates));
    m.insert("rho_true".into(), number(r.rho_true, "rho_true")?);
    m.insert("beta_d_true".into(), number(r.beta_d_true, "beta_d_true")?);
    m.insert("sate_times".into(), numbers(&r.grid, "grid")?);
    m.insert("failures".into(), Value::from(r.failures));
    m.insert("joint".into(), model_report_json(&r.joint)?);
    m.insert("univariate".into(), r.univariate.as_ref().map_or(Ok(Value::Null), model_report_json)?);
    Ok(Value::Object(m))
}

/// Pretty JSON with a trailing newline.
pub fn to_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

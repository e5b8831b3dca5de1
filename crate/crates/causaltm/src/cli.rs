//! Command line definition and dispatch.

use std::path::{Path, PathBuf};

use causaltm_core::simulate::{generate, StudyOptions};
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::config::{GroupFilter, RunConfig};
use crate::output;
use crate::run::{self, Manifest, RunError, HESSIAN_CHECK_LIMIT, SCORE_CHECK_LIMIT};
use crate::study;

#[derive(Debug, Parser)]
#[command(name = "causaltm", version, about = "Causal transformation model for censored event times with an endogenous treatment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration file.
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Repeat the run recorded in a manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Posterior simulation seed (overrides `inference.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data file (overrides `data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the joint and univariate models and write summary.json.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Survival average treatment effect with bands, written to sate.tsv.
    Sate {
        #[command(flatten)]
        common: Common,
        /// Evaluation times, comma separated or repeated.
        #[arg(long = "sate-time", alias = "sate-week", value_delimiter = ',')]
        times: Vec<f64>,
        /// Average over the rows with column=level only.
        #[arg(long)]
        group: Option<String>,
    },
    /// Counterfactual survival curves with bands, written to curves.tsv.
    Curves {
        #[command(flatten)]
        common: Common,
        /// Restrict to rows with column=level; may repeat.
        #[arg(long)]
        group: Vec<String>,
    },
    /// Replication study from the `sim.*` keys, written to study.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write one simulated data set as CSV instead of running the study.
        #[arg(long)]
        write_data: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference derivatives at the estimate.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Sate { .. } => "sate",
            Command::Curves { .. } => "curves",
            Command::Simulate { .. } => "simulate",
            Command::Check { .. } => "check",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit { common }
            | Command::Sate { common, .. }
            | Command::Curves { common, .. }
            | Command::Simulate { common, .. }
            | Command::Check { common } => common,
        }
    }
}

fn group(s: &str) -> Result<GroupFilter, RunError> {
    GroupFilter::parse(s).map_err(|e| RunError::Config(crate::config::ConfigError::Invalid(e)))
}

/// The effective configuration: file or manifest, then command line
/// overrides. Also returns the data hash a manifest expects.
fn resolve(cmd: &Command) -> Result<(RunConfig, Option<String>), RunError> {
    let c = cmd.common();
    let (mut cfg, expected) = match (&c.config, &c.manifest) {
        (Some(path), _) => (run::load_config(path)?, None),
        (None, Some(path)) => {
            let m = Manifest::read(path)?;
            if m.subcommand != cmd.name() {
                return Err(RunError::Manifest(format!(
                    "manifest records `{}`, not `{}`",
                    m.subcommand,
                    cmd.name()
                )));
            }
            let mut cfg = RunConfig::parse(&m.config)?;
            cfg.seed = m.seed;
            (cfg, m.data_sha256)
        }
        (None, None) => (RunConfig::default(), None),
    };
    if let Some(d) = &c.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    match cmd {
        Command::Sate { times, group: g, .. } => {
            if !times.is_empty() {
                cfg.sate_times = times.clone();
            }
            if let Some(g) = g {
                cfg.sate_group = Some(group(g)?);
            }
        }
        Command::Curves { group: gs, .. } if !gs.is_empty() => {
            cfg.groups = gs.iter().map(|g| group(g)).collect::<Result<_, _>>()?;
        }
        _ => {}
    }
    Ok((cfg, expected))
}

fn finish(cfg: &RunConfig, cmd: &str, data_sha256: Option<String>, files: &[(&str, String)]) -> Result<Vec<PathBuf>, RunError> {
    let manifest = Manifest { subcommand: cmd.to_string(), config: cfg.to_text(), seed: cfg.seed, data_sha256 };
    let mut written = Vec::new();
    for (name, text) in files.iter().cloned().chain([("manifest.json", output::to_text(&manifest.to_json()))]) {
        let path = cfg.output.join(name);
        run::write(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

fn prepare(cfg: &RunConfig, expected: Option<&str>) -> Result<run::Prepared, RunError> {
    let p = run::prepare(cfg)?;
    if let Some(h) = expected {
        if h != p.data_sha256 {
            return Err(RunError::DataChanged { path: cfg.data.clone().unwrap_or_default() });
        }
    }
    Ok(p)
}

fn report(out: &mut dyn std::io::Write, written: &[PathBuf]) {
    for p in written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
}

fn print_summary(out: &mut dyn std::io::Write, m: &run::Model) {
    let s = &m.summary;
    let _ = writeln!(out, "{:<32} {:>12} {:>12} {:>10} {:>8}", "term", "estimate", "std.error", "p", "edf");
    let cell = |x: Option<f64>| x.map_or(String::from("."), |v| format!("{v:.4}"));
    let mut equation = causaltm_core::design::Equation::Outcome;
    for r in &s.rows {
        if r.equation != equation {
            equation = r.equation;
            let _ = writeln!(out, "selection equation");
        }
        let _ = writeln!(
            out,
            "{:<32} {:>12} {:>12} {:>10} {:>8}",
            r.label,
            cell(r.estimate),
            cell(r.std_error),
            r.p_value.map_or(String::from("."), |p| format!("{p:.3e}")),
            cell(r.edf)
        );
    }
    let _ = writeln!(
        out,
        "rho {:.4} ({:.4}, {:.4})  loglik {:.4}  aic {:.4}  edf {:.3}",
        s.rho.estimate, s.rho.lower, s.rho.upper, s.loglik, s.aic, s.edf.total
    );
}

/// Run one command, writing progress to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), RunError> {
    let cmd = &cli.command;
    let (cfg, expected) = resolve(cmd)?;
    let name = cmd.name();
    match cmd {
        Command::Fit { .. } => {
            let p = prepare(&cfg, expected.as_deref())?;
            let f = run::fit_models(&p)?;
            print_summary(out, &f.joint);
            let text = output::to_text(&run::summary_json(&p, &f)?);
            report(out, &finish(&cfg, name, Some(p.data_sha256.clone()), &[("summary.json", text)])?);
        }
        Command::Sate { .. } => {
            let p = prepare(&RunConfig { univariate: false, ..cfg.clone() }, expected.as_deref())?;
            let m = run::fit_models(&p)?;
            let set = run::sate(&p, &m.joint)?;
            let label = cfg.sate_group.as_ref().map(GroupFilter::label);
            let text = output::sate_tsv(&set, label.as_deref());
            report(out, &finish(&cfg, name, Some(p.data_sha256.clone()), &[("sate.tsv", text)])?);
        }
        Command::Curves { .. } => {
            let p = prepare(&RunConfig { univariate: false, ..cfg.clone() }, expected.as_deref())?;
            let m = run::fit_models(&p)?;
            let set = run::curves(&p, &m.joint)?;
            if set.low_left_boundary {
                let _ = writeln!(out, "warning: survival at t = 0 is below {}", causaltm_core::inference::LEFT_BOUNDARY_FLAG);
            }
            let _ = writeln!(out, "monotonicity violations: {}", set.monotonicity_violations);
            let text = output::curves_tsv(&set);
            report(out, &finish(&cfg, name, Some(p.data_sha256.clone()), &[("curves.tsv", text)])?);
        }
        Command::Simulate { write_data, .. } => {
            let sim = &cfg.simulation;
            if let Some(path) = write_data {
                let data = generate(&sim.dgp, cfg.seed)?;
                ingest_write(path, &data)?;
                report(out, &[path.clone()]);
                return Ok(());
            }
            let options = StudyOptions {
                replicates: sim.replicates,
                seed: cfg.seed,
                basis_size: sim.basis_size,
                fit: cfg.fit.clone(),
                univariate: sim.univariate,
                sate_draws: sim.draws,
                level: 1.0 - cfg.theta,
            };
            let rep = study::run_parallel(&sim.dgp, &options, study::thread_count())?;
            let _ = writeln!(out, "replicates {}  failures {}", rep.replicates, rep.failures);
            if let Some(b) = &rep.joint.beta_d {
                let _ = writeln!(out, "joint beta_d bias {:.4} rmse {:.4} coverage {:.3}", b.bias, b.rmse, b.coverage);
            }
            let text = output::to_text(&output::study_json(&rep)?);
            report(out, &finish(&cfg, name, None, &[("study.json", text)])?);
        }
        Command::Check { .. } => {
            let p = prepare(&cfg, expected.as_deref())?;
            let (c, fit) = run::check(&p)?;
            let _ = writeln!(out, "score relative error   {:.3e} (limit {SCORE_CHECK_LIMIT:e})", c.score_error);
            let _ = writeln!(out, "Hessian relative error {:.3e} (limit {HESSIAN_CHECK_LIMIT:e})", c.hessian_error);
            let mut m = Map::new();
            m.insert("score_error".into(), output::number(c.score_error, "score_error")?);
            m.insert("hessian_error".into(), output::number(c.hessian_error, "hessian_error")?);
            m.insert("converged".into(), Value::Bool(fit.convergence.converged));
            let text = output::to_text(&Value::Object(m));
            report(out, &finish(&cfg, name, Some(p.data_sha256.clone()), &[("check.json", text)])?);
            if !(c.score_error <= SCORE_CHECK_LIMIT && c.hessian_error <= HESSIAN_CHECK_LIMIT) {
                return Err(RunError::Check { score: c.score_error, hessian: c.hessian_error });
            }
        }
    }
    Ok(())
}

fn ingest_write(path: &Path, data: &causaltm_core::data::DataSet) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(run::io_error(dir))?;
    }
    crate::ingest::write_csv(path, data, "status").map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

//! `tweedie`: fit Tweedie regressions, evaluate densities, simulate data and
//! run simulation studies.
//!
//! Exit codes: 0 on success, 1 on input or domain errors, 2 when a fit did not
//! converge (its result is still written, flagged `converged: false`).

mod config;
mod json;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use tweedie_core::density::{log_density, log_density_series_compound, log_density_series_positive_stable};
use tweedie_core::fit::default_start;
use tweedie_core::mle::initial_theta;
use tweedie_core::simulate::{rtweedie, run_study, write_raw_csv, write_summary_csv};
use tweedie_core::{fit, Dataset, FitOptions, FitResult, Method, MleAlgorithm, TweedieError, TweedieParams};

#[derive(Parser)]
#[command(name = "tweedie", version, about = "Tweedie regression with exact, quasi and pseudo likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a log-link Tweedie regression to a CSV file.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        /// Comma-separated covariate columns.
        #[arg(long, value_delimiter = ',', default_value = "")]
        covariates: Vec<String>,
        #[arg(long)]
        no_intercept: bool,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        start_power: Option<f64>,
        #[arg(long)]
        start_delta: Option<f64>,
        /// Maximum-likelihood algorithm: profile or two-step.
        #[arg(long, default_value = "profile", value_parser = parse_algorithm)]
        mle_algorithm: MleAlgorithm,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one log-density.
    Density {
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        phi: f64,
        #[arg(long)]
        power: f64,
        #[arg(long, allow_negative_numbers = true)]
        y: f64,
    },
    /// Draw Tweedie variates with common parameters into a one-column CSV.
    Simulate {
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        phi: f64,
        #[arg(long)]
        power: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a replicated simulation study described by a TOML file.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write per-replicate estimates.
        #[arg(long)]
        raw: bool,
    },
}

fn parse_algorithm(s: &str) -> Result<MleAlgorithm, String> {
    match s {
        "profile" => Ok(MleAlgorithm::Profile),
        "two-step" => Ok(MleAlgorithm::TwoStep),
        other => Err(format!("unknown algorithm '{other}' (expected profile or two-step)")),
    }
}

enum Failure {
    Input(TweedieError),
    NotConverged(String),
}

impl From<TweedieError> for Failure {
    fn from(e: TweedieError) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit {
            data,
            response,
            covariates,
            no_intercept,
            method,
            start_power,
            start_delta,
            mle_algorithm,
            out,
        } => cmd_fit(
            &data,
            &response,
            &covariates,
            !no_intercept,
            method,
            (start_power, start_delta),
            mle_algorithm,
            &out,
        ),
        Command::Density { mu, phi, power, y } => cmd_density(mu, phi, power, y),
        Command::Simulate { mu, phi, power, n, seed, out } => cmd_simulate(mu, phi, power, n, seed, &out),
        Command::Study { config, out_dir, raw } => cmd_study(&config, &out_dir, raw),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), TweedieError> {
    fs::write(path, text).map_err(|e| TweedieError::Io(format!("{}: {e}", path.display())))
}

fn fit_json(fit: &FitResult, data: &Dataset) -> Value {
    let q = data.q();
    let coefficients: Vec<Value> = data
        .names()
        .iter()
        .enumerate()
        .map(|(j, name)| json!({ "name": name, "estimate": fit.theta.beta[j], "se": fit.se[j] }))
        .collect();
    let vcov: Vec<Vec<f64>> = (0..fit.vcov.nrows())
        .map(|i| fit.vcov.row(i).iter().copied().collect())
        .collect();
    let mut out = json!({
        "method": fit.method.tag(),
        "coefficients": coefficients,
        "delta": fit.theta.delta,
        "delta_se": fit.se[q],
        "phi": fit.theta.phi(),
        "power": fit.theta.power,
        "power_se": fit.se[q + 1],
        "vcov": vcov,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "warnings": fit.warnings,
    });
    if let Some(ll) = fit.loglik {
        out["loglik"] = json!(ll);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    path: &Path,
    response: &str,
    covariates: &[String],
    intercept: bool,
    method: Method,
    start: (Option<f64>, Option<f64>),
    mle_algorithm: MleAlgorithm,
    out: &Path,
) -> Result<(), Failure> {
    let covariates: Vec<String> = covariates.iter().filter(|c| !c.is_empty()).cloned().collect();
    let data = Dataset::from_csv(path, response, &covariates, intercept)?;
    let mut theta0 = match start.0 {
        Some(p) => initial_theta(&data, p)?,
        None => default_start(&data, method)?,
    };
    if let Some(d) = start.1 {
        theta0.delta = d;
    }
    match fit(&data, method, Some(&theta0), &FitOptions::default(), mle_algorithm) {
        Ok(f) => {
            write_text(out, &json::to_string(&fit_json(&f, &data)).map_err(io_err)?)?;
            for w in &f.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Err(TweedieError::NoConvergence { iterations, partial }) => {
            if let Some(p) = partial {
                write_text(out, &json::to_string(&fit_json(&p, &data)).map_err(io_err)?)?;
            }
            Err(Failure::NotConverged(format!(
                "{} fit did not converge after {iterations} iterations",
                method.tag()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn io_err(e: impl std::fmt::Display) -> TweedieError {
    TweedieError::Io(e.to_string())
}

fn cmd_density(mu: f64, phi: f64, power: f64, y: f64) -> Result<(), Failure> {
    let params = TweedieParams::new(mu, phi, power)?;
    let value = log_density(y, &params)?;
    let report = if power > 1.0 && power < 2.0 && y > 0.0 {
        Some(log_density_series_compound(y, &params)?.1)
    } else if power > 2.0 && power != 3.0 {
        Some(log_density_series_positive_stable(y, &params)?.1)
    } else {
        None
    };
    let out = json!({
        "y": y,
        "mu": mu,
        "phi": phi,
        "power": power,
        "log_density": value,
        "series": report,
    });
    print!("{}", json::to_string(&out).map_err(io_err)?);
    Ok(())
}

fn cmd_simulate(mu: f64, phi: f64, power: f64, n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let params = TweedieParams::new(mu, phi, power)?;
    let draws = rtweedie(&params, n, seed)?;
    let file = File::create(out).map_err(|e| TweedieError::Io(format!("{}: {e}", out.display())))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["y"]).map_err(TweedieError::from)?;
    for v in draws {
        w.write_record([format!("{v}")]).map_err(TweedieError::from)?;
    }
    w.flush().map_err(TweedieError::from)?;
    Ok(())
}

fn cmd_study(config_path: &Path, out_dir: &Path, raw: bool) -> Result<(), Failure> {
    let config = config::load(config_path)?;
    let summary = run_study(&config)?;
    fs::create_dir_all(out_dir).map_err(|e| TweedieError::Io(format!("{}: {e}", out_dir.display())))?;
    let create = |name: &str| {
        let p = out_dir.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| TweedieError::Io(format!("{}: {e}", p.display())))
    };
    write_summary_csv(&summary, create("summary.csv")?)?;
    if raw {
        write_raw_csv(&summary, create("raw.csv")?)?;
    }
    let meta = json!({
        "config": summary.config,
        "rng": summary.rng,
        "failures": summary.failures.iter().map(|(m, k)| (m.tag().to_string(), *k)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    write_text(&out_dir.join("study.json"), &json::to_string(&meta).map_err(io_err)?)?;
    for (m, k) in &summary.failures {
        eprintln!("{}: {k} of {} replicates did not converge", m.tag(), config.n_reps);
    }
    Ok(())
}

//! Random variates and replicated simulation studies.
//!
//! Each replicate draws from its own ChaCha8 stream (`seed`, stream = replicate
//! index), so results do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, InverseGaussian, Normal, Poisson, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Result, TweedieError};
use crate::fit::{fit, MleAlgorithm};
use crate::model::{Dataset, FitOptions, FitResult, Method, TweedieParams};

/// Name recorded alongside study output.
pub const RNG_NAME: &str = "ChaCha8";
/// Minimum number of converged replicates for a variance ratio.
pub const MIN_EFFICIENCY_REPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    #[default]
    Tweedie,
    StudentT {
        df: f64,
    },
    /// Standard normal divided by an independent uniform.
    Slash,
}

impl Generator {
    pub fn is_heavy_tail(&self) -> bool {
        !matches!(self, Generator::Tweedie)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub beta: Vec<f64>,
    pub power: f64,
    pub phi: f64,
    #[serde(default)]
    pub generator: Generator,
    /// Variance multiplier of the standardized heavy-tailed noise.
    #[serde(default)]
    pub heavy_tail_dispersion: Option<f64>,
    pub n_reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default = "default_level")]
    pub nominal_level: f64,
    #[serde(default)]
    pub mle_algorithm: MleAlgorithm,
    /// Method whose variance is the numerator of the efficiency ratios.
    #[serde(default)]
    pub reference: Option<Method>,
}

fn default_level() -> f64 {
    0.95
}

/// The three coefficient-of-variation settings of each power.
const PRESET_PHI: [(&str, f64, [f64; 3]); 5] = [
    ("p0", 0.0, [75.0, 850.0, 2100.0]),
    ("p101", 1.01, [1.5, 15.0, 40.0]),
    ("p15", 1.5, [0.2, 2.0, 5.3]),
    ("p2", 2.0, [0.023, 0.25, 0.65]),
    ("p3", 3.0, [0.0003, 0.0034, 0.0083]),
];
const PRESET_LEVELS: [&str; 3] = ["small", "medium", "large"];
const PRESET_HEAVY: [f64; 3] = [100.0, 500.0, 1000.0];

impl ScenarioConfig {
    /// `"<power>-<small|medium|large>"` or `"<t|slash>-<100|500|1000>"`.
    pub fn preset(name: &str) -> Result<ScenarioConfig> {
        let mut base = ScenarioConfig {
            n: 250,
            beta: vec![2.0, 0.8, -1.5],
            power: 1.5,
            phi: 1.0,
            generator: Generator::Tweedie,
            heavy_tail_dispersion: None,
            n_reps: 200,
            seed: 1,
            methods: Method::ALL.to_vec(),
            nominal_level: 0.95,
            mle_algorithm: MleAlgorithm::Profile,
            reference: None,
        };
        let (head, tail) = name
            .split_once('-')
            .ok_or_else(|| TweedieError::ConfigError(format!("unknown preset '{name}'")))?;
        if let Some(&(_, power, phis)) = PRESET_PHI.iter().find(|(k, _, _)| *k == head) {
            let level = PRESET_LEVELS
                .iter()
                .position(|l| *l == tail)
                .ok_or_else(|| TweedieError::ConfigError(format!("unknown preset '{name}'")))?;
            base.power = power;
            base.phi = phis[level];
            return Ok(base);
        }
        let generator = match head {
            "t" => Generator::StudentT { df: 2.0 },
            "slash" => Generator::Slash,
            _ => return Err(TweedieError::ConfigError(format!("unknown preset '{name}'"))),
        };
        let dispersion: f64 = tail
            .parse()
            .ok()
            .filter(|d| PRESET_HEAVY.contains(d))
            .ok_or_else(|| TweedieError::ConfigError(format!("unknown preset '{name}'")))?;
        base.generator = generator;
        base.heavy_tail_dispersion = Some(dispersion);
        base.methods = vec![Method::Qmle, Method::Pmle];
        Ok(base)
    }

    pub fn preset_names() -> Vec<String> {
        let mut out = Vec::new();
        for (k, _, _) in PRESET_PHI {
            for l in PRESET_LEVELS {
                out.push(format!("{k}-{l}"));
            }
        }
        for fam in ["t", "slash"] {
            for d in PRESET_HEAVY {
                out.push(format!("{fam}-{d}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TweedieError::ConfigError(m.to_string()));
        if self.n_reps < 1 {
            return bad("n_reps must be at least 1");
        }
        if self.beta.len() != 3 {
            return bad("beta must have three entries (intercept, x1, x2)");
        }
        if self.n < 3 {
            return bad("n must be at least 3");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if !(self.nominal_level > 0.0 && self.nominal_level < 1.0) {
            return bad("nominal_level must lie in (0, 1)");
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return bad("beta must be finite");
        }
        match self.generator {
            Generator::Tweedie => {
                if !(self.phi > 0.0 && self.phi.is_finite()) {
                    return bad("phi must be positive");
                }
                check_power(self.power).map_err(|e| TweedieError::ConfigError(e.to_string()))?;
            }
            Generator::StudentT { df } if !(df > 0.0) => return bad("df must be positive"),
            _ => match self.heavy_tail_dispersion {
                Some(d) if d > 0.0 && d.is_finite() => {}
                _ => return bad("heavy_tail_dispersion must be positive for t and slash generators"),
            },
        }
        if let Some(r) = self.reference {
            if !self.methods.contains(&r) {
                return bad("reference method must be one of the fitted methods");
            }
        }
        Ok(())
    }

    fn reference_method(&self) -> Option<Method> {
        self.reference
            .or_else(|| self.methods.contains(&Method::Mle).then_some(Method::Mle))
    }
}

/// Intercept, `x1` evenly spaced on `[-1, 1]`, and `x2` a two-level factor
/// alternating between 0 and 1.
pub fn design(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => {
            if n == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        }
        _ => (i % 2) as f64,
    })
}

pub const DESIGN_NAMES: [&str; 3] = ["(Intercept)", "x1", "x2"];

fn check_power(p: f64) -> Result<()> {
    if p == 0.0 || p == 1.0 || (p > 1.0 && p < 2.0) || p == 2.0 || p == 3.0 {
        Ok(())
    } else {
        Err(TweedieError::UnsupportedPower(p))
    }
}

/// One Tweedie draw; the power must be supported by [`rtweedie`].
pub fn draw_tweedie<R: Rng + ?Sized>(params: &TweedieParams, rng: &mut R) -> Result<f64> {
    let TweedieParams { mu, phi, power: p } = *params;
    check_power(p)?;
    let dist = |e: rand_distr::NormalError| TweedieError::DomainError(e.to_string());
    let y = if p == 0.0 {
        Normal::new(mu, phi.sqrt()).map_err(dist)?.sample(rng)
    } else if p == 1.0 {
        let pois = Poisson::new(mu / phi).map_err(|e| TweedieError::DomainError(e.to_string()))?;
        phi * pois.sample(rng)
    } else if p < 2.0 {
        let lambda = mu.powf(2.0 - p) / (phi * (2.0 - p));
        let tau = (2.0 - p) / (p - 1.0);
        let gamma = phi * (p - 1.0) * mu.powf(p - 1.0);
        let count = Poisson::new(lambda)
            .map_err(|e| TweedieError::DomainError(e.to_string()))?
            .sample(rng);
        if count == 0.0 {
            0.0
        } else {
            Gamma::new(count * tau, gamma)
                .map_err(|e| TweedieError::DomainError(e.to_string()))?
                .sample(rng)
        }
    } else if p == 2.0 {
        Gamma::new(1.0 / phi, phi * mu)
            .map_err(|e| TweedieError::DomainError(e.to_string()))?
            .sample(rng)
    } else {
        InverseGaussian::new(mu, 1.0 / phi)
            .map_err(|e| TweedieError::DomainError(e.to_string()))?
            .sample(rng)
    };
    Ok(y)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` independent draws with common parameters.
pub fn rtweedie(params: &TweedieParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    check_power(params.power)?;
    let mut rng = stream_rng(seed, 0);
    (0..n).map(|_| draw_tweedie(params, &mut rng)).collect()
}

/// Tweedie responses with observation-specific means.
pub fn rtweedie_means<R: Rng + ?Sized>(mu: &[f64], phi: f64, power: f64, rng: &mut R) -> Result<Vec<f64>> {
    mu.iter()
        .map(|&m| draw_tweedie(&TweedieParams::new(m, phi, power)?, rng))
        .collect()
}

/// `mu_i + sqrt(dispersion) Z_i` with standard t or slash noise.
pub fn r_heavy_tail(mu: &[f64], dispersion: f64, family: Generator, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    heavy_tail_with(mu, dispersion, family, &mut rng)
}

fn heavy_tail_with<R: Rng + ?Sized>(
    mu: &[f64],
    dispersion: f64,
    family: Generator,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(dispersion > 0.0) {
        return Err(TweedieError::DomainError("dispersion must be positive".into()));
    }
    let scale = dispersion.sqrt();
    match family {
        Generator::StudentT { df } => {
            let t = StudentT::new(df).map_err(|e| TweedieError::DomainError(e.to_string()))?;
            Ok(mu.iter().map(|&m| m + scale * t.sample(rng)).collect())
        }
        Generator::Slash => Ok(mu
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                // open interval keeps the ratio finite
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                m + scale * z / u
            })
            .collect()),
        Generator::Tweedie => Err(TweedieError::InvalidInput(
            "r_heavy_tail needs a t or slash family".into(),
        )),
    }
}

/// Simulated dataset for replicate `rep` of `config`.
pub fn replicate_data(config: &ScenarioConfig, rep: usize) -> Result<Dataset> {
    let x = design(config.n);
    let beta = DVector::from_column_slice(&config.beta);
    let mu: Vec<f64> = (&x * beta).iter().map(|e| e.exp()).collect();
    let mut rng = stream_rng(config.seed, rep as u64);
    let y = match config.generator {
        Generator::Tweedie => rtweedie_means(&mu, config.phi, config.power, &mut rng)?,
        g => heavy_tail_with(&mu, config.heavy_tail_dispersion.unwrap_or(1.0), g, &mut rng)?,
    };
    Dataset::new(
        DVector::from_vec(y),
        x,
        DESIGN_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Parameter labels in `theta` order.
pub fn param_names(q: usize) -> Vec<String> {
    let mut v: Vec<String> = (0..q).map(|j| format!("beta{j}")).collect();
    v.push("delta".into());
    v.push("power".into());
    v
}

/// One parameter of one method in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRecord {
    pub rep: usize,
    pub method: Method,
    pub param: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub method: Method,
    pub param: String,
    pub truth: f64,
    pub mean_bias: f64,
    pub mean_se: f64,
    pub empirical_sd: f64,
    pub coverage_rate: f64,
    /// Variance of the reference method over the variance of this one.
    pub efficiency: Option<f64>,
    pub n_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub config: ScenarioConfig,
    pub rng: String,
    pub rows: Vec<ParamSummary>,
    pub raw: Vec<RawRecord>,
    /// Replicates whose fit did not converge with a full set of standard errors.
    pub failures: BTreeMap<Method, usize>,
}

impl StudySummary {
    pub fn row(&self, method: Method, param: &str) -> Option<&ParamSummary> {
        self.rows.iter().find(|r| r.method == method && r.param == param)
    }

    pub fn n_converged(&self, method: Method) -> usize {
        self.config.n_reps - self.failures.get(&method).copied().unwrap_or(0)
    }

    /// Converged estimates of `param` for `method`, in replicate order.
    pub fn estimates(&self, method: Method, param: &str) -> Vec<f64> {
        self.raw
            .iter()
            .filter(|r| r.method == method && r.param == param && r.converged)
            .map(|r| r.estimate)
            .collect()
    }
}

/// A replicate counts as converged only when the fit converged and every
/// standard error is available, since intervals need all of them.
fn usable(fit: &FitResult) -> bool {
    fit.converged && fit.se.iter().all(Option::is_some) && fit.theta.is_finite()
}

pub(crate) fn thread_count() -> Option<usize> {
    std::env::var("TWEEDIE_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&k| k > 0)
}

fn run_replicate(config: &ScenarioConfig, rep: usize, z: f64, names: &[String]) -> Vec<RawRecord> {
    let data = replicate_data(config, rep);
    let mut out = Vec::new();
    for &method in &config.methods {
        let result = data.as_ref().map_err(Clone::clone).and_then(|d| {
            fit(d, method, None, &FitOptions::default(), config.mle_algorithm)
        });
        let fitted = match result {
            Ok(f) => Some(f),
            Err(TweedieError::NoConvergence { partial: Some(p), .. }) => Some(*p),
            Err(_) => None,
        };
        let ok = fitted.as_ref().is_some_and(usable);
        for (j, name) in names.iter().enumerate() {
            let (estimate, se) = match &fitted {
                Some(f) => (f.estimates()[j], f.se[j]),
                None => (f64::NAN, None),
            };
            out.push(RawRecord {
                rep,
                method,
                param: name.clone(),
                estimate,
                se,
                ci_lo: se.map(|s| estimate - z * s),
                ci_hi: se.map(|s| estimate + z * s),
                converged: ok,
            });
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Simulates and fits every replicate, then summarizes per method and parameter.
pub fn run_study(config: &ScenarioConfig) -> Result<StudySummary> {
    config.validate()?;
    let names = param_names(config.beta.len());
    let z = StdNormal::standard().inverse_cdf(0.5 + config.nominal_level / 2.0);
    let work = || -> Vec<Vec<RawRecord>> {
        (0..config.n_reps)
            .into_par_iter()
            .map(|rep| run_replicate(config, rep, z, &names))
            .collect()
    };
    let per_rep = match thread_count() {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| TweedieError::ConfigError(e.to_string()))?
            .install(work),
        None => work(),
    };
    let raw: Vec<RawRecord> = per_rep.into_iter().flatten().collect();

    let mut truth: Vec<f64> = config.beta.clone();
    truth.push(config.phi.ln());
    truth.push(config.power);
    // for heavy tails only the mean model has a true value
    let summarized = if config.generator.is_heavy_tail() {
        config.beta.len()
    } else {
        names.len()
    };

    let mut failures = BTreeMap::new();
    for &m in &config.methods {
        let bad = raw
            .iter()
            .filter(|r| r.method == m && r.param == names[0] && !r.converged)
            .count();
        failures.insert(m, bad);
    }

    let mut summary = StudySummary {
        config: config.clone(),
        rng: RNG_NAME.to_string(),
        rows: Vec::new(),
        raw,
        failures,
    };
    for &m in &config.methods {
        for (j, name) in names.iter().enumerate().take(summarized) {
            let recs: Vec<&RawRecord> = summary
                .raw
                .iter()
                .filter(|r| r.method == m && r.param == *name && r.converged)
                .collect();
            let est: Vec<f64> = recs.iter().map(|r| r.estimate).collect();
            let ses: Vec<f64> = recs.iter().filter_map(|r| r.se).collect();
            let hits = recs
                .iter()
                .filter(|r| matches!((r.ci_lo, r.ci_hi), (Some(lo), Some(hi)) if lo <= truth[j] && truth[j] <= hi))
                .count();
            let n_conv = recs.len();
            summary.rows.push(ParamSummary {
                method: m,
                param: name.clone(),
                truth: truth[j],
                mean_bias: if n_conv > 0 { mean(&est) - truth[j] } else { f64::NAN },
                mean_se: if ses.is_empty() { f64::NAN } else { mean(&ses) },
                empirical_sd: variance(&est).sqrt(),
                coverage_rate: if n_conv > 0 { hits as f64 / n_conv as f64 } else { f64::NAN },
                efficiency: None,
                n_converged: n_conv,
            });
        }
    }
    if let Some(reference) = config.reference_method() {
        let ratios = summarize_efficiency(&summary, reference).unwrap_or_default();
        for row in summary.rows.iter_mut() {
            row.efficiency = ratios.get(&(row.method, row.param.clone())).copied();
        }
    }
    Ok(summary)
}

/// `var_reference / var_method` for every summarized parameter; pairs with
/// fewer than [`MIN_EFFICIENCY_REPS`] converged replicates are omitted.
pub fn summarize_efficiency(
    study: &StudySummary,
    reference: Method,
) -> Result<BTreeMap<(Method, String), f64>> {
    let ref_conv = study.n_converged(reference);
    if !study.config.methods.contains(&reference) || ref_conv < MIN_EFFICIENCY_REPS {
        return Err(TweedieError::InsufficientReplicates {
            got: if study.config.methods.contains(&reference) { ref_conv } else { 0 },
            need: MIN_EFFICIENCY_REPS,
        });
    }
    let mut out = BTreeMap::new();
    for row in &study.rows {
        if row.n_converged < MIN_EFFICIENCY_REPS {
            continue;
        }
        let v_ref = variance(&study.estimates(reference, &row.param));
        let v_m = variance(&study.estimates(row.method, &row.param));
        let ratio = if row.method == reference { 1.0 } else { v_ref / v_m };
        out.insert((row.method, row.param.clone()), ratio);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_raw_csv<W: Write>(study: &StudySummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "method", "param", "estimate", "se", "ci_lo", "ci_hi", "converged"])?;
    for r in &study.raw {
        w.write_record([
            r.rep.to_string(),
            r.method.tag().to_string(),
            r.param.clone(),
            fmt_num(r.estimate),
            opt(r.se),
            opt(r.ci_lo),
            opt(r.ci_hi),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(study: &StudySummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "param", "bias", "emp_sd", "mean_se", "coverage", "efficiency", "n_converged"])?;
    for r in &study.rows {
        w.write_record([
            r.method.tag().to_string(),
            r.param.clone(),
            fmt_num(r.mean_bias),
            fmt_num(r.empirical_sd),
            fmt_num(r.mean_se),
            fmt_num(r.coverage_rate),
            opt(r.efficiency),
            r.n_converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

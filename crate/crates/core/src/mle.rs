//! Maximum-likelihood fitting.
//!
//! The regression block has a closed-form score and Fisher information. The
//! log-density has no closed-form derivatives in `(delta, p)`, so those are
//! obtained by Richardson extrapolation of the exact log-likelihood. Because
//! the two blocks are orthogonal, the covariance is block diagonal.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

use crate::density::log_likelihood;
use crate::error::{Result, TweedieError};
use crate::model::{
    linear_predictor, mean_vector, validate_support, Dataset, FitOptions, FitResult, Method,
    ThetaVector, TweedieParams,
};
use crate::numerics::{
    inverse, is_positive_definite, nelder_mead, solve, try_richardson_gradient,
    try_richardson_hessian, NelderMeadOptions, RichardsonOptions,
};

/// Bounds applied to the power while iterating on the likelihood.
pub const MLE_POWER_MIN: f64 = 1.0 + 1e-6;
pub const MLE_POWER_MAX: f64 = 5.0;

const TWO_STEP_MAX_ITER: usize = 100;
const INNER_TOL: f64 = 1e-8;
const INNER_MAX_ITER: usize = 100;

/// Analytic regression block and numeric dispersion block at one `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MleInternals {
    pub score_beta: DVector<f64>,
    pub fisher_beta: DMatrix<f64>,
    pub score_lambda_numeric: DVector<f64>,
    pub fisher_lambda_numeric: DMatrix<f64>,
}

/// Score for the regression coefficients.
pub fn score_beta(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    let mu = mean_vector(theta, data)?;
    let phi = theta.phi();
    let p = theta.power;
    let w = DVector::from_fn(data.n(), |i, _| {
        mu[i].powf(1.0 - p) * (data.y()[i] - mu[i]) / phi
    });
    Ok(data.x().transpose() * w)
}

/// Expected information for the regression coefficients, `X' W X` with `w_i = mu_i^(2-p) / phi`.
pub fn fisher_beta(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let mu = mean_vector(theta, data)?;
    let phi = theta.phi();
    let p = theta.power;
    let x = data.x();
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= mu[i].powf(2.0 - p) / phi;
    }
    Ok(x.transpose() * weighted)
}

/// Part of the log-likelihood that depends on `beta`: `sum (y psi - kappa) / phi`.
pub(crate) fn beta_objective(beta: &DVector<f64>, phi: f64, power: f64, data: &Dataset) -> Result<f64> {
    let eta = linear_predictor(beta, data)?;
    let mut total = 0.0;
    for (&y, &e) in data.y().iter().zip(eta.iter()) {
        let t = TweedieParams {
            mu: e.exp(),
            phi,
            power,
        };
        total += y * t.psi() - t.kappa();
    }
    Ok(total / phi)
}

/// Fisher scoring for `beta` at fixed `(phi, p)` with step halving.
pub(crate) fn beta_scoring(
    data: &Dataset,
    beta0: &DVector<f64>,
    phi: f64,
    power: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let mut beta = beta0.clone();
    let mut current = beta_objective(&beta, phi, power, data)?;
    for iter in 1..=max_iter {
        let theta = ThetaVector::new(beta.clone(), phi.ln(), power);
        let step = solve(&fisher_beta(&theta, data)?, &score_beta(&theta, data)?)?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let trial = &beta + &step * scale;
            if let Ok(v) = beta_objective(&trial, phi, power, data) {
                if v >= current - 1e-12 * current.abs().max(1.0) {
                    beta = trial;
                    current = v;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        let size = step.amax() * scale;
        if !accepted {
            if step.amax() < tol.sqrt() {
                return Ok((beta, iter));
            }
            return Err(TweedieError::NoConvergence {
                iterations: iter,
                partial: None,
            });
        }
        if size < tol {
            return Ok((beta, iter));
        }
    }
    Err(TweedieError::NoConvergence {
        iterations: max_iter,
        partial: None,
    })
}

/// The default rule gives a 1e-6 step at `delta = 0`, where the Hessian drowns in rounding.
fn delta_step(delta: f64) -> f64 {
    1e-2 * (delta.abs() + 0.1)
}

fn lambda_steps(theta: &ThetaVector) -> Result<Vec<f64>> {
    let opts = RichardsonOptions::default();
    let lambda = [theta.delta, theta.power];
    let h_delta = delta_step(theta.delta);
    let mut h_p = opts.initial_step(&lambda, 1);
    let p = theta.power;
    let unstable = |h: f64| p - h <= 1.0 || (p - h < 2.0 && p + h >= 2.0 && p != 2.0) || (p == 2.0);
    if unstable(h_p) {
        h_p *= 0.5;
        if unstable(h_p) {
            return Err(TweedieError::DensityRegionUnstable(format!(
                "probes p = {p} +/- {h_p:.3e} reach p = 1 or straddle p = 2"
            )));
        }
    }
    Ok(vec![h_delta, h_p])
}

/// Richardson score and observed information of the log-likelihood in `(delta, p)` at fixed `beta`.
pub fn numeric_lambda_derivatives(
    theta: &ThetaVector,
    data: &Dataset,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    validate_support(theta.power, data.y().as_slice(), Method::Mle)?;
    let opts = RichardsonOptions {
        steps: Some(lambda_steps(theta)?),
        ..Default::default()
    };
    let lambda = [theta.delta, theta.power];
    let ll = |l: &[f64]| {
        let t = ThetaVector::new(theta.beta.clone(), l[0], l[1]);
        log_likelihood(&t, data)
    };
    let grad = try_richardson_gradient(ll, &lambda, &opts)?;
    let hess = try_richardson_hessian(ll, &lambda, &opts)?;
    Ok((DVector::from_vec(grad), -hess))
}

/// Scalar Richardson derivatives in `delta` only (power held fixed).
fn numeric_delta_derivatives(theta: &ThetaVector, data: &Dataset) -> Result<(f64, f64)> {
    let opts = RichardsonOptions {
        steps: Some(vec![delta_step(theta.delta)]),
        ..Default::default()
    };
    let ll = |l: &[f64]| {
        let t = ThetaVector::new(theta.beta.clone(), l[0], theta.power);
        log_likelihood(&t, data)
    };
    let g = try_richardson_gradient(ll, &[theta.delta], &opts)?;
    let h = try_richardson_hessian(ll, &[theta.delta], &opts)?;
    Ok((g[0], -h[(0, 0)]))
}

pub fn mle_internals(theta: &ThetaVector, data: &Dataset) -> Result<MleInternals> {
    let (score_lambda_numeric, fisher_lambda_numeric) = numeric_lambda_derivatives(theta, data)?;
    Ok(MleInternals {
        score_beta: score_beta(theta, data)?,
        fisher_beta: fisher_beta(theta, data)?,
        score_lambda_numeric,
        fisher_lambda_numeric,
    })
}

/// Starting values shared by all fitters.
///
/// `beta` comes from least squares of `log(y + c)` on `X`, with `c` half the
/// smallest positive response (non-positive responses are floored at zero
/// first); `delta` is the log of the mean Pearson statistic at `(beta, power)`.
pub fn initial_theta(data: &Dataset, power: f64) -> Result<ThetaVector> {
    let y = data.y();
    let min_pos = y.iter().cloned().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    let shift = if min_pos.is_finite() { 0.5 * min_pos } else { 1.0 };
    let z = y.map(|v| (v.max(0.0) + shift).ln());
    let x = data.x();
    let beta = solve(&(x.transpose() * x), &(x.transpose() * z))?;
    let eta = x * &beta;
    let capped = eta.map(|e| e.clamp(-50.0, 50.0));
    let beta = if capped != eta {
        solve(&(x.transpose() * x), &(x.transpose() * capped))?
    } else {
        beta
    };
    let mu = (x * &beta).map(f64::exp);
    let dof = if data.n() > data.q() { data.n() - data.q() } else { data.n() };
    let pearson: f64 = y
        .iter()
        .zip(mu.iter())
        .map(|(&yi, &m)| (yi - m).powi(2) / m.powf(power))
        .sum::<f64>()
        / dof as f64;
    let delta = if pearson.is_finite() && pearson > 0.0 { pearson.ln() } else { 0.0 };
    Ok(ThetaVector::new(beta, delta, power))
}

/// Default starting point for maximum likelihood.
pub fn default_start(data: &Dataset) -> Result<ThetaVector> {
    initial_theta(data, 1.5)
}

fn clamp_power(p: f64) -> f64 {
    p.clamp(MLE_POWER_MIN, MLE_POWER_MAX)
}

/// Assembles the block-diagonal covariance. Missing or indefinite dispersion
/// information leaves that block as NaN with a warning.
fn mle_result(
    theta: ThetaVector,
    data: &Dataset,
    fixed_power: bool,
    converged: bool,
    iterations: usize,
) -> Result<FitResult> {
    let q = data.q();
    let mut vcov = DMatrix::from_element(q + 2, q + 2, f64::NAN);
    let fb_inv = inverse(&fisher_beta(&theta, data)?)?;
    vcov.view_mut((0, 0), (q, q)).copy_from(&fb_inv);
    let mut warnings = Vec::new();
    if fixed_power {
        match numeric_delta_derivatives(&theta, data) {
            Ok((_, info)) if info > 0.0 => {
                for j in q..q + 2 {
                    vcov[(j, q)] = 0.0;
                    vcov[(q, j)] = 0.0;
                }
                for j in 0..q {
                    vcov[(j, q)] = 0.0;
                    vcov[(q, j)] = 0.0;
                }
                vcov[(q, q)] = 1.0 / info;
                vcov[(q + 1, q + 1)] = f64::NAN;
            }
            Ok(_) => warnings.push("dispersion information is not positive".to_string()),
            Err(e) => warnings.push(format!("dispersion information unavailable: {e}")),
        }
    } else {
        match numeric_lambda_derivatives(&theta, data) {
            Ok((_, info)) if is_positive_definite(&info) => match inverse(&info) {
                Ok(inv) => {
                    vcov.view_mut((0, q), (q, 2)).fill(0.0);
                    vcov.view_mut((q, 0), (2, q)).fill(0.0);
                    vcov.view_mut((q, q), (2, 2)).copy_from(&inv);
                }
                Err(e) => warnings.push(format!("dispersion information not invertible: {e}")),
            },
            Ok(_) => warnings.push(
                "observed information for (delta, p) is not positive definite; \
                 standard errors for the dispersion parameters are unavailable"
                    .to_string(),
            ),
            Err(e) => warnings.push(format!("dispersion information unavailable: {e}")),
        }
    }
    let loglik = log_likelihood(&theta, data)?;
    let mut fit = FitResult::new(theta, vcov, converged, iterations, Method::Mle);
    fit.loglik = Some(loglik);
    fit.warnings = warnings;
    Ok(fit)
}

fn check_mle_start(data: &Dataset, theta0: &ThetaVector) -> Result<()> {
    if theta0.beta.len() != data.q() || !theta0.is_finite() {
        return Err(TweedieError::InvalidInput("starting value has wrong shape or is not finite".into()));
    }
    validate_support(theta0.power, data.y().as_slice(), Method::Mle)?;
    // no power in [1, inf) admits negative responses
    if let Some(index) = data.y().iter().position(|&v| v < 0.0) {
        return Err(TweedieError::SupportViolation {
            index,
            rule: "negative responses have zero likelihood for every p >= 1".into(),
        });
    }
    Ok(())
}

/// Two-step Newton scoring: a `beta` update with the expected information,
/// then a `(delta, p)` update with the numeric observed information.
pub fn fit_mle_two_step(data: &Dataset, theta0: &ThetaVector, opts: &FitOptions) -> Result<FitResult> {
    check_mle_start(data, theta0)?;
    let max_iter = opts.max_iter.unwrap_or(TWO_STEP_MAX_ITER);
    let mut theta = theta0.clone();
    if let Some(p) = opts.fixed_power {
        theta.power = p;
    } else {
        theta.power = clamp_power(theta.power);
    }
    for iter in 1..=max_iter {
        // beta: the likelihood in beta differs from beta_objective by a constant
        let step_b = solve(&fisher_beta(&theta, data)?, &score_beta(&theta, data)?)?;
        let base = beta_objective(&theta.beta, theta.phi(), theta.power, data)?;
        let mut scale = 1.0;
        let mut moved_b = 0.0;
        for _ in 0..=opts.max_halvings {
            let trial = &theta.beta + &step_b * scale;
            if let Ok(v) = beta_objective(&trial, theta.phi(), theta.power, data) {
                if v >= base - 1e-12 * base.abs().max(1.0) {
                    theta.beta = trial;
                    moved_b = step_b.amax() * scale;
                    break;
                }
            }
            scale *= 0.5;
        }
        let current = log_likelihood(&theta, data)?;

        // lambda
        let full_step: Vec<f64> = if opts.fixed_power.is_some() {
            let (g, info) = numeric_delta_derivatives(&theta, data)?;
            vec![g / info, 0.0]
        } else {
            let (u, f) = numeric_lambda_derivatives(&theta, data)?;
            solve(&f, &u)?.iter().cloned().collect()
        };
        if full_step.iter().any(|s| !s.is_finite()) {
            return Err(TweedieError::IllConditioned("non-finite dispersion update".into()));
        }
        let mut scale = 1.0;
        let mut moved_l = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = theta.clone();
            trial.delta += scale * full_step[0];
            if opts.fixed_power.is_none() {
                trial.power = clamp_power(theta.power + scale * full_step[1]);
            }
            if let Ok(v) = log_likelihood(&trial, data) {
                if v >= current - 1e-10 * current.abs().max(1.0) {
                    let moved = (trial.delta - theta.delta)
                        .abs()
                        .max((trial.power - theta.power).abs());
                    theta = trial;
                    moved_l = Some(moved);
                    break;
                }
            }
            scale *= 0.5;
        }
        let full = full_step[0].abs().max(full_step[1].abs());
        let Some(moved_l) = moved_l else {
            if full.max(moved_b) < opts.tol.sqrt() {
                return mle_result(theta, data, opts.fixed_power.is_some(), true, iter);
            }
            let partial = mle_result(theta, data, opts.fixed_power.is_some(), false, iter).ok();
            return Err(TweedieError::NoConvergence {
                iterations: iter,
                partial: partial.map(Box::new),
            });
        };
        if moved_b.max(moved_l) < opts.tol {
            return mle_result(theta, data, opts.fixed_power.is_some(), true, iter);
        }
    }
    let partial = mle_result(theta, data, opts.fixed_power.is_some(), false, max_iter).ok();
    Err(TweedieError::NoConvergence {
        iterations: max_iter,
        partial: partial.map(Box::new),
    })
}

/// Profile log-likelihood at `(delta, p)`: `beta` maximised by inner scoring.
pub fn profile_loglik(
    lambda: (f64, f64),
    data: &Dataset,
    beta_start: Option<&DVector<f64>>,
) -> Result<(f64, DVector<f64>)> {
    let (delta, power) = lambda;
    validate_support(power, data.y().as_slice(), Method::Mle)?;
    let start = match beta_start {
        Some(b) => b.clone(),
        None => initial_theta(data, power)?.beta,
    };
    let (beta, _) = beta_scoring(data, &start, delta.exp(), power, INNER_TOL, INNER_MAX_ITER)?;
    let theta = ThetaVector::new(beta, delta, power);
    Ok((log_likelihood(&theta, data)?, theta.beta))
}

/// Nelder–Mead maximisation of the profile log-likelihood over `(delta, p)`.
pub fn fit_mle_profile(data: &Dataset, theta0: &ThetaVector, opts: &FitOptions) -> Result<FitResult> {
    check_mle_start(data, theta0)?;
    let fixed = opts.fixed_power;
    let power0 = fixed.unwrap_or_else(|| clamp_power(theta0.power));
    let warm = RefCell::new(theta0.beta.clone());
    let objective = |x: &[f64]| -> f64 {
        let (delta, power) = match fixed {
            Some(p) => (x[0], p),
            None => (x[0], x[1]),
        };
        if fixed.is_none() && !(MLE_POWER_MIN..=MLE_POWER_MAX).contains(&power) {
            return f64::INFINITY;
        }
        let start = warm.borrow().clone();
        match profile_loglik((delta, power), data, Some(&start)) {
            Ok((v, beta)) if v.is_finite() => {
                *warm.borrow_mut() = beta;
                -v
            }
            _ => f64::INFINITY,
        }
    };
    let x0: Vec<f64> = match fixed {
        Some(_) => vec![theta0.delta],
        None => vec![theta0.delta, power0],
    };
    // tighter than the simplex defaults so the optimum is stationary to about 1e-5 in the score;
    // the value tolerance scales with the log-likelihood so it stays above its rounding noise
    let scale = 1.0 + objective(&x0).abs();
    let nm_opts = NelderMeadOptions {
        max_evals: opts.max_iter.map(|m| m * x0.len()),
        f_tol: 1e-11 * scale,
        x_tol: 1e-8,
        ..Default::default()
    };
    let (best, trace) = nelder_mead(objective, &x0, &nm_opts)?;
    let lambda = match fixed {
        Some(p) => (best[0], p),
        None => (best[0], best[1]),
    };
    let start = warm.borrow().clone();
    let (_, beta) = profile_loglik(lambda, data, Some(&start))?;
    let theta = ThetaVector::new(beta, lambda.0, lambda.1);
    let fit = mle_result(theta, data, fixed.is_some(), trace.converged, trace.iterations)?;
    if !trace.converged {
        return Err(TweedieError::NoConvergence {
            iterations: trace.iterations,
            partial: Some(Box::new(fit)),
        });
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::richardson_gradient;

    fn small_data() -> Dataset {
        let y = [0.0, 1.3, 2.7, 0.4, 5.1, 3.3, 0.0, 8.2, 1.1, 2.2];
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64 / 9.0 - 0.5]).collect();
        Dataset::from_rows(&y, &rows, &["(Intercept)", "x"]).unwrap()
    }

    #[test]
    fn score_vanishes_at_fitted_means() {
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64]).collect();
        let theta = ThetaVector::from_slice(&[0.2, 0.3], 0.1, 1.7);
        let y: Vec<f64> = rows.iter().map(|r| (0.2 + 0.3 * r[1]).exp()).collect();
        let d = Dataset::from_rows(&y, &rows, &["a", "b"]).unwrap();
        assert!(score_beta(&theta, &d).unwrap().amax() < 1e-12);
    }

    #[test]
    fn score_single_observation() {
        let d = Dataset::from_rows(&[2.0], &[vec![1.0]], &["a"]).unwrap();
        let s = score_beta(&ThetaVector::from_slice(&[0.0], 0.0, 2.0), &d).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fisher_examples() {
        let rows = vec![vec![1.0]; 5];
        let d = Dataset::from_rows(&[1.0; 5], &rows, &["a"]).unwrap();
        let f = fisher_beta(&ThetaVector::from_slice(&[0.0], 0.0, 2.0), &d).unwrap();
        assert!((f[(0, 0)] - 5.0).abs() < 1e-14);

        let d = small_data();
        let theta = ThetaVector::from_slice(&[0.4, -1.0], 0.7, 2.0);
        let f = fisher_beta(&theta, &d).unwrap();
        let expected = d.x().transpose() * d.x() / theta.phi();
        assert!((f - expected).amax() < 1e-12);
    }

    #[test]
    fn score_matches_numeric_gradient() {
        let d = small_data();
        let theta = ThetaVector::from_slice(&[0.6, 0.9], -0.2, 1.45);
        let analytic = score_beta(&theta, &d).unwrap();
        let f = |b: &[f64]| {
            log_likelihood(&ThetaVector::from_slice(b, theta.delta, theta.power), &d).unwrap()
        };
        let numeric =
            richardson_gradient(f, theta.beta.as_slice(), &RichardsonOptions::default()).unwrap();
        for j in 0..2 {
            assert!((analytic[j] - numeric[j]).abs() <= 1e-6 * analytic[j].abs().max(1.0));
        }
    }

    #[test]
    fn lambda_probes_near_boundaries_are_rejected() {
        let d = small_data();
        let near_two = ThetaVector::from_slice(&[0.6, 0.9], -0.2, 1.999);
        assert!(matches!(
            numeric_lambda_derivatives(&near_two, &d),
            Err(TweedieError::DensityRegionUnstable(_))
        ));
        let near_one = ThetaVector::from_slice(&[0.6, 0.9], -0.2, 1.004);
        assert!(matches!(
            numeric_lambda_derivatives(&near_one, &d),
            Err(TweedieError::DensityRegionUnstable(_))
        ));
        let ok = ThetaVector::from_slice(&[0.6, 0.9], -0.2, 1.5);
        let (_, info) = numeric_lambda_derivatives(&ok, &d).unwrap();
        assert_eq!(info[(0, 1)], info[(1, 0)]);
    }

    #[test]
    fn profile_is_stationary_in_beta() {
        let d = small_data();
        let (v, beta) = profile_loglik((0.1, 1.5), &d, None).unwrap();
        let theta = ThetaVector::new(beta, 0.1, 1.5);
        assert!(score_beta(&theta, &d).unwrap().amax() < 1e-6);
        assert_eq!(v, log_likelihood(&theta, &d).unwrap());
    }

    #[test]
    fn negative_responses_fail_fast() {
        let rows = vec![vec![1.0]; 3];
        let d = Dataset::from_rows(&[1.0, -0.5, 2.0], &rows, &["a"]).unwrap();
        let t = ThetaVector::from_slice(&[0.0], 0.0, 1.5);
        assert!(matches!(
            fit_mle_profile(&d, &t, &FitOptions::default()),
            Err(TweedieError::SupportViolation { index: 1, .. })
        ));
    }
}

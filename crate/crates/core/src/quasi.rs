//! Quasi-likelihood estimation.
//!
//! Only the first two moments are used: the quasi-score for `beta`, and the
//! Pearson estimating function for `(delta, p)` with weights
//! `W = -d C^{-1} / d lambda` where `C_i = exp(delta) mu_i^p`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TweedieError};
use crate::model::{linear_predictor, FitOptions, FitResult, Method, ThetaVector};
use crate::numerics::{inverse, solve};
use crate::Dataset;

const CHASER_MAX_ITER: usize = 200;
/// Largest accepted change in `delta` or `p` per iteration.
const MAX_LAMBDA_STEP: f64 = 2.0;

/// Estimating functions, sensitivity and empirical variability at one `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EFEvaluation {
    pub u_beta: DVector<f64>,
    pub u_lambda: DVector<f64>,
    /// Block lower-triangular: the `beta`-`lambda` block is exactly zero.
    pub s: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
}

/// Per-observation quantities shared by everything in this module.
struct Moments {
    eta: DVector<f64>,
    mu: DVector<f64>,
    c: DVector<f64>,
}

fn moments(theta: &ThetaVector, data: &Dataset) -> Result<Moments> {
    let eta = linear_predictor(&theta.beta, data)?;
    let mu = eta.map(f64::exp);
    let phi = theta.phi();
    let c = DVector::from_fn(eta.len(), |i, _| phi * (theta.power * eta[i]).exp());
    Ok(Moments { eta, mu, c })
}

/// `sum_i mu_i x_i (y_i - mu_i) / C_i`.
pub fn quasi_score_beta(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    let m = moments(theta, data)?;
    let w = DVector::from_fn(data.n(), |i, _| m.mu[i] * (data.y()[i] - m.mu[i]) / m.c[i]);
    Ok(data.x().transpose() * w)
}

/// Per-observation Pearson contributions `(r^2/C - 1) * (1, log mu)`.
fn pearson_terms(m: &Moments, data: &Dataset) -> Vec<[f64; 2]> {
    (0..data.n())
        .map(|i| {
            let r = data.y()[i] - m.mu[i];
            let e = r * r / m.c[i] - 1.0;
            [e, m.eta[i] * e]
        })
        .collect()
}

/// Pearson estimating function for `(delta, p)`.
pub fn pearson_score_lambda(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    let m = moments(theta, data)?;
    let mut u = DVector::zeros(2);
    for t in pearson_terms(&m, data) {
        u[0] += t[0];
        u[1] += t[1];
    }
    Ok(u)
}

fn sensitivity_from(theta: &ThetaVector, m: &Moments, data: &Dataset) -> Result<DMatrix<f64>> {
    let n = data.n();
    let q = data.q();
    let x = data.x();
    let p = theta.power;
    let sum_l: f64 = m.eta.sum();
    let sum_l2: f64 = m.eta.iter().map(|l| l * l).sum();
    let det = n as f64 * sum_l2 - sum_l * sum_l;
    if det < 1e-10 * n as f64 * sum_l2.max(1.0) {
        return Err(TweedieError::IllConditioned(format!(
            "dispersion and power are not jointly identifiable (determinant {det:.3e}); \
             the fitted means are nearly constant"
        )));
    }
    let mut s = DMatrix::zeros(q + 2, q + 2);
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= m.mu[i] * m.mu[i] / m.c[i];
    }
    s.view_mut((0, 0), (q, q)).copy_from(&(-(x.transpose() * weighted)));
    for k in 0..q {
        let col = x.column(k);
        s[(q, k)] = -p * col.sum();
        s[(q + 1, k)] = -p * col.dot(&m.eta);
    }
    s[(q, q)] = -(n as f64);
    s[(q, q + 1)] = -sum_l;
    s[(q + 1, q)] = -sum_l;
    s[(q + 1, q + 1)] = -sum_l2;
    Ok(s)
}

/// Expected Jacobian of `(U_beta, U_lambda)`.
pub fn quasi_sensitivity(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let m = moments(theta, data)?;
    sensitivity_from(theta, &m, data)
}

fn variability_from(m: &Moments, data: &Dataset) -> DMatrix<f64> {
    let q = data.q();
    let x = data.x();
    let mut v = DMatrix::zeros(q + 2, q + 2);
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= m.mu[i] * m.mu[i] / m.c[i];
    }
    v.view_mut((0, 0), (q, q)).copy_from(&(x.transpose() * weighted));
    for (i, t) in pearson_terms(m, data).into_iter().enumerate() {
        let ub = m.mu[i] * (data.y()[i] - m.mu[i]) / m.c[i];
        for a in 0..2 {
            for b in 0..2 {
                v[(q + a, q + b)] += t[a] * t[b];
            }
            for k in 0..q {
                let cross = t[a] * ub * x[(i, k)];
                v[(q + a, k)] += cross;
                v[(k, q + a)] += cross;
            }
        }
    }
    v
}

/// Variability: analytic `beta` block, uncentred empirical sums elsewhere.
pub fn quasi_variability(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let m = moments(theta, data)?;
    Ok(variability_from(&m, data))
}

pub fn evaluate_ef(theta: &ThetaVector, data: &Dataset) -> Result<EFEvaluation> {
    let m = moments(theta, data)?;
    let w = DVector::from_fn(data.n(), |i, _| m.mu[i] * (data.y()[i] - m.mu[i]) / m.c[i]);
    let mut u_lambda = DVector::zeros(2);
    for t in pearson_terms(&m, data) {
        u_lambda[0] += t[0];
        u_lambda[1] += t[1];
    }
    Ok(EFEvaluation {
        u_beta: data.x().transpose() * w,
        u_lambda,
        s: sensitivity_from(theta, &m, data)?,
        v_tilde: variability_from(&m, data),
    })
}

/// Inverse Godambe information `S^{-1} V S^{-T}`.
pub fn godambe_vcov(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let m = moments(theta, data)?;
    let s = sensitivity_from(theta, &m, data)?;
    let v = variability_from(&m, data);
    let s_inv = inverse(&s)?;
    let j = &s_inv * v * s_inv.transpose();
    Ok((&j + j.transpose()) * 0.5)
}

/// Newton step `-S^{-1} U` for the `beta` block.
fn beta_step(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    let m = moments(theta, data)?;
    let q = data.q();
    let x = data.x();
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= m.mu[i] * m.mu[i] / m.c[i];
    }
    let info = x.transpose() * weighted;
    let w = DVector::from_fn(data.n(), |i, _| m.mu[i] * (data.y()[i] - m.mu[i]) / m.c[i]);
    let step = solve(&info, &(x.transpose() * w))?;
    debug_assert_eq!(step.len(), q);
    Ok(step)
}

/// Newton step `-S_lambda^{-1} U_lambda` for `(delta, p)`.
fn lambda_step(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    let m = moments(theta, data)?;
    let s = sensitivity_from(theta, &m, data)?;
    let q = data.q();
    let s_lambda = s.view((q, q), (2, 2)).into_owned();
    let mut u = DVector::zeros(2);
    for t in pearson_terms(&m, data) {
        u[0] += t[0];
        u[1] += t[1];
    }
    let step = -solve(&s_lambda, &u)?;
    if step.iter().any(|v| !v.is_finite()) {
        return Err(TweedieError::NonFiniteObjective);
    }
    Ok(step)
}

/// Damps `step` until the next full step from the trial point is no longer
/// than the current one. Returns the accepted trial, or `None` when every
/// trial failed to evaluate.
fn damped<F>(step: &DVector<f64>, max_halvings: usize, mut trial: F) -> Option<(ThetaVector, f64)>
where
    F: FnMut(f64) -> Option<(ThetaVector, f64)>,
{
    let len = step.amax();
    let mut scale = if len > MAX_LAMBDA_STEP { MAX_LAMBDA_STEP / len } else { 1.0 };
    let mut fallback = None;
    for _ in 0..=max_halvings {
        if let Some((theta, next)) = trial(scale) {
            if next <= len {
                return Some((theta, scale));
            }
            fallback.get_or_insert((theta, scale));
        }
        scale *= 0.5;
    }
    fallback
}

/// Modified chaser: alternate `beta <- beta - S_beta^{-1} U_beta` and
/// `lambda <- lambda - S_lambda^{-1} U_lambda` at the updated `beta`.
pub fn fit_modified_chaser(data: &Dataset, theta0: &ThetaVector, opts: &FitOptions) -> Result<FitResult> {
    if theta0.beta.len() != data.q() || !theta0.is_finite() {
        return Err(TweedieError::InvalidInput("starting value has wrong shape or is not finite".into()));
    }
    let max_iter = opts.max_iter.unwrap_or(CHASER_MAX_ITER);
    let fixed = opts.fixed_power.is_some();
    let mut theta = theta0.clone();
    if let Some(p) = opts.fixed_power {
        theta.power = p;
    }
    let lambda_len = |t: &ThetaVector| -> Option<f64> {
        if fixed {
            pearson_score_lambda(t, data).ok().map(|u| (u[0] / data.n() as f64).abs())
        } else {
            lambda_step(t, data).ok().map(|s| s.amax())
        }
    };
    for iter in 1..=max_iter {
        let start = theta.clone();

        let sb = beta_step(&theta, data)?;
        let ok_b = match damped(&sb, opts.max_halvings, |s| {
            let mut t = theta.clone();
            t.beta = &theta.beta + &sb * s;
            beta_step(&t, data).ok().map(|n| (t, n.amax()))
        }) {
            Some((t, _)) => {
                theta = t;
                true
            }
            None => false,
        };

        let sl = if fixed {
            let u = pearson_score_lambda(&theta, data)?;
            DVector::from_vec(vec![u[0] / data.n() as f64, 0.0])
        } else {
            lambda_step(&theta, data)?
        };
        let ok_l = match damped(&sl, opts.max_halvings, |s| {
            let mut t = theta.clone();
            t.delta += s * sl[0];
            t.power += s * sl[1];
            lambda_len(&t).map(|n| (t, n))
        }) {
            Some((t, _)) => {
                theta = t;
                true
            }
            None => false,
        };
        if !theta.is_finite() {
            return Err(TweedieError::NonFiniteObjective);
        }

        let moved = (theta.to_vector() - start.to_vector()).amax();
        if moved < opts.tol && sb.amax().max(sl.amax()) < opts.tol.sqrt() {
            return finish(theta, data, true, iter);
        }
        if !ok_b && !ok_l {
            let partial = finish(theta, data, false, iter).ok();
            return Err(TweedieError::NoConvergence {
                iterations: iter,
                partial: partial.map(Box::new),
            });
        }
    }
    let partial = finish(theta, data, false, max_iter).ok();
    Err(TweedieError::NoConvergence {
        iterations: max_iter,
        partial: partial.map(Box::new),
    })
}

fn finish(theta: ThetaVector, data: &Dataset, converged: bool, iterations: usize) -> Result<FitResult> {
    let vcov = godambe_vcov(&theta, data)?;
    let mut fit = FitResult::new(theta, vcov, converged, iterations, Method::Qmle);
    // the analytic beta block of the variability need not agree with the empirical
    // dispersion blocks in small samples, and then the sandwich is indefinite
    let eig = nalgebra::SymmetricEigen::new(fit.vcov.clone()).eigenvalues;
    if eig.min() < -1e-8 * eig.amax() {
        fit.warnings.push(format!(
            "Godambe covariance is indefinite (smallest eigenvalue {:.3e})",
            eig.min()
        ));
    }
    Ok(fit)
}

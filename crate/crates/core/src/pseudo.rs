//! Gaussian pseudo-likelihood estimation.
//!
//! The response is treated as normal with mean `mu` and variance
//! `exp(delta) mu^p`. The scores are unbiased whenever the first two moments
//! are right, so the estimator is consistent without the Tweedie density.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TweedieError};
use crate::model::{symmetrize, linear_predictor, Dataset, FitOptions, FitResult, Method, ThetaVector};
use crate::numerics::{inverse, solve};

const NEWTON_MAX_ITER: usize = 200;
/// Largest change in `delta` or `p` per iteration.
const MAX_LAMBDA_STEP: f64 = 2.0;

/// Expected negative Hessian of the pseudo-log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSensitivity {
    pub s: DMatrix<f64>,
}

impl PseudoSensitivity {
    pub fn beta_block(&self) -> DMatrix<f64> {
        let q = self.s.nrows() - 2;
        self.s.view((0, 0), (q, q)).into_owned()
    }

    pub fn lambda_block(&self) -> DMatrix<f64> {
        let q = self.s.nrows() - 2;
        self.s.view((q, q), (2, 2)).into_owned()
    }
}

struct Terms {
    eta: DVector<f64>,
    mu: DVector<f64>,
    /// Variance `exp(delta) mu^p`.
    c: DVector<f64>,
}

fn terms(theta: &ThetaVector, data: &Dataset) -> Result<Terms> {
    let eta = linear_predictor(&theta.beta, data)?;
    let mu = eta.map(f64::exp);
    let c = DVector::from_fn(eta.len(), |i, _| (theta.delta + theta.power * eta[i]).exp());
    Ok(Terms { eta, mu, c })
}

pub fn pseudo_loglik(theta: &ThetaVector, data: &Dataset) -> Result<f64> {
    let t = terms(theta, data)?;
    let n = data.n() as f64;
    let mut acc = 0.0;
    for i in 0..data.n() {
        let r = data.y()[i] - t.mu[i];
        acc += theta.power * t.eta[i] + r * r / t.c[i];
    }
    Ok(-0.5 * n * (2.0 * PI).ln() - 0.5 * n * theta.delta - 0.5 * acc)
}

/// Per-observation score contributions, one row per observation.
fn score_rows(theta: &ThetaVector, t: &Terms, data: &Dataset) -> DMatrix<f64> {
    let q = data.q();
    let p = theta.power;
    let x = data.x();
    DMatrix::from_fn(data.n(), q + 2, |i, j| {
        let r = data.y()[i] - t.mu[i];
        let z = r * r / t.c[i];
        if j < q {
            x[(i, j)] * (r * t.mu[i] / t.c[i] + 0.5 * p * (z - 1.0))
        } else if j == q {
            0.5 * (z - 1.0)
        } else {
            0.5 * t.eta[i] * (z - 1.0)
        }
    })
}

pub fn pseudo_score(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    let t = terms(theta, data)?;
    let rows = score_rows(theta, &t, data);
    Ok(rows.row_sum().transpose())
}

fn sensitivity_from(theta: &ThetaVector, t: &Terms, data: &Dataset) -> DMatrix<f64> {
    let q = data.q();
    let p = theta.power;
    let x = data.x();
    let mut s = DMatrix::zeros(q + 2, q + 2);
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= 0.5 * p * p + t.mu[i] * t.mu[i] / t.c[i];
    }
    s.view_mut((0, 0), (q, q)).copy_from(&(x.transpose() * weighted));
    for k in 0..q {
        let col = x.column(k);
        let bd = 0.5 * p * col.sum();
        let bp = 0.5 * p * col.dot(&t.eta);
        s[(k, q)] = bd;
        s[(q, k)] = bd;
        s[(k, q + 1)] = bp;
        s[(q + 1, k)] = bp;
    }
    let sum_l = t.eta.sum();
    s[(q, q)] = 0.5 * data.n() as f64;
    s[(q, q + 1)] = 0.5 * sum_l;
    s[(q + 1, q)] = 0.5 * sum_l;
    s[(q + 1, q + 1)] = 0.5 * t.eta.iter().map(|l| l * l).sum::<f64>();
    // X'WX is symmetric only up to rounding
    symmetrize(&s)
}

pub fn pseudo_sensitivity(theta: &ThetaVector, data: &Dataset) -> Result<PseudoSensitivity> {
    let t = terms(theta, data)?;
    Ok(PseudoSensitivity {
        s: sensitivity_from(theta, &t, data),
    })
}

/// Empirical variability: sum of outer products of per-observation scores.
pub fn pseudo_variability(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let t = terms(theta, data)?;
    let rows = score_rows(theta, &t, data);
    Ok(rows.transpose() * rows)
}

/// Sandwich `S^{-1} V S^{-1}`.
pub fn pseudo_sandwich_vcov(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let t = terms(theta, data)?;
    let s = sensitivity_from(theta, &t, data);
    let rows = score_rows(theta, &t, data);
    let v = rows.transpose() * &rows;
    let s_inv = inverse(&s)?;
    let j = &s_inv * v * &s_inv;
    Ok((&j + j.transpose()) * 0.5)
}

/// Sandwich restricted to `(beta, delta)`, used when the power is held fixed.
fn fixed_power_vcov(theta: &ThetaVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let q = data.q();
    let t = terms(theta, data)?;
    let s = sensitivity_from(theta, &t, data).view((0, 0), (q + 1, q + 1)).into_owned();
    let rows = score_rows(theta, &t, data).columns(0, q + 1).into_owned();
    let s_inv = inverse(&s)?;
    let j = &s_inv * (rows.transpose() * &rows) * &s_inv;
    let mut vcov = DMatrix::from_element(q + 2, q + 2, f64::NAN);
    vcov.view_mut((0, 0), (q + 1, q + 1)).copy_from(&((&j + j.transpose()) * 0.5));
    Ok(vcov)
}

/// Joint Newton scoring `theta <- theta + S^{-1} U` with step halving on
/// decreases of the pseudo-log-likelihood.
pub fn fit_pseudo_newton(data: &Dataset, theta0: &ThetaVector, opts: &FitOptions) -> Result<FitResult> {
    if theta0.beta.len() != data.q() || !theta0.is_finite() {
        return Err(TweedieError::InvalidInput("starting value has wrong shape or is not finite".into()));
    }
    let q = data.q();
    let dim = if opts.fixed_power.is_some() { q + 1 } else { q + 2 };
    let max_iter = opts.max_iter.unwrap_or(NEWTON_MAX_ITER);
    let mut theta = theta0.clone();
    if let Some(p) = opts.fixed_power {
        theta.power = p;
    }
    let mut current = pseudo_loglik(&theta, data)?;
    let finish = |theta: ThetaVector, converged: bool, iterations: usize| -> Result<FitResult> {
        let vcov = if opts.fixed_power.is_some() {
            fixed_power_vcov(&theta, data)?
        } else {
            pseudo_sandwich_vcov(&theta, data)?
        };
        let mut fit = FitResult::new(theta, vcov, converged, iterations, Method::Pmle);
        fit.loglik = None;
        Ok(fit)
    };

    for iter in 1..=max_iter {
        let t = terms(&theta, data)?;
        let s = sensitivity_from(&theta, &t, data).view((0, 0), (dim, dim)).into_owned();
        let u = score_rows(&theta, &t, data).row_sum().transpose().rows(0, dim).into_owned();
        let mut step = solve(&s, &u)?;
        // scoring in delta overshoots when exp(delta) is far below the Pearson
        // dispersion, and the pseudo-log-likelihood still rises, so cap it
        let lambda_max = step.rows(q, dim - q).amax();
        if lambda_max > MAX_LAMBDA_STEP {
            step *= MAX_LAMBDA_STEP / lambda_max;
        }
        let base = theta.to_vector();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut v = base.clone();
            v.rows_mut(0, dim).axpy(scale, &step, 1.0);
            let trial = ThetaVector::from_vector(&v);
            if let Ok(value) = pseudo_loglik(&trial, data) {
                if value.is_finite() && value >= current - 1e-12 * current.abs().max(1.0) {
                    accepted = Some((trial, value));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, value)) = accepted else {
            if step.amax() < opts.tol.sqrt() {
                return finish(theta, true, iter);
            }
            let partial = finish(theta, false, iter).ok();
            return Err(TweedieError::NoConvergence {
                iterations: iter,
                partial: partial.map(Box::new),
            });
        };
        theta = trial;
        current = value;
        if step.amax() * scale < opts.tol {
            return finish(theta, true, iter);
        }
    }
    let partial = finish(theta, false, max_iter).ok();
    Err(TweedieError::NoConvergence {
        iterations: max_iter,
        partial: partial.map(Box::new),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::log_likelihood;
    use crate::numerics::{richardson_gradient, RichardsonOptions};

    fn data() -> Dataset {
        let y = [0.0, 1.3, 2.7, -0.4, 5.1, 3.3, 0.0, 8.2, 1.1, 2.2, 0.7, 4.4];
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![1.0, i as f64 / 11.0 - 0.5, (i % 2) as f64])
            .collect();
        Dataset::from_rows(&y, &rows, &["(Intercept)", "x1", "x2"]).unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        let d = Dataset::from_rows(&[1.0], &[vec![1.0]], &["a"]).unwrap();
        let v = pseudo_loglik(&ThetaVector::from_slice(&[0.0], 0.0, 0.0), &d).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn gaussian_case_matches_exact_likelihood() {
        let d = data();
        let theta = ThetaVector::from_slice(&[0.3, 0.5, -0.2], 0.4, 0.0);
        let a = pseudo_loglik(&theta, &d).unwrap();
        let b = log_likelihood(&theta, &d).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn score_is_gradient() {
        let d = data();
        for p in [-0.5, 0.0, 1.3, 2.0, 3.1] {
            let theta = ThetaVector::from_slice(&[0.3, 0.5, -0.2], 0.4, p);
            let u = pseudo_score(&theta, &d).unwrap();
            let f = |v: &[f64]| pseudo_loglik(&ThetaVector::from_vector(&DVector::from_column_slice(v)), &d).unwrap();
            let g = richardson_gradient(f, theta.to_vector().as_slice(), &RichardsonOptions::default()).unwrap();
            for j in 0..5 {
                assert!((u[j] - g[j]).abs() <= 1e-8 * u[j].abs().max(1.0), "p={p} j={j}");
            }
        }
    }

    #[test]
    fn score_examples() {
        let rows = vec![vec![1.0]; 4];
        let d = Dataset::from_rows(&[0.0, 2.0, 0.0, 2.0], &rows, &["a"]).unwrap();
        let u = pseudo_score(&ThetaVector::from_slice(&[0.0], 0.0, 1.5), &d).unwrap();
        assert_eq!(u[1], 0.0);
        assert_eq!(u[2], 0.0);
    }

    #[test]
    fn sensitivity_examples() {
        let rows = vec![vec![1.0]; 4];
        let d = Dataset::from_rows(&[1.0; 4], &rows, &["a"]).unwrap();
        let s = pseudo_sensitivity(&ThetaVector::from_slice(&[0.0], 0.0, 2.0), &d).unwrap();
        assert!((s.s[(0, 0)] - 12.0).abs() < 1e-12);
        assert_eq!(s.s[(1, 1)], 2.0);
        let d = data();
        let theta = ThetaVector::from_slice(&[0.3, 0.5, -0.2], 0.4, 1.7);
        let s = pseudo_sensitivity(&theta, &d).unwrap().s;
        assert_eq!(s, s.transpose());
        let sum_l2: f64 = linear_predictor(&theta.beta, &d).unwrap().iter().map(|l| l * l).sum();
        assert_eq!(s[(4, 4)], 0.5 * sum_l2);
    }

    #[test]
    fn fixed_zero_power_gives_gaussian_mle_of_delta() {
        let d = data();
        let t0 = ThetaVector::from_slice(&[0.5, 0.0, 0.0], 0.5, 0.0);
        let opts = FitOptions {
            fixed_power: Some(0.0),
            ..Default::default()
        };
        let fit = fit_pseudo_newton(&d, &t0, &opts).unwrap();
        let mu = linear_predictor(&fit.theta.beta, &d).unwrap().map(f64::exp);
        let rss: f64 = (d.y() - mu).iter().map(|r| r * r).sum();
        assert!((fit.theta.delta - (rss / d.n() as f64).ln()).abs() < 1e-6);
        assert_eq!(fit.theta.power, 0.0);
        assert!(fit.se[4].is_none());
    }

    #[test]
    fn sandwich_is_symmetric_with_positive_diagonal() {
        let d = data();
        let theta = ThetaVector::from_slice(&[0.3, 0.5, -0.2], 0.4, 1.2);
        let j = pseudo_sandwich_vcov(&theta, &d).unwrap();
        assert!((&j - j.transpose()).amax() < 1e-12);
        assert!((0..5).all(|i| j[(i, i)] > 0.0));
    }
}

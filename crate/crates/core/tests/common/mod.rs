//! Independent reference computations for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Discrete, Gamma, Poisson};
use tweedie_core::density::{log_density, prob_zero};
use tweedie_core::{Dataset, ThetaVector, TweedieParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Log of the compound Poisson density written as a Poisson mixture of gamma densities.
pub fn poisson_gamma_log_density(y: f64, mu: f64, phi: f64, p: f64) -> f64 {
    let lambda = mu.powf(2.0 - p) / (phi * (2.0 - p));
    let tau = (2.0 - p) / (p - 1.0);
    let gamma = phi * (p - 1.0) * mu.powf(p - 1.0);
    let pois = Poisson::new(lambda).unwrap();
    let top = (lambda + 60.0 * lambda.sqrt() + 200.0) as u64;
    let logs: Vec<f64> = (1..=top)
        .map(|n| pois.ln_pmf(n) + Gamma::new(n as f64 * tau, 1.0 / gamma).unwrap().ln_pdf(y))
        .filter(|v| v.is_finite())
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

pub fn inverse_gaussian_log_density(y: f64, mu: f64, phi: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * phi * y.powi(3)).ln() - (y - mu).powi(2) / (2.0 * phi * mu * mu * y)
}

/// `P(Y = 0)` plus the integral of the continuous part, by tanh-sinh quadrature
/// on pieces split around the mean.
pub fn total_mass(mu: f64, phi: f64, p: f64) -> f64 {
    let params = TweedieParams::new(mu, phi, p).unwrap();
    let sd = params.variance().sqrt();
    let f = |y: f64| {
        if y <= 0.0 {
            0.0
        } else {
            log_density(y, &params).unwrap().exp()
        }
    };
    // near zero the density behaves like y^(tau - 1); y = b u^m with m tau >= 2
    // turns the first piece into a smooth integrand
    let tau = (2.0 - p) / (p - 1.0);
    let m = (2.0 / tau).ceil().max(1.0);
    let b = 0.5 * mu;
    let head = |u: f64| f(b * u.powf(m)) * b * m * u.powf(m - 1.0);
    let mut total = prob_zero(&params).unwrap();
    total += quadrature::double_exponential::integrate(head, 0.0, 1.0, 1e-12).integral;
    let cuts = [b, mu, mu + 4.0 * sd, mu + 15.0 * sd, mu + 80.0 * sd];
    for w in cuts.windows(2) {
        total += quadrature::double_exponential::integrate(f, w[0], w[1], 1e-12).integral;
    }
    total
}

/// Intercept plus `k` uniform covariates on `[-1, 1]`.
pub fn random_design<R: Rng>(rng: &mut R, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k + 1, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
}

/// Random instance: design, coefficients, and positive responses scattered around the mean.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, power: f64, zeros: bool) -> (Dataset, ThetaVector) {
    let k = rng.random_range(1..=3);
    let x = random_design(rng, n, k);
    let beta = DVector::from_fn(k + 1, |_, _| rng.random_range(-0.8..0.8));
    let mu = (&x * &beta).map(f64::exp);
    let y = mu.map(|m| {
        if zeros && rng.random_bool(0.2) {
            0.0
        } else {
            m * rng.random_range(0.2..2.5)
        }
    });
    let names: Vec<String> = (0..=k).map(|j| format!("x{j}")).collect();
    let data = Dataset::new(y, x, names).unwrap();
    let theta = ThetaVector::new(beta, rng.random_range(-1.0..0.5), power);
    (data, theta)
}

/// Numerical Jacobian of a vector function by central differences with
/// one Richardson step (`h` and `h/2`).
pub fn jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let h = 1e-3 * (x[j].abs() + 0.1);
        let central = |h: f64| {
            let mut a = x.clone();
            a[j] += h;
            let mut b = x.clone();
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        };
        let d = (central(h / 2.0) * 4.0 - central(h)) / 3.0;
        jac.set_column(j, &d);
    }
    jac
}

/// `J^{-1}` written out block by block for a block lower-triangular `S`.
///
/// With `S = [[A, 0], [B, D]]` and `V = [[V_b, V_bl], [V_lb, V_l]]`:
/// the regression block is `A^{-1} V_b A^{-T}`, the cross block is
/// `A^{-1} (V_bl - V_b L^T) D^{-T}` with `L^T = A^{-T} B^T`, and the
/// dispersion block is `D^{-1} (V_l - B A^{-1} V_bl - V_lb A^{-T} B^T + B A^{-1} V_b A^{-T} B^T) D^{-T}`.
pub fn godambe_partitioned(s: &DMatrix<f64>, v: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let a = s.view((0, 0), (q, q)).into_owned();
    let b = s.view((q, 0), (2, q)).into_owned();
    let d = s.view((q, q), (2, 2)).into_owned();
    let vb = v.view((0, 0), (q, q)).into_owned();
    let vbl = v.view((0, q), (q, 2)).into_owned();
    let vlb = v.view((q, 0), (2, q)).into_owned();
    let vl = v.view((q, q), (2, 2)).into_owned();
    let ai = a.clone().try_inverse().unwrap();
    let di = d.clone().try_inverse().unwrap();
    let l = &b * &ai;
    let top = &ai * &vb * ai.transpose();
    let cross = &ai * (&vbl - &vb * l.transpose()) * di.transpose();
    let inner = &vl - &l * &vbl - &vlb * l.transpose() + &l * &vb * l.transpose();
    let bottom = &di * inner * di.transpose();
    let mut out = DMatrix::zeros(q + 2, q + 2);
    out.view_mut((0, 0), (q, q)).copy_from(&top);
    out.view_mut((0, q), (q, 2)).copy_from(&cross);
    out.view_mut((q, 0), (2, q)).copy_from(&cross.transpose());
    out.view_mut((q, q), (2, 2)).copy_from(&bottom);
    out
}

/// Least squares for `y ~ exp(X beta)` by Gauss–Newton.
pub fn nonlinear_least_squares(data: &Dataset, beta0: &DVector<f64>) -> DVector<f64> {
    let x = data.x();
    let mut beta = beta0.clone();
    for _ in 0..200 {
        let mu = (x * &beta).map(f64::exp);
        let mut jac = x.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= mu[i];
        }
        let r = data.y() - &mu;
        let step = (jac.transpose() * &jac).lu().solve(&(jac.transpose() * r)).unwrap();
        beta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Data from the simulation design with Tweedie responses.
pub fn scenario(n: usize, beta: &[f64], phi: f64, p: f64, seed: u64) -> Dataset {
    let x = tweedie_core::simulate::design(n);
    let mu: Vec<f64> = (&x * DVector::from_column_slice(beta)).map(f64::exp).iter().copied().collect();
    let y = tweedie_core::simulate::rtweedie_means(&mu, phi, p, &mut rng(seed)).unwrap();
    let names = tweedie_core::simulate::DESIGN_NAMES.iter().map(|s| s.to_string()).collect();
    Dataset::new(DVector::from_vec(y), x, names).unwrap()
}

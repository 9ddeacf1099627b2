//! Exact Tweedie log-densities.
//!
//! Closed forms are used for the Gaussian, Poisson, gamma and inverse Gaussian
//! members. Everywhere else the normalising factor `a(y, phi, p)` is obtained
//! from its series expansion: a sum of positive terms for `1 < p < 2`, and an
//! alternating sum for `p > 2`. Terms are handled on the log scale through the
//! log-gamma function and summed outwards from the largest one.

use std::f64::consts::PI;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, TweedieError};
use crate::model::{mean_vector, Dataset, ThetaVector, TweedieParams};

/// Terms smaller than this fraction of the largest term are dropped.
pub const SERIES_REL_TOL: f64 = 1e-17;
/// Hard cap on the number of series terms.
pub const SERIES_MAX_TERMS: usize = 100_000;
/// Alternating sums smaller than this fraction of the largest term are rejected.
pub const CANCELLATION_TOL: f64 = 1e-10;
/// Alternating sums whose rounding-error bound exceeds this fraction of the sum are rejected.
pub const SERIES_NOISE_TOL: f64 = 1e-4;

const LATTICE_TOL: f64 = 1e-8;

/// Diagnostics of one series evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesReport {
    pub k_peak: usize,
    pub terms_used: usize,
    pub lower_k: usize,
    pub upper_k: usize,
    pub converged: bool,
    /// Log of the (absolute) series sum.
    pub log_sum: f64,
}

/// Mass at zero of the compound Poisson member.
pub fn prob_zero(params: &TweedieParams) -> Result<f64> {
    let p = params.power;
    if !(p > 1.0 && p < 2.0) {
        return Err(TweedieError::DomainError(format!(
            "P(Y = 0) requires 1 < p < 2, got p = {p}"
        )));
    }
    Ok(log_prob_zero(params.mu, params.phi, p).exp())
}

fn log_prob_zero(mu: f64, phi: f64, p: f64) -> f64 {
    -mu.powf(2.0 - p) / (phi * (2.0 - p))
}

/// `(y psi - kappa(psi)) / phi`, the exponential-family part of the density.
fn canonical_part(y: f64, params: &TweedieParams) -> f64 {
    (y * params.psi() - params.kappa()) / params.phi
}

/// Integer `k >= 1` maximising a concave sequence, starting from a continuous guess.
fn locate_peak(guess: f64, f: &impl Fn(usize) -> f64) -> usize {
    let mut k = if guess.is_finite() && guess > 1.0 {
        guess.round().min(1e15) as usize
    } else {
        1
    };
    let mut fk = f(k);
    loop {
        let up = f(k + 1);
        if up > fk {
            k += 1;
            fk = up;
            continue;
        }
        if k > 1 {
            let down = f(k - 1);
            if down > fk {
                k -= 1;
                fk = down;
                continue;
            }
        }
        return k;
    }
}

/// Walks outwards from `k_peak` while `envelope(k)` stays within tolerance of the peak,
/// feeding each visited index to `visit`. Returns the report skeleton.
fn sum_outwards(
    k_peak: usize,
    envelope: &impl Fn(usize) -> f64,
    mut visit: impl FnMut(usize, f64),
) -> SeriesReport {
    let log_tol = SERIES_REL_TOL.ln();
    let peak = envelope(k_peak);
    visit(k_peak, 0.0);
    let mut terms = 1usize;

    let mut upper = k_peak;
    let mut upper_done = false;
    while terms < SERIES_MAX_TERMS {
        let k = upper + 1;
        let rel = envelope(k) - peak;
        if rel < log_tol {
            upper_done = true;
            break;
        }
        visit(k, rel);
        upper = k;
        terms += 1;
    }

    let mut lower = k_peak;
    let mut lower_done = false;
    while terms < SERIES_MAX_TERMS {
        if lower == 1 {
            lower_done = true;
            break;
        }
        let k = lower - 1;
        let rel = envelope(k) - peak;
        if rel < log_tol {
            lower_done = true;
            break;
        }
        visit(k, rel);
        lower = k;
        terms += 1;
    }

    SeriesReport {
        k_peak,
        terms_used: terms,
        lower_k: lower,
        upper_k: upper,
        converged: upper_done && lower_done,
        log_sum: f64::NAN,
    }
}

/// Log-density of the compound Poisson member (`1 < p < 2`) at `y > 0`.
pub fn log_density_series_compound(y: f64, params: &TweedieParams) -> Result<(f64, SeriesReport)> {
    let (phi, p) = (params.phi, params.power);
    if !(p > 1.0 && p < 2.0) {
        return Err(TweedieError::DomainError(format!(
            "compound Poisson series requires 1 < p < 2, got p = {p}"
        )));
    }
    if !(y > 0.0 && y.is_finite()) {
        return Err(TweedieError::DomainError(format!(
            "compound Poisson series requires y > 0, got {y}"
        )));
    }
    let alpha = (2.0 - p) / (1.0 - p);
    // log W_k = k log z - log k! - log Gamma(-k alpha)
    let log_z = -alpha * y.ln() + alpha * (p - 1.0).ln() - (1.0 - alpha) * phi.ln() - (2.0 - p).ln();
    let envelope = |k: usize| {
        let k = k as f64;
        k * log_z - ln_gamma(k + 1.0) - ln_gamma(-k * alpha)
    };
    let guess = y.powf(2.0 - p) / (phi * (2.0 - p));
    let k_peak = locate_peak(guess, &envelope);
    let peak = envelope(k_peak);

    let mut acc = 0.0;
    let mut report = sum_outwards(k_peak, &envelope, |_, rel| acc += rel.exp());
    report.log_sum = peak + acc.ln();
    if !report.converged {
        return Err(TweedieError::SeriesNotConverged(report));
    }
    let logf = report.log_sum - y.ln() + canonical_part(y, params);
    Ok((logf, report))
}

/// `sin(pi x)` with the argument reduced modulo 2 first.
fn sin_pi(x: f64) -> f64 {
    let r = x - 2.0 * (x / 2.0).floor();
    (PI * r).sin()
}

/// Log-density of the positive stable member (`p > 2`) at `y > 0`.
pub fn log_density_series_positive_stable(
    y: f64,
    params: &TweedieParams,
) -> Result<(f64, SeriesReport)> {
    let (phi, p) = (params.phi, params.power);
    if !(p > 2.0) {
        return Err(TweedieError::DomainError(format!(
            "positive stable series requires p > 2, got p = {p}"
        )));
    }
    if !(y > 0.0 && y.is_finite()) {
        return Err(TweedieError::DomainError(format!(
            "positive stable series requires y > 0, got {y}"
        )));
    }
    let alpha = (2.0 - p) / (1.0 - p);
    // log |V_k| = log Gamma(1 + alpha k) - log k! + k c + log |sin(k pi alpha)|
    let c = (alpha - 1.0) * phi.ln() + alpha * (p - 1.0).ln() - (p - 2.0).ln() - alpha * y.ln();
    let envelope = |k: usize| {
        let k = k as f64;
        ln_gamma(1.0 + alpha * k) - ln_gamma(1.0 + k) + k * c
    };
    let guess = ((c + alpha * alpha.ln()) / (1.0 - alpha)).exp();
    let k_peak = locate_peak(guess, &envelope);
    let peak = envelope(k_peak);

    let mut positive = 0.0;
    let mut negative = 0.0;
    let mut largest = 0.0f64;
    let mut noise = 0.0;
    let mut report = sum_outwards(k_peak, &envelope, |k, rel| {
        // (-1)^k sin(-k pi alpha) = (-1)^(k+1) sin(k pi alpha)
        let kf = k as f64;
        let s = sin_pi(kf * alpha);
        let signed = if k % 2 == 1 { s } else { -s };
        let term = rel.exp() * signed;
        largest = largest.max(term.abs());
        // rounding bound from the log-scale pieces and the sine argument
        let log_scale = ln_gamma(1.0 + alpha * kf).abs() + ln_gamma(1.0 + kf).abs() + (kf * c).abs() + peak.abs();
        noise += rel.exp() * f64::EPSILON * (s.abs() * log_scale + PI * (kf * alpha).abs());
        if term >= 0.0 {
            positive += term;
        } else {
            negative -= term;
        }
    });
    let total = positive - negative;
    report.log_sum = peak + total.abs().ln();
    if !report.converged {
        return Err(TweedieError::SeriesNotConverged(report));
    }
    let ratio = if largest > 0.0 { total / largest } else { 0.0 };
    if !(ratio >= CANCELLATION_TOL) || !(noise <= SERIES_NOISE_TOL * total.abs()) {
        return Err(TweedieError::CatastrophicCancellation { ratio, report });
    }
    let logf = report.log_sum - (PI * y).ln() + canonical_part(y, params);
    Ok((logf, report))
}

fn gaussian_log_density(y: f64, mu: f64, phi: f64) -> f64 {
    -0.5 * (2.0 * PI * phi).ln() - (y - mu).powi(2) / (2.0 * phi)
}

fn scaled_poisson_log_mass(y: f64, mu: f64, phi: f64) -> Result<f64> {
    let ratio = y / phi;
    let count = ratio.round();
    if y < 0.0 || (ratio - count).abs() > LATTICE_TOL * count.max(1.0) {
        return Err(TweedieError::DomainError(format!(
            "p = 1 requires y / phi to be a non-negative integer, got {ratio}"
        )));
    }
    let rate = mu / phi;
    Ok(count * rate.ln() - rate - ln_gamma(count + 1.0))
}

fn gamma_log_density(y: f64, mu: f64, phi: f64) -> f64 {
    let shape = 1.0 / phi;
    let scale = phi * mu;
    (shape - 1.0) * y.ln() - y / scale - ln_gamma(shape) - shape * scale.ln()
}

fn inverse_gaussian_log_density(y: f64, mu: f64, phi: f64) -> f64 {
    -0.5 * (2.0 * PI * phi * y.powi(3)).ln() - (y - mu).powi(2) / (2.0 * phi * mu * mu * y)
}

/// Log-density (log-mass at zero for the compound Poisson member) of `y`.
pub fn log_density(y: f64, params: &TweedieParams) -> Result<f64> {
    let (mu, phi, p) = (params.mu, params.phi, params.power);
    if !y.is_finite() {
        return Err(TweedieError::DomainError(format!("non-finite response {y}")));
    }
    if p == 0.0 {
        return Ok(gaussian_log_density(y, mu, phi));
    }
    if p < 0.0 || (p > 0.0 && p < 1.0) {
        return Err(TweedieError::DomainError(format!(
            "p = {p} has no density: the power must lie in (-inf, 0] or [1, inf), and p < 0 is not evaluated"
        )));
    }
    if p == 1.0 {
        return scaled_poisson_log_mass(y, mu, phi);
    }
    if p < 2.0 {
        if y < 0.0 {
            return Err(TweedieError::DomainError(format!(
                "y = {y} outside the support [0, inf) for 1 < p < 2"
            )));
        }
        if y == 0.0 {
            return Ok(log_prob_zero(mu, phi, p));
        }
        return log_density_series_compound(y, params).map(|(v, _)| v);
    }
    if y <= 0.0 {
        return Err(TweedieError::DomainError(format!(
            "y = {y} outside the support (0, inf) for p >= 2"
        )));
    }
    if p == 2.0 {
        return Ok(gamma_log_density(y, mu, phi));
    }
    if p == 3.0 {
        return Ok(inverse_gaussian_log_density(y, mu, phi));
    }
    log_density_series_positive_stable(y, params).map(|(v, _)| v)
}

/// Log-likelihood of `theta` for the whole data set.
pub fn log_likelihood(theta: &ThetaVector, data: &Dataset) -> Result<f64> {
    let mu = mean_vector(theta, data)?;
    let phi = theta.phi();
    let mut total = 0.0;
    for (row, (&y, &m)) in data.y().iter().zip(mu.iter()).enumerate() {
        let params = TweedieParams::new(m, phi, theta.power).map_err(|e| TweedieError::AtRow {
            row,
            source: Box::new(e),
        })?;
        total += log_density(y, &params).map_err(|e| TweedieError::AtRow {
            row,
            source: Box::new(e),
        })?;
    }
    Ok(total)
}

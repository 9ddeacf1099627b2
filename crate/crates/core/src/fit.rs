//! One entry point over the three estimators.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mle::{fit_mle_profile, fit_mle_two_step, initial_theta};
use crate::model::{Dataset, FitOptions, FitResult, Method, ThetaVector};
use crate::pseudo::fit_pseudo_newton;
use crate::quasi::fit_modified_chaser;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MleAlgorithm {
    /// Nelder–Mead on the profile likelihood in `(delta, p)`.
    #[default]
    Profile,
    /// Alternating Newton scoring in `beta` and `(delta, p)`.
    TwoStep,
}

/// Starting power: 1.5, except 0.5 for moment-based fits of data with negative values.
pub fn start_power(data: &Dataset, method: Method) -> f64 {
    let negative = data.y().iter().any(|&v| v < 0.0);
    if negative && method != Method::Mle {
        0.5
    } else {
        1.5
    }
}

pub fn default_start(data: &Dataset, method: Method) -> Result<ThetaVector> {
    initial_theta(data, start_power(data, method))
}

/// Fits `method`, starting from `theta0` or the default start.
pub fn fit(
    data: &Dataset,
    method: Method,
    theta0: Option<&ThetaVector>,
    opts: &FitOptions,
    mle_algorithm: MleAlgorithm,
) -> Result<FitResult> {
    let start = match theta0 {
        Some(t) => t.clone(),
        None => default_start(data, method)?,
    };
    match method {
        Method::Mle => match mle_algorithm {
            MleAlgorithm::Profile => fit_mle_profile(data, &start, opts),
            MleAlgorithm::TwoStep => fit_mle_two_step(data, &start, opts),
        },
        Method::Qmle => fit_modified_chaser(data, &start, opts),
        Method::Pmle => fit_pseudo_newton(data, &start, opts),
    }
}

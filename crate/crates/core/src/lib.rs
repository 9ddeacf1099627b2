//! Tweedie regression with a log link.
//!
//! Three estimators share one set of domain types:
//!
//! * [`mle`]: exact maximum likelihood using series evaluation of the density,
//!   either by two-step Newton scoring or by Nelder–Mead on the profile likelihood;
//! * [`quasi`]: quasi-score plus Pearson estimating functions, solved by the
//!   modified chaser algorithm, with Godambe (sandwich) standard errors;
//! * [`pseudo`]: Gaussian pseudo-likelihood solved by joint Newton scoring,
//!   with sandwich standard errors.
//!
//! [`simulate`] generates Tweedie and heavy-tailed responses and runs
//! replicated bias/coverage/efficiency studies.

pub mod density;
pub mod error;
pub mod fit;
pub mod mle;
pub mod model;
pub mod numerics;
pub mod pseudo;
pub mod quasi;
pub mod simulate;

pub use error::{Result, TweedieError};
pub use fit::{fit, MleAlgorithm};
pub use model::{Dataset, FitOptions, FitResult, Method, SupportClass, ThetaVector, TweedieParams};

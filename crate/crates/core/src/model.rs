//! Domain types shared by every estimator: the data set, the parameter
//! vector, the Tweedie mean/variance mapping and the fit result.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TweedieError};

/// Largest absolute linear predictor accepted before `exp` is considered to overflow.
pub const ETA_LIMIT: f64 = 700.0;

const RANK_TOL: f64 = 1e-10;

/// Response vector plus design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl Dataset {
    /// Builds a data set, checking dimensions, finiteness and full column rank.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let (n, q) = x.shape();
        if q == 0 {
            return Err(TweedieError::InvalidInput("design matrix has no columns".into()));
        }
        if y.len() != n {
            return Err(TweedieError::InvalidInput(format!(
                "response has {} rows but design matrix has {n}",
                y.len()
            )));
        }
        if n < q {
            return Err(TweedieError::InvalidInput(format!(
                "need at least as many rows ({n}) as columns ({q})"
            )));
        }
        if names.len() != q {
            return Err(TweedieError::InvalidInput(format!(
                "{} column names supplied for {q} columns",
                names.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(TweedieError::InvalidInput(format!("non-finite response at row {i}")));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(TweedieError::InvalidInput(format!(
                "non-finite covariate at row {}, column {}",
                i % n,
                i / n
            )));
        }
        let rank = column_rank(&x);
        if rank < q {
            return Err(TweedieError::InvalidInput(format!(
                "design matrix is rank deficient (rank {rank} < {q} columns)"
            )));
        }
        Ok(Dataset { y, x, names })
    }

    /// Convenience constructor from row-major slices.
    pub fn from_rows(y: &[f64], rows: &[Vec<f64>], names: &[&str]) -> Result<Self> {
        let q = names.len();
        if rows.iter().any(|r| r.len() != q) {
            return Err(TweedieError::InvalidInput("ragged design rows".into()));
        }
        let x = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
        Dataset::new(
            DVector::from_column_slice(y),
            x,
            names.iter().map(|s| s.to_string()).collect(),
        )
    }

    /// Loads a data set from a headered CSV file. Columns are selected by name;
    /// with `intercept` a column of ones named `(Intercept)` is prepended.
    pub fn from_csv(
        path: impl AsRef<Path>,
        response: &str,
        covariates: &[String],
        intercept: bool,
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let column = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                TweedieError::InvalidInput(format!("column '{name}' not found in CSV header"))
            })
        };
        let y_col = column(response)?;
        let x_cols = covariates
            .iter()
            .map(|c| column(c))
            .collect::<Result<Vec<_>>>()?;

        let mut y = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let field = |col: usize| -> Result<f64> {
                let raw = record.get(col).unwrap_or("");
                if raw.is_empty() {
                    return Err(TweedieError::InvalidInput(format!(
                        "missing value in column '{}' at data row {}",
                        &headers[col],
                        line + 1
                    )));
                }
                raw.parse::<f64>().map_err(|_| {
                    TweedieError::InvalidInput(format!(
                        "cannot parse '{raw}' in column '{}' at data row {}",
                        &headers[col],
                        line + 1
                    ))
                })
            };
            y.push(field(y_col)?);
            let mut row = Vec::with_capacity(x_cols.len() + 1);
            if intercept {
                row.push(1.0);
            }
            for &c in &x_cols {
                row.push(field(c)?);
            }
            rows.push(row);
        }

        let mut names = Vec::new();
        if intercept {
            names.push("(Intercept)".to_string());
        }
        names.extend(covariates.iter().cloned());
        let q = names.len();
        let x = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
        Dataset::new(DVector::from_vec(y), x, names)
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// The same rows repeated twice (used for information-additivity checks).
    pub fn duplicated(&self) -> Dataset {
        let n = self.n();
        let y = DVector::from_fn(2 * n, |i, _| self.y[i % n]);
        let x = DMatrix::from_fn(2 * n, self.q(), |i, j| self.x[(i % n, j)]);
        Dataset {
            y,
            x,
            names: self.names.clone(),
        }
    }

    /// Returns a copy with the response replaced; the design is unchanged.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Dataset> {
        if y.len() != self.n() {
            return Err(TweedieError::InvalidInput("response length mismatch".into()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(TweedieError::InvalidInput(format!("non-finite response at row {i}")));
        }
        Ok(Dataset {
            y,
            x: self.x.clone(),
            names: self.names.clone(),
        })
    }
}

/// Numerical column rank via column-pivoted QR.
pub fn column_rank(x: &DMatrix<f64>) -> usize {
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let lead = diag.iter().cloned().fold(0.0, f64::max);
    if lead == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > RANK_TOL * lead).count()
}

/// Full parameter state: regression coefficients, log-dispersion and power.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub beta: DVector<f64>,
    pub delta: f64,
    pub power: f64,
}

impl ThetaVector {
    pub fn new(beta: DVector<f64>, delta: f64, power: f64) -> Self {
        ThetaVector { beta, delta, power }
    }

    pub fn from_slice(beta: &[f64], delta: f64, power: f64) -> Self {
        ThetaVector::new(DVector::from_column_slice(beta), delta, power)
    }

    pub fn phi(&self) -> f64 {
        self.delta.exp()
    }

    pub fn q(&self) -> usize {
        self.beta.len()
    }

    /// Stacked `(beta, delta, power)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let q = self.q();
        DVector::from_fn(q + 2, |i, _| match i {
            i if i < q => self.beta[i],
            i if i == q => self.delta,
            _ => self.power,
        })
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let q = v.len() - 2;
        ThetaVector {
            beta: v.rows(0, q).into_owned(),
            delta: v[q],
            power: v[q + 1],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|b| b.is_finite()) && self.delta.is_finite() && self.power.is_finite()
    }
}

/// Where a Tweedie distribution puts its mass, as a function of the power alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportClass {
    RealLine,
    NonNegativeWithMassAtZero,
    StrictlyPositive,
    ScaledCounts,
}

impl SupportClass {
    pub fn of_power(power: f64) -> SupportClass {
        if power == 1.0 {
            SupportClass::ScaledCounts
        } else if power > 1.0 && power < 2.0 {
            SupportClass::NonNegativeWithMassAtZero
        } else if power >= 2.0 {
            SupportClass::StrictlyPositive
        } else {
            // p = 0, p < 0 and the second-moment-only regime 0 < p < 1
            SupportClass::RealLine
        }
    }
}

/// Mean, dispersion and power of a single Tweedie variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TweedieParams {
    pub mu: f64,
    pub phi: f64,
    pub power: f64,
}

impl TweedieParams {
    pub fn new(mu: f64, phi: f64, power: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(TweedieError::InvalidInput(format!("mean must be positive, got {mu}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(TweedieError::InvalidInput(format!(
                "dispersion must be positive, got {phi}"
            )));
        }
        if !power.is_finite() {
            return Err(TweedieError::InvalidInput("power must be finite".into()));
        }
        Ok(TweedieParams { mu, phi, power })
    }

    pub fn variance(&self) -> f64 {
        self.phi * self.mu.powf(self.power)
    }

    pub fn support_class(&self) -> SupportClass {
        SupportClass::of_power(self.power)
    }

    /// Canonical parameter.
    pub fn psi(&self) -> f64 {
        let p = self.power;
        if p == 1.0 {
            self.mu.ln()
        } else {
            self.mu.powf(1.0 - p) / (1.0 - p)
        }
    }

    /// Cumulant function evaluated at the canonical parameter.
    pub fn kappa(&self) -> f64 {
        let p = self.power;
        if p == 2.0 {
            self.mu.ln()
        } else {
            self.mu.powf(2.0 - p) / (2.0 - p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mle,
    Qmle,
    Pmle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mle, Method::Qmle, Method::Pmle];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Mle => "MLE",
            Method::Qmle => "QMLE",
            Method::Pmle => "PMLE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Method {
    type Err = TweedieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mle" => Ok(Method::Mle),
            "qmle" => Ok(Method::Qmle),
            "pmle" => Ok(Method::Pmle),
            other => Err(TweedieError::InvalidInput(format!("unknown method '{other}'"))),
        }
    }
}

/// Outcome of any of the three fitters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: ThetaVector,
    /// `(Q+2) x (Q+2)` covariance of `(beta, delta, power)`; NaN where unavailable.
    pub vcov: DMatrix<f64>,
    /// Standard errors; `None` when the corresponding variance is not available.
    pub se: Vec<Option<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub method: Method,
    pub loglik: Option<f64>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn new(
        theta: ThetaVector,
        vcov: DMatrix<f64>,
        converged: bool,
        iterations: usize,
        method: Method,
    ) -> Self {
        let vcov = symmetrize(&vcov);
        let se = (0..vcov.nrows())
            .map(|j| {
                let v = vcov[(j, j)];
                (v.is_finite() && v > 0.0).then(|| v.sqrt())
            })
            .collect();
        FitResult {
            theta,
            vcov,
            se,
            converged,
            iterations,
            method,
            loglik: None,
            warnings: Vec::new(),
        }
    }

    pub fn estimates(&self) -> DVector<f64> {
        self.theta.to_vector()
    }
}

/// Iteration controls shared by the three fitters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Iteration cap; `None` selects the fitter's own default.
    pub max_iter: Option<usize>,
    /// Convergence threshold on the largest absolute parameter update.
    pub tol: f64,
    /// Maximum number of step halvings per update.
    pub max_halvings: usize,
    /// Hold the power at this value instead of estimating it.
    pub fixed_power: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: None,
            tol: 1e-6,
            max_halvings: 10,
            fixed_power: None,
        }
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of the log link.
pub fn linkinv(eta: f64) -> Result<f64> {
    if !eta.is_finite() {
        return Err(TweedieError::InvalidInput(format!("non-finite linear predictor {eta}")));
    }
    Ok(eta.exp())
}

/// Linear predictor `X beta` with the overflow guard applied.
pub fn linear_predictor(beta: &DVector<f64>, data: &Dataset) -> Result<DVector<f64>> {
    if beta.len() != data.q() {
        return Err(TweedieError::InvalidInput(format!(
            "beta has length {} but design has {} columns",
            beta.len(),
            data.q()
        )));
    }
    let eta = data.x() * beta;
    for (row, &e) in eta.iter().enumerate() {
        if !e.is_finite() || e.abs() > ETA_LIMIT {
            return Err(TweedieError::NumericOverflow { row, eta: e });
        }
    }
    Ok(eta)
}

/// `mu_i = exp(x_i' beta)` for every row.
pub fn mean_vector(theta: &ThetaVector, data: &Dataset) -> Result<DVector<f64>> {
    Ok(linear_predictor(&theta.beta, data)?.map(f64::exp))
}

/// Checks that the responses lie in the support implied by `power` for the given method.
///
/// Quasi- and pseudo-likelihood only use the first two moments, so any response
/// and any power is acceptable for them.
pub fn validate_support(power: f64, y: &[f64], method: Method) -> Result<()> {
    if !power.is_finite() {
        return Err(TweedieError::SupportViolation {
            index: 0,
            rule: "power must be finite".into(),
        });
    }
    if method != Method::Mle {
        return Ok(());
    }
    if power > 0.0 && power < 1.0 {
        return Err(TweedieError::SupportViolation {
            index: 0,
            rule: "p in (0,1) excluded: no Tweedie distribution exists there".into(),
        });
    }
    if power < 0.0 {
        return Err(TweedieError::SupportViolation {
            index: 0,
            rule: "p < 0 has no likelihood in this engine".into(),
        });
    }
    let bad = |pred: fn(f64) -> bool, rule: &str| -> Result<()> {
        match y.iter().position(|&v| pred(v)) {
            Some(index) => Err(TweedieError::SupportViolation {
                index,
                rule: rule.to_string(),
            }),
            None => Ok(()),
        }
    };
    match SupportClass::of_power(power) {
        SupportClass::RealLine => Ok(()),
        SupportClass::ScaledCounts => bad(|v| v < 0.0, "y >= 0 required for p = 1"),
        SupportClass::NonNegativeWithMassAtZero => bad(|v| v < 0.0, "y >= 0 required for 1 < p < 2"),
        SupportClass::StrictlyPositive => bad(|v| v <= 0.0, "y > 0 required for p >= 2"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn linkinv_values() {
        assert_eq!(linkinv(0.0).unwrap(), 1.0);
        assert!(approx(linkinv(2.0).unwrap(), 7.38905609893065, 1e-14));
        assert!(approx(linkinv(-1.0).unwrap(), 0.36787944117144233, 1e-14));
        assert!(matches!(linkinv(f64::NAN), Err(TweedieError::InvalidInput(_))));
    }

    #[test]
    fn mean_vector_examples() {
        let d = Dataset::from_rows(&[1.0, 2.0], &[vec![1.0], vec![1.0]], &["a"]).unwrap();
        let mu = mean_vector(&ThetaVector::from_slice(&[0.0], 0.0, 1.5), &d).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 1.0]);

        let d = Dataset::from_rows(
            &[1.0, 1.0],
            &[vec![1.0, 1.0], vec![1.0, -1.0]],
            &["a", "b"],
        )
        .unwrap();
        let mu = mean_vector(&ThetaVector::from_slice(&[2.0, 0.8], 0.0, 1.5), &d).unwrap();
        assert!(approx(mu[0], 16.444646771097048, 1e-14));

        let d = Dataset::from_rows(
            &[1.0, 1.0, 1.0, 1.0],
            &[
                vec![1.0, -1.0, 1.0],
                vec![1.0, 0.0, 0.0],
                vec![1.0, 1.0, 0.0],
                vec![1.0, 0.5, 1.0],
            ],
            &["a", "b", "c"],
        )
        .unwrap();
        let mu = mean_vector(&ThetaVector::from_slice(&[2.0, 0.8, -1.5], 0.0, 1.5), &d).unwrap();
        assert!(approx(mu[0], 0.740818220681718, 1e-14));
    }

    #[test]
    fn mean_vector_overflow_reports_row() {
        let d = Dataset::from_rows(&[1.0, 1.0], &[vec![1.0], vec![1.0]], &["a"]).unwrap();
        let err = mean_vector(&ThetaVector::from_slice(&[701.0], 0.0, 1.5), &d).unwrap_err();
        assert!(matches!(err, TweedieError::NumericOverflow { row: 0, .. }));
    }

    #[test]
    fn dataset_rejects_rank_deficiency_and_nan() {
        let err = Dataset::from_rows(
            &[1.0, 2.0, 3.0],
            &[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]],
            &["a", "b"],
        );
        assert!(err.is_err());
        let err = Dataset::from_rows(&[f64::NAN], &[vec![1.0]], &["a"]);
        assert!(err.is_err());
        let err = Dataset::from_rows(&[1.0], &[vec![1.0, 2.0]], &["a", "b"]);
        assert!(err.is_err());
    }

    #[test]
    fn support_rules() {
        assert!(matches!(
            validate_support(1.5, &[1.0, -0.1], Method::Mle),
            Err(TweedieError::SupportViolation { index: 1, .. })
        ));
        assert!(validate_support(0.5, &[1.0], Method::Mle).is_err());
        assert!(validate_support(0.435, &[1.0, -3.0], Method::Qmle).is_ok());
        assert!(validate_support(-2.0, &[-1.0], Method::Pmle).is_ok());
        assert!(validate_support(2.0, &[0.0], Method::Mle).is_err());
        assert!(validate_support(1.5, &[0.0, 2.0], Method::Mle).is_ok());
        assert!(validate_support(0.0, &[-5.0], Method::Mle).is_ok());
    }

    #[test]
    fn gaussian_variance_ignores_mean() {
        let a = TweedieParams::new(0.5, 2.0, 0.0).unwrap();
        let b = TweedieParams::new(50.0, 2.0, 0.0).unwrap();
        assert_eq!(a.variance(), b.variance());
    }

    #[test]
    fn canonical_quantities() {
        let t = TweedieParams::new(2.0, 1.0, 1.5).unwrap();
        assert!(approx(t.psi(), 2.0f64.powf(-0.5) / -0.5, 1e-15));
        assert!(approx(t.kappa(), 2.0f64.sqrt() / 0.5, 1e-15));
        assert_eq!(TweedieParams::new(2.0, 1.0, 1.0).unwrap().psi(), 2.0f64.ln());
        assert_eq!(TweedieParams::new(2.0, 1.0, 2.0).unwrap().kappa(), 2.0f64.ln());
    }

    proptest! {
        #[test]
        fn support_class_is_total(p in -10.0f64..10.0) {
            let c = SupportClass::of_power(p);
            let expected = if p == 1.0 {
                SupportClass::ScaledCounts
            } else if p > 1.0 && p < 2.0 {
                SupportClass::NonNegativeWithMassAtZero
            } else if p >= 2.0 {
                SupportClass::StrictlyPositive
            } else {
                SupportClass::RealLine
            };
            prop_assert_eq!(c, expected);
        }

        #[test]
        fn mean_vector_permutation_equivariant(
            rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 3..12),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            shift in 0usize..11,
        ) {
            let n = rows.len();
            let x: Vec<Vec<f64>> = rows.iter().map(|&(a, c)| vec![1.0, a, c]).collect();
            let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let Ok(d) = Dataset::from_rows(&y, &x, &["i", "a", "c"]) else { return Ok(()); };
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let dp = Dataset::from_rows(&yp, &xp, &["i", "a", "c"]).unwrap();
            let theta = ThetaVector::from_slice(&b, 0.0, 1.5);
            let mu = mean_vector(&theta, &d).unwrap();
            let mup = mean_vector(&theta, &dp).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((mup[k] - mu[i]).abs() <= 1e-12 * mu[i]);
            }
        }
    }
}

//! Optimisation and differentiation kernels shared by the fitters: a
//! Nelder–Mead simplex minimiser, Richardson-extrapolated central
//! differences, and condition-checked dense linear solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TweedieError};

/// Systems whose 2-norm condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Evaluation budget; `None` means `500 * dim`.
    pub max_evals: Option<usize>,
    /// Convergence threshold on `f(worst) - f(best)`.
    pub f_tol: f64,
    /// Convergence threshold on the largest vertex distance from the best vertex.
    pub x_tol: f64,
    /// Initial vertices are `x0 + step_scale * (|x0_j| + step_offset) * e_j`.
    pub step_scale: f64,
    pub step_offset: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: None,
            f_tol: 1e-8,
            x_tol: 1e-6,
            step_scale: 0.05,
            step_offset: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerTrace {
    pub iterations: usize,
    pub evaluations: usize,
    pub best_value: f64,
    pub simplex_spread: f64,
    pub converged: bool,
}

/// Minimises `f` from `x0` with the Nelder–Mead simplex method.
///
/// Non-finite values away from `x0` are treated as `+inf`, so an objective can
/// reject infeasible points by returning infinity. When the evaluation budget is
/// exhausted the best vertex is returned with `converged = false`.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> Result<(Vec<f64>, OptimizerTrace)>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(TweedieError::InvalidInput("nelder_mead: empty starting point".into()));
    }
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(TweedieError::NonFiniteObjective);
    }
    let max_evals = opts.max_evals.unwrap_or(500 * n);
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut evals = 1usize;
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    let mut values = vec![f0];
    for j in 0..n {
        let mut v = x0.to_vec();
        v[j] += opts.step_scale * (x0[j].abs() + opts.step_offset);
        values.push(eval(&v, &mut evals));
        simplex.push(v);
    }

    let spread = |simplex: &[Vec<f64>]| {
        simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    };

    let mut iterations = 0usize;
    loop {
        // stable sort keeps the result deterministic under ties
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let x_spread = spread(&simplex);
        let f_spread = values[n] - values[0];
        if f_spread < opts.f_tol && x_spread < opts.x_tol {
            return Ok((
                simplex[0].clone(),
                OptimizerTrace {
                    iterations,
                    evaluations: evals,
                    best_value: values[0],
                    simplex_spread: x_spread,
                    converged: true,
                },
            ));
        }
        if evals >= max_evals {
            return Ok((
                simplex[0].clone(),
                OptimizerTrace {
                    iterations,
                    evaluations: evals,
                    best_value: values[0],
                    simplex_spread: x_spread,
                    converged: false,
                },
            ));
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=n {
            let v: Vec<f64> = simplex[i]
                .iter()
                .zip(&simplex[0])
                .map(|(x, b)| b + 0.5 * (x - b))
                .collect();
            values[i] = eval(&v, &mut evals);
            simplex[i] = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichardsonOptions {
    /// Number of step sizes in the extrapolation table.
    pub levels: usize,
    /// Initial step is `step_scale * (|x_j| + step_offset)` unless overridden.
    pub step_scale: f64,
    pub step_offset: f64,
    /// Ratio between successive step sizes.
    pub ratio: f64,
    /// Per-coordinate initial steps overriding the default rule.
    pub steps: Option<Vec<f64>>,
}

impl Default for RichardsonOptions {
    fn default() -> Self {
        RichardsonOptions {
            levels: 4,
            step_scale: 1e-2,
            step_offset: 1e-4,
            ratio: 2.0,
            steps: None,
        }
    }
}

impl RichardsonOptions {
    pub fn initial_step(&self, x: &[f64], j: usize) -> f64 {
        match &self.steps {
            Some(s) => s[j],
            None => self.step_scale * (x[j].abs() + self.step_offset),
        }
    }
}

/// Extrapolates estimates taken at steps `h, h/r, h/r^2, ...` whose error is a series in `h^2`.
fn extrapolate(mut table: Vec<f64>, ratio: f64) -> f64 {
    let r2 = ratio * ratio;
    let mut factor = r2;
    for level in 1..table.len() {
        for m in 0..table.len() - level {
            table[m] = (factor * table[m + 1] - table[m]) / (factor - 1.0);
        }
        factor *= r2;
    }
    table[0]
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TweedieError::NonFiniteObjective)
    }
}

/// Richardson-extrapolated central-difference gradient of a fallible objective.
pub fn try_richardson_gradient<F>(mut f: F, x: &[f64], opts: &RichardsonOptions) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h0 = opts.initial_step(x, j);
        let mut table = Vec::with_capacity(opts.levels);
        let mut h = h0;
        for _ in 0..opts.levels {
            probe[j] = x[j] + h;
            let up = checked(f(&probe)?)?;
            probe[j] = x[j] - h;
            let down = checked(f(&probe)?)?;
            probe[j] = x[j];
            table.push((up - down) / (2.0 * h));
            h /= opts.ratio;
        }
        grad.push(extrapolate(table, opts.ratio));
    }
    Ok(grad)
}

/// Richardson-extrapolated Hessian of a fallible objective, symmetrised.
pub fn try_richardson_hessian<F>(mut f: F, x: &[f64], opts: &RichardsonOptions) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = x.len();
    let f0 = checked(f(x)?)?;
    let mut hess = DMatrix::zeros(d, d);
    let mut probe = x.to_vec();
    for i in 0..d {
        let hi0 = opts.initial_step(x, i);
        let mut table = Vec::with_capacity(opts.levels);
        let mut h = hi0;
        for _ in 0..opts.levels {
            probe[i] = x[i] + h;
            let up = checked(f(&probe)?)?;
            probe[i] = x[i] - h;
            let down = checked(f(&probe)?)?;
            probe[i] = x[i];
            table.push((up - 2.0 * f0 + down) / (h * h));
            h /= opts.ratio;
        }
        hess[(i, i)] = extrapolate(table, opts.ratio);

        for j in 0..i {
            let hj0 = opts.initial_step(x, j);
            let mut table = Vec::with_capacity(opts.levels);
            let (mut hi, mut hj) = (hi0, hj0);
            for _ in 0..opts.levels {
                let mut corner = |si: f64, sj: f64, probe: &mut Vec<f64>| -> Result<f64> {
                    probe[i] = x[i] + si * hi;
                    probe[j] = x[j] + sj * hj;
                    let v = checked(f(probe)?);
                    probe[i] = x[i];
                    probe[j] = x[j];
                    v
                };
                let pp = corner(1.0, 1.0, &mut probe)?;
                let pm = corner(1.0, -1.0, &mut probe)?;
                let mp = corner(-1.0, 1.0, &mut probe)?;
                let mm = corner(-1.0, -1.0, &mut probe)?;
                table.push((pp - pm - mp + mm) / (4.0 * hi * hj));
                hi /= opts.ratio;
                hj /= opts.ratio;
            }
            let v = extrapolate(table, opts.ratio);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Richardson gradient of a plain objective; non-finite probes are an error.
pub fn richardson_gradient<F>(f: F, x: &[f64], opts: &RichardsonOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    try_richardson_gradient(|v| Ok(f(v)), x, opts)
}

/// Richardson Hessian of a plain objective; non-finite probes are an error.
pub fn richardson_hessian<F>(f: F, x: &[f64], opts: &RichardsonOptions) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    try_richardson_hessian(|v| Ok(f(v)), x, opts)
}

/// Ratio of the extreme singular values (infinite for singular matrices).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_conditioning(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(TweedieError::InvalidInput(format!("{what}: matrix is not square")));
    }
    let cond = condition_number(a);
    if !(cond <= MAX_CONDITION) {
        return Err(TweedieError::IllConditioned(format!(
            "{what}: condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"
        )));
    }
    Ok(())
}

/// Solves `a x = b` by partially pivoted LU after a conditioning check.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    check_conditioning(a, "solve")?;
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| TweedieError::IllConditioned("solve: singular matrix".into()))
}

/// Inverse by partially pivoted LU after a conditioning check.
pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_conditioning(a, "inverse")?;
    a.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| TweedieError::IllConditioned("inverse: singular matrix".into()))
}

/// True when the symmetric matrix admits a Cholesky factorisation.
pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite()) && a.clone().cholesky().is_some()
}

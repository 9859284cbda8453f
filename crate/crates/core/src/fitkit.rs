//! Small-dimensional nonlinear least squares and goodness-of-fit metrics.
//!
//! The solver is a bound-projected Levenberg–Marquardt iteration with a
//! central-difference Jacobian. It is written for models with three or four
//! parameters and a few thousand observations at most.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub residual_sum_squares: f64,
    /// `None` when the observations have zero variance.
    pub r_squared: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    /// Retry from perturbed starts when the first run does not converge or
    /// explains less than half the variance.
    pub multistart: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-10,
            multistart: true,
        }
    }
}

const MULTISTART_COUNT: usize = 8;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e16;

pub fn nls_fit<F>(
    model: F,
    xs: &[f64],
    ys: &[f64],
    init: &[f64],
    bounds: Option<&[(f64, f64)]>,
) -> Result<FitResult>
where
    F: Fn(&[f64], f64) -> f64,
{
    nls_fit_with(model, xs, ys, init, bounds, &FitOptions::default())
}

pub fn nls_fit_with<F>(
    model: F,
    xs: &[f64],
    ys: &[f64],
    init: &[f64],
    bounds: Option<&[(f64, f64)]>,
    options: &FitOptions,
) -> Result<FitResult>
where
    F: Fn(&[f64], f64) -> f64,
{
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < init.len() || init.is_empty() {
        return Err(Error::InsufficientData {
            what: "nonlinear least squares",
            needed: init.len().max(1),
            got: xs.len(),
        });
    }
    if let Some(b) = bounds {
        if b.len() != init.len() {
            return Err(Error::ShapeMismatch {
                left: b.len(),
                right: init.len(),
            });
        }
    }
    if init.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial parameters must be finite: {init:?}"
        )));
    }
    if let Some(b) = bounds {
        for (j, (&p, &(lo, hi))) in init.iter().zip(b).enumerate() {
            if p < lo || p > hi {
                return Err(Error::InvalidArgument(format!(
                    "initial parameter {j} = {p} outside bounds [{lo}, {hi}]"
                )));
            }
        }
    }

    let problem = Problem {
        model: &model,
        xs,
        ys,
        bounds,
    };
    let mut best = problem.levenberg_marquardt(init, options)?;

    let needs_retry = !best.converged || best.r_squared.is_some_and(|r2| r2 < 0.5);
    if options.multistart && needs_retry {
        for k in 0..MULTISTART_COUNT {
            let start = problem.project(&perturbed_start(init, k));
            match problem.levenberg_marquardt(&start, options) {
                Ok(candidate) => {
                    if candidate.residual_sum_squares < best.residual_sum_squares {
                        best = candidate;
                    }
                }
                Err(Error::NonFiniteModel { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(best)
}

/// Deterministic ±50% perturbation pattern; start `k` flips the sign of
/// parameter `j` according to bit `j mod 3` of `k`.
fn perturbed_start(init: &[f64], k: usize) -> Vec<f64> {
    init.iter()
        .enumerate()
        .map(|(j, &p)| {
            let mut sign = if (k >> (j % 3)) & 1 == 1 { 1.0 } else { -1.0 };
            if (j / 3) % 2 == 1 {
                sign = -sign;
            }
            p + sign * 0.5 * p.abs().max(1e-3)
        })
        .collect()
}

struct Problem<'a, F> {
    model: &'a F,
    xs: &'a [f64],
    ys: &'a [f64],
    bounds: Option<&'a [(f64, f64)]>,
}

impl<F> Problem<'_, F>
where
    F: Fn(&[f64], f64) -> f64,
{
    fn project(&self, p: &[f64]) -> Vec<f64> {
        match self.bounds {
            None => p.to_vec(),
            Some(b) => p
                .iter()
                .zip(b)
                .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
                .collect(),
        }
    }

    /// Sum of squared residuals, or `None` if the model is non-finite anywhere.
    fn cost(&self, p: &[f64]) -> Option<f64> {
        let mut sum = 0.0;
        for (&x, &y) in self.xs.iter().zip(self.ys) {
            let f = (self.model)(p, x);
            if !f.is_finite() {
                return None;
            }
            let r = y - f;
            sum += r * r;
        }
        Some(sum)
    }

    fn jacobian(&self, p: &[f64]) -> Option<DMatrix<f64>> {
        let n = self.xs.len();
        let m = p.len();
        let mut jac = DMatrix::<f64>::zeros(n, m);
        let mut hi = p.to_vec();
        let mut lo = p.to_vec();
        for j in 0..m {
            let h = 1e-6 * p[j].abs().max(1.0);
            let (lo_b, hi_b) = self
                .bounds
                .map(|b| b[j])
                .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            let up = (p[j] + h).min(hi_b);
            let down = (p[j] - h).max(lo_b);
            if up <= down {
                continue;
            }
            hi[j] = up;
            lo[j] = down;
            let denom = up - down;
            for (i, &x) in self.xs.iter().enumerate() {
                let d = ((self.model)(&hi, x) - (self.model)(&lo, x)) / denom;
                if !d.is_finite() {
                    return None;
                }
                jac[(i, j)] = d;
            }
            hi[j] = p[j];
            lo[j] = p[j];
        }
        Some(jac)
    }

    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.xs.len(),
            self.xs
                .iter()
                .zip(self.ys)
                .map(|(&x, &y)| y - (self.model)(p, x)),
        )
    }

    fn levenberg_marquardt(&self, init: &[f64], options: &FitOptions) -> Result<FitResult> {
        let mut p = init.to_vec();
        let mut cost = self.cost(&p).ok_or_else(|| Error::NonFiniteModel {
            params: p.clone(),
        })?;
        let mut lambda = LAMBDA_INIT;
        let mut converged = false;
        let mut iterations = 0;

        'outer: while iterations < options.max_iterations {
            iterations += 1;
            if cost == 0.0 {
                converged = true;
                break;
            }
            let Some(jac) = self.jacobian(&p) else {
                return Err(Error::NonFiniteModel { params: p });
            };
            let jt = jac.transpose();
            let normal = &jt * &jac;
            let grad = &jt * self.residuals(&p);
            let max_diag = normal.diagonal().max();
            let floor = if max_diag > 0.0 { 1e-12 * max_diag } else { 1.0 };
            let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();

            loop {
                let mut damped = normal.clone();
                for j in 0..p.len() {
                    damped[(j, j)] += lambda * normal[(j, j)].max(floor);
                }
                let trial = damped.cholesky().map(|c| c.solve(&grad)).map(|delta| {
                    let raw: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                    self.project(&raw)
                });
                let Some(trial) = trial else {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        break 'outer;
                    }
                    continue;
                };
                let step = trial
                    .iter()
                    .zip(&p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let rel_step = step / (p_norm + 1e-12);
                match self.cost(&trial) {
                    Some(trial_cost) if trial_cost < cost => {
                        let rel_decrease = (cost - trial_cost) / cost;
                        p = trial;
                        cost = trial_cost;
                        lambda = (lambda / 10.0).max(LAMBDA_MIN);
                        if rel_decrease < options.cost_tolerance
                            && rel_step < options.step_tolerance
                        {
                            converged = true;
                            break 'outer;
                        }
                        continue 'outer;
                    }
                    _ => {
                        if rel_step < options.step_tolerance {
                            // No admissible decrease left at machine resolution.
                            converged = true;
                            break 'outer;
                        }
                        lambda *= 10.0;
                        if lambda > LAMBDA_MAX {
                            break 'outer;
                        }
                    }
                }
            }
        }

        let fitted: Vec<f64> = self.xs.iter().map(|&x| (self.model)(&p, x)).collect();
        let r2 = match r_squared(self.ys, &fitted) {
            Ok(v) => Some(v),
            Err(Error::DegenerateVariance) => None,
            Err(e) => return Err(e),
        };
        Ok(FitResult {
            params: p,
            residual_sum_squares: cost,
            r_squared: r2,
            converged,
            iterations,
        })
    }
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(ys: &[f64], fs: &[f64]) -> Result<f64> {
    if ys.len() != fs.len() {
        return Err(Error::ShapeMismatch {
            left: ys.len(),
            right: fs.len(),
        });
    }
    if ys.len() < 2 {
        return Err(Error::InsufficientData {
            what: "R²",
            needed: 2,
            got: ys.len(),
        });
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    let ss_res: f64 = ys.iter().zip(fs).map(|(y, f)| (y - f) * (y - f)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mse(ys: &[f64], fs: &[f64]) -> Result<f64> {
    if ys.len() != fs.len() {
        return Err(Error::ShapeMismatch {
            left: ys.len(),
            right: fs.len(),
        });
    }
    if ys.is_empty() {
        return Err(Error::InsufficientData {
            what: "MSE",
            needed: 1,
            got: 0,
        });
    }
    Ok(ys.iter().zip(fs).map(|(y, f)| (y - f) * (y - f)).sum::<f64>() / ys.len() as f64)
}

/// Ordinary least squares for `y = slope * g + intercept`. Returns `None`
/// when `g` is constant.
pub(crate) fn simple_regression(g: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = g.len() as f64;
    let gm = g.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sgg: f64 = g.iter().map(|v| (v - gm) * (v - gm)).sum();
    if sgg <= f64::EPSILON * gm.abs().max(1.0) * n {
        return None;
    }
    let sgy: f64 = g.iter().zip(ys).map(|(a, b)| (a - gm) * (b - ym)).sum();
    let slope = sgy / sgg;
    Some((slope, ym - slope * gm))
}

pub(crate) fn sum_squares(ys: &[f64], fs: impl Iterator<Item = f64>) -> f64 {
    ys.iter().zip(fs).map(|(y, f)| (y - f) * (y - f)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(p: &[f64], x: f64) -> f64 {
        p[0] * x + p[1]
    }

    #[test]
    fn fits_exact_line() {
        let fit = nls_fit(linear, &[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0], &[0.0, 0.0], None).unwrap();
        assert!((fit.params[0] - 2.0).abs() < 1e-9);
        assert!((fit.params[1] - 1.0).abs() < 1e-9);
        assert!((fit.r_squared.unwrap() - 1.0).abs() < 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn fits_constant_data() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let fit = nls_fit(linear, &xs, &[5.0; 4], &[0.0, 0.0], None).unwrap();
        assert!(fit.params[0].abs() < 1e-9);
        assert!((fit.params[1] - 5.0).abs() < 1e-9);
        assert_eq!(fit.r_squared, None);
    }

    #[test]
    fn insufficient_points() {
        let err = nls_fit(linear, &[1.0], &[1.0], &[0.0, 0.0], None).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn non_finite_initial_model() {
        let model = |p: &[f64], x: f64| (p[0] * x).ln();
        let err = nls_fit(model, &[1.0, 2.0], &[0.0, 1.0], &[-1.0], None).unwrap_err();
        match err {
            Error::NonFiniteModel { params } => assert_eq!(params, vec![-1.0]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn init_outside_bounds_rejected() {
        let err = nls_fit(
            linear,
            &[0.0, 1.0],
            &[0.0, 1.0],
            &[2.0, 0.0],
            Some(&[(0.0, 1.0), (-1.0, 1.0)]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn bounds_are_respected() {
        // Unconstrained optimum has slope 2; the bound caps it at 1.
        let fit = nls_fit(
            linear,
            &[0.0, 1.0, 2.0],
            &[1.0, 3.0, 5.0],
            &[0.0, 0.0],
            Some(&[(-1.0, 1.0), (-10.0, 10.0)]),
        )
        .unwrap();
        assert!(fit.params[0] <= 1.0);
        assert!((fit.params[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn never_worse_than_init() {
        let model = |p: &[f64], x: f64| p[0] * (p[1] * x).sin();
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * (1.7 * x).sin()).collect();
        for init in [[1.0, 1.0], [3.0, 0.2], [0.1, 5.0]] {
            let start = sum_squares(&ys, xs.iter().map(|&x| model(&init, x)));
            let fit = nls_fit(model, &xs, &ys, &init, None).unwrap();
            assert!(fit.residual_sum_squares <= start);
        }
    }

    #[test]
    fn deterministic() {
        let model = |p: &[f64], x: f64| p[0] / (1.0 + p[1] * x) + p[2];
        let xs: Vec<f64> = (1..200).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| model(&[3.0, 0.05, 1.0], *x)).collect();
        let a = nls_fit(model, &xs, &ys, &[1.0, 0.01, 0.5], None).unwrap();
        let b = nls_fit(model, &xs, &ys, &[1.0, 0.01, 0.5], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert!(matches!(
            r_squared(&[2.0, 2.0], &[1.0, 3.0]),
            Err(Error::DegenerateVariance)
        ));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(mse(&[0.0; 3], &[1.0; 3]).unwrap(), 1.0);
        assert!(mse(&[], &[]).is_err());
    }
}

//! Whole-curve fits of mean loss against tokens trained.
//!
//! - power law: `(p1·N)^p2 + p3`
//! - reciprocal: `a0 / (1 + a1·N) + a2`
//! - logarithmic: `ln(a1 + a2·N) + a3`
//!
//! The logarithmic form has a scale redundancy between `(a1, a2)` and `a3`;
//! fits report it with `a1 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitkit::{self, simple_regression, sum_squares};
use crate::predictor::{LossForecast, Provenance};
use crate::temporal::fit_reciprocal_points;

pub const MIN_BASELINE_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    PowerLaw,
    Reciprocal,
    Logarithmic,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::PowerLaw,
        BaselineKind::Reciprocal,
        BaselineKind::Logarithmic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::PowerLaw => "power_law",
            BaselineKind::Reciprocal => "reciprocal",
            BaselineKind::Logarithmic => "logarithmic",
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub params: [f64; 3],
    pub r_squared: f64,
    /// Largest token count used in the fit.
    pub fit_max_tokens: u64,
}

impl BaselineModel {
    pub fn new(kind: BaselineKind, params: [f64; 3]) -> Self {
        Self {
            kind,
            params,
            r_squared: f64::NAN,
            fit_max_tokens: 0,
        }
    }
}

pub fn eval_baseline(m: &BaselineModel, n: f64) -> Result<f64> {
    if n.is_nan() || n <= 0.0 {
        return Err(Error::Domain {
            what: "baseline (N must be positive)",
            tokens: n,
        });
    }
    let [a, b, c] = m.params;
    match m.kind {
        BaselineKind::PowerLaw => {
            if a * n <= 0.0 {
                return Err(Error::Domain {
                    what: "power law (p1·N must be positive)",
                    tokens: n,
                });
            }
            Ok((a * n).powf(b) + c)
        }
        BaselineKind::Reciprocal => Ok(a / (1.0 + b * n) + c),
        BaselineKind::Logarithmic => {
            let arg = a + b * n;
            if arg <= 0.0 {
                return Err(Error::Domain {
                    what: "logarithmic (a1 + a2·N must be positive)",
                    tokens: n,
                });
            }
            Ok(arg.ln() + c)
        }
    }
}

fn better(a: fitkit::FitResult, b: Option<fitkit::FitResult>) -> fitkit::FitResult {
    match b {
        Some(b) if b.residual_sum_squares < a.residual_sum_squares => b,
        _ => a,
    }
}

/// `N` is rescaled by the first token count inside the solver, so the
/// default start `p1 = 1/N_first` is `1` there. A second start comes from a
/// scan over the exponent with the coefficient and offset solved linearly.
fn fit_power_law(tokens: &[f64], ys: &[f64]) -> Result<[f64; 3]> {
    let scale = tokens[0];
    let xs: Vec<f64> = tokens.iter().map(|t| t / scale).collect();
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let model = |p: &[f64], x: f64| (p[0] * x).powf(p[1]) + p[2];
    let bounds = [
        (1e-300, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
    ];
    let default = fitkit::nls_fit(model, &xs, ys, &[1.0, -0.5, y_min], Some(&bounds))?;

    let mut scan: Option<([f64; 3], f64)> = None;
    for k in 1..=60 {
        let p2 = -0.05 * k as f64;
        let g: Vec<f64> = xs.iter().map(|x| x.powf(p2)).collect();
        if let Some((coef, offset)) = simple_regression(&g, ys) {
            if coef > 0.0 {
                let sse = sum_squares(ys, g.iter().map(|v| coef * v + offset));
                if scan.is_none_or(|(_, best)| sse < best) {
                    scan = Some(([coef.powf(1.0 / p2), p2, offset], sse));
                }
            }
        }
    }
    let alt = scan
        .filter(|(p, _)| p.iter().all(|v| v.is_finite()) && p[0] > 0.0)
        .and_then(|(p, _)| fitkit::nls_fit(model, &xs, ys, &p, Some(&bounds)).ok());
    let fit = better(default, alt);
    Ok([fit.params[0] / scale, fit.params[1], fit.params[2]])
}

/// Fitted as `ln(1 + b·x) + a3` with `x = N / N_max`, starting from a scan
/// over the decreasing branch `b ∈ (−1, 0)` and a few increasing values.
fn fit_logarithmic(tokens: &[f64], ys: &[f64]) -> Result<[f64; 3]> {
    let scale = tokens.iter().cloned().fold(0.0, f64::max);
    let xs: Vec<f64> = tokens.iter().map(|t| t / scale).collect();
    let b_min = -(1.0 - 1e-9);
    let mut candidates: Vec<f64> = (1..=12).map(|k| -(1.0 - 10f64.powi(-k))).collect();
    candidates.extend((1..=9).map(|k| -0.1 * k as f64));
    candidates.extend([0.0, 0.1, 1.0, 10.0]);
    let (mut start, mut best) = ([0.0, 0.0], f64::INFINITY);
    for b in candidates {
        let shifted: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - (1.0 + b * x).ln()).collect();
        let a3 = shifted.iter().sum::<f64>() / shifted.len() as f64;
        let sse = sum_squares(ys, xs.iter().map(|x| (1.0 + b * x).ln() + a3));
        if sse < best {
            best = sse;
            start = [b, a3];
        }
    }
    let model = |p: &[f64], x: f64| (1.0 + p[0] * x).ln() + p[1];
    let bounds = [(b_min, f64::INFINITY), (f64::NEG_INFINITY, f64::INFINITY)];
    let fit = fitkit::nls_fit(model, &xs, ys, &start, Some(&bounds))?;
    Ok([1.0, fit.params[0] / scale, fit.params[1]])
}

/// Least-squares fit of one baseline form to a mean-loss curve.
pub fn fit_baseline(kind: BaselineKind, tokens: &[f64], mean_losses: &[f64]) -> Result<BaselineModel> {
    if tokens.len() != mean_losses.len() {
        return Err(Error::ShapeMismatch {
            left: tokens.len(),
            right: mean_losses.len(),
        });
    }
    if tokens.len() < MIN_BASELINE_POINTS {
        return Err(Error::InsufficientData {
            what: "baseline fit (points)",
            needed: MIN_BASELINE_POINTS,
            got: tokens.len(),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t.is_nan() || t <= 0.0) {
        return Err(Error::Domain {
            what: "baseline fit (N must be positive)",
            tokens: t,
        });
    }
    let params = match kind {
        BaselineKind::PowerLaw => fit_power_law(tokens, mean_losses)?,
        BaselineKind::Reciprocal => fit_reciprocal_points(tokens, mean_losses)?.params,
        BaselineKind::Logarithmic => fit_logarithmic(tokens, mean_losses)?,
    };
    let mut model = BaselineModel {
        kind,
        params,
        r_squared: f64::NAN,
        fit_max_tokens: tokens.iter().cloned().fold(0.0, f64::max) as u64,
    };
    let fitted = tokens
        .iter()
        .map(|&t| eval_baseline(&model, t))
        .collect::<Result<Vec<_>>>()?;
    model.r_squared = fitkit::r_squared(mean_losses, &fitted)?;
    Ok(model)
}

/// Baseline values on `grid`; points past the fitted range are marked
/// extrapolated.
pub fn forecast_baseline(m: &BaselineModel, grid: &[u64]) -> Result<LossForecast> {
    let values = grid
        .iter()
        .map(|&n| eval_baseline(m, n as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossForecast {
        tokens: grid.to_vec(),
        predicted_mean_loss: values,
        provenance: grid
            .iter()
            .map(|&n| {
                if n <= m.fit_max_tokens {
                    Provenance::Fitted
                } else {
                    Provenance::Extrapolated
                }
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens() -> Vec<f64> {
        (1..=60).map(|k| k as f64 * 5e6).collect()
    }

    #[test]
    fn eval_examples() {
        let pl = BaselineModel::new(BaselineKind::PowerLaw, [1.0, 1.0, 0.0]);
        assert_eq!(eval_baseline(&pl, 5.0).unwrap(), 5.0);
        let rc = BaselineModel::new(BaselineKind::Reciprocal, [1.0, 0.0, 0.0]);
        for n in [1.0, 1e3, 1e9] {
            assert_eq!(eval_baseline(&rc, n).unwrap(), 1.0);
        }
        let lg = BaselineModel::new(BaselineKind::Logarithmic, [1.0, 0.0, 2.0]);
        for n in [1.0, 1e3, 1e9] {
            assert_eq!(eval_baseline(&lg, n).unwrap(), 2.0);
        }
    }

    #[test]
    fn domain_violations() {
        let pl = BaselineModel::new(BaselineKind::PowerLaw, [-1.0, 0.5, 0.0]);
        assert!(matches!(eval_baseline(&pl, 3.0), Err(Error::Domain { .. })));
        let lg = BaselineModel::new(BaselineKind::Logarithmic, [1.0, -0.1, 0.0]);
        assert!(matches!(eval_baseline(&lg, 20.0), Err(Error::Domain { .. })));
        assert!(forecast_baseline(&lg, &[1, 5, 20]).is_err());
        let rc = BaselineModel::new(BaselineKind::Reciprocal, [1.0, 0.0, 0.0]);
        assert!(eval_baseline(&rc, 0.0).is_err());
    }

    #[test]
    fn reciprocal_recovery() {
        let t = tokens();
        let ys: Vec<f64> = t.iter().map(|n| 2.0 / (1.0 + 1e-9 * n) + 1.5).collect();
        let m = fit_baseline(BaselineKind::Reciprocal, &t, &ys).unwrap();
        for (g, w) in m.params.iter().zip([2.0, 1e-9, 1.5]) {
            assert!(((g - w) / w).abs() < 1e-5, "{:?}", m.params);
        }
    }

    #[test]
    fn power_law_recovery() {
        let t = tokens();
        let ys: Vec<f64> = t.iter().map(|n| (2e-7 * n).powf(-0.4) + 1.8).collect();
        let m = fit_baseline(BaselineKind::PowerLaw, &t, &ys).unwrap();
        for (g, w) in m.params.iter().zip([2e-7, -0.4, 1.8]) {
            assert!(((g - w) / w).abs() < 1e-5, "{:?}", m.params);
        }
    }

    #[test]
    fn logarithmic_recovery() {
        let t = tokens();
        let ys: Vec<f64> = t.iter().map(|n| (1.0 - 2e-9 * n).ln() + 3.0).collect();
        let m = fit_baseline(BaselineKind::Logarithmic, &t, &ys).unwrap();
        assert!((m.params[1] / -2e-9 - 1.0).abs() < 1e-5, "{:?}", m.params);
        assert!((m.params[2] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let t = tokens();
        let ys = vec![2.5; t.len()];
        for kind in BaselineKind::ALL {
            assert!(matches!(
                fit_baseline(kind, &t, &ys),
                Err(Error::DegenerateVariance)
            ));
        }
    }

    #[test]
    fn too_few_points() {
        let err = fit_baseline(BaselineKind::Reciprocal, &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert!(matches!(err, Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn zero_rate_reciprocal_is_flat() {
        let m = BaselineModel::new(BaselineKind::Reciprocal, [0.7, 0.0, 1.1]);
        let fc = forecast_baseline(&m, &[1, 10, 100, 1000]).unwrap();
        assert!(fc.predicted_mean_loss.iter().all(|&v| v == 1.8));
        assert!(fc.provenance.iter().all(|p| *p == Provenance::Extrapolated));
    }
}

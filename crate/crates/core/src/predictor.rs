//! Extrapolation of a run's loss curve from a training prefix.
//!
//! `a0`/`a1` curves are fitted on the prefix and extended to locate the
//! separation point. The logarithmic `a2` branch is fitted on the prefix
//! before it. The cosine tail has the schedule's phase, and its amplitude
//! and offset are solved from value and slope continuity at the estimated
//! separation point. When the prefix already extends past that point, the
//! tail is calibrated with two additive offsets fitted on the post-separation
//! prefix points.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitkit;
use crate::hyperbolic::{self, HyperbolicParams};
use crate::loss_log::{RunManifest, Trajectory};
use crate::temporal::{
    self, eval_cosine, eval_loglog, CurveFit, FitQuality, ParamSeries, SeparationThreshold,
    TemporalCurves, MIN_SERIES_POINTS,
};

/// Fewest prefix checkpoints accepted by [`fit_prefix`].
pub const MIN_PREFIX_CHECKPOINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Situation {
    /// The prefix ends at or before the estimated separation point.
    One,
    /// The prefix extends past it; the tail is calibrated on those points.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fitted,
    Extrapolated,
}

#[derive(Debug, Clone, Default)]
pub struct PredictorConfig {
    pub epsilon: SeparationThreshold,
    pub outlier_refit: bool,
    /// Spacing of the extension grid past the prefix; defaults to the
    /// manifest's checkpoint interval.
    pub grid_cadence: Option<u64>,
}

impl PredictorConfig {
    pub fn new() -> Self {
        Self {
            epsilon: SeparationThreshold::default(),
            outlier_refit: true,
            grid_cadence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCurves {
    /// Prefix curves with the uncalibrated tail. `n_sep` is `None` when the
    /// separation point is not reached before `n_tot`.
    pub curves: TemporalCurves,
    /// Estimated separation point, `n_tot` when not reached.
    pub n_sep_estimate: u64,
    pub n_train: u64,
    pub situation: Situation,
    pub eps4: f64,
    pub eps7: f64,
    /// Set when the separation point is not reached and the tail is skipped.
    pub degraded: bool,
    pub calibration_warning: Option<String>,
}

impl PredictedCurves {
    /// `[γ4 + ε4, γ5, γ6, γ7 + ε7]`.
    pub fn calibrated_tail(&self) -> Option<[f64; 4]> {
        self.curves
            .gamma_cos
            .map(|g| [g[0] + self.eps4, g[1], g[2], g[3] + self.eps7])
    }

    /// Predicted `(a0, a1, a2)` at `n`.
    pub fn eval(&self, n: u64) -> Result<(f64, f64, f64)> {
        let (a0, a1, a2) = temporal::eval_curves(&self.curves, n)?;
        match (self.curves.n_sep, self.calibrated_tail()) {
            (Some(s), Some(tail)) if n >= s => Ok((a0, a1, eval_cosine(&tail, n as f64))),
            _ => Ok((a0, a1, a2)),
        }
    }

    pub fn mean_loss(&self, n: u64, seq_len: usize) -> Result<f64> {
        let (a0, a1, a2) = self.eval(n)?;
        Ok(hyperbolic::aggregate(a0, a1, a2, seq_len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossForecast {
    pub tokens: Vec<u64>,
    pub predicted_mean_loss: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl LossForecast {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Prediction at exactly `tokens`, if on the grid.
    pub fn at(&self, tokens: u64) -> Option<f64> {
        self.tokens
            .binary_search(&tokens)
            .ok()
            .map(|i| self.predicted_mean_loss[i])
    }

    pub fn last(&self) -> Option<(u64, f64)> {
        Some((*self.tokens.last()?, *self.predicted_mean_loss.last()?))
    }
}

/// Prefix tokens followed by `n_train + k·cadence` up to `n_tot`, ending on
/// `n_tot`.
pub fn default_grid(prefix_tokens: &[u64], manifest: &RunManifest, cadence: Option<u64>) -> Vec<u64> {
    let step = cadence.unwrap_or(manifest.checkpoint_interval).max(1);
    let mut grid: Vec<u64> = prefix_tokens.to_vec();
    let mut n = grid.last().copied().unwrap_or(0);
    while n < manifest.n_tot {
        n = (n + step).min(manifest.n_tot);
        grid.push(n);
    }
    grid
}

fn fit_log_branch(series: &ParamSeries) -> Result<CurveFit<4>> {
    let (t, v) = series.active();
    if t.len() < MIN_SERIES_POINTS {
        return Err(Error::InsufficientData {
            what: "a2 logarithmic prefix segment",
            needed: MIN_SERIES_POINTS,
            got: t.len(),
        });
    }
    temporal::fit_loglog_points(&t, &v)
}

/// `(γ4, γ7)` of the fixed-phase tail matching `value` and `slope` at
/// `n_sep`; `None` when `sin θ` vanishes and the slope condition is void.
pub fn solve_boundary(value: f64, slope: f64, n_sep: f64, manifest: &RunManifest) -> Option<(f64, f64)> {
    let freq = PI / manifest.n_tot as f64;
    let theta = freq * (n_sep - manifest.n_warmup as f64);
    let sin = theta.sin();
    if sin.abs() < 1e-12 {
        return None;
    }
    let g4 = -slope / (freq * sin);
    Some((g4, value - g4 * theta.cos()))
}

/// Fixed-phase cosine tail `[γ4, π/n_tot, −π·n_warmup/n_tot, γ7]` joined to
/// the logarithmic branch at `n_sep`.
///
/// If the slope condition degenerates, `γ4` is chosen so the tail's drop over
/// `[n_sep, n_tot]` equals the branch's drop over the window of the same
/// length ending at `n_sep`.
pub fn solve_cosine_tail(log_branch: &[f64; 4], n_sep: u64, manifest: &RunManifest) -> [f64; 4] {
    let horizon = manifest.n_tot as f64;
    let freq = PI / horizon;
    let phase = -PI * manifest.n_warmup as f64 / horizon;
    let s = n_sep as f64;
    let value = eval_loglog(log_branch, s);
    let slope = temporal::d_loglog(log_branch, s);
    let (g4, g7) = solve_boundary(value, slope, s, manifest).unwrap_or_else(|| {
        let window = horizon - s;
        let start = (s - window).max(2.0);
        let drop = eval_loglog(log_branch, start) - value;
        let theta = freq * s + phase;
        let span = theta.cos() - (freq * horizon + phase).cos();
        let g4 = if span.abs() > 1e-12 && drop.is_finite() { drop / span } else { 0.0 };
        log::warn!("slope condition degenerate at {n_sep}; matching drop instead");
        (g4, value - g4 * theta.cos())
    });
    [g4, freq, phase, g7]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub eps4: f64,
    pub eps7: f64,
    pub warning: Option<String>,
}

/// Least-squares `(ε4, ε7)` for `(γ4 + ε4)·cos(γ5 N + γ6) + γ7 + ε7` against
/// the active post-separation points.
pub fn calibrate_situation_two(tail: &[f64; 4], post: &ParamSeries) -> Result<Calibration> {
    let (t, v) = post.active();
    if t.len() < 2 {
        let msg = format!(
            "{} post-separation points; tail left uncalibrated",
            t.len()
        );
        log::warn!("{msg}");
        return Ok(Calibration {
            eps4: 0.0,
            eps7: 0.0,
            warning: Some(msg),
        });
    }
    let cosines: Vec<f64> = t.iter().map(|&n| (tail[1] * n + tail[2]).cos()).collect();
    let model = |p: &[f64], c: f64| (tail[0] + p[0]) * c + tail[3] + p[1];
    let opts = fitkit::FitOptions {
        multistart: false,
        ..Default::default()
    };
    let fit = fitkit::nls_fit_with(model, &cosines, &v, &[0.0, 0.0], None, &opts)?;
    Ok(Calibration {
        eps4: fit.params[0],
        eps7: fit.params[1],
        warning: None,
    })
}

/// Prefix fit from per-checkpoint hyperbolic parameters.
pub fn fit_prefix(
    prefix: &[HyperbolicParams],
    manifest: &RunManifest,
    config: &PredictorConfig,
) -> Result<PredictedCurves> {
    if prefix.len() < MIN_PREFIX_CHECKPOINTS {
        return Err(Error::InsufficientData {
            what: "prediction prefix (checkpoints)",
            needed: MIN_PREFIX_CHECKPOINTS,
            got: prefix.len(),
        });
    }
    let epsilon = config.epsilon.resolve(manifest.n_tot);
    let a0 = ParamSeries::a0_of(prefix)?;
    let a1 = ParamSeries::a1_of(prefix)?;
    let a2 = ParamSeries::a2_of(prefix)?;
    let n_train = *a0.tokens.last().expect("non-empty prefix");
    let grid = default_grid(&a0.tokens, manifest, config.grid_cadence);

    let fits =
        temporal::fit_a0_a1_with_separation(&a0, &a1, epsilon, &grid, config.outlier_refit)?;
    let (n_sep_estimate, degraded) = match fits.n_sep {
        Some(s) => (s, false),
        None => {
            log::warn!("separation point not reached before n_tot; forecast is degraded");
            (manifest.n_tot, true)
        }
    };
    let situation = if !degraded && n_train > n_sep_estimate {
        Situation::Two
    } else {
        Situation::One
    };

    let left = if degraded { a2.clone() } else { a2.before(n_sep_estimate) };
    let log_fit = if config.outlier_refit {
        let filtered = temporal::filter_outliers(&left, fit_log_branch, eval_loglog)?;
        fit_log_branch(&filtered)?
    } else {
        fit_log_branch(&left)?
    };

    let tail = (!degraded).then(|| solve_cosine_tail(&log_fit.params, n_sep_estimate, manifest));
    let calibration = match (situation, tail) {
        (Situation::Two, Some(t)) => calibrate_situation_two(&t, &a2.from(n_sep_estimate))?,
        _ => Calibration {
            eps4: 0.0,
            eps7: 0.0,
            warning: None,
        },
    };

    Ok(PredictedCurves {
        curves: TemporalCurves {
            alpha: fits.alpha.params,
            beta: fits.beta.params,
            gamma_log: log_fit.params,
            gamma_cos: tail,
            n_sep: (!degraded).then_some(n_sep_estimate),
            epsilon,
            fit_quality: FitQuality {
                a0: fits.alpha.r_squared,
                a1: fits.beta.r_squared,
                a2: log_fit.r_squared,
            },
        },
        n_sep_estimate,
        n_train,
        situation,
        eps4: calibration.eps4,
        eps7: calibration.eps7,
        degraded,
        calibration_warning: calibration.warning,
    })
}

/// Predicted mean loss on `grid`; points up to `n_train` are marked fitted.
pub fn forecast(pc: &PredictedCurves, manifest: &RunManifest, grid: &[u64]) -> Result<LossForecast> {
    if let Some(&bad) = grid.iter().find(|&&n| n == 0 || n > manifest.n_tot) {
        return Err(Error::InvalidArgument(format!(
            "forecast grid point {bad} outside (0, {}]",
            manifest.n_tot
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("forecast grid must be increasing".into()));
    }
    let values: Vec<f64> = grid
        .par_iter()
        .map(|&n| {
            let v = pc.mean_loss(n, manifest.seq_len)?;
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invariant(format!(
                    "forecast at {n} is {v}, expected positive and finite"
                )));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(LossForecast {
        tokens: grid.to_vec(),
        predicted_mean_loss: values,
        provenance: grid
            .iter()
            .map(|&n| {
                if n <= pc.n_train {
                    Provenance::Fitted
                } else {
                    Provenance::Extrapolated
                }
            })
            .collect(),
    })
}

/// Result of predicting a run from its prefix.
#[derive(Debug)]
pub struct Prediction {
    pub prefix_fits: Vec<HyperbolicParams>,
    pub curves: PredictedCurves,
    pub forecast: LossForecast,
}

/// Checkpoints with `tokens ≤ train_frac · n_tot`.
pub fn truncate(traj: &Trajectory, train_frac: f64) -> Result<Trajectory> {
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1], got {train_frac}"
        )));
    }
    let limit = (train_frac * traj.manifest.n_tot as f64).round() as u64;
    Ok(traj.prefix(limit))
}

/// Hyperbolic fits of the prefix, prefix curves, and a forecast on the
/// default grid.
pub fn predict(prefix: &Trajectory, config: &PredictorConfig) -> Result<Prediction> {
    let fits = hyperbolic::fit_trajectory(prefix)?;
    let curves = fit_prefix(&fits.params, &prefix.manifest, config)?;
    let grid = default_grid(&prefix.tokens(), &prefix.manifest, config.grid_cadence);
    let forecast = forecast(&curves, &prefix.manifest, &grid)?;
    Ok(Prediction {
        prefix_fits: fits.params,
        curves,
        forecast,
    })
}

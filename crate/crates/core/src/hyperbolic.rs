//! Per-checkpoint fit of loss against token position,
//! `L_i = a0 / (1 + a1 * i) + a2` for `i = 1..=n`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitkit::{self, r_squared};
use crate::loss_log::{TokenLossProfile, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    NotConverged,
    /// Flat profile; `a1` is unidentifiable and left at its initial value.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicParams {
    /// Loss gap between early and late positions.
    pub a0: f64,
    /// Position scaling factor.
    pub a1: f64,
    /// Converged per-position loss.
    pub a2: f64,
    /// Against the fitted profile. Flat profiles are fitted exactly and get 1.
    pub r_squared: f64,
    pub tokens_trained: u64,
    pub status: FitStatus,
}

impl HyperbolicParams {
    pub fn new(a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            a0,
            a1,
            a2,
            r_squared: 1.0,
            tokens_trained: 0,
            status: FitStatus::Converged,
        }
    }
}

#[inline]
pub fn eval_position_loss(p: &HyperbolicParams, position: usize) -> f64 {
    p.a0 / (1.0 + p.a1 * position as f64) + p.a2
}

/// Mean of the modelled loss over positions `1..=n`.
pub fn aggregate_mean_loss(p: &HyperbolicParams, n: usize) -> f64 {
    aggregate(p.a0, p.a1, p.a2, n)
}

pub(crate) fn aggregate(a0: f64, a1: f64, a2: f64, n: usize) -> f64 {
    let sum: f64 = (1..=n).map(|i| 1.0 / (1.0 + a1 * i as f64)).sum();
    a0 * sum / n as f64 + a2
}

/// Initial guess: `a2` from the last 10% of positions, `a0` from the first
/// position, `a1 = 10 / n`.
pub fn initial_guess(losses: &[f64]) -> [f64; 3] {
    let n = losses.len();
    let tail = (n / 10).max(1);
    let a2 = losses[n - tail..].iter().sum::<f64>() / tail as f64;
    [losses[0] - a2, 10.0 / n as f64, a2]
}

fn model(p: &[f64], x: f64) -> f64 {
    p[0] / (1.0 + p[1] * x) + p[2]
}

pub fn fit_checkpoint(profile: &TokenLossProfile) -> Result<HyperbolicParams> {
    let losses = &profile.loss_by_position;
    let n = losses.len();
    if n < 4 {
        return Err(Error::InsufficientData {
            what: "hyperbolic fit (positions)",
            needed: 4,
            got: n,
        });
    }
    let [a0_init, a1_init, a2_init] = initial_guess(losses);
    let (lo, hi) = losses
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi - lo < 1e-9 {
        let mean = losses.iter().sum::<f64>() / n as f64;
        return Ok(HyperbolicParams {
            a0: 0.0,
            a1: a1_init,
            a2: mean,
            r_squared: 1.0,
            tokens_trained: profile.tokens_trained,
            status: FitStatus::Degenerate,
        });
    }

    let first = losses[0];
    let bounds = [
        (f64::NEG_INFINITY, f64::INFINITY),
        (0.0, 10.0),
        (0.0, first.max(0.0)),
    ];
    let a2_start = a2_init.clamp(0.0, first.max(0.0));
    let init = [first - a2_start, a1_init, a2_start];
    debug_assert!(a0_init.is_finite());
    let xs: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let fit = fitkit::nls_fit(model, &xs, losses, &init, Some(&bounds))?;
    let fitted: Vec<f64> = xs.iter().map(|&x| model(&fit.params, x)).collect();
    let r2 = r_squared(losses, &fitted)?;
    Ok(HyperbolicParams {
        a0: fit.params[0],
        a1: fit.params[1],
        a2: fit.params[2],
        r_squared: r2,
        tokens_trained: profile.tokens_trained,
        status: if fit.converged {
            FitStatus::Converged
        } else {
            FitStatus::NotConverged
        },
    })
}

/// Per-checkpoint fits of a whole trajectory.
#[derive(Debug)]
pub struct TrajectoryFit {
    /// Successful fits in ascending `tokens_trained` order.
    pub params: Vec<HyperbolicParams>,
    /// Checkpoints whose fit returned an error.
    pub failures: Vec<(u64, Error)>,
}

impl TrajectoryFit {
    /// Fraction of all attempted checkpoints whose R² exceeds `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        let total = self.params.len() + self.failures.len();
        if total == 0 {
            return 0.0;
        }
        let ok = self
            .params
            .iter()
            .filter(|p| p.r_squared > threshold)
            .count();
        ok as f64 / total as f64
    }
}

pub fn fit_trajectory(traj: &Trajectory) -> Result<TrajectoryFit> {
    if traj.is_empty() {
        return Err(Error::InsufficientData {
            what: "trajectory fit (checkpoints)",
            needed: 1,
            got: 0,
        });
    }
    let results: Vec<(u64, Result<HyperbolicParams>)> = traj
        .profiles
        .par_iter()
        .map(|p| (p.tokens_trained, fit_checkpoint(p)))
        .collect();
    let mut params = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (tokens, r) in results {
        match r {
            Ok(p) => params.push(p),
            Err(e) => {
                log::warn!("checkpoint {tokens}: hyperbolic fit failed: {e}");
                failures.push((tokens, e));
            }
        }
    }
    Ok(TrajectoryFit { params, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_from(p: &HyperbolicParams, n: usize) -> TokenLossProfile {
        TokenLossProfile::new(
            100,
            (1..=n).map(|i| eval_position_loss(p, i)).collect(),
        )
    }

    #[test]
    fn eval_examples() {
        assert_eq!(eval_position_loss(&HyperbolicParams::new(2.0, 1.0, 0.5), 3), 1.0);
        assert_eq!(eval_position_loss(&HyperbolicParams::new(0.0, 0.3, 1.25), 17), 1.25);
        assert_eq!(eval_position_loss(&HyperbolicParams::new(1.0, 0.0, 0.0), 999), 1.0);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_mean_loss(&HyperbolicParams::new(0.0, 0.7, 1.7), 1024), 1.7);
        assert_eq!(aggregate_mean_loss(&HyperbolicParams::new(1.0, 0.0, 0.5), 10), 1.5);
        let v = aggregate_mean_loss(&HyperbolicParams::new(1.0, 1.0, 0.0), 2);
        assert!((v - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn decreasing_in_position() {
        let p = HyperbolicParams::new(3.0, 0.02, 1.5);
        let vals: Vec<f64> = (1..=1024).map(|i| eval_position_loss(&p, i)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(vals.iter().all(|&v| v > 1.5));
        assert!((eval_position_loss(&p, 1 << 40) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn recovers_noiseless_params() {
        let truth = HyperbolicParams::new(3.0, 0.02, 1.5);
        let fit = fit_checkpoint(&profile_from(&truth, 1024)).unwrap();
        for (got, want) in [(fit.a0, 3.0), (fit.a1, 0.02), (fit.a2, 1.5)] {
            assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.status, FitStatus::Converged);
    }

    #[test]
    fn flat_profile_is_degenerate() {
        let fit = fit_checkpoint(&TokenLossProfile::new(7, vec![2.25; 64])).unwrap();
        assert_eq!(fit.status, FitStatus::Degenerate);
        assert_eq!(fit.a0, 0.0);
        assert_eq!(fit.a2, 2.25);
    }

    #[test]
    fn too_few_positions() {
        let err = fit_checkpoint(&TokenLossProfile::new(7, vec![3.0, 2.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }));
    }

    #[test]
    fn aggregate_matches_synthesized_mean() {
        let p = HyperbolicParams::new(2.7, 0.013, 1.9);
        let prof = profile_from(&p, 1024);
        assert!((prof.mean_loss() - aggregate_mean_loss(&p, 1024)).abs() < 1e-12);
    }
}

//! Per-position loss decrease between checkpoints.
//!
//! Once `a0` and `a1` stop moving, every position loses the same amount of
//! loss between two checkpoints. The flatness statistic (coefficient of
//! variation of the per-position decrease) measures how close a pair of
//! checkpoints comes to that.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss_log::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaProfile {
    pub n_from: u64,
    pub n_to: u64,
    /// `L_i(n_from) − L_i(n_to)` for positions `1..=seq_len`.
    pub delta_by_position: Vec<f64>,
    pub mean_delta: f64,
    /// `None` when the mean decrease is zero.
    pub flatness: Option<f64>,
}

/// Population standard deviation over `|mean|`, after dropping the first
/// `trim_fraction` of positions.
pub fn flatness(deltas: &[f64], trim_fraction: f64) -> Option<f64> {
    let skip = ((deltas.len() as f64 * trim_fraction.clamp(0.0, 1.0)).floor() as usize)
        .min(deltas.len().saturating_sub(1));
    let kept = &deltas[skip..];
    if kept.is_empty() {
        return None;
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let scale = kept.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if mean == 0.0 || mean.abs() <= f64::EPSILON * scale {
        return None;
    }
    let var = kept.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Some(var.sqrt() / mean.abs())
}

pub fn delta_profile(traj: &Trajectory, n_from: u64, n_to: u64) -> Result<DeltaProfile> {
    delta_profile_trimmed(traj, n_from, n_to, 0.0)
}

pub fn delta_profile_trimmed(
    traj: &Trajectory,
    n_from: u64,
    n_to: u64,
    trim_fraction: f64,
) -> Result<DeltaProfile> {
    if n_to <= n_from {
        return Err(Error::InvalidArgument(format!(
            "delta profile needs n_to > n_from, got {n_from} -> {n_to}"
        )));
    }
    let from = traj.profile_at(n_from).ok_or(Error::MissingCheckpoint(n_from))?;
    let to = traj.profile_at(n_to).ok_or(Error::MissingCheckpoint(n_to))?;
    let delta: Vec<f64> = from
        .loss_by_position
        .iter()
        .zip(&to.loss_by_position)
        .map(|(a, b)| a - b)
        .collect();
    Ok(DeltaProfile {
        n_from,
        n_to,
        mean_delta: delta.iter().sum::<f64>() / delta.len() as f64,
        flatness: flatness(&delta, trim_fraction),
        delta_by_position: delta,
    })
}

#[derive(Debug, Clone)]
pub struct UniformityConfig {
    /// Token span of each checkpoint pair; defaults to 5% of `n_tot`.
    pub window: Option<u64>,
    /// Leading fraction of positions excluded from the flatness statistic.
    pub trim_fraction: f64,
}

impl Default for UniformityConfig {
    fn default() -> Self {
        Self {
            window: None,
            trim_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UniformityReport {
    pub n_sep: u64,
    pub window: u64,
    pub early: DeltaProfile,
    pub late: DeltaProfile,
    /// Late-window flatness is below early-window flatness.
    pub late_more_uniform: bool,
}

/// Compares a pair of checkpoints at the start of training with a pair at
/// the end, each roughly `window` tokens apart.
///
/// The early pair starts at the first checkpoint and stays before `n_sep`;
/// the late pair ends at the last checkpoint and stays at or after it.
pub fn uniformity_report(
    traj: &Trajectory,
    n_sep: u64,
    config: &UniformityConfig,
) -> Result<UniformityReport> {
    let tokens = traj.tokens();
    let pre: Vec<u64> = tokens.iter().copied().filter(|&n| n < n_sep).collect();
    let post: Vec<u64> = tokens.iter().copied().filter(|&n| n >= n_sep).collect();
    for (side, got) in [
        ("uniformity report (checkpoints before n_sep)", pre.len()),
        ("uniformity report (checkpoints from n_sep)", post.len()),
    ] {
        if got < 2 {
            return Err(Error::InsufficientData {
                what: side,
                needed: 2,
                got,
            });
        }
    }
    let window = config
        .window
        .unwrap_or(traj.manifest.n_tot / 20)
        .max(1);

    let e0 = pre[0];
    let e1 = pre[1..]
        .iter()
        .copied()
        .take_while(|&n| n <= e0 + window)
        .last()
        .unwrap_or(pre[1]);
    let l1 = *post.last().expect("two post points");
    let l0 = post[..post.len() - 1]
        .iter()
        .rev()
        .copied()
        .take_while(|&n| n + window >= l1)
        .last()
        .unwrap_or(post[post.len() - 2]);

    let early = delta_profile_trimmed(traj, e0, e1, config.trim_fraction)?;
    let late = delta_profile_trimmed(traj, l0, l1, config.trim_fraction)?;
    let late_more_uniform = match (early.flatness, late.flatness) {
        (Some(e), Some(l)) => l < e,
        _ => false,
    };
    Ok(UniformityReport {
        n_sep,
        window,
        early,
        late,
        late_more_uniform,
    })
}

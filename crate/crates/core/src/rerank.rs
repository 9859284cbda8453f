//! Ranking of candidate runs by predicted final loss.
//!
//! Each candidate supplies a training prefix. Its loss curve is predicted to
//! `n_tot`, and candidates are ordered by the prediction at `n_tot`. Ties
//! are broken by label. Candidates whose prediction fails are listed last
//! with the error attached.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fitkit;
use crate::loss_log::Trajectory;
use crate::predictor::{self, LossForecast, PredictedCurves, PredictorConfig, Situation};

#[derive(Debug, Clone)]
pub struct CandidateRun {
    pub label: String,
    /// Prefix only.
    pub trajectory: Trajectory,
}

impl CandidateRun {
    pub fn new(label: impl Into<String>, trajectory: Trajectory) -> Self {
        Self {
            label: label.into(),
            trajectory,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedCandidate {
    /// 1-based.
    pub rank: usize,
    pub label: String,
    pub predicted_final_loss: Option<f64>,
    pub situation: Option<Situation>,
    pub n_sep_estimate: Option<u64>,
    /// Predicted against observed mean loss over the prefix.
    pub fit_r_squared: Option<f64>,
    #[serde(skip)]
    pub curves: Option<PredictedCurves>,
    #[serde(skip)]
    pub forecast: Option<LossForecast>,
    pub error: Option<String>,
}

impl RankedCandidate {
    fn failed(label: String, err: &Error) -> Self {
        Self {
            rank: 0,
            label,
            predicted_final_loss: None,
            situation: None,
            n_sep_estimate: None,
            fit_r_squared: None,
            curves: None,
            forecast: None,
            error: Some(err.to_string()),
        }
    }
}

/// Ascending predicted final loss, then label; failures last, by label.
pub fn order(entries: &mut [RankedCandidate]) {
    entries.sort_by(|x, y| {
        let key = |e: &RankedCandidate| e.predicted_final_loss.filter(|v| v.is_finite());
        match (key(x), key(y)) {
            (Some(a), Some(b)) => a.total_cmp(&b),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
        .then_with(|| x.label.cmp(&y.label))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
}

fn evaluate(c: &CandidateRun, config: &PredictorConfig) -> Result<RankedCandidate> {
    let pred = predictor::predict(&c.trajectory, config)?;
    let n_tot = c.trajectory.manifest.n_tot;
    let final_loss = pred.forecast.at(n_tot).ok_or_else(|| {
        Error::Invariant(format!("forecast grid of {} misses n_tot", c.label))
    })?;
    let fitted: Vec<f64> = c
        .trajectory
        .tokens()
        .iter()
        .map(|&n| pred.curves.mean_loss(n, c.trajectory.manifest.seq_len))
        .collect::<Result<_>>()?;
    Ok(RankedCandidate {
        rank: 0,
        label: c.label.clone(),
        predicted_final_loss: Some(final_loss),
        situation: Some(pred.curves.situation),
        n_sep_estimate: Some(pred.curves.n_sep_estimate),
        fit_r_squared: fitkit::r_squared(&c.trajectory.mean_losses(), &fitted).ok(),
        curves: Some(pred.curves),
        forecast: Some(pred.forecast),
        error: None,
    })
}

/// Predicts every candidate and returns them ranked.
pub fn rerank(candidates: &[CandidateRun], config: &PredictorConfig) -> Result<Vec<RankedCandidate>> {
    if candidates.len() < 2 {
        return Err(Error::InsufficientData {
            what: "rerank (candidates)",
            needed: 2,
            got: candidates.len(),
        });
    }
    let first = &candidates[0].trajectory.manifest;
    for c in &candidates[1..] {
        let m = &c.trajectory.manifest;
        if m.n_tot != first.n_tot || m.seq_len != first.seq_len {
            return Err(Error::InvalidArgument(format!(
                "candidate {} has n_tot {} / seq_len {}, expected {} / {}",
                c.label, m.n_tot, m.seq_len, first.n_tot, first.seq_len
            )));
        }
    }
    let mut ranked: Vec<RankedCandidate> = candidates
        .par_iter()
        .map(|c| {
            evaluate(c, config).unwrap_or_else(|e| {
                log::warn!("candidate {}: prediction failed: {e}", c.label);
                RankedCandidate::failed(c.label.clone(), &e)
            })
        })
        .collect();
    order(&mut ranked);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::truncate;
    use crate::synthgen::{crossing_pair, generate, GeneratorSpec};

    fn entry(label: &str, loss: Option<f64>) -> RankedCandidate {
        RankedCandidate {
            rank: 0,
            label: label.into(),
            predicted_final_loss: loss,
            situation: None,
            n_sep_estimate: None,
            fit_r_squared: None,
            curves: None,
            forecast: None,
            error: loss.is_none().then(|| "failed".into()),
        }
    }

    #[test]
    fn argmin_first() {
        let mut v = vec![entry("a", Some(2.10)), entry("b", Some(2.05))];
        order(&mut v);
        assert_eq!(v[0].label, "b");
        assert_eq!((v[0].rank, v[1].rank), (1, 2));
    }

    #[test]
    fn ties_and_failures() {
        let mut v = vec![
            entry("z", None),
            entry("c", Some(2.0)),
            entry("a", None),
            entry("b", Some(2.0)),
        ];
        order(&mut v);
        let labels: Vec<&str> = v.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["b", "c", "a", "z"]);
    }

    #[test]
    fn single_candidate_rejected() {
        let traj = generate(&GeneratorSpec::default()).unwrap();
        let c = [CandidateRun::new("only", traj)];
        assert!(matches!(
            rerank(&c, &PredictorConfig::new()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn crossing_pair_ranks_b_first() {
        let (a, b) = crossing_pair(3, 0.0);
        let cands = [
            CandidateRun::new("A", truncate(&generate(&a).unwrap(), 0.1).unwrap()),
            CandidateRun::new("B", truncate(&generate(&b).unwrap(), 0.1).unwrap()),
        ];
        let ranked = rerank(&cands, &PredictorConfig::new()).unwrap();
        assert_eq!(ranked[0].label, "B");
        assert!(ranked.iter().all(|r| r.error.is_none()));
    }

    #[test]
    fn failing_candidate_goes_last() {
        let traj = generate(&GeneratorSpec::default()).unwrap();
        let cands = [
            CandidateRun::new("short", traj.prefix(8_000_000)),
            CandidateRun::new("ok", truncate(&traj, 0.1).unwrap()),
        ];
        let ranked = rerank(&cands, &PredictorConfig::new()).unwrap();
        assert_eq!(ranked[0].label, "ok");
        assert_eq!(ranked[1].label, "short");
        assert!(ranked[1].error.is_some());
    }
}

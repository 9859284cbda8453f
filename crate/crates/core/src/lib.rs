//! Loss-trajectory analysis for language-model pre-training.
//!
//! Per-position validation losses are fitted at each checkpoint with a
//! hyperbolic law in token position; the fitted parameters are then tracked
//! across training with closed-form temporal curves. The composed model fits
//! a whole run, extrapolates a run from an early prefix, ranks candidate runs
//! by their predicted final loss, and checks how uniformly positions learn.

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod fitkit;
pub mod hyperbolic;
pub mod loss_log;
pub mod predictor;
pub mod rerank;
pub mod synthgen;
pub mod temporal;

pub use error::{Error, ErrorClass, Result};
pub use hyperbolic::{HyperbolicParams, TrajectoryFit};
pub use loss_log::{RunManifest, TokenLossProfile, Trajectory};

pub use predictor::{LossForecast, PredictedCurves, Provenance, Situation};
pub use temporal::{ParamSeries, SeparationThreshold, TemporalCurves};

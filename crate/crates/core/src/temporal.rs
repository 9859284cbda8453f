//! Temporal evolution of the hyperbolic parameters across checkpoints.
//!
//! * `a0(N) = α0·ln(α1·ln N + α2) + α3`
//! * `a1(N) = β0 / (1 + β1·N) + β2`
//! * `a2(N) = γ0·ln(γ1·ln N + γ2) + γ3` before the separation point and
//!   `γ4·cos(γ5·N + γ6) + γ7` from it on.
//!
//! The separation point is the first grid token count at which both
//! `|da0/dN|` and `|da1/dN|` drop below ε; `a0` and `a1` are held at their
//! value there for all later `N`.
//!
//! The double-log form only identifies three of its four parameters
//! (`(α0, cα1, cα2, α3 − α0·ln c)` is the same curve for any `c > 0`), so
//! fitted curves are reported in the gauge `α1 = 1` (likewise `γ1 = 1`).
//! Evaluation accepts any `α1`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitkit::{self, simple_regression, sum_squares};
use crate::hyperbolic::HyperbolicParams;
use crate::loss_log::RunManifest;

/// ε of 1e-4 nats per billion tokens, stated for a 400B-token schedule.
pub const REFERENCE_EPSILON_PER_TOKEN: f64 = 1e-13;
pub const REFERENCE_HORIZON_TOKENS: f64 = 4e11;

/// Minimum points for any single-curve temporal fit.
pub const MIN_SERIES_POINTS: usize = 5;

const OUTLIER_MAD_FACTOR: f64 = 3.0 * 1.4826;
const MAX_SEPARATION_REFITS: usize = 8;

/// Derivative threshold for the separation point, in nats per token.
///
/// `None` selects the reference threshold rescaled to the run's horizon,
/// i.e. `1e-13 * 4e11 / n_tot`. Schedules of 400B tokens get exactly
/// 1e-13 per token; shorter schedules are treated as time-compressed copies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SeparationThreshold(pub Option<f64>);

impl SeparationThreshold {
    pub fn per_token(value: f64) -> Self {
        Self(Some(value))
    }

    pub fn resolve(&self, n_tot: u64) -> f64 {
        self.0
            .unwrap_or(REFERENCE_EPSILON_PER_TOKEN * REFERENCE_HORIZON_TOKENS / n_tot as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSeries {
    pub tokens: Vec<u64>,
    pub values: Vec<f64>,
    /// `true` marks an excluded point.
    pub outlier_mask: Vec<bool>,
}

impl ParamSeries {
    pub fn new(tokens: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if tokens.len() != values.len() {
            return Err(Error::ShapeMismatch {
                left: tokens.len(),
                right: values.len(),
            });
        }
        if tokens.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "series tokens must be strictly increasing".into(),
            ));
        }
        let n = tokens.len();
        Ok(Self {
            tokens,
            values,
            outlier_mask: vec![false; n],
        })
    }

    fn from_params(params: &[HyperbolicParams], f: impl Fn(&HyperbolicParams) -> f64) -> Result<Self> {
        Self::new(
            params.iter().map(|p| p.tokens_trained).collect(),
            params.iter().map(f).collect(),
        )
    }

    pub fn a0_of(params: &[HyperbolicParams]) -> Result<Self> {
        Self::from_params(params, |p| p.a0)
    }

    pub fn a1_of(params: &[HyperbolicParams]) -> Result<Self> {
        Self::from_params(params, |p| p.a1)
    }

    pub fn a2_of(params: &[HyperbolicParams]) -> Result<Self> {
        Self::from_params(params, |p| p.a2)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-outlier points as `(N, value)`.
    pub fn active(&self) -> (Vec<f64>, Vec<f64>) {
        self.tokens
            .iter()
            .zip(&self.values)
            .zip(&self.outlier_mask)
            .filter(|(_, &m)| !m)
            .map(|((&t, &v), _)| (t as f64, v))
            .unzip()
    }

    /// Points with `N < limit`, masks preserved.
    pub fn before(&self, limit: u64) -> ParamSeries {
        self.select(|t| t < limit)
    }

    /// Points with `N >= limit`, masks preserved.
    pub fn from(&self, limit: u64) -> ParamSeries {
        self.select(|t| t >= limit)
    }

    fn select(&self, keep: impl Fn(u64) -> bool) -> ParamSeries {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.tokens[i])).collect();
        ParamSeries {
            tokens: idx.iter().map(|&i| self.tokens[i]).collect(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
            outlier_mask: idx.iter().map(|&i| self.outlier_mask[i]).collect(),
        }
    }
}

#[inline]
pub fn eval_loglog(c: &[f64; 4], n: f64) -> f64 {
    c[0] * (c[1] * n.ln() + c[2]).ln() + c[3]
}

#[inline]
pub fn d_loglog(c: &[f64; 4], n: f64) -> f64 {
    c[0] * c[1] / ((c[1] * n.ln() + c[2]) * n)
}

#[inline]
pub fn eval_reciprocal(b: &[f64; 3], n: f64) -> f64 {
    b[0] / (1.0 + b[1] * n) + b[2]
}

#[inline]
pub fn d_reciprocal(b: &[f64; 3], n: f64) -> f64 {
    let d = 1.0 + b[1] * n;
    -b[0] * b[1] / (d * d)
}

/// `[γ4, γ5, γ6, γ7]`.
#[inline]
pub fn eval_cosine(g: &[f64; 4], n: f64) -> f64 {
    g[0] * (g[1] * n + g[2]).cos() + g[3]
}

#[inline]
pub fn d_cosine(g: &[f64; 4], n: f64) -> f64 {
    -g[0] * g[1] * (g[1] * n + g[2]).sin()
}

/// Least-squares curve with its goodness of fit on the points it used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFit<const K: usize> {
    pub params: [f64; K],
    pub r_squared: Option<f64>,
    pub converged: bool,
}

fn require_points(n: usize, what: &'static str) -> Result<()> {
    if n < MIN_SERIES_POINTS {
        return Err(Error::InsufficientData {
            what,
            needed: MIN_SERIES_POINTS,
            got: n,
        });
    }
    Ok(())
}

/// Double-log fit in the `α1 = 1` gauge.
///
/// The start is the best of a log-spaced scan over `α2` with `(α0, α3)`
/// solved linearly for each candidate; Levenberg–Marquardt then refines all
/// three free parameters. `α2` is bounded so that `ln N + α2 > 0` on the data.
pub(crate) fn fit_loglog_points(tokens: &[f64], values: &[f64]) -> Result<CurveFit<4>> {
    if let Some(&t) = tokens.iter().find(|&&t| t < 2.0) {
        return Err(Error::InvalidArgument(format!(
            "double-log form needs N >= 2, got {t}"
        )));
    }
    let logs: Vec<f64> = tokens.iter().map(|t| t.ln()).collect();
    let l_min = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let l_max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (l_max - l_min).max(1e-9);

    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut start = [0.0, span - l_min, mean];
    let mut best_sse = f64::INFINITY;
    for k in 0..=28 {
        let shift = span * 10f64.powf(-3.0 + 0.25 * k as f64) - l_min;
        let g: Vec<f64> = logs.iter().map(|l| (l + shift).ln()).collect();
        if let Some((slope, intercept)) = simple_regression(&g, values) {
            let sse = sum_squares(values, g.iter().map(|v| slope * v + intercept));
            if sse < best_sse {
                best_sse = sse;
                start = [slope, shift, intercept];
            }
        }
    }

    let bounds = [
        (f64::NEG_INFINITY, f64::INFINITY),
        (1e-6 * span - l_min, 1e5 * span - l_min),
        (f64::NEG_INFINITY, f64::INFINITY),
    ];
    let model = |p: &[f64], l: f64| p[0] * (l + p[1]).ln() + p[2];
    let fit = fitkit::nls_fit(model, &logs, values, &start, Some(&bounds))?;
    Ok(CurveFit {
        params: [fit.params[0], 1.0, fit.params[1], fit.params[2]],
        r_squared: fit.r_squared,
        converged: fit.converged,
    })
}

/// Reciprocal fit, with `N` rescaled by the largest token count so that the
/// rate parameter is of order one inside the solver.
pub(crate) fn fit_reciprocal_points(tokens: &[f64], values: &[f64]) -> Result<CurveFit<3>> {
    let scale = tokens.iter().cloned().fold(0.0, f64::max).max(1.0);
    let xs: Vec<f64> = tokens.iter().map(|t| t / scale).collect();

    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut start = [0.0, 1.0, mean];
    let mut best_sse = f64::INFINITY;
    for k in 0..=28 {
        let rate = 10f64.powf(-3.0 + 0.25 * k as f64);
        let g: Vec<f64> = xs.iter().map(|x| 1.0 / (1.0 + rate * x)).collect();
        if let Some((slope, intercept)) = simple_regression(&g, values) {
            let sse = sum_squares(values, g.iter().map(|v| slope * v + intercept));
            if sse < best_sse {
                best_sse = sse;
                start = [slope, rate, intercept];
            }
        }
    }
    let bounds = [
        (f64::NEG_INFINITY, f64::INFINITY),
        (0.0, 1e6),
        (f64::NEG_INFINITY, f64::INFINITY),
    ];
    let model = |p: &[f64], x: f64| p[0] / (1.0 + p[1] * x) + p[2];
    let fit = fitkit::nls_fit(model, &xs, values, &start, Some(&bounds))?;
    Ok(CurveFit {
        params: [fit.params[0], fit.params[1] / scale, fit.params[2]],
        r_squared: fit.r_squared,
        converged: fit.converged,
    })
}

/// Cosine segment with `N` measured in units of `n_tot`, seeded at the
/// half-period schedule phase.
pub(crate) fn fit_cosine_points(
    tokens: &[f64],
    values: &[f64],
    manifest: &RunManifest,
) -> Result<CurveFit<4>> {
    let horizon = manifest.n_tot as f64;
    let xs: Vec<f64> = tokens.iter().map(|t| t / horizon).collect();
    let freq = PI;
    let phase = -PI * manifest.n_warmup as f64 / horizon;
    let g: Vec<f64> = xs.iter().map(|x| (freq * x + phase).cos()).collect();
    let (amp, offset) = simple_regression(&g, values)
        .unwrap_or((0.0, values.iter().sum::<f64>() / values.len() as f64));
    let start = [amp, freq, phase, offset];
    let model = |p: &[f64], x: f64| p[0] * (p[1] * x + p[2]).cos() + p[3];
    let fit = fitkit::nls_fit(model, &xs, values, &start, None)?;
    Ok(CurveFit {
        params: [fit.params[0], fit.params[1] / horizon, fit.params[2], fit.params[3]],
        r_squared: fit.r_squared,
        converged: fit.converged,
    })
}

pub fn fit_a0(series: &ParamSeries) -> Result<CurveFit<4>> {
    let (t, v) = series.active();
    require_points(t.len(), "a0 fit (non-outlier points)")?;
    fit_loglog_points(&t, &v)
}

pub fn fit_a1(series: &ParamSeries) -> Result<CurveFit<3>> {
    let (t, v) = series.active();
    require_points(t.len(), "a1 fit (non-outlier points)")?;
    fit_reciprocal_points(&t, &v)
}

/// Masks points whose first-fit residual lies more than `3 · 1.4826 · MAD`
/// from the median residual.
///
/// The first fit always uses every point, so filtering is idempotent.
pub fn filter_outliers<const K: usize>(
    series: &ParamSeries,
    fit: impl Fn(&ParamSeries) -> Result<CurveFit<K>>,
    eval: impl Fn(&[f64; K], f64) -> f64,
) -> Result<ParamSeries> {
    let mut all = series.clone();
    all.outlier_mask.iter_mut().for_each(|m| *m = false);
    let first = fit(&all)?;
    let residuals: Vec<f64> = all
        .tokens
        .iter()
        .zip(&all.values)
        .map(|(&t, &v)| v - eval(&first.params, t as f64))
        .collect();
    let center = median(&mut residuals.clone());
    let mad = median_abs_deviation(&residuals);
    let scale = all.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = (OUTLIER_MAD_FACTOR * mad).max(1e-9 * (1.0 + scale));
    all.outlier_mask = residuals
        .iter()
        .map(|r| (r - center).abs() > threshold)
        .collect();
    let kept = all.outlier_mask.iter().filter(|m| !**m).count();
    require_points(kept, "outlier-filtered series")?;
    Ok(all)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_abs_deviation(v: &[f64]) -> f64 {
    let mut copy = v.to_vec();
    let m = median(&mut copy);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
    median(&mut dev)
}

/// First fit, outlier mask, refit.
pub fn fit_a0_robust(series: &ParamSeries) -> Result<(CurveFit<4>, ParamSeries)> {
    let filtered = filter_outliers(series, fit_a0, eval_loglog)?;
    Ok((fit_a0(&filtered)?, filtered))
}

pub fn fit_a1_robust(series: &ParamSeries) -> Result<(CurveFit<3>, ParamSeries)> {
    let filtered = filter_outliers(series, fit_a1, eval_reciprocal)?;
    Ok((fit_a1(&filtered)?, filtered))
}

/// Smallest grid point where both curve slopes are below `epsilon` in
/// magnitude.
pub fn find_separation_point(
    alpha: &[f64; 4],
    beta: &[f64; 3],
    epsilon: f64,
    grid: &[u64],
) -> Option<u64> {
    grid.iter()
        .copied()
        .filter(|&n| {
            let x = n as f64;
            d_loglog(alpha, x).abs() < epsilon && d_reciprocal(beta, x).abs() < epsilon
        })
        .min()
}

/// `curve` before `n_sep`, and its value at `n_sep` from there on.
pub fn stabilize_after_sep<F>(curve: F, n_sep: u64) -> impl Fn(f64) -> f64
where
    F: Fn(f64) -> f64,
{
    let joint = n_sep as f64;
    let held = curve(joint);
    move |n| if n >= joint { held } else { curve(n) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct A2Fit {
    /// `[γ0, γ1, γ2, γ3]` with `γ1 = 1`.
    pub log_branch: [f64; 4],
    /// `[γ4, γ5, γ6, γ7]`, absent when no points lie past the separation.
    pub cosine_branch: Option<[f64; 4]>,
    /// Piecewise prediction against every point of the series.
    pub r_squared: Option<f64>,
    pub log_r_squared: Option<f64>,
    pub cosine_r_squared: Option<f64>,
}

impl A2Fit {
    /// Fitted `γ5 · n_tot / π`; one for an exact half cosine period.
    pub fn gamma5_ratio(&self, manifest: &RunManifest) -> Option<f64> {
        self.cosine_branch
            .map(|g| g[1] * manifest.n_tot as f64 / PI)
    }
}

pub fn fit_a2_piecewise(
    series: &ParamSeries,
    n_sep: Option<u64>,
    manifest: &RunManifest,
) -> Result<A2Fit> {
    let (left, right) = match n_sep {
        Some(s) => (series.before(s), series.from(s)),
        None => (series.clone(), series.from(u64::MAX)),
    };
    let (lt, lv) = left.active();
    require_points(lt.len(), "a2 logarithmic segment")?;
    let log_fit = fit_loglog_points(&lt, &lv)?;

    let (rt, rv) = right.active();
    let cos_fit = match rt.len() {
        0 => None,
        n if n < MIN_SERIES_POINTS => {
            return Err(Error::InsufficientData {
                what: "a2 cosine segment",
                needed: MIN_SERIES_POINTS,
                got: n,
            })
        }
        _ => Some(fit_cosine_points(&rt, &rv, manifest)?),
    };

    let (all_t, all_v) = series.active();
    let sep = n_sep.map(|s| s as f64).unwrap_or(f64::INFINITY);
    let predicted: Vec<f64> = all_t
        .iter()
        .map(|&t| match (&cos_fit, t >= sep) {
            (Some(c), true) => eval_cosine(&c.params, t),
            _ => eval_loglog(&log_fit.params, t),
        })
        .collect();
    Ok(A2Fit {
        log_branch: log_fit.params,
        cosine_branch: cos_fit.map(|c| c.params),
        r_squared: fitkit::r_squared(&all_v, &predicted).ok(),
        log_r_squared: log_fit.r_squared,
        cosine_r_squared: cos_fit.and_then(|c| c.r_squared),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub a0: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
}

/// Fitted temporal curves of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalCurves {
    pub alpha: [f64; 4],
    pub beta: [f64; 3],
    pub gamma_log: [f64; 4],
    pub gamma_cos: Option<[f64; 4]>,
    /// `None` when the slopes never fall below ε on the grid.
    pub n_sep: Option<u64>,
    /// Threshold actually used, nats per token.
    pub epsilon: f64,
    pub fit_quality: FitQuality,
}

impl TemporalCurves {
    /// `γ0..γ7`; unset cosine entries are NaN.
    pub fn gamma(&self) -> [f64; 8] {
        let c = self.gamma_cos.unwrap_or([f64::NAN; 4]);
        let l = self.gamma_log;
        [l[0], l[1], l[2], l[3], c[0], c[1], c[2], c[3]]
    }

    pub fn eval(&self, n: u64) -> Result<(f64, f64, f64)> {
        eval_curves(self, n)
    }
}

pub fn eval_curves(tc: &TemporalCurves, n: u64) -> Result<(f64, f64, f64)> {
    let x = n as f64;
    match tc.n_sep {
        Some(sep) if n >= sep => {
            let s = sep as f64;
            let g = tc.gamma_cos.ok_or(Error::CosineUnset(n))?;
            Ok((
                eval_loglog(&tc.alpha, s),
                eval_reciprocal(&tc.beta, s),
                eval_cosine(&g, x),
            ))
        }
        _ => Ok((
            eval_loglog(&tc.alpha, x),
            eval_reciprocal(&tc.beta, x),
            eval_loglog(&tc.gamma_log, x),
        )),
    }
}

/// `(da0/dN, da1/dN, da2/dN)`, zero for `a0`/`a1` past the separation point.
pub fn curve_derivatives(tc: &TemporalCurves, n: u64) -> Result<(f64, f64, f64)> {
    let x = n as f64;
    match tc.n_sep {
        Some(sep) if n >= sep => {
            let g = tc.gamma_cos.ok_or(Error::CosineUnset(n))?;
            Ok((0.0, 0.0, d_cosine(&g, x)))
        }
        _ => Ok((
            d_loglog(&tc.alpha, x),
            d_reciprocal(&tc.beta, x),
            d_loglog(&tc.gamma_log, x),
        )),
    }
}

/// `dL_i/dN` of the modelled per-position loss.
pub fn position_loss_rate(tc: &TemporalCurves, n: u64, position: usize) -> Result<f64> {
    let (a0, a1, _) = eval_curves(tc, n)?;
    let (da0, da1, da2) = curve_derivatives(tc, n)?;
    let denom = 1.0 + a1 * position as f64;
    Ok(da0 / denom - a0 * da1 * position as f64 / (denom * denom) + da2)
}

/// Modelled mean loss at `n`, averaged over positions `1..=seq_len`.
pub fn mean_loss_at(tc: &TemporalCurves, n: u64, seq_len: usize) -> Result<f64> {
    let (a0, a1, a2) = eval_curves(tc, n)?;
    Ok(crate::hyperbolic::aggregate(a0, a1, a2, seq_len))
}

#[derive(Debug, Clone, Default)]
pub struct TemporalConfig {
    pub epsilon: SeparationThreshold,
    /// Mask outliers after a first fit of `a0`/`a1` and refit.
    pub outlier_refit: bool,
}

impl TemporalConfig {
    pub fn new() -> Self {
        Self {
            epsilon: SeparationThreshold::default(),
            outlier_refit: true,
        }
    }
}

pub(crate) struct A0A1 {
    pub alpha: CurveFit<4>,
    pub beta: CurveFit<3>,
    pub n_sep: Option<u64>,
}

/// Fits `a0` and `a1`, locates the separation point on `grid`, and refits on
/// the points before it until the separation point stops moving.
pub(crate) fn fit_a0_a1_with_separation(
    a0: &ParamSeries,
    a1: &ParamSeries,
    epsilon: f64,
    grid: &[u64],
    robust: bool,
) -> Result<A0A1> {
    let fit_pair = |limit: Option<u64>| -> Result<(CurveFit<4>, CurveFit<3>)> {
        let (s0, s1) = match limit {
            Some(l) => (a0.before(l), a1.before(l)),
            None => (a0.clone(), a1.clone()),
        };
        if robust {
            Ok((fit_a0_robust(&s0)?.0, fit_a1_robust(&s1)?.0))
        } else {
            Ok((fit_a0(&s0)?, fit_a1(&s1)?))
        }
    };

    let (mut alpha, mut beta) = fit_pair(None)?;
    let mut limit: Option<u64> = None;
    let mut n_sep = find_separation_point(&alpha.params, &beta.params, epsilon, grid);
    for _ in 0..MAX_SEPARATION_REFITS {
        if n_sep == limit {
            break;
        }
        let Some(candidate) = n_sep else {
            // Refitting on the shorter span lost the crossing; fall back to
            // the full series.
            (alpha, beta) = fit_pair(None)?;
            n_sep = find_separation_point(&alpha.params, &beta.params, epsilon, grid);
            break;
        };
        if a0.before(candidate).len() < MIN_SERIES_POINTS {
            break;
        }
        let (a, b) = fit_pair(Some(candidate))?;
        limit = Some(candidate);
        alpha = a;
        beta = b;
        n_sep = find_separation_point(&alpha.params, &beta.params, epsilon, grid);
    }
    Ok(A0A1 { alpha, beta, n_sep })
}

/// Whole-trajectory temporal fit from per-checkpoint hyperbolic parameters.
pub fn fit_temporal(
    params: &[HyperbolicParams],
    manifest: &RunManifest,
    config: &TemporalConfig,
) -> Result<TemporalCurves> {
    require_points(params.len(), "temporal fit (checkpoints)")?;
    let epsilon = config.epsilon.resolve(manifest.n_tot);
    let a0 = ParamSeries::a0_of(params)?;
    let a1 = ParamSeries::a1_of(params)?;
    let a2 = ParamSeries::a2_of(params)?;
    let grid = a0.tokens.clone();

    let fits = fit_a0_a1_with_separation(&a0, &a1, epsilon, &grid, config.outlier_refit)?;
    let mut n_sep = fits.n_sep;
    if let Some(s) = n_sep {
        let post = a2.from(s).len();
        if post < MIN_SERIES_POINTS {
            log::warn!(
                "separation point {s} leaves only {post} checkpoints after it; \
                 treating it as not reached"
            );
            n_sep = None;
        }
    }
    let a2_fit = fit_a2_piecewise(&a2, n_sep, manifest)?;
    Ok(TemporalCurves {
        alpha: fits.alpha.params,
        beta: fits.beta.params,
        gamma_log: a2_fit.log_branch,
        gamma_cos: a2_fit.cosine_branch,
        n_sep,
        epsilon,
        fit_quality: FitQuality {
            a0: fits.alpha.r_squared,
            a1: fits.beta.r_squared,
            a2: a2_fit.r_squared,
        },
    })
}

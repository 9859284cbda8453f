//! Synthetic trajectories that follow the temporal law exactly.
//!
//! A [`GeneratorSpec`] carries the generating curves, the separation point
//! they imply, and a per-position Gaussian noise level. Everything here is
//! evaluated independently of the fitting code so it can serve as ground
//! truth for it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_log::{RunManifest, TokenLossProfile, Trajectory};
use crate::temporal::{FitQuality, SeparationThreshold, TemporalCurves};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub manifest: RunManifest,
    /// `a0(N) = α0·ln(α1·ln N + α2) + α3`.
    pub alpha: [f64; 4],
    /// `a1(N) = β0 / (1 + β1·N) + β2`.
    pub beta: [f64; 3],
    /// `γ0..γ3` of the logarithmic branch, `γ4..γ7` of the cosine branch.
    pub gamma: [f64; 8],
    pub n_sep_true: u64,
    /// Separation threshold the curves were built against, nats per token.
    pub epsilon: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Allows `γ5`/`γ6` other than the schedule's half cosine period.
    #[serde(default)]
    pub phase_override: bool,
}

/// Free shape parameters; the rest of a spec is derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthShape {
    pub alpha: [f64; 4],
    pub beta: [f64; 3],
    /// `γ1`, `γ2` of the logarithmic branch; `γ0` and `γ3` are solved from
    /// continuity with the cosine tail.
    pub gamma1: f64,
    pub gamma2: f64,
    /// `γ4`.
    pub tail_amplitude: f64,
    /// `γ7`.
    pub tail_offset: f64,
    /// `(γ5, γ6)`; defaults to `(π/n_tot, −π·n_warmup/n_tot)`.
    #[serde(default)]
    pub phase: Option<(f64, f64)>,
}

fn loglog(c: &[f64], n: f64) -> f64 {
    c[0] * (c[1] * n.ln() + c[2]).ln() + c[3]
}

fn loglog_slope(c: &[f64], n: f64) -> f64 {
    c[0] * c[1] / ((c[1] * n.ln() + c[2]) * n)
}

fn recip(b: &[f64], n: f64) -> f64 {
    b[0] / (1.0 + b[1] * n) + b[2]
}

fn recip_slope(b: &[f64], n: f64) -> f64 {
    let d = 1.0 + b[1] * n;
    -b[0] * b[1] / (d * d)
}

fn cosine(g: &[f64], n: f64) -> f64 {
    g[0] * (g[1] * n + g[2]).cos() + g[3]
}

fn cosine_slope(g: &[f64], n: f64) -> f64 {
    -g[0] * g[1] * (g[1] * n + g[2]).sin()
}

pub fn default_manifest() -> RunManifest {
    RunManifest {
        run_id: "synthetic".into(),
        n_tot: 400_000_000,
        n_warmup: 4_000_000,
        seq_len: 1024,
        checkpoint_interval: 2_000_000,
    }
}

impl SynthShape {
    /// Desk-scale stand-in for a 400B-token run: `a0` flattens near 60M
    /// tokens, `a1` near 101M tokens, so the separation lands at 102M.
    pub fn desk_default() -> Self {
        let eps = SeparationThreshold::default().resolve(default_manifest().n_tot);
        let a1_cross = 101_000_000.0;
        let x: f64 = 3.0;
        let a0_cross: f64 = 60_000_000.0;
        let a0_arg = 4.0;
        Self {
            alpha: [eps * a0_cross * a0_arg, 1.0, a0_arg - a0_cross.ln(), 2.5],
            beta: [eps * a1_cross * (1.0 + x).powi(2) / x, x / a1_cross, 0.02],
            gamma1: 1.0,
            gamma2: -13.5,
            tail_amplitude: 0.4,
            tail_offset: 2.3,
            phase: None,
        }
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::from_shape(default_manifest(), &SynthShape::desk_default(), 0.0, 0)
            .expect("default synthetic spec is valid")
    }
}

impl GeneratorSpec {
    /// Derives the separation point from the `a0`/`a1` slopes and the left
    /// `a2` branch from value and slope continuity with the cosine tail.
    pub fn from_shape(
        manifest: RunManifest,
        shape: &SynthShape,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        manifest.validate()?;
        let epsilon = SeparationThreshold::default().resolve(manifest.n_tot);
        Self::from_shape_with_epsilon(manifest, shape, epsilon, noise_sigma, seed)
    }

    pub fn from_shape_with_epsilon(
        manifest: RunManifest,
        shape: &SynthShape,
        epsilon: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let n_sep_true = scan_separation(&manifest, &shape.alpha, &shape.beta, epsilon)
            .ok_or_else(|| {
                Error::InvalidSpec("a0/a1 slopes never fall below epsilon on the grid".into())
            })?;
        let horizon = manifest.n_tot as f64;
        let (g5, g6) = shape
            .phase
            .unwrap_or((PI / horizon, -PI * manifest.n_warmup as f64 / horizon));
        let tail = [shape.tail_amplitude, g5, g6, shape.tail_offset];
        let s = n_sep_true as f64;
        let value = cosine(&tail, s);
        let slope = cosine_slope(&tail, s);
        let arg = shape.gamma1 * s.ln() + shape.gamma2;
        if arg <= 0.0 {
            return Err(Error::InvalidSpec(
                "logarithmic a2 branch undefined at the separation point".into(),
            ));
        }
        let g0 = slope * arg * s / shape.gamma1;
        let g3 = value - g0 * arg.ln();
        let spec = GeneratorSpec {
            manifest,
            alpha: shape.alpha,
            beta: shape.beta,
            gamma: [
                g0,
                shape.gamma1,
                shape.gamma2,
                g3,
                tail[0],
                tail[1],
                tail[2],
                tail[3],
            ],
            n_sep_true,
            epsilon,
            noise_sigma,
            seed,
            phase_override: shape.phase.is_some(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Random spec on the default manifest with the separation between 15%
    /// and 35% of the schedule.
    pub fn random(seed: u64, noise_sigma: f64) -> Self {
        Self::random_with_shape(seed, noise_sigma).1
    }

    /// [`GeneratorSpec::random`] together with the shape it was built from.
    pub fn random_with_shape(seed: u64, noise_sigma: f64) -> (SynthShape, Self) {
        let manifest = default_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = SeparationThreshold::default().resolve(manifest.n_tot);
        let step = manifest.checkpoint_interval as f64;
        let first = step.ln();
        loop {
            let frac: f64 = rng.random_range(0.15..0.35);
            let a1_cross = (frac * manifest.n_tot as f64 / step).round() * step + 0.5 * step;
            let x: f64 = rng.random_range(1.5..4.0);
            let beta = [
                eps * a1_cross * (1.0 + x).powi(2) / x,
                x / a1_cross,
                rng.random_range(0.01..0.04),
            ];
            let a0_cross = a1_cross * rng.random_range(0.3..0.8);
            let alpha1: f64 = rng.random_range(0.5..2.0);
            let arg_c = alpha1 * (a0_cross.ln() - first) + rng.random_range(0.3..3.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let alpha = [
                sign * eps * a0_cross * arg_c / alpha1,
                alpha1,
                arg_c - alpha1 * a0_cross.ln(),
                rng.random_range(1.5..3.5),
            ];
            let gamma1: f64 = rng.random_range(0.5..2.0);
            let shape = SynthShape {
                alpha,
                beta,
                gamma1,
                gamma2: rng.random_range(0.5..2.0) - gamma1 * first,
                tail_amplitude: rng.random_range(0.2..0.5),
                tail_offset: rng.random_range(1.8..2.6),
                phase: None,
            };
            match Self::from_shape(manifest.clone(), &shape, noise_sigma, seed) {
                Ok(spec) => return (shape, spec),
                Err(e) => log::debug!("rejected random spec: {e}"),
            }
        }
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        let all = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain(&self.gamma)
            .chain(std::iter::once(&self.epsilon));
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite curve parameter".into()));
        }
        let horizon = m.n_tot as f64;
        if !self.phase_override {
            let g5 = PI / horizon;
            let g6 = -PI * m.n_warmup as f64 / horizon;
            if (self.gamma[5] - g5).abs() > 1e-12 * g5 || (self.gamma[6] - g6).abs() > 1e-12 {
                return Err(Error::InvalidSpec(
                    "cosine phase must follow the schedule (γ5 = π/n_tot, γ6 = −π·n_warmup/n_tot)"
                        .into(),
                ));
            }
        }
        match scan_separation(m, &self.alpha, &self.beta, self.epsilon) {
            Some(s) if s == self.n_sep_true => {}
            other => {
                return Err(Error::InvalidSpec(format!(
                    "n_sep_true {} disagrees with the slope crossing {other:?}",
                    self.n_sep_true
                )))
            }
        }
        let s = self.n_sep_true as f64;
        let (left, right) = (&self.gamma[..4], &self.gamma[4..]);
        let (lv, rv) = (loglog(left, s), cosine(right, s));
        let (ld, rd) = (loglog_slope(left, s), cosine_slope(right, s));
        if (lv - rv).abs() > 1e-9 * lv.abs().max(1.0) {
            return Err(Error::InvalidSpec(format!(
                "a2 branches not value-continuous at n_sep: {lv} vs {rv}"
            )));
        }
        if (ld - rd).abs() > 1e-6 * ld.abs().max(rd.abs()).max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidSpec(format!(
                "a2 branches not slope-continuous at n_sep: {ld} vs {rd}"
            )));
        }
        for n in m.checkpoint_grid() {
            let (a0, a1, a2) = self.true_params(n);
            let worst = a0.min(0.0) / (1.0 + a1) + a2;
            if !(a0.is_finite() && a1.is_finite() && a2.is_finite()) {
                return Err(Error::InvalidSpec(format!("curves undefined at N = {n}")));
            }
            if a1 < 0.0 || worst < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "a1 < 0 or negative loss at N = {n}"
                )));
            }
        }
        Ok(())
    }

    /// Generating `(a0, a1, a2)` at `n`, with `a0`/`a1` held past the
    /// separation point.
    pub fn true_params(&self, n: u64) -> (f64, f64, f64) {
        let x = n as f64;
        if n >= self.n_sep_true {
            let s = self.n_sep_true as f64;
            (
                loglog(&self.alpha, s),
                recip(&self.beta, s),
                cosine(&self.gamma[4..], x),
            )
        } else {
            (
                loglog(&self.alpha, x),
                recip(&self.beta, x),
                loglog(&self.gamma[..4], x),
            )
        }
    }

    /// Noise-free mean loss over positions at `n`.
    pub fn true_mean_loss(&self, n: u64) -> f64 {
        let (a0, a1, a2) = self.true_params(n);
        let len = self.manifest.seq_len;
        let total: f64 = (1..=len).map(|i| a0 / (1.0 + a1 * i as f64) + a2).sum();
        total / len as f64
    }
}

/// Two specs sharing `a0`/`a1` whose mean-loss curves cross: `A` is lower at
/// 10% of the schedule, `B` has a deeper cosine tail and ends lower.
pub fn crossing_pair(seed: u64, noise_sigma: f64) -> (GeneratorSpec, GeneratorSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut draw = seed;
    loop {
        let (shape, a) = GeneratorSpec::random_with_shape(draw, noise_sigma);
        let mut deeper = shape.clone();
        deeper.tail_amplitude += rng.random_range(0.05..0.15);
        let b = GeneratorSpec::from_shape(
            a.manifest.clone(),
            &deeper,
            noise_sigma,
            seed.wrapping_mul(2).wrapping_add(1),
        );
        let a = a.with_noise(noise_sigma, seed.wrapping_mul(2));
        if let Ok(b) = b {
            let m = &a.manifest;
            let early = (m.n_tot / 10 / m.checkpoint_interval).max(1) * m.checkpoint_interval;
            if a.true_mean_loss(early) < b.true_mean_loss(early)
                && b.true_mean_loss(m.n_tot) < a.true_mean_loss(m.n_tot)
            {
                return (a, b);
            }
        }
        draw = draw.wrapping_add(0x1000);
    }
}

fn scan_separation(m: &RunManifest, alpha: &[f64; 4], beta: &[f64; 3], eps: f64) -> Option<u64> {
    m.checkpoint_grid().into_iter().find(|&n| {
        let x = n as f64;
        loglog_slope(alpha, x).abs() < eps && recip_slope(beta, x).abs() < eps
    })
}

/// One profile per checkpoint of the manifest's cadence. Checkpoint `k`
/// draws its noise from ChaCha stream `k` of the spec seed.
pub fn generate(spec: &GeneratorSpec) -> Result<Trajectory> {
    spec.validate()?;
    let seq_len = spec.manifest.seq_len;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let profiles: Vec<TokenLossProfile> = spec
        .manifest
        .checkpoint_grid()
        .into_par_iter()
        .enumerate()
        .map(|(k, n)| {
            let (a0, a1, a2) = spec.true_params(n);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let losses = (1..=seq_len)
                .map(|i| {
                    let clean = a0 / (1.0 + a1 * i as f64) + a2;
                    if spec.noise_sigma > 0.0 {
                        (clean + noise.sample(&mut rng)).max(0.0)
                    } else {
                        clean
                    }
                })
                .collect();
            TokenLossProfile::new(n, losses)
        })
        .collect();
    Trajectory::new(spec.manifest.clone(), profiles)
}

/// The exact generating curves.
pub fn ground_truth_curves(spec: &GeneratorSpec) -> TemporalCurves {
    let g = spec.gamma;
    TemporalCurves {
        alpha: spec.alpha,
        beta: spec.beta,
        gamma_log: [g[0], g[1], g[2], g[3]],
        gamma_cos: Some([g[4], g[5], g[6], g[7]]),
        n_sep: Some(spec.n_sep_true),
        epsilon: spec.epsilon,
        fit_quality: FitQuality {
            a0: Some(1.0),
            a1: Some(1.0),
            a2: Some(1.0),
        },
    }
}

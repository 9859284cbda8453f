//! Command implementations behind the `tempscale` binary.
//!
//! Each `cmd_*` function reads its inputs, writes its artifacts into the
//! output directory, and returns a report whose `Display` form is printed by
//! the binary.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tempscale_core::baselines::{eval_baseline, fit_baseline, BaselineKind};
use tempscale_core::diagnostics::{self, DeltaProfile, UniformityConfig, UniformityReport};
use tempscale_core::fitkit;
use tempscale_core::hyperbolic::{self, FitStatus};
use tempscale_core::loss_log::{self, parse_trajectory, Trajectory};
use tempscale_core::predictor::{self, PredictorConfig};
use tempscale_core::rerank::{self, CandidateRun, RankedCandidate};
use tempscale_core::synthgen::{self, GeneratorSpec};
use tempscale_core::temporal::{self, TemporalConfig};
use tempscale_core::{
    Error, ErrorClass, Result, SeparationThreshold, Situation, TemporalCurves,
};

pub mod output;

use output::{Cell, Format, OutDir, Table};

#[derive(Debug, Parser)]
#[command(name = "tempscale", version, about = "Fit, extrapolate and compare LLM loss trajectories")]
pub struct Cli {
    /// Output file format.
    #[arg(long, value_enum, default_value_t = Format::Tabular, global = true)]
    pub format: Format,
    /// Worker threads for per-checkpoint and per-candidate work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the per-position and temporal laws to a whole run.
    Fit(FitArgs),
    /// Predict the rest of a run from a prefix.
    Predict(PredictArgs),
    /// Write a synthetic run.
    Synth(SynthArgs),
    /// Rank candidate runs by predicted final loss.
    Rerank(RerankArgs),
    /// Per-position loss-decrease diagnostics.
    Diag(DiagArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunInput {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: RunInput,
    #[arg(long)]
    pub out: PathBuf,
    /// Separation threshold on |da0/dN| and |da1/dN|, nats per token.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Skip the outlier mask and refit.
    #[arg(long)]
    pub no_outlier_refit: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: RunInput,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of n_tot used as the training prefix.
    #[arg(long, default_value_t = 0.1)]
    pub train_frac: f64,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Forecast spacing past the prefix, in tokens.
    #[arg(long)]
    pub grid_cadence: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator spec (JSON); the built-in default when absent.
    #[arg(long, conflicts_with = "random")]
    pub spec: Option<PathBuf>,
    /// Draw a random spec from the seed.
    #[arg(long)]
    pub random: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-position Gaussian noise, nats.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RerankArgs {
    /// One per candidate, paired with --log in order.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub log: Vec<PathBuf>,
    /// Candidate labels; defaults to each manifest's run_id.
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub train_frac: f64,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub grid_cadence: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagArgs {
    #[command(flatten)]
    pub input: RunInput,
    #[arg(long)]
    pub out: PathBuf,
    /// Separation point; fitted from the run when absent.
    #[arg(long)]
    pub n_sep: Option<u64>,
    /// Token span of the early and late pairs; 5% of n_tot by default.
    #[arg(long)]
    pub window: Option<u64>,
    /// Leading fraction of positions left out of the flatness statistic.
    #[arg(long, default_value_t = 0.01)]
    pub trim: f64,
    /// Extra checkpoint pair to report, with --to.
    #[arg(long, requires = "to")]
    pub from: Option<u64>,
    #[arg(long, requires = "from")]
    pub to: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

/// 1 usage, 2 parse, 3 insufficient data, 4 solver failure, 5 invariant.
pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Parse => 2,
        ErrorClass::InsufficientData => 3,
        ErrorClass::Solver => 4,
        ErrorClass::Invariant => 5,
    }
}

pub fn run(cli: &Cli) -> Result<String> {
    let f = cli.format;
    Ok(match &cli.command {
        Command::Fit(a) => cmd_fit(a, f)?.to_string(),
        Command::Predict(a) => cmd_predict(a, f)?.to_string(),
        Command::Synth(a) => cmd_synth(a, f)?.to_string(),
        Command::Rerank(a) => cmd_rerank(a, f)?.to_string(),
        Command::Diag(a) => cmd_diag(a, f)?.to_string(),
    })
}

fn threshold(epsilon: Option<f64>) -> Result<SeparationThreshold> {
    match epsilon {
        None => Ok(SeparationThreshold::default()),
        Some(v) if v.is_finite() && v > 0.0 => Ok(SeparationThreshold::per_token(v)),
        Some(v) => Err(Error::InvalidArgument(format!(
            "--epsilon must be positive and finite, got {v}"
        ))),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        })
    }
}

fn load(input: &RunInput) -> Result<Trajectory> {
    require_file(&input.manifest)?;
    require_file(&input.log)?;
    parse_trajectory(&input.manifest, &input.log)
}

fn grid_cadence(c: Option<u64>) -> Result<Option<u64>> {
    match c {
        Some(0) => Err(Error::InvalidArgument("--grid-cadence must be positive".into())),
        other => Ok(other),
    }
}

fn check_fraction(frac: f64) -> Result<()> {
    if frac > 0.0 && frac <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "--train-frac must lie in (0, 1], got {frac}"
        )))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineOutcome {
    pub kind: BaselineKind,
    pub params: Option<[f64; 3]>,
    pub r_squared: Option<f64>,
    pub error: Option<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.6}"))
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub checkpoints: usize,
    pub failed_checkpoints: usize,
    pub fraction_above_0_95: f64,
    pub curves: TemporalCurves,
    /// Temporal law against the observed mean-loss curve.
    pub r_squared: f64,
    /// Fitted `γ5 · n_tot / π`.
    pub gamma5_ratio: Option<f64>,
    pub baselines: Vec<BaselineOutcome>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl fmt::Display for FitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "checkpoints: {} ({} failed), R² > 0.95: {:.1}%",
            self.checkpoints,
            self.failed_checkpoints,
            100.0 * self.fraction_above_0_95
        )?;
        match self.curves.n_sep {
            Some(s) => writeln!(f, "separation point: {s}")?,
            None => writeln!(f, "separation point: not reached")?,
        }
        if let Some(r) = self.gamma5_ratio {
            writeln!(f, "gamma5 * n_tot / pi: {r:.6}")?;
        }
        writeln!(f, "{:<14} {:>12}", "method", "R²")?;
        writeln!(f, "{:<14} {:>12.6}", "temporal", self.r_squared)?;
        for b in &self.baselines {
            match &b.error {
                None => writeln!(f, "{:<14} {:>12}", b.kind.name(), fmt_opt(b.r_squared))?,
                Some(e) => writeln!(f, "{:<14} {:>12}  ({e})", b.kind.name(), "failed")?,
            }
        }
        Ok(())
    }
}

fn baseline_outcomes(tokens: &[f64], losses: &[f64]) -> Vec<BaselineOutcome> {
    BaselineKind::ALL
        .iter()
        .map(|&kind| match fit_baseline(kind, tokens, losses) {
            Ok(m) => BaselineOutcome {
                kind,
                params: Some(m.params),
                r_squared: Some(m.r_squared),
                error: None,
            },
            Err(e) => BaselineOutcome {
                kind,
                params: None,
                r_squared: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn cmd_fit(args: &FitArgs, format: Format) -> Result<FitReport> {
    let epsilon = threshold(args.epsilon)?;
    let traj = load(&args.input)?;
    let out = OutDir::create(&args.out, format)?;
    let seq_len = traj.manifest.seq_len;

    let fits = hyperbolic::fit_trajectory(&traj)?;
    let config = TemporalConfig {
        epsilon,
        outlier_refit: !args.no_outlier_refit,
    };
    let curves = temporal::fit_temporal(&fits.params, &traj.manifest, &config)?;

    let tokens = traj.tokens();
    let observed = traj.mean_losses();
    let modelled = tokens
        .iter()
        .map(|&n| temporal::mean_loss_at(&curves, n, seq_len))
        .collect::<Result<Vec<_>>>()?;
    let r_squared = fitkit::r_squared(&observed, &modelled)?;
    let tokens_f: Vec<f64> = tokens.iter().map(|&n| n as f64).collect();
    let baselines = baseline_outcomes(&tokens_f, &observed);

    let mut files = Vec::new();
    let mut table = Table::new(
        "checkpoint_fits",
        &["tokens", "a0", "a1", "a2", "r_squared", "status"],
    );
    for p in &fits.params {
        let status = match p.status {
            FitStatus::Converged => "converged",
            FitStatus::NotConverged => "not_converged",
            FitStatus::Degenerate => "degenerate",
        };
        table.push(vec![
            p.tokens_trained.into(),
            p.a0.into(),
            p.a1.into(),
            p.a2.into(),
            p.r_squared.into(),
            status.into(),
        ]);
    }
    for (n, e) in &fits.failures {
        table.push(vec![
            (*n).into(),
            Cell::Missing,
            Cell::Missing,
            Cell::Missing,
            Cell::Missing,
            format!("failed: {e}").into(),
        ]);
    }
    files.push(out.write_table("checkpoint_fits", &table)?);
    files.push(out.write_json("curves.json", "temporal_curves", &curves)?);

    let mut summary = Table::new(
        "fit_summary",
        &["method", "r_squared", "p0", "p1", "p2", "status"],
    );
    summary.push(vec![
        "temporal".into(),
        r_squared.into(),
        Cell::Missing,
        Cell::Missing,
        Cell::Missing,
        "ok".into(),
    ]);
    for b in &baselines {
        let p = b.params.map(|p| p.map(Some)).unwrap_or([None; 3]);
        summary.push(vec![
            b.kind.name().into(),
            b.r_squared.into(),
            p[0].into(),
            p[1].into(),
            p[2].into(),
            b.error.clone().unwrap_or_else(|| "ok".into()).into(),
        ]);
    }
    files.push(out.write_table("fit_summary", &summary)?);

    let mut curve = Table::new(
        "mean_loss_curve",
        &["tokens", "observed", "temporal", "power_law", "reciprocal", "logarithmic"],
    );
    let models: Vec<_> = BaselineKind::ALL
        .iter()
        .map(|&k| fit_baseline(k, &tokens_f, &observed).ok())
        .collect();
    for (i, &n) in tokens.iter().enumerate() {
        let mut row = vec![n.into(), observed[i].into(), modelled[i].into()];
        for m in &models {
            row.push(m.as_ref().and_then(|m| eval_baseline(m, n as f64).ok()).into());
        }
        curve.push(row);
    }
    files.push(out.write_table("mean_loss_curve", &curve)?);

    let mut params = Table::new(
        "param_curves",
        &["tokens", "a0", "a0_fit", "a1", "a1_fit", "a2", "a2_fit"],
    );
    for p in &fits.params {
        let (f0, f1, f2) = curves.eval(p.tokens_trained)?;
        params.push(vec![
            p.tokens_trained.into(),
            p.a0.into(),
            f0.into(),
            p.a1.into(),
            f1.into(),
            p.a2.into(),
            f2.into(),
        ]);
    }
    files.push(out.write_table("param_curves", &params)?);

    let gamma5_ratio = curves
        .gamma_cos
        .map(|g| g[1] * traj.manifest.n_tot as f64 / std::f64::consts::PI);
    Ok(FitReport {
        checkpoints: traj.len(),
        failed_checkpoints: fits.failures.len(),
        fraction_above_0_95: fits.fraction_above(0.95),
        curves,
        r_squared,
        gamma5_ratio,
        baselines,
        files,
    })
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    HeldOut,
    InSample,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: String,
    pub mse: Option<f64>,
    pub r_squared: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictReport {
    pub n_train: u64,
    pub prefix_checkpoints: usize,
    pub situation: Situation,
    pub n_sep_estimate: u64,
    pub degraded: bool,
    pub eps4: f64,
    pub eps7: f64,
    pub scope: Scope,
    pub evaluated_points: usize,
    pub metrics: Vec<MethodMetrics>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl PredictReport {
    pub fn metric(&self, method: &str) -> Option<&MethodMetrics> {
        self.metrics.iter().find(|m| m.method == method)
    }
}

impl fmt::Display for PredictReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "prefix: {} checkpoints up to {} tokens",
            self.prefix_checkpoints, self.n_train
        )?;
        let situation = match self.situation {
            Situation::One => "one",
            Situation::Two => "two",
        };
        write!(f, "situation {situation}, estimated separation {}", self.n_sep_estimate)?;
        if self.degraded {
            write!(f, " (not reached; degraded)")?;
        }
        writeln!(f)?;
        let scope = match self.scope {
            Scope::HeldOut => "held-out",
            Scope::InSample => "in-sample",
        };
        writeln!(f, "{scope} evaluation over {} checkpoints", self.evaluated_points)?;
        writeln!(f, "{:<14} {:>14} {:>14}", "method", "MSE", "R²")?;
        for m in &self.metrics {
            match &m.error {
                None => writeln!(
                    f,
                    "{:<14} {:>14} {:>14}",
                    m.method,
                    m.mse.map_or("n/a".into(), |v| format!("{v:.3e}")),
                    fmt_opt(m.r_squared)
                )?,
                Some(e) => writeln!(f, "{:<14} {:>14}  ({e})", m.method, "failed")?,
            }
        }
        Ok(())
    }
}

fn score(observed: &[f64], predicted: Result<Vec<f64>>, method: &str) -> MethodMetrics {
    match predicted {
        Ok(p) => MethodMetrics {
            method: method.into(),
            mse: fitkit::mse(observed, &p).ok(),
            r_squared: fitkit::r_squared(observed, &p).ok(),
            error: None,
        },
        Err(e) => MethodMetrics {
            method: method.into(),
            mse: None,
            r_squared: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn cmd_predict(args: &PredictArgs, format: Format) -> Result<PredictReport> {
    check_fraction(args.train_frac)?;
    let config = PredictorConfig {
        epsilon: threshold(args.epsilon)?,
        outlier_refit: true,
        grid_cadence: grid_cadence(args.grid_cadence)?,
    };
    let traj = load(&args.input)?;
    let out = OutDir::create(&args.out, format)?;
    let prefix = predictor::truncate(&traj, args.train_frac)?;
    let pred = predictor::predict(&prefix, &config)?;
    let seq_len = traj.manifest.seq_len;
    let n_train = pred.curves.n_train;

    let held: Vec<_> = traj
        .profiles
        .iter()
        .filter(|p| p.tokens_trained > n_train)
        .collect();
    let (scope, eval_profiles) = if held.is_empty() {
        (Scope::InSample, prefix.profiles.iter().collect::<Vec<_>>())
    } else {
        (Scope::HeldOut, held)
    };
    let eval_tokens: Vec<u64> = eval_profiles.iter().map(|p| p.tokens_trained).collect();
    let observed: Vec<f64> = eval_profiles.iter().map(|p| p.mean_loss()).collect();

    let prefix_tokens: Vec<f64> = prefix.tokens().iter().map(|&n| n as f64).collect();
    let prefix_losses = prefix.mean_losses();
    let baselines: Vec<(BaselineKind, Result<_>)> = BaselineKind::ALL
        .iter()
        .map(|&k| (k, fit_baseline(k, &prefix_tokens, &prefix_losses)))
        .collect();

    let mut metrics = vec![score(
        &observed,
        eval_tokens
            .iter()
            .map(|&n| pred.curves.mean_loss(n, seq_len))
            .collect(),
        "temporal",
    )];
    for (kind, model) in &baselines {
        let predicted = match model {
            Ok(m) => eval_tokens
                .iter()
                .map(|&n| eval_baseline(m, n as f64))
                .collect(),
            Err(e) => Err(Error::Solver(format!("baseline fit failed: {e}"))),
        };
        metrics.push(score(&observed, predicted, kind.name()));
    }

    let mut files = Vec::new();
    let mut fc = Table::new(
        "forecast",
        &[
            "tokens",
            "provenance",
            "observed",
            "temporal",
            "power_law",
            "reciprocal",
            "logarithmic",
        ],
    );
    for (i, &n) in pred.forecast.tokens.iter().enumerate() {
        let provenance = match pred.forecast.provenance[i] {
            predictor::Provenance::Fitted => "fitted",
            predictor::Provenance::Extrapolated => "extrapolated",
        };
        let mut row = vec![
            n.into(),
            provenance.into(),
            traj.profile_at(n).map(|p| p.mean_loss()).into(),
            pred.forecast.predicted_mean_loss[i].into(),
        ];
        for (_, m) in &baselines {
            row.push(
                m.as_ref()
                    .ok()
                    .and_then(|m| eval_baseline(m, n as f64).ok())
                    .into(),
            );
        }
        fc.push(row);
    }
    files.push(out.write_table("forecast", &fc)?);

    let scope_name = match scope {
        Scope::HeldOut => "held_out",
        Scope::InSample => "in_sample",
    };
    let mut mt = Table::new(
        "prediction_metrics",
        &["method", "scope", "points", "mse", "r_squared", "status"],
    );
    for m in &metrics {
        mt.push(vec![
            m.method.clone().into(),
            scope_name.into(),
            eval_tokens.len().into(),
            m.mse.into(),
            m.r_squared.into(),
            m.error.clone().unwrap_or_else(|| "ok".into()).into(),
        ]);
    }
    files.push(out.write_table("prediction_metrics", &mt)?);
    files.push(out.write_json("predicted_curves.json", "predicted_curves", &pred.curves)?);

    Ok(PredictReport {
        n_train,
        prefix_checkpoints: prefix.len(),
        situation: pred.curves.situation,
        n_sep_estimate: pred.curves.n_sep_estimate,
        degraded: pred.curves.degraded,
        eps4: pred.curves.eps4,
        eps7: pred.curves.eps7,
        scope,
        evaluated_points: eval_tokens.len(),
        metrics,
        files,
    })
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub checkpoints: usize,
    pub n_sep_true: u64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub manifest_path: PathBuf,
    pub log_path: PathBuf,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl fmt::Display for SynthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} checkpoints, separation at {}, noise sigma {}, seed {}",
            self.checkpoints, self.n_sep_true, self.noise_sigma, self.seed
        )?;
        writeln!(f, "manifest: {}", self.manifest_path.display())?;
        writeln!(f, "log: {}", self.log_path.display())
    }
}

pub fn cmd_synth(args: &SynthArgs, format: Format) -> Result<SynthReport> {
    let seed = args.seed.unwrap_or(0);
    let mut spec = if let Some(path) = &args.spec {
        require_file(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        serde_json::from_str::<GeneratorSpec>(&text)
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?
    } else if args.random {
        GeneratorSpec::random(seed, 0.0)
    } else {
        GeneratorSpec::default()
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(sigma) = args.noise_sigma {
        spec.noise_sigma = sigma;
    }
    let traj = synthgen::generate(&spec)?;
    let out = OutDir::create(&args.out, format)?;

    let mut manifest_bytes = Vec::new();
    loss_log::write_manifest(&spec.manifest, &mut manifest_bytes)
        .map_err(|e| Error::Invariant(e.to_string()))?;
    let manifest_path = out.write_raw("manifest.json", &manifest_bytes)?;
    let mut log_bytes = Vec::new();
    loss_log::write_log(&traj, BufWriter::new(&mut log_bytes))
        .map_err(|e| Error::Invariant(e.to_string()))?;
    let log_path = out.write_raw("losses.jsonl", &log_bytes)?;

    let mut files = vec![manifest_path.clone(), log_path.clone()];
    files.push(out.write_json("spec.json", "generator_spec", &spec)?);
    files.push(out.write_json(
        "truth.json",
        "temporal_curves",
        synthgen::ground_truth_curves(&spec),
    )?);
    let mut truth = Table::new("true_mean_loss", &["tokens", "mean_loss"]);
    for n in spec.manifest.checkpoint_grid() {
        truth.push(vec![n.into(), spec.true_mean_loss(n).into()]);
    }
    files.push(out.write_table("true_mean_loss", &truth)?);

    Ok(SynthReport {
        checkpoints: traj.len(),
        n_sep_true: spec.n_sep_true,
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
        manifest_path,
        log_path,
        files,
    })
}

// ---------------------------------------------------------------- rerank

#[derive(Debug, Clone, Serialize)]
pub struct RerankReport {
    pub ranked: Vec<RankedCandidate>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl RerankReport {
    pub fn labels(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.label.as_str()).collect()
    }
}

impl fmt::Display for RerankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4}  {:<20} {:>14} {:>9} {:>14} {:>10}",
            "rank", "label", "final loss", "situation", "separation", "fit R²"
        )?;
        for r in &self.ranked {
            if let Some(e) = &r.error {
                writeln!(f, "{:>4}  {:<20} failed: {e}", r.rank, r.label)?;
                continue;
            }
            let situation = match r.situation {
                Some(Situation::One) => "one",
                Some(Situation::Two) => "two",
                None => "-",
            };
            writeln!(
                f,
                "{:>4}  {:<20} {:>14} {:>9} {:>14} {:>10}",
                r.rank,
                r.label,
                fmt_opt(r.predicted_final_loss),
                situation,
                r.n_sep_estimate.map_or("-".into(), |n| n.to_string()),
                r.fit_r_squared.map_or("n/a".into(), |v| format!("{v:.5}"))
            )?;
        }
        Ok(())
    }
}

pub fn cmd_rerank(args: &RerankArgs, format: Format) -> Result<RerankReport> {
    check_fraction(args.train_frac)?;
    if args.manifest.len() != args.log.len() {
        return Err(Error::InvalidArgument(format!(
            "{} --manifest but {} --log arguments",
            args.manifest.len(),
            args.log.len()
        )));
    }
    if !args.label.is_empty() && args.label.len() != args.manifest.len() {
        return Err(Error::InvalidArgument(format!(
            "{} --label for {} candidates",
            args.label.len(),
            args.manifest.len()
        )));
    }
    let config = PredictorConfig {
        epsilon: threshold(args.epsilon)?,
        outlier_refit: true,
        grid_cadence: grid_cadence(args.grid_cadence)?,
    };
    let mut candidates = Vec::with_capacity(args.manifest.len());
    for (i, (m, l)) in args.manifest.iter().zip(&args.log).enumerate() {
        let traj = load(&RunInput {
            manifest: m.clone(),
            log: l.clone(),
        })?;
        let label = args
            .label
            .get(i)
            .cloned()
            .unwrap_or_else(|| traj.manifest.run_id.clone());
        candidates.push(CandidateRun::new(label, predictor::truncate(&traj, args.train_frac)?));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = candidates.iter().find(|c| !seen.insert(c.label.clone())) {
        return Err(Error::InvalidArgument(format!(
            "duplicate candidate label {:?}; pass --label",
            dup.label
        )));
    }
    let out = OutDir::create(&args.out, format)?;
    let ranked = rerank::rerank(&candidates, &config)?;

    let mut table = Table::new(
        "ranking",
        &[
            "rank",
            "label",
            "predicted_final_loss",
            "situation",
            "n_sep_estimate",
            "fit_r_squared",
            "status",
        ],
    );
    let mut forecasts = Table::new(
        "candidate_forecasts",
        &["label", "tokens", "provenance", "predicted_mean_loss"],
    );
    for r in &ranked {
        table.push(vec![
            r.rank.into(),
            r.label.clone().into(),
            r.predicted_final_loss.into(),
            match r.situation {
                Some(Situation::One) => "one".into(),
                Some(Situation::Two) => "two".into(),
                None => Cell::Missing,
            },
            r.n_sep_estimate.into(),
            r.fit_r_squared.into(),
            r.error.clone().map_or("ok".into(), |e| format!("failed: {e}")).into(),
        ]);
        if let Some(fc) = &r.forecast {
            for i in 0..fc.len() {
                forecasts.push(vec![
                    r.label.clone().into(),
                    fc.tokens[i].into(),
                    match fc.provenance[i] {
                        predictor::Provenance::Fitted => "fitted".into(),
                        predictor::Provenance::Extrapolated => "extrapolated".into(),
                    },
                    fc.predicted_mean_loss[i].into(),
                ]);
            }
        }
    }
    let files = vec![
        out.write_table("ranking", &table)?,
        out.write_table("candidate_forecasts", &forecasts)?,
    ];
    Ok(RerankReport { ranked, files })
}

// ---------------------------------------------------------------- diag

#[derive(Debug, Clone, Serialize)]
pub struct DiagReport {
    pub uniformity: UniformityReport,
    pub pair: Option<DeltaProfile>,
    pub n_sep_fitted: bool,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl fmt::Display for DiagReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let u = &self.uniformity;
        let src = if self.n_sep_fitted { "fitted" } else { "given" };
        writeln!(f, "separation point: {} ({src}), window {}", u.n_sep, u.window)?;
        for (name, d) in [("early", &u.early), ("late", &u.late)] {
            writeln!(
                f,
                "{name:<6} {:>12} -> {:<12} mean decrease {:.6e}, flatness {}",
                d.n_from,
                d.n_to,
                d.mean_delta,
                d.flatness.map_or("n/a".into(), |v| format!("{v:.4e}"))
            )?;
        }
        if let Some(d) = &self.pair {
            writeln!(
                f,
                "pair   {:>12} -> {:<12} mean decrease {:.6e}, flatness {}",
                d.n_from,
                d.n_to,
                d.mean_delta,
                d.flatness.map_or("n/a".into(), |v| format!("{v:.4e}"))
            )?;
        }
        if u.late_more_uniform {
            writeln!(f, "late window is more uniform than early window")
        } else {
            writeln!(f, "warning: late window is not more uniform than early window")
        }
    }
}

fn delta_table(d: &DeltaProfile) -> Table {
    let mut t = Table::new("delta_profile", &["position", "delta"]);
    for (i, v) in d.delta_by_position.iter().enumerate() {
        t.push(vec![(i + 1).into(), (*v).into()]);
    }
    t
}

pub fn cmd_diag(args: &DiagArgs, format: Format) -> Result<DiagReport> {
    if !(0.0..1.0).contains(&args.trim) {
        return Err(Error::InvalidArgument(format!(
            "--trim must lie in [0, 1), got {}",
            args.trim
        )));
    }
    let epsilon = threshold(args.epsilon)?;
    let traj = load(&args.input)?;
    let (n_sep, fitted) = match args.n_sep {
        Some(s) => (s, false),
        None => {
            let fits = hyperbolic::fit_trajectory(&traj)?;
            let config = TemporalConfig {
                epsilon,
                outlier_refit: true,
            };
            let curves = temporal::fit_temporal(&fits.params, &traj.manifest, &config)?;
            let s = curves.n_sep.ok_or(Error::InsufficientData {
                what: "uniformity report (separation point reached within the run)",
                needed: 1,
                got: 0,
            })?;
            (s, true)
        }
    };
    let config = UniformityConfig {
        window: args.window,
        trim_fraction: args.trim,
    };
    let uniformity = diagnostics::uniformity_report(&traj, n_sep, &config)?;
    let pair = match (args.from, args.to) {
        (Some(a), Some(b)) => Some(diagnostics::delta_profile_trimmed(&traj, a, b, args.trim)?),
        _ => None,
    };
    let out = OutDir::create(&args.out, format)?;

    let mut summary = Table::new(
        "uniformity",
        &["window", "n_from", "n_to", "mean_delta", "flatness"],
    );
    let mut rows = vec![("early", &uniformity.early), ("late", &uniformity.late)];
    if let Some(p) = &pair {
        rows.push(("pair", p));
    }
    for (name, d) in &rows {
        summary.push(vec![
            (*name).into(),
            d.n_from.into(),
            d.n_to.into(),
            d.mean_delta.into(),
            d.flatness.into(),
        ]);
    }
    let mut files = vec![out.write_table("uniformity", &summary)?];
    for (name, d) in &rows {
        files.push(out.write_table(&format!("delta_{name}"), &delta_table(d))?);
    }
    Ok(DiagReport {
        uniformity,
        pair,
        n_sep_fitted: fitted,
        files,
    })
}

/// Writes a trajectory as a manifest plus loss log under `dir`.
pub fn write_run(dir: &Path, traj: &Trajectory) -> Result<RunInput> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let manifest = dir.join("manifest.json");
    let log = dir.join("losses.jsonl");
    let open = |p: &Path| {
        File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    loss_log::write_manifest(&traj.manifest, open(&manifest)?).map_err(|e| Error::Io {
        path: manifest.clone(),
        source: e,
    })?;
    loss_log::write_log(traj, BufWriter::new(open(&log)?)).map_err(|e| Error::Io {
        path: log.clone(),
        source: e,
    })?;
    Ok(RunInput { manifest, log })
}

//! Acceptance checks; prints one PASS/FAIL line per criterion.

#![allow(clippy::approx_constant)]

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tempscale_cli::output::Format;
use tempscale_cli::{
    cmd_fit, cmd_predict, cmd_rerank, cmd_synth, write_run, FitArgs, PredictArgs, RerankArgs,
    RunInput, SynthArgs,
};
use tempscale_core::diagnostics::delta_profile;
use tempscale_core::fitkit::{mse, nls_fit, r_squared};
use tempscale_core::hyperbolic::{
    aggregate_mean_loss, eval_position_loss, fit_checkpoint, fit_trajectory, FitStatus,
};
use tempscale_core::loss_log::{mean_loss, parse_trajectory, perplexity};
use tempscale_core::predictor::{predict, solve_boundary, truncate, PredictorConfig};
use tempscale_core::synthgen::{crossing_pair, generate, GeneratorSpec};
use tempscale_core::temporal::{d_cosine, d_loglog, eval_cosine, eval_loglog};
use tempscale_core::{Error, HyperbolicParams, RunManifest, TokenLossProfile, Trajectory};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn synth(dir: &Path, seed: u64, sigma: f64) -> RunInput {
    let args = SynthArgs {
        out: dir.to_path_buf(),
        spec: None,
        random: false,
        seed: Some(seed),
        noise_sigma: Some(sigma),
    };
    let r = cmd_synth(&args, Format::Tabular).expect("synth");
    RunInput {
        manifest: r.manifest_path,
        log: r.log_path,
    }
}

fn fit_noiseless(tmp: &Path) -> tempscale_cli::FitReport {
    let input = synth(&tmp.join("run"), 0, 0.0);
    let args = FitArgs {
        input,
        out: tmp.join("fit"),
        epsilon: None,
        no_outlier_refit: false,
    };
    cmd_fit(&args, Format::Tabular).expect("fit")
}

fn round_trip() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let report = fit_noiseless(tmp.path());
    let secs = start.elapsed().as_secs_f64();
    let ratio = report.gamma5_ratio.ok_or("cosine segment not fitted")?;
    let msg = format!(
        "{} checkpoints, R² = {:.6}, γ5·n_tot/π = {:.6}, {:.2} s",
        report.checkpoints, report.r_squared, ratio, secs
    );
    ensure(report.checkpoints == 200, || format!("{msg}; expected 200 checkpoints"))?;
    ensure(report.r_squared >= 0.999, || msg.clone())?;
    ensure((ratio - 1.0).abs() <= 0.01, || msg.clone())?;
    ensure(secs < 60.0, || msg.clone())?;
    Ok(msg)
}

fn baseline_ordering() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let report = fit_noiseless(tmp.path());
    let mut parts = vec![format!("temporal {:.6}", report.r_squared)];
    let mut ok = true;
    for b in &report.baselines {
        match (b.r_squared, &b.error) {
            (Some(r), _) => {
                ok &= r < report.r_squared;
                parts.push(format!("{} {r:.6}", b.kind.name()));
            }
            (None, e) => parts.push(format!("{} failed ({})", b.kind.name(), e.as_deref().unwrap_or("?"))),
        }
    }
    let msg = parts.join(", ");
    ensure(ok, || msg.clone())?;
    Ok(msg)
}

fn prediction_mse() -> Outcome {
    const FRACS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
    const SEEDS: u64 = 10;
    let tmp = tempfile::tempdir().unwrap();
    let mut mse_sum = [0.0; 4];
    let mut losses = Vec::new();
    for seed in 0..SEEDS {
        let input = synth(&tmp.path().join(format!("run{seed}")), seed, 0.005);
        for (k, &frac) in FRACS.iter().enumerate() {
            let args = PredictArgs {
                input: input.clone(),
                out: tmp.path().join(format!("pred{seed}_{k}")),
                train_frac: frac,
                epsilon: None,
                grid_cadence: None,
            };
            let report = cmd_predict(&args, Format::Tabular).map_err(|e| e.to_string())?;
            let ours = report.metric("temporal").unwrap();
            let our_mse = ours.mse.ok_or_else(|| format!("seed {seed} frac {frac}: no MSE"))?;
            let our_r2 = ours.r_squared.unwrap_or(f64::NEG_INFINITY);
            mse_sum[k] += our_mse;
            for m in report.metrics.iter().filter(|m| m.method != "temporal") {
                // A baseline that cannot be evaluated on the held-out span ranks below.
                if let Some(r) = m.r_squared {
                    if r >= our_r2 {
                        losses.push(format!("seed {seed} frac {frac}: {} {r:.4} >= {our_r2:.4}", m.method));
                    }
                }
            }
        }
    }
    let means: Vec<String> = FRACS
        .iter()
        .zip(mse_sum)
        .map(|(f, s)| format!("{f}: {:.2e}", s / SEEDS as f64))
        .collect();
    let msg = format!("mean held-out MSE {}", means.join(", "));
    ensure(mse_sum.iter().all(|s| s / (SEEDS as f64) < 1e-3), || msg.clone())?;
    ensure(losses.is_empty(), || format!("{msg}; R² ordering broken: {}", losses.join("; ")))?;
    Ok(format!("{msg}; temporal R² above every baseline in all {} runs", SEEDS * 4))
}

fn boundary_solver() -> Outcome {
    let manifest = RunManifest {
        run_id: "closed-form".into(),
        n_tot: 1_000_000_000,
        n_warmup: 0,
        seq_len: 2,
        checkpoint_interval: 1_000_000,
    };
    let (g4, g7) = solve_boundary(2.0, -3.1415926536e-9, 5e8, &manifest).ok_or("no solution")?;
    ensure((g4 - 1.0).abs() <= 1e-9 && (g7 - 2.0).abs() <= 1e-9, || {
        format!("closed form gave ({g4}, {g7})")
    })?;

    let (mut worst_value, mut worst_slope): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let spec = GeneratorSpec::random(seed, 0.0);
        let traj = generate(&spec).map_err(|e| e.to_string())?;
        let pred = predict(&truncate(&traj, 0.1).unwrap(), &PredictorConfig::new())
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let pc = &pred.curves;
        ensure(!pc.degraded, || format!("seed {seed}: degraded prediction"))?;
        let x = pc.n_sep_estimate as f64;
        let tail = pc.curves.gamma_cos.ok_or_else(|| format!("seed {seed}: no tail"))?;
        let left = eval_loglog(&pc.curves.gamma_log, x);
        let dl = d_loglog(&pc.curves.gamma_log, x);
        let rv = (left - eval_cosine(&tail, x)).abs() / left.abs().max(1.0);
        let rs = (dl - d_cosine(&tail, x)).abs() / dl.abs().max(f64::MIN_POSITIVE);
        worst_value = worst_value.max(rv);
        worst_slope = worst_slope.max(rs);
    }
    let msg = format!(
        "closed form ({g4:.12}, {g7:.12}); 100 random specs: value gap {worst_value:.1e}, relative slope gap {worst_slope:.1e}"
    );
    ensure(worst_value <= 1e-9 && worst_slope <= 1e-6, || msg.clone())?;
    Ok(msg)
}

fn metric_units() -> Outcome {
    let mut checked = 0usize;
    let mut check = |name: &str, cond: bool| -> Result<(), String> {
        checked += 1;
        ensure(cond, || format!("{name} failed"))
    };

    // loss log
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.json");
    fs::write(
        &manifest,
        r#"{"run_id":"t","seq_len":4,"n_tot":1000,"n_warmup":10,"checkpoint_interval":100}"#,
    )
    .unwrap();
    let parse = |body: &str| {
        let log = tmp.path().join("log.jsonl");
        fs::write(&log, body).unwrap();
        parse_trajectory(&manifest, &log)
    };
    let traj = parse("{\"tokens_trained\":100,\"loss_by_position\":[4,3,2.5,2.4]}\n");
    check(
        "well-formed log",
        matches!(&traj, Ok(t) if t.len() == 1 && t.profiles[0].loss_by_position == [4.0, 3.0, 2.5, 2.4]),
    )?;
    check(
        "length mismatch",
        matches!(parse("{\"tokens_trained\":100,\"loss_by_position\":[4,3,2.5]}\n"), Err(Error::LengthMismatch { .. })),
    )?;
    check(
        "duplicate tokens",
        matches!(
            parse("{\"tokens_trained\":100,\"loss_by_position\":[4,3,2,1]}\n{\"tokens_trained\":100,\"loss_by_position\":[4,3,2,1]}\n"),
            Err(Error::DuplicateTokens { .. })
        ),
    )?;
    let ml = |v: &[f64]| mean_loss(&TokenLossProfile::new(1, v.to_vec()));
    check("mean [1,2,3,4]", ml(&[1.0, 2.0, 3.0, 4.0]) == 2.5)?;
    check("mean constant", ml(&[0.75; 9]) == 0.75)?;
    check("mean [0.5,1.5]", ml(&[0.5, 1.5]) == 1.0)?;
    check("ppl(0)", perplexity(0.0) == 1.0)?;
    check("ppl(ln 2)", (perplexity(2f64.ln()) - 2.0).abs() < 1e-12)?;
    check("ppl(0.6931472)", (perplexity(0.6931472) - 2.0).abs() < 1e-6)?;
    check("ppl(1)", (perplexity(1.0) - 2.7182818).abs() < 1e-7)?;

    // fitkit
    let line = |p: &[f64], x: f64| p[0] * x + p[1];
    let xs = [0.0, 1.0, 2.0];
    let fit = nls_fit(line, &xs, &[1.0, 3.0, 5.0], &[0.0, 0.0], None).map_err(|e| e.to_string())?;
    check(
        "linear nls",
        (fit.params[0] - 2.0).abs() < 1e-9 && (fit.params[1] - 1.0).abs() < 1e-9 && fit.r_squared == Some(1.0),
    )?;
    let fit = nls_fit(line, &xs, &[5.0; 3], &[0.0, 0.0], None).map_err(|e| e.to_string())?;
    check(
        "constant nls",
        fit.params[0].abs() < 1e-9 && (fit.params[1] - 5.0).abs() < 1e-9,
    )?;
    check("R² perfect", r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).ok() == Some(1.0))?;
    check("R² mean", r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).ok() == Some(0.0))?;
    check("R² half", r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).ok() == Some(0.5))?;
    check("MSE zero", mse(&[1.5, 2.5], &[1.5, 2.5]).ok() == Some(0.0))?;
    check("MSE half", mse(&[1.0, 2.0], &[1.0, 3.0]).ok() == Some(0.5))?;
    check("MSE offset", mse(&[0.0; 3], &[1.0; 3]).ok() == Some(1.0))?;

    // hyperbolic
    let hp = HyperbolicParams::new;
    check("eval substitution", eval_position_loss(&hp(2.0, 1.0, 0.5), 3) == 1.0)?;
    check("eval zero gap", (1..50).all(|i| eval_position_loss(&hp(0.0, 0.37, 1.3), i) == 1.3))?;
    check("eval zero scaling", (1..50).all(|i| eval_position_loss(&hp(1.0, 0.0, 0.0), i) == 1.0))?;
    check("aggregate 5/12", (aggregate_mean_loss(&hp(1.0, 1.0, 0.0), 2) - 5.0 / 12.0).abs() < 1e-15)?;
    check("aggregate zero gap", aggregate_mean_loss(&hp(0.0, 0.5, 1.7), 1024) == 1.7)?;
    check("aggregate zero scaling", aggregate_mean_loss(&hp(1.0, 0.0, 0.5), 10) == 1.5)?;
    let flat = fit_checkpoint(&TokenLossProfile::new(1, vec![2.2; 64])).map_err(|e| e.to_string())?;
    check("flat profile", flat.a0.abs() < 1e-9 && (flat.a2 - 2.2).abs() < 1e-9)?;

    let m = RunManifest {
        run_id: "t".into(),
        n_tot: 1000,
        n_warmup: 0,
        seq_len: 64,
        checkpoint_interval: 100,
    };
    let profiles = (1..=4u64)
        .map(|k| {
            let p = hp(3.0 / k as f64, 0.05, 1.5);
            let losses = if k == 2 {
                vec![2.0; 64]
            } else {
                (1..=64).map(|i| eval_position_loss(&p, i)).collect()
            };
            TokenLossProfile::new(k * 100, losses)
        })
        .collect();
    let fits = fit_trajectory(&Trajectory::new(m.clone(), profiles).unwrap()).map_err(|e| e.to_string())?;
    check(
        "degenerate checkpoint flagged",
        fits.params.len() == 4
            && fits.params.iter().enumerate().all(|(k, p)| (p.status == FitStatus::Degenerate) == (k == 1)),
    )?;
    check(
        "empty trajectory",
        matches!(fit_trajectory(&Trajectory::new(m, vec![]).unwrap()), Err(Error::InsufficientData { .. })),
    )?;

    Ok(format!("{checked} examples exact"))
}

fn rerank_correctness() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut summary = Vec::new();
    let mut ok = true;
    for (sigma, needed) in [(0.0, 19), (0.005, 16)] {
        let mut hits = 0;
        for seed in 0..20u64 {
            let (a, b) = crossing_pair(seed, sigma);
            let dir = tmp.path().join(format!("{sigma}_{seed}"));
            let ra = write_run(&dir.join("a"), &generate(&a).unwrap()).map_err(|e| e.to_string())?;
            let rb = write_run(&dir.join("b"), &generate(&b).unwrap()).map_err(|e| e.to_string())?;
            let args = RerankArgs {
                manifest: vec![ra.manifest, rb.manifest],
                log: vec![ra.log, rb.log],
                label: vec!["A".into(), "B".into()],
                out: dir.join("out"),
                train_frac: 0.1,
                epsilon: None,
                grid_cadence: None,
            };
            let report = cmd_rerank(&args, Format::Tabular).map_err(|e| e.to_string())?;
            let n_tot = a.manifest.n_tot;
            let truth = if a.true_mean_loss(n_tot) < b.true_mean_loss(n_tot) {
                ["A", "B"]
            } else {
                ["B", "A"]
            };
            if report.labels() == truth {
                hits += 1;
            }
        }
        ok &= hits >= needed;
        summary.push(format!("σ={sigma}: {hits}/20 (need {needed})"));
    }
    let msg = summary.join(", ");
    ensure(ok, || msg.clone())?;
    Ok(msg)
}

fn delta_identities() -> Outcome {
    let mut worst_flat: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut triples = 0;
    for seed in 0..25u64 {
        let spec = GeneratorSpec::random(seed, 0.0);
        let exact = generate(&spec).map_err(|e| e.to_string())?;
        let post: Vec<u64> = exact.tokens().into_iter().filter(|&n| n >= spec.n_sep_true).collect();
        for w in post.windows(2).chain(std::iter::once(&[post[0], *post.last().unwrap()][..])) {
            let d = delta_profile(&exact, w[0], w[1]).map_err(|e| e.to_string())?;
            let (lo, hi) = d
                .delta_by_position
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            worst_flat = worst_flat.max(hi - lo);
        }

        let noisy = generate(&spec.clone().with_noise(0.005, seed)).map_err(|e| e.to_string())?;
        let tokens = noisy.tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let mut idx = sample(&mut rng, tokens.len(), 3).into_vec();
            idx.sort_unstable();
            let p: Vec<u64> = idx.iter().map(|&i| tokens[i]).collect();
            let ab = delta_profile(&noisy, p[0], p[1]).map_err(|e| e.to_string())?;
            let bc = delta_profile(&noisy, p[1], p[2]).map_err(|e| e.to_string())?;
            let ac = delta_profile(&noisy, p[0], p[2]).map_err(|e| e.to_string())?;
            for i in 0..ac.delta_by_position.len() {
                let gap = ab.delta_by_position[i] + bc.delta_by_position[i] - ac.delta_by_position[i];
                worst_sum = worst_sum.max(gap.abs());
            }
            triples += 1;
        }
    }
    let msg = format!(
        "post-separation spread {worst_flat:.1e} over 25 specs; telescoping gap {worst_sum:.1e} over {triples} triples"
    );
    ensure(worst_flat <= 1e-12 && worst_sum <= 1e-12, || msg.clone())?;
    Ok(msg)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("synthetic round trip", round_trip),
        ("baseline ordering", baseline_ordering),
        ("prediction MSE", prediction_mse),
        ("boundary solver", boundary_solver),
        ("metric unit suite", metric_units),
        ("rerank correctness", rerank_correctness),
        ("delta profile identities", delta_identities),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        match outcome {
            Ok(details) => println!("PASS {name}: {details}"),
            Err(details) => {
                failed += 1;
                println!("FAIL {name}: {details}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

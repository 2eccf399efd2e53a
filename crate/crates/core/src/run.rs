//! End-to-end execution of a validated [`RunConfig`].

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::bench::{self, check_convergence_conditions};
use crate::check::{self, CheckOptions, Fault};
use crate::error::Result;
use crate::io::{emit_metrics, load_dataset, synthetic_bars, Command, DatasetFormat, Loader, RunConfig, RunMetrics};
use crate::net::train::{train, TrainOptions, TrainReport};
use crate::net::Network;
use crate::par::Exec;

/// Accuracy the training summary reports epochs-to.
pub const TARGET_ACCURACY: f64 = 0.95;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    /// Human-readable result, printed by the CLI.
    pub summary: String,
    pub success: bool,
}

pub fn exec_for(cfg: &RunConfig) -> Exec {
    if cfg.deterministic {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

/// Runs `cfg.command`. `fault` only affects `check`.
pub fn run_command(cfg: &RunConfig, fault: Option<Fault>) -> Result<Outcome> {
    cfg.validate()?;
    log::info!("effective config:\n{}", cfg.to_toml());
    match cfg.command {
        Command::Check => run_check(cfg, fault),
        Command::Bench => run_bench(cfg),
        Command::Compare => run_compare(cfg),
        Command::Train => run_train(cfg).map(|(o, _)| o),
    }
}

fn run_check(cfg: &RunConfig, fault: Option<Fault>) -> Result<Outcome> {
    let report = check::run_checks(&CheckOptions {
        seed: cfg.seed,
        fault,
        exec: exec_for(cfg),
        ..CheckOptions::default()
    })?;
    Ok(Outcome {
        written: vec![],
        summary: report.table(),
        success: report.all_pass(),
    })
}

fn run_bench(cfg: &RunConfig) -> Result<Outcome> {
    let seeds: Vec<u64> = (0..cfg.runs).map(|k| cfg.seed.wrapping_add(k)).collect();
    let reports = bench::run_seeds(|s| cfg.problem(s), &seeds, Some(cfg.hyper), cfg.iters, exec_for(cfg))?;
    let mut out = Outcome {
        success: true,
        ..Outcome::default()
    };
    for r in &reports {
        let d = check_convergence_conditions(r, &cfg.hyper);
        out.written
            .extend(emit_metrics(&RunMetrics::from_bench("bench", r, Some(&d)), &cfg.out)?);
        out.success &= !r.failed;
        let _ = writeln!(
            out.summary,
            "{} {} seed {}: gap {} grad_norm_final {} max violation {:.2e} robbins-monro {} trend {}",
            r.problem,
            r.family.name(),
            r.seed,
            fmt_opt(r.gap_to_oracle),
            fmt_opt(r.grad_norm_final),
            r.max_violation(),
            r.schedule_satisfies_robbins_monro,
            d.trend.map_or("n/a", |t| if t { "pass" } else { "fail" }),
        );
        if let Some(f) = &r.failure {
            let _ = writeln!(out.summary, "  failed: {f}");
        }
    }
    Ok(out)
}

fn run_compare(cfg: &RunConfig) -> Result<Outcome> {
    let problem = cfg.problem(cfg.seed)?;
    let pair = bench::compare_euclidean_baseline(&problem, &cfg.hyper, cfg.iters)?;
    let mut out = Outcome {
        success: !pair.manifold.failed && !pair.euclidean.failed,
        ..Outcome::default()
    };
    for (tag, r) in [("manifold", &pair.manifold), ("euclidean", &pair.euclidean)] {
        let d = check_convergence_conditions(r, &cfg.hyper);
        let m = RunMetrics::from_bench("compare", r, Some(&d)).with_tag(tag);
        out.written.extend(emit_metrics(&m, &cfg.out)?);
        let _ = writeln!(
            out.summary,
            "{tag:<9} gap {} grad_norm_final {} iterations to 1e-3 gap {}",
            fmt_opt(r.gap_to_oracle),
            fmt_opt(r.grad_norm_final),
            r.iterations_to_gap(1e-3).map_or("never".into(), |t| (t + 1).to_string()),
        );
    }
    Ok(out)
}

/// Trains on the configured dataset; also returns the raw report.
pub fn run_train(cfg: &RunConfig) -> Result<(Outcome, TrainReport)> {
    let exec = exec_for(cfg);
    let d = &cfg.dataset;
    let net_spec = &cfg.network;
    let data = match d.format {
        DatasetFormat::Synthetic => synthetic_bars(d.samples, cfg.seed),
        f => load_dataset(
            f,
            d.path.as_deref().expect("validated"),
            d.labels.as_deref(),
            [net_spec.input_channels, net_spec.input_height, net_spec.input_width],
            net_spec.num_classes,
        )?,
    };
    let loader = Loader::new(data, d.batch_size, cfg.seed)?;
    let mut net = Network::new(net_spec.clone(), cfg.seed)?.with_exec(exec);
    net.assign_manifolds(cfg.manifold_policy(), cfg.seed)?;
    let report = train(
        &mut net,
        &loader,
        &TrainOptions {
            hyper: cfg.hyper,
            epochs: d.epochs,
            target_accuracy: None,
            exec,
        },
    )?;
    let family = cfg.manifold.policy.name();
    let metrics = RunMetrics::from_train(family, cfg.seed, &report, TARGET_ACCURACY);
    let written = emit_metrics(&metrics, &cfg.out)?;
    let summary = format!(
        "train {family} seed {}: best accuracy {:.4}, epochs to {TARGET_ACCURACY} {}, final violation {:.2e}, det flips {}\n",
        cfg.seed,
        report.best_accuracy(),
        report.epochs_to(TARGET_ACCURACY).map_or("never".into(), |e| e.to_string()),
        report.records.last().map_or(0.0, |r| r.violation),
        report.det_flips,
    );
    let success = report.records.iter().all(|r| r.loss.is_finite());
    Ok((
        Outcome {
            written,
            summary,
            success,
        },
        report,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3e}"))
}

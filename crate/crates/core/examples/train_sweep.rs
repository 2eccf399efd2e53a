//! Training sweep over step sizes for each manifold policy on the synthetic
//! bar images.
//!
//! ```text
//! cargo run --release --example train_sweep -p mksgd
//! ```

use mksgd::io::{Command, Policy, RunConfig};
use mksgd::run::{run_train, TARGET_ACCURACY};
use mksgd::sgd::Schedule;

fn main() -> mksgd::Result<()> {
    let out = std::env::temp_dir().join("mksgd-train-sweep");
    for policy in [Policy::None, Policy::Sphere, Policy::Oblique, Policy::Stiefel] {
        for alpha0 in [0.05, 0.1, 0.2, 0.5] {
            for theta_mu in [0.0, 0.5, 0.9] {
                let mut cfg = RunConfig {
                    command: Command::Train,
                    out: out.clone(),
                    ..RunConfig::default()
                };
                cfg.manifold.policy = policy;
                cfg.hyper.theta_mu = theta_mu;
                cfg.hyper.schedule = Schedule::InverseTime { alpha0, lambda: 1e-3 };
                let t = std::time::Instant::now();
                let (_, r) = run_train(&cfg)?;
                println!(
                    "{:<8} alpha0={alpha0:<5} theta_mu={theta_mu:<4} best={:.3} epochs_to={:?} viol={:.1e} {:.1}s",
                    policy.name(),
                    r.best_accuracy(),
                    r.epochs_to(TARGET_ACCURACY),
                    r.max_violation(),
                    t.elapsed().as_secs_f64()
                );
            }
        }
    }
    Ok(())
}

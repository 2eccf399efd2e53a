//! Sweep of step-size schedules for the benchmark problems.
//!
//! Prints, per problem and schedule, how many of 100 seeds reach a gap of
//! `tol` and a gradient norm of 1e-6 within the iteration budget.
//!
//! ```text
//! cargo run --release --example tune -p mksgd
//! ```

use mksgd::bench::{self, BenchProblem};
use mksgd::sgd::{Hyperparams, Schedule};
use mksgd::{Exec, Result};

const ITERS: usize = 20_000;

fn sweep(name: &str, make: &(dyn Fn(u64) -> Result<BenchProblem> + Sync), tol: f64) -> Result<()> {
    let seeds: Vec<u64> = (0..100).collect();
    for alpha0 in [0.05, 0.1, 0.2] {
        for lambda in [1e-4, 1e-3, 1e-2] {
            for theta_mu in [0.0, 0.5] {
                let hyper = Hyperparams {
                    theta_mu,
                    schedule: Schedule::InverseTime { alpha0, lambda },
                    ..Hyperparams::default()
                };
                let reports = bench::run_seeds(make, &seeds, Some(hyper), ITERS, Exec::default())?;
                let ok = reports
                    .iter()
                    .filter(|r| {
                        r.gap_to_oracle.is_some_and(|g| g.abs() <= tol)
                            && r.grad_norm_final.is_some_and(|g| g <= 1e-6)
                    })
                    .count();
                println!("{name:<10} alpha0={alpha0:<5} lambda={lambda:<7} theta_mu={theta_mu:<4} {ok}/100");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    sweep("rayleigh", &|s| bench::rayleigh_problem(5, s), 1e-6)?;
    sweep("procrustes", &|s| bench::procrustes_problem(4, 4, s), 1e-6)?;
    sweep("oblique", &|s| bench::oblique_diag_problem(3, 2, s), 1e-4)?;
    Ok(())
}

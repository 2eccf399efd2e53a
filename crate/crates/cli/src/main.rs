use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mksgd::check::Fault;
use mksgd::io::{Command, Overrides, Policy, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Check,
    Bench,
    Train,
    Compare,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Manifold {
    Sphere,
    Oblique,
    Stiefel,
    So,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InjectFault {
    SkipSphereRenormalization,
}

/// Riemannian SGD on kernel submanifolds: property checks, oracle
/// benchmarks and small-network training.
#[derive(Debug, Parser)]
#[command(name = "mksgd", version)]
struct Args {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    command: Option<Cmd>,
    #[arg(long, value_enum)]
    manifold: Option<Manifold>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    /// Inverse-time decay rate; selects that schedule.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    theta_mu: Option<f64>,
    #[arg(long)]
    theta_e: Option<f64>,
    /// Clip Euclidean gradients to this Frobenius norm.
    #[arg(long)]
    clip: Option<f64>,
    /// Output directory for metric files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<InjectFault>,
}

impl Args {
    fn overrides(&self) -> Overrides {
        Overrides {
            command: self.command.map(|c| match c {
                Cmd::Check => Command::Check,
                Cmd::Bench => Command::Bench,
                Cmd::Train => Command::Train,
                Cmd::Compare => Command::Compare,
            }),
            manifold: self.manifold.map(|m| match m {
                Manifold::Sphere => Policy::Sphere,
                Manifold::Oblique => Policy::Oblique,
                Manifold::Stiefel => Policy::Stiefel,
                Manifold::So => Policy::So,
                Manifold::None => Policy::None,
            }),
            seed: self.seed,
            iters: self.iters,
            alpha0: self.alpha0,
            lambda: self.lambda,
            theta_mu: self.theta_mu,
            theta_e: self.theta_e,
            clip: self.clip,
            out: self.out.clone(),
            deterministic: self.deterministic,
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads() -> anyhow::Result<()> {
    use anyhow::Context;
    if let Ok(v) = std::env::var("MKSGD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MKSGD_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() -> anyhow::Result<()> {
    Ok(())
}

fn run(args: &Args) -> anyhow::Result<bool> {
    configure_threads()?;
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides())?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    let fault = args.inject_fault.map(|f| match f {
        InjectFault::SkipSphereRenormalization => Fault::SkipSphereRenormalization,
    });
    let outcome = mksgd::run::run_command(&cfg, fault)?;
    print!("{}", outcome.summary);
    for p in &outcome.written {
        log::info!("wrote {}", p.display());
    }
    Ok(outcome.success)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

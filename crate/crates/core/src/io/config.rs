use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchProblem};
use crate::error::{Error, Result};
use crate::manifold::{Family, ManifoldSpec};
use crate::net::{ManifoldPolicy, NetworkSpec};
use crate::sgd::{Hyperparams, Schedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    #[default]
    Check,
    Bench,
    Train,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Bench => "bench",
            Command::Train => "train",
            Command::Compare => "compare",
        }
    }
}

/// Manifold choice as written in configs and flags; `none` leaves weights
/// unconstrained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Sphere,
    Oblique,
    Stiefel,
    So,
    None,
}

impl Policy {
    pub fn family(self) -> Option<Family> {
        match self {
            Policy::Sphere => Some(Family::Sphere),
            Policy::Oblique => Some(Family::Oblique),
            Policy::Stiefel => Some(Family::Stiefel),
            Policy::So => Some(Family::SpecialOrthogonal),
            Policy::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        self.family().map_or("none", Family::name)
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Policy::Sphere),
            "oblique" => Ok(Policy::Oblique),
            "stiefel" => Ok(Policy::Stiefel),
            "so" => Ok(Policy::So),
            "none" => Ok(Policy::None),
            _ => Err(Error::config("manifold.policy", format!("unknown manifold `{s}`"))),
        }
    }
}

/// Benchmark manifold shape; training takes its shapes from the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifoldConfig {
    pub policy: Policy,
    pub rows: usize,
    pub cols: usize,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            policy: Policy::Sphere,
            rows: 5,
            cols: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Bundled two-class 8×8 bar images.
    #[default]
    Synthetic,
    CsvLabeled,
    IdxPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    /// CSV file, or the IDX image file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// IDX label file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Size of the synthetic set.
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DatasetFormat::Synthetic,
            path: None,
            labels: None,
            samples: 256,
            batch_size: 16,
            epochs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub iters: usize,
    /// `bench` runs seeds `seed..seed + runs`.
    pub runs: u64,
    pub out: PathBuf,
    /// Single-threaded execution throughout.
    pub deterministic: bool,
    pub manifold: ManifoldConfig,
    pub hyper: Hyperparams,
    pub network: NetworkSpec,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: Command::Check,
            seed: 0,
            iters: 20_000,
            runs: 1,
            out: PathBuf::from("out"),
            deterministic: false,
            manifold: ManifoldConfig::default(),
            hyper: bench::tuned_hyper(),
            network: NetworkSpec::two_conv(8, 4, 2),
            dataset: DatasetConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub command: Option<Command>,
    pub manifold: Option<Policy>,
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub alpha0: Option<f64>,
    /// Switches the schedule to inverse-time decay if it is not already.
    pub lambda: Option<f64>,
    pub theta_mu: Option<f64>,
    pub theta_e: Option<f64>,
    pub clip: Option<f64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl RunConfig {
    /// Parses without validating; unknown keys and type errors report
    /// their dotted key path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<file>", e.to_string().trim()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { "<file>".into() } else { key }, e.into_inner().to_string().trim())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// File (if any) plus overrides, validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = o.command {
            self.command = c;
        }
        if let Some(p) = o.manifold {
            self.manifold.policy = p;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(i) = o.iters {
            self.iters = i;
        }
        if let Some(lambda) = o.lambda {
            self.hyper.schedule = Schedule::InverseTime {
                alpha0: self.hyper.schedule.alpha0(),
                lambda,
            };
        }
        if let Some(a) = o.alpha0 {
            match &mut self.hyper.schedule {
                Schedule::InverseTime { alpha0, .. }
                | Schedule::StepDecay { alpha0, .. }
                | Schedule::Constant { alpha0 } => *alpha0 = a,
            }
        }
        if let Some(v) = o.theta_mu {
            self.hyper.theta_mu = v;
        }
        if let Some(v) = o.theta_e {
            self.hyper.theta_e = v;
        }
        if let Some(k) = o.clip {
            self.hyper.grad_clip = Some(k);
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.deterministic |= o.deterministic;
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::config("iters", "must be at least 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        self.hyper.validate()?;
        if let Some(f) = self.manifold.policy.family() {
            if self.command != Command::Train {
                ManifoldSpec::new(f, self.manifold.rows, self.manifold.cols)
                    .map_err(|e| Error::config("manifold", e.to_string()))?;
            }
        }
        match self.command {
            Command::Bench | Command::Compare => {
                self.problem(self.seed)?;
            }
            Command::Train => {
                self.network.validate()?;
                self.validate_dataset()?;
            }
            Command::Check => {}
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        if d.batch_size == 0 {
            return Err(Error::config("dataset.batch_size", "must be at least 1"));
        }
        if d.epochs == 0 {
            return Err(Error::config("dataset.epochs", "must be at least 1"));
        }
        let need = |key: &str, p: &Option<PathBuf>| -> Result<()> {
            match p {
                None => Err(Error::config(key, "required for this dataset format")),
                Some(p) if !p.is_file() => Err(Error::config(key, format!("{} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match d.format {
            DatasetFormat::Synthetic if d.samples == 0 => Err(Error::config("dataset.samples", "must be at least 1")),
            DatasetFormat::Synthetic => Ok(()),
            DatasetFormat::CsvLabeled => need("dataset.path", &d.path),
            DatasetFormat::IdxPair => {
                need("dataset.path", &d.path)?;
                need("dataset.labels", &d.labels)
            }
        }
    }

    /// The benchmark problem selected by the manifold policy: Rayleigh on the
    /// sphere, Procrustes on Stiefel or SO(n), off-diagonal energy on the
    /// oblique manifold.
    pub fn problem(&self, seed: u64) -> Result<BenchProblem> {
        let ManifoldConfig { policy, rows, cols } = self.manifold;
        match policy {
            Policy::Sphere if cols != 1 => Err(Error::config("manifold.cols", "the sphere benchmark is a vector problem")),
            Policy::Sphere => bench::rayleigh_problem(rows, seed),
            Policy::Oblique => bench::oblique_diag_problem(rows, cols, seed),
            Policy::Stiefel | Policy::So => bench::procrustes_on(policy.family().unwrap(), rows, cols, seed),
            Policy::None => Err(Error::config("manifold.policy", "benchmarks need a manifold")),
        }
    }

    pub fn manifold_policy(&self) -> ManifoldPolicy {
        ManifoldPolicy::uniform(self.manifold.policy.family())
    }

    /// The effective configuration as TOML; parses back to `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_the_default() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.command, Command::Check);
    }

    #[test]
    fn stiefel_wide_is_rejected() {
        let cfg = RunConfig::parse("command = \"bench\"\n[manifold]\npolicy = \"stiefel\"\nrows = 2\ncols = 3\n").unwrap();
        assert_eq!(key_of(cfg.validate().unwrap_err()), "manifold");
    }

    #[test]
    fn unknown_keys_carry_their_path() {
        assert_eq!(key_of(RunConfig::parse("sed = 1").unwrap_err()), "sed");
        assert_eq!(key_of(RunConfig::parse("[hyper]\ntheta = 1.0").unwrap_err()), "hyper.theta");
        let e = RunConfig::parse("[hyper.schedule]\nkind = \"constant\"\nalpha0 = \"x\"").unwrap_err();
        assert!(key_of(e).starts_with("hyper.schedule"));
        assert_eq!(key_of(RunConfig::parse("[manifold]\nrows = -1").unwrap_err()), "manifold.rows");
        assert_eq!(key_of(RunConfig::parse("seed = [").unwrap_err()), "<file>");
    }

    #[test]
    fn parse_twice_is_identical() {
        let text = "command = \"train\"\nseed = 7\n[manifold]\npolicy = \"oblique\"\n[dataset]\nepochs = 3\n";
        assert_eq!(RunConfig::parse(text).unwrap(), RunConfig::parse(text).unwrap());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.command = Command::Train;
        cfg.hyper.grad_clip = Some(2.5);
        cfg.hyper.schedule = Schedule::StepDecay {
            alpha0: 0.3,
            drop_every: 100,
            drop_factor: 0.5,
        };
        cfg.dataset.path = Some("a.csv".into());
        for c in [RunConfig::default(), cfg] {
            assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = RunConfig::parse("seed = 3\n[hyper.schedule]\nkind = \"constant\"\nalpha0 = 0.5\n").unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            alpha0: Some(0.2),
            manifold: Some(Policy::So),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hyper.schedule, Schedule::Constant { alpha0: 0.2 });
        assert_eq!(cfg.manifold.policy, Policy::So);

        cfg.apply(&Overrides {
            lambda: Some(0.01),
            ..Overrides::default()
        });
        assert_eq!(cfg.hyper.schedule, Schedule::InverseTime { alpha0: 0.2, lambda: 0.01 });
    }

    #[test]
    fn dataset_files_must_exist() {
        let cfg = RunConfig::parse("command = \"train\"\n[dataset]\nformat = \"csv_labeled\"\npath = \"/nonexistent/x.csv\"\n").unwrap();
        assert_eq!(key_of(cfg.validate().unwrap_err()), "dataset.path");
        let cfg = RunConfig::parse("command = \"train\"\n[dataset]\nformat = \"idx_pair\"\n").unwrap();
        assert_eq!(key_of(cfg.validate().unwrap_err()), "dataset.path");
    }

    #[test]
    fn policies_select_problems() {
        let mut cfg = RunConfig {
            command: Command::Bench,
            ..RunConfig::default()
        };
        for (policy, rows, cols, name) in [
            (Policy::Sphere, 4, 1, "rayleigh"),
            (Policy::Stiefel, 4, 4, "procrustes"),
            (Policy::So, 3, 3, "procrustes"),
            (Policy::Oblique, 3, 2, "oblique"),
        ] {
            cfg.manifold = ManifoldConfig { policy, rows, cols };
            cfg.validate().unwrap();
            assert_eq!(cfg.problem(0).unwrap().name, name);
        }
        cfg.manifold.policy = Policy::None;
        assert_eq!(key_of(cfg.validate().unwrap_err()), "manifold.policy");
    }
}

//! Declarative experiment runner: config file → simulations and oracles →
//! report text plus CSV tables.
//!
//! Exit codes: 0 when every check passes, 1 on a failed verdict, 2 on an
//! invalid config, 3 on a simulation or I/O fault.

pub mod config;
mod experiments;

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

pub use config::{validate_config, ConfigError, ConfigErrors, ExperimentConfig, ExperimentKind};

use crate::stats::Outcome;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERDICT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAULT: i32 = 3;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "FLUXLAB_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config:\n{0}")]
    Config(ConfigErrors),
    #[error("simulation fault: {0}")]
    Simulation(#[from] crate::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Simulation(_) | RunError::Io { .. } => EXIT_FAULT,
        }
    }
}

/// Command-line overrides applied on top of a validated config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Option<u64>,
    pub threads: Option<usize>,
}

impl RunOverrides {
    /// Applies the overrides; the thread count falls back to `FLUXLAB_THREADS`.
    pub fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, RunError> {
        let single = |message: String| RunError::Config(ConfigErrors(vec![ConfigError { line: None, message }]));
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(n) = self.paths {
            if cfg.experiment.is_monte_carlo() && n < 100 {
                return Err(single(format!("--paths must be at least 100, got {n}")));
            }
            cfg.n_paths = n;
        }
        let env_threads = match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| single(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
            ),
            _ => None,
        };
        if self.threads == Some(0) {
            return Err(single("--threads must be at least 1".into()));
        }
        if let Some(n) = self.threads.or(env_threads) {
            cfg.threads = Some(n);
        }
        Ok(cfg)
    }
}

/// Error budgets attached to one check.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Budgets {
    /// Confidence half-width of the Monte Carlo estimate.
    pub statistical: Option<f64>,
    /// Change observed when the step size is doubled.
    pub discretization: Option<f64>,
    /// Mass left to cross after the finite horizon or radius.
    pub truncation: Option<f64>,
}

impl fmt::Display for Budgets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3e}"));
        write!(
            f,
            "statistical {} | discretization {} | truncation {}",
            show(self.statistical),
            show(self.discretization),
            show(self.truncation)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub outcome: Outcome,
    pub detail: String,
    pub budgets: Budgets,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            outcome: Outcome::from_bool(ok),
            detail: detail.into(),
            budgets: Budgets::default(),
        }
    }

    fn with_budgets(mut self, budgets: Budgets) -> Self {
        self.budgets = budgets;
        self
    }
}

/// Outcome of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub experiment: ExperimentKind,
    pub header: Vec<String>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    fn new(cfg: &ExperimentConfig) -> Self {
        let mut header = vec![
            format!("experiment: {}", cfg.experiment.name()),
            format!("model: {}", model_summary(&cfg.model)),
            format!("master_seed: {}", cfg.master_seed),
        ];
        if cfg.experiment.is_monte_carlo() {
            header.push(format!("n_paths: {}", cfg.n_paths));
        }
        Self {
            experiment: cfg.experiment,
            header,
            checks: Vec::new(),
            notes: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome.passed())
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_OK
        } else {
            EXIT_VERDICT
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Human-readable report; contains nothing run-dependent beyond the
    /// results themselves (no timings, no worker counts).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out);
        for c in &self.checks {
            let _ = writeln!(out, "[{}] {}: {}", c.outcome, c.name, c.detail);
            if c.budgets != Budgets::default() {
                let _ = writeln!(out, "       budgets: {}", c.budgets);
            }
        }
        if !self.notes.is_empty() {
            let _ = writeln!(out);
            for n in &self.notes {
                let _ = writeln!(out, "note: {n}");
            }
        }
        let passed = self.checks.iter().filter(|c| c.outcome.passed()).count();
        let _ = writeln!(
            out,
            "\n{} of {} checks passed: {}",
            passed,
            self.checks.len(),
            Outcome::from_bool(self.passed())
        );
        out
    }
}

fn model_summary(m: &config::ModelConfig) -> String {
    let drift = match &m.drift {
        config::DriftSpec::ConstantDrift { velocity } => format!("constant_drift velocity={velocity:?}"),
        config::DriftSpec::Ray => "ray".to_string(),
        config::DriftSpec::StationarySymmetric { theta } => format!("stationary_symmetric theta={theta}"),
        config::DriftSpec::Affine { matrix, offset } => format!("affine matrix={matrix:?} offset={offset:?}"),
    };
    format!(
        "{drift}, t0={}, initial N({:?}, {} I)",
        m.t0, m.initial_mean, m.initial_variance
    )
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = fs::read_to_string(path).map_err(|e| {
        RunError::Config(ConfigErrors(vec![ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        }]))
    })?;
    validate_config(&text).map_err(RunError::Config)
}

/// Executes the experiment and writes `report.txt` plus its CSV tables into
/// the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, RunError> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut report = RunReport::new(cfg);
    let mut out = experiments::Output::new(dir);
    match cfg.experiment {
        ExperimentKind::BoundaryFlux => experiments::boundary_flux(cfg, &mut report, &mut out)?,
        ExperimentKind::AsymptoticFlux => experiments::asymptotic_flux(cfg, &mut report, &mut out)?,
        ExperimentKind::Residuals => experiments::residuals(cfg, &mut report, &mut out)?,
        ExperimentKind::LimitingVelocity => experiments::limiting_velocity(cfg, &mut report, &mut out)?,
        ExperimentKind::LateralVanishing => experiments::lateral_vanishing(cfg, &mut report, &mut out)?,
    }
    report.files = out.files;
    let path = dir.join("report.txt");
    fs::write(&path, report.render()).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    report.files.push(path);
    Ok(report)
}

/// Loads, overrides and runs a config file.
pub fn run_file(path: &Path, overrides: &RunOverrides) -> Result<RunReport, RunError> {
    let cfg = overrides.apply(load_config(path)?)?;
    run_experiment(&cfg)
}

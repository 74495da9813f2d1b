//! Subcommand bodies. Each returns an [`Outcome`] mapped to the process exit code.

use std::path::{Path, PathBuf};

use weakloop_core::sim::{emit_trace, run_scenario};
use weakloop_core::{Case, Error, PerfReport, RunManifest, ScenarioConfig, TraceFormat};

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad or missing configuration: exit 2.
    Config(Error),
    /// Anything that goes wrong after the configuration was accepted: exit 1.
    Runtime(Error),
    /// `verify` found the budget violated: exit 3.
    BudgetViolated(PerfReport),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::BudgetViolated(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
            Failure::BudgetViolated(r) => write!(
                f,
                "budget violated: worst DC deviation {} exceeds {} + delta_rho",
                r.worst_dc_deviation, r.rho_nominal
            ),
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Loads `path`, or the built-in reference scenario when no path is given,
/// then applies the case and seed overrides.
pub fn load_config(path: Option<&Path>, case: Option<u8>, seed: Option<u64>) -> Outcome<ScenarioConfig> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::load(p).map_err(Failure::Config)?,
        None => ScenarioConfig::reference(),
    };
    if let Some(n) = case {
        let case = Case::from_number(n).ok_or_else(|| Failure::Config(Error::Config(format!("case must be 1-4, got {n}"))))?;
        cfg = cfg.for_case(case).map_err(Failure::Config)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

/// `trace.csv` -> `trace.manifest.json`.
pub fn manifest_path(trace: &Path) -> PathBuf {
    let stem = trace.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    trace.with_file_name(format!("{stem}.manifest.json"))
}

/// Runs the scenario and writes the trace plus its manifest.
pub fn simulate(cfg: &ScenarioConfig, out: &Path) -> Outcome<RunManifest> {
    let outcome = run_scenario(cfg).map_err(Failure::Runtime)?;
    emit_trace(&outcome.trace, TraceFormat::from_path(out), out).map_err(Failure::Runtime)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest = RunManifest::new(cfg, &outcome, &name).map_err(Failure::Runtime)?;
    manifest.write(&manifest_path(out)).map_err(Failure::Runtime)?;
    tracing::info!(rows = outcome.trace.len(), path = %out.display(), "trace written");
    Ok(manifest)
}

/// Human-readable summary of a run.
pub fn summarize(manifest: &RunManifest) -> String {
    let mut lines = vec![format!("label = {}", manifest.label), format!("rows = {}", manifest.rows)];
    if let Some(s) = &manifest.steady {
        lines.push(format!("steady_y_abs_max = {}", s.y_abs_max));
        if let Some(f) = s.f_final {
            lines.push(format!("steady_f = {f}"));
        }
        lines.push(format!("settled = {}", s.settled));
    }
    if let Some(l) = &manifest.learner {
        lines.push(format!("learner_converged = {}", l.converged));
        lines.push(format!("learned_e_l = {:?}", l.e_l));
        lines.push(format!("learned_gamma = {}", l.gamma));
    }
    lines.join("\n")
}

pub fn verify(cfg: &ScenarioConfig) -> Outcome<PerfReport> {
    let report = PerfReport::evaluate(cfg).map_err(Failure::Runtime)?;
    if report.budget_satisfied {
        Ok(report)
    } else {
        Err(Failure::BudgetViolated(report))
    }
}


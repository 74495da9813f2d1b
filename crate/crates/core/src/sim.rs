//! Scenario configuration, the closed-loop engine and trace files.
//!
//! One sample of the loop is split in two halves so that an external decision
//! maker can sit between them:
//!
//! 1. [`Engine::observe`] measures `y`, runs the controller and publishes `U`;
//! 2. [`Engine::apply`] takes the chosen `u`, feeds the learner and advances the plant.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::ImcController;
use crate::decision::{DecisionPolicy, QuadraticCost};
use crate::error::{Error, Result};
use crate::expander::{AdmissibleSet, Delta, Expander, ExpanderE1, ExpanderE2};
use crate::learner::{is_interior, max_gamma, LearnerConfig, LearnerState, PerfBudget};
use crate::lti::{DiscreteStateSpace, PlantState, StateSpace};
use crate::serde_util::matrix_from_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub a: Vec<Vec<f64>>,
    pub b_u: Vec<Vec<f64>>,
    pub b_w: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl PlantSpec {
    pub fn build(&self) -> Result<StateSpace> {
        let m = |name: &str, rows: &[Vec<f64>]| matrix_from_rows(rows).map_err(|e| Error::Config(format!("plant.{name}: {e}")));
        StateSpace::new(m("a", &self.a)?, m("b_u", &self.b_u)?, m("b_w", &self.b_w)?, m("c", &self.c)?)
    }
}

/// A step signal: zero before `time`, `magnitude` from `time` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSignal {
    #[serde(default)]
    pub time: usize,
    pub magnitude: Vec<f64>,
}

impl StepSignal {
    pub fn at(&self, t: usize, len: usize) -> Result<DVector<f64>> {
        if self.magnitude.len() != len {
            return Err(Error::Config(format!("step signal has {} entries, expected {len}", self.magnitude.len())));
        }
        Ok(if t >= self.time { DVector::from_column_slice(&self.magnitude) } else { DVector::zeros(len) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpanderSpec {
    E1 { gammas: Vec<f64> },
    /// `gamma` defaults to the largest value the budget allows.
    E2 {
        e_l: Vec<f64>,
        e_r: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Nominal,
    /// Minimizes the scenario's `cost`.
    Quadratic,
    /// Seed defaults to the scenario seed.
    RandomUniform {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Extreme,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl CostSpec {
    pub fn build(&self) -> Result<QuadraticCost> {
        let q = matrix_from_rows(&self.q).map_err(|e| Error::Config(format!("cost.q: {e}")))?;
        QuadraticCost::new(q, DVector::from_column_slice(&self.c))
    }
}

/// The four reference experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// No controller; `u = 0`.
    NoFeedback,
    /// Controller without expander.
    Nominal,
    /// Controller with the configured, fixed expander.
    Fixed,
    /// Controller with the expander updated online.
    Learning,
}

impl Case {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Case::NoFeedback),
            2 => Some(Case::Nominal),
            3 => Some(Case::Fixed),
            4 => Some(Case::Learning),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Case::NoFeedback => 1,
            Case::Nominal => 2,
            Case::Fixed => 3,
            Case::Learning => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Case::NoFeedback => "case1_no_feedback",
            Case::Nominal => "case2_nominal",
            Case::Fixed => "case3_fixed_expander",
            Case::Learning => "case4_learning_expander",
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_label() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_label")]
    pub label: String,
    pub plant: PlantSpec,
    pub dt: f64,
    pub horizon: usize,
    pub disturbance: StepSignal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<StepSignal>,
    /// `K_e`, m rows by l columns.
    pub gain: Vec<Vec<f64>>,
    /// `false` opens the loop: `u = 0` throughout.
    #[serde(default = "default_true")]
    pub feedback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expander: Option<ExpanderSpec>,
    pub policy: PolicySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    /// Present when the expander is learned online.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner: Option<LearnerConfig>,
    pub delta_rho: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// The three-state reference experiment with a rational quadratic decision maker.
    pub fn reference() -> Self {
        let s = 1.0 / 3f64.sqrt();
        ScenarioConfig {
            label: "reference".into(),
            plant: PlantSpec {
                a: vec![vec![-1.0, 0.0, 0.0], vec![0.0, -2.0, 0.0], vec![0.0, 0.0, -0.5]],
                b_u: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
                b_w: vec![vec![1.0], vec![1.0], vec![1.0]],
                c: vec![vec![1.0, 1.0, 1.0]],
            },
            dt: 1.0,
            horizon: 600,
            disturbance: StepSignal { time: 0, magnitude: vec![1.0] },
            reference: None,
            gain: vec![vec![2.0 / 6.0], vec![4.0 / 6.0], vec![1.0 / 6.0]],
            feedback: true,
            expander: Some(ExpanderSpec::E2 { e_l: vec![1.0, 0.0, 0.0], e_r: vec![s, s, s], gamma: None }),
            policy: PolicySpec::Quadratic,
            cost: Some(CostSpec {
                q: vec![vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]],
                c: vec![1.0, 0.0, 4.0],
            }),
            learner: Some(LearnerConfig { perturbation: 0.5, ..LearnerConfig::default() }),
            delta_rho: 0.2,
            seed: 1,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.delta_rho >= 0.0 && self.delta_rho.is_finite()) {
            return Err(Error::Config("delta_rho must be non-negative".into()));
        }
        let plant = self.plant.build()?;
        let gain = self.gain_matrix()?;
        if gain.nrows() != plant.inputs() || gain.ncols() != plant.outputs() {
            return Err(Error::Config(format!(
                "gain is {}x{}, plant needs {}x{}",
                gain.nrows(),
                gain.ncols(),
                plant.inputs(),
                plant.outputs()
            )));
        }
        self.disturbance.at(0, plant.disturbances())?;
        if let Some(r) = &self.reference {
            r.at(0, plant.outputs())?;
        }
        if let Some(cost) = &self.cost {
            if cost.build()?.dim() != plant.inputs() {
                return Err(Error::Config("cost dimension does not match the plant input".into()));
            }
        }
        if self.policy == PolicySpec::Quadratic && self.cost.is_none() {
            return Err(Error::Config("quadratic policy needs a cost".into()));
        }
        if self.learner.is_some() && !matches!(self.expander, Some(ExpanderSpec::E2 { .. })) {
            return Err(Error::Config("learning requires a segment (e2) expander".into()));
        }
        self.resolved_expander(&plant)?;
        Ok(())
    }

    pub fn gain_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.gain).map_err(|e| Error::Config(format!("gain: {e}")))
    }

    pub fn budget(&self, plant: &StateSpace) -> Result<PerfBudget> {
        PerfBudget::new(plant, self.gain_matrix()?, self.delta_rho)
    }

    /// The configured expander with a missing `gamma` filled in from the budget.
    pub fn resolved_expander(&self, plant: &StateSpace) -> Result<Option<Expander>> {
        let Some(spec) = &self.expander else { return Ok(None) };
        let m = plant.inputs();
        let check = |v: &[f64], name: &str| {
            if v.len() == m {
                Ok(DVector::from_column_slice(v))
            } else {
                Err(Error::Config(format!("expander.{name} has {} entries, expected {m}", v.len())))
            }
        };
        Ok(Some(match spec {
            ExpanderSpec::E1 { gammas } => Expander::E1(ExpanderE1::new(check(gammas, "gammas")?)?),
            ExpanderSpec::E2 { e_l, e_r, gamma } => {
                let (e_l, e_r) = (check(e_l, "e_l")?, check(e_r, "e_r")?);
                let budget = self.budget(plant)?;
                let gamma = match gamma {
                    Some(g) => *g,
                    None => match max_gamma(&e_l, &e_r, &budget) {
                        Ok(g) => g.min(budget.gamma_cap),
                        Err(Error::UnboundedGamma { cap }) => cap,
                        Err(e) => return Err(e),
                    },
                };
                Expander::E2(ExpanderE2::new(e_l, e_r, gamma)?)
            }
        }))
    }

    /// The variant of this scenario for one of the four reference cases.
    pub fn for_case(&self, case: Case) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.label = case.label().into();
        match case {
            Case::NoFeedback => {
                cfg.feedback = false;
                cfg.expander = None;
                cfg.learner = None;
            }
            Case::Nominal => {
                cfg.expander = None;
                cfg.learner = None;
            }
            Case::Fixed => {
                if cfg.expander.is_none() {
                    return Err(Error::Config("case 3 needs an expander".into()));
                }
                cfg.learner = None;
            }
            Case::Learning => {
                if !matches!(cfg.expander, Some(ExpanderSpec::E2 { .. })) {
                    return Err(Error::Config("case 4 needs a segment (e2) expander".into()));
                }
                cfg.learner.get_or_insert_with(LearnerConfig::default);
            }
        }
        Ok(cfg)
    }
}

/// One logged sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    /// Selection parameter of `u`: one entry for segments, one per axis for boxes.
    pub delta: Vec<f64>,
    pub f_of_u: Option<f64>,
    /// Segment `gamma` in force at this sample (0 without a segment expander).
    pub gamma: f64,
    /// Segment direction in force at this sample (empty without a segment expander).
    pub e_l: Vec<f64>,
    pub interior_flag: bool,
    pub case_label: String,
}

/// What the controller published for the pending sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
    pub set: AdmissibleSet,
}

/// Closed-loop state of one run.
#[derive(Debug, Clone)]
pub struct Engine {
    plant: DiscreteStateSpace,
    state: PlantState,
    controller: Option<ImcController>,
    learner: Option<LearnerState>,
    cost: Option<QuadraticCost>,
    disturbance: StepSignal,
    reference: Option<StepSignal>,
    u_prev: DVector<f64>,
    pending: Option<Observation>,
    margin: f64,
    label: String,
}

impl Engine {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let continuous = cfg.plant.build()?;
        let plant = continuous.zoh_discretize(cfg.dt)?;
        let expander = cfg.resolved_expander(&continuous)?;
        let learner = match (&cfg.learner, &expander) {
            (Some(lc), Some(Expander::E2(e))) => {
                let lc = LearnerConfig { seed: cfg.seed.wrapping_add(1), ..lc.clone() };
                Some(LearnerState::new(e.clone(), cfg.budget(&continuous)?, lc)?)
            }
            _ => None,
        };
        // the learner owns gamma from the start
        let expander = learner.as_ref().map(|l| Expander::E2(l.current.clone())).or(expander);
        let controller = if cfg.feedback {
            Some(ImcController::new(cfg.gain_matrix()?, plant.clone(), expander)?)
        } else {
            None
        };
        Ok(Self {
            state: PlantState::zeros(plant.states()),
            u_prev: DVector::zeros(plant.inputs()),
            margin: cfg.learner.as_ref().map_or(LearnerConfig::default().margin, |l| l.margin),
            plant,
            controller,
            learner,
            cost: cfg.cost.as_ref().map(CostSpec::build).transpose()?,
            disturbance: cfg.disturbance.clone(),
            reference: cfg.reference.clone(),
            pending: None,
            label: cfg.label.clone(),
        })
    }

    pub fn build_policy(&self, cfg: &ScenarioConfig) -> Result<DecisionPolicy> {
        Ok(match &cfg.policy {
            PolicySpec::Nominal => DecisionPolicy::Nominal,
            PolicySpec::Quadratic => DecisionPolicy::QuadraticOptimizer(
                self.cost.clone().ok_or_else(|| Error::Config("quadratic policy needs a cost".into()))?,
            ),
            PolicySpec::RandomUniform { seed } => DecisionPolicy::random_uniform(seed.unwrap_or(cfg.seed)),
            PolicySpec::Extreme => DecisionPolicy::Extreme {
                dc_gain: cfg.plant.build()?.dc_gain(crate::lti::Channel::Control)?,
            },
            PolicySpec::External => DecisionPolicy::external(),
        })
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn plant_state(&self) -> &PlantState {
        &self.state
    }

    pub fn learner(&self) -> Option<&LearnerState> {
        self.learner.as_ref()
    }

    pub fn cost(&self) -> Option<&QuadraticCost> {
        self.cost.as_ref()
    }

    /// The segment expander currently in force, if any.
    pub fn segment_expander(&self) -> Option<&ExpanderE2> {
        match self.controller.as_ref()?.expander.as_ref()? {
            Expander::E2(e) => Some(e),
            Expander::E1(_) => None,
        }
    }

    pub fn pending(&self) -> Option<&Observation> {
        self.pending.as_ref()
    }

    /// Measures, runs the controller and publishes the admissible set for the
    /// current sample. Repeated calls before [`apply`](Self::apply) return the same observation.
    pub fn observe(&mut self) -> Result<Observation> {
        if let Some(obs) = &self.pending {
            return Ok(obs.clone());
        }
        let t = self.state.t;
        let y = self.plant.output(&self.state);
        let (v, set) = match &mut self.controller {
            Some(ctrl) => {
                let r = match &self.reference {
                    Some(r) => r.at(t, self.plant.outputs())?,
                    None => DVector::zeros(self.plant.outputs()),
                };
                ctrl.step(&r, &y, &self.u_prev)?
            }
            None => {
                let zero = DVector::zeros(self.plant.inputs());
                (zero.clone(), AdmissibleSet::point(zero))
            }
        };
        let obs = Observation { t, y, v, set };
        self.pending = Some(obs.clone());
        Ok(obs)
    }

    /// Applies `u` to the pending sample and advances the loop by one step.
    pub fn apply(&mut self, u: DVector<f64>) -> Result<TraceRecord> {
        let obs = match &self.pending {
            Some(obs) => obs.clone(),
            None => return Err(Error::DecisionPending),
        };
        let distance = obs.set.distance(&u);
        if !(u.len() == obs.set.dim() && distance <= crate::decision::EXTERNAL_TOLERANCE) {
            return Err(Error::NotAdmissible { distance });
        }
        if !u.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("applied action".into()));
        }

        let segment = self.segment_expander().cloned();
        let interior = segment.as_ref().is_some_and(|e| is_interior(&obs.v, &u, e, self.margin));
        let delta = match (&obs.set, obs.set.parameter_of(&u)) {
            (AdmissibleSet::Segment { .. }, Delta::Scalar(d)) => vec![d],
            (AdmissibleSet::Box { half_lengths, .. }, Delta::PerAxis(d)) if half_lengths.iter().any(|h| *h > 0.0) => {
                d.as_slice().to_vec()
            }
            _ => Vec::new(),
        };
        let record = TraceRecord {
            t: obs.t,
            y: obs.y.as_slice().to_vec(),
            v: obs.v.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            delta,
            f_of_u: self.cost.as_ref().map(|c| c.value(&u)),
            gamma: segment.as_ref().map_or(0.0, |e| e.gamma),
            e_l: segment.as_ref().map_or_else(Vec::new, |e| e.e_l.as_slice().to_vec()),
            interior_flag: interior,
            case_label: self.label.clone(),
        };

        if let Some(learner) = &mut self.learner {
            learner.step(&obs.v, &u)?;
            if let Some(ctrl) = &mut self.controller {
                ctrl.set_expander(Some(Expander::E2(learner.current.clone())));
            }
        }

        let w = self.disturbance.at(obs.t, self.plant.disturbances())?;
        let (next, _) = self.plant.step(&self.state, &u, &w)?;
        self.state = next;
        self.u_prev = u;
        self.pending = None;
        Ok(record)
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Vec<TraceRecord>,
    pub learner: Option<LearnerState>,
    pub final_expander: Option<ExpanderE2>,
}

/// Runs `cfg.horizon` samples with the configured policy.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    let mut engine = Engine::new(cfg)?;
    if cfg.policy == PolicySpec::External {
        return Err(Error::Config("external policy needs an interactive session".into()));
    }
    let mut policy = engine.build_policy(cfg)?;
    let mut trace = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let obs = engine.observe()?;
        let u = if cfg.feedback { policy.decide(&obs.set)? } else { obs.v.clone() };
        trace.push(engine.apply(u)?);
    }
    Ok(RunOutcome {
        trace,
        final_expander: engine.segment_expander().cloned(),
        learner: engine.learner,
    })
}

pub fn run_case(cfg: &ScenarioConfig) -> Result<Vec<TraceRecord>> {
    Ok(run_scenario(cfg)?.trace)
}

/// Steady-state summary over the last tenth of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadySummary {
    pub y_abs_max: f64,
    pub y_final: Vec<f64>,
    pub f_final: Option<f64>,
    /// Max-min spread of `y` and `f` over the window is below `1e-6`.
    pub settled: bool,
}

pub const STEADY_SPREAD: f64 = 1e-6;

pub fn steady_state(trace: &[TraceRecord]) -> Option<SteadySummary> {
    let last = trace.last()?;
    let window = &trace[trace.len() - (trace.len() / 10).max(1)..];
    let spread = |values: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        hi - lo
    };
    let mut settled = (0..last.y.len()).all(|i| spread(&mut window.iter().map(|r| r.y[i])) < STEADY_SPREAD);
    if last.f_of_u.is_some() {
        settled &= spread(&mut window.iter().filter_map(|r| r.f_of_u)) < STEADY_SPREAD;
    }
    Some(SteadySummary {
        y_abs_max: window.iter().flat_map(|r| r.y.iter()).fold(0.0, |m, y| m.max(y.abs())),
        y_final: last.y.clone(),
        f_final: last.f_of_u,
        settled,
    })
}

/// Learner summary stored in a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSummary {
    pub converged: bool,
    pub updates: usize,
    pub hyperplanes: usize,
    pub e_l: Vec<f64>,
    pub gamma: f64,
    pub ustar_estimate: Option<Vec<f64>>,
}

/// Metadata written next to a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub seed: u64,
    pub horizon: usize,
    pub trace_file: String,
    pub rows: usize,
    pub config: ScenarioConfig,
    pub perf_report: crate::verify::PerfReport,
    pub steady: Option<SteadySummary>,
    pub learner: Option<LearnerSummary>,
}

impl RunManifest {
    pub fn new(cfg: &ScenarioConfig, outcome: &RunOutcome, trace_file: &str) -> Result<Self> {
        Ok(Self {
            label: cfg.label.clone(),
            seed: cfg.seed,
            horizon: cfg.horizon,
            trace_file: trace_file.into(),
            rows: outcome.trace.len(),
            config: cfg.clone(),
            perf_report: crate::verify::PerfReport::evaluate(cfg)?,
            steady: steady_state(&outcome.trace),
            learner: outcome.learner.as_ref().map(|l| LearnerSummary {
                converged: l.converged,
                updates: l.k,
                hyperplanes: l.directions.len(),
                e_l: l.current.e_l.as_slice().to_vec(),
                gamma: l.current.gamma,
                ustar_estimate: l.ustar_estimate.as_ref().map(|u| u.as_slice().to_vec()),
            }),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })?;
        std::fs::write(path, text + "\n").map_err(|source| Error::Io { path: path.into(), source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    JsonLines,
}

impl TraceFormat {
    /// `.jsonl` / `.ndjson` select JSON lines, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson") => TraceFormat::JsonLines,
            _ => TraceFormat::Csv,
        }
    }
}

const CSV_HEADER: [&str; 10] = ["t", "y", "v", "u", "delta", "f_of_u", "gamma", "e_l", "interior_flag", "case_label"];

/// Rounds to 12 significant digits.
fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|x| round12(*x).to_string()).collect::<Vec<_>>().join(";")
}

fn split(cell: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(';').map(str::parse).collect()
}

fn rounded(r: &TraceRecord) -> TraceRecord {
    let v = |x: &[f64]| x.iter().copied().map(round12).collect();
    TraceRecord {
        y: v(&r.y),
        v: v(&r.v),
        u: v(&r.u),
        delta: v(&r.delta),
        f_of_u: r.f_of_u.map(round12),
        gamma: round12(r.gamma),
        e_l: v(&r.e_l),
        ..r.clone()
    }
}

/// Writes a trace. Vector-valued CSV cells hold `;`-separated entries.
pub fn emit_trace(trace: &[TraceRecord], format: TraceFormat, path: &Path) -> Result<()> {
    let io = |source| Error::Io { path: path.into(), source };
    let file = File::create(path).map_err(io)?;
    match format {
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            let csv_err = |e: csv::Error| Error::Parse { path: path.into(), message: e.to_string() };
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in trace {
                w.write_record([
                    r.t.to_string(),
                    join(&r.y),
                    join(&r.v),
                    join(&r.u),
                    join(&r.delta),
                    r.f_of_u.map(|f| round12(f).to_string()).unwrap_or_default(),
                    round12(r.gamma).to_string(),
                    join(&r.e_l),
                    r.interior_flag.to_string(),
                    r.case_label.clone(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(io)?;
        }
        TraceFormat::JsonLines => {
            let mut w = BufWriter::new(file);
            for r in trace {
                let line = serde_json::to_string(&rounded(r)).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })?;
                writeln!(w, "{line}").map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
    }
    Ok(())
}

pub fn parse_trace(path: &Path, format: TraceFormat) -> Result<Vec<TraceRecord>> {
    let io = |source| Error::Io { path: path.into(), source };
    let bad = |message: String| Error::Parse { path: path.into(), message };
    let file = File::open(path).map_err(io)?;
    match format {
        TraceFormat::Csv => {
            let mut reader = csv::Reader::from_reader(file);
            let header = reader.headers().map_err(|e| bad(e.to_string()))?;
            if header.iter().ne(CSV_HEADER) {
                return Err(bad(format!("unexpected header {header:?}")));
            }
            let mut out = Vec::new();
            for row in reader.records() {
                let row = row.map_err(|e| bad(e.to_string()))?;
                let num = |i: usize| split(&row[i]).map_err(|e| bad(format!("column {}: {e}", CSV_HEADER[i])));
                out.push(TraceRecord {
                    t: row[0].parse().map_err(|e| bad(format!("t: {e}")))?,
                    y: num(1)?,
                    v: num(2)?,
                    u: num(3)?,
                    delta: num(4)?,
                    f_of_u: if row[5].is_empty() {
                        None
                    } else {
                        Some(row[5].parse().map_err(|e| bad(format!("f_of_u: {e}")))?)
                    },
                    gamma: row[6].parse().map_err(|e| bad(format!("gamma: {e}")))?,
                    e_l: num(7)?,
                    interior_flag: row[8].parse().map_err(|e| bad(format!("interior_flag: {e}")))?,
                    case_label: row[9].to_string(),
                });
            }
            Ok(out)
        }
        TraceFormat::JsonLines => BufReader::new(file)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|line| {
                let line = line.map_err(io)?;
                serde_json::from_str(&line).map_err(|e| bad(e.to_string()))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference(case: Case) -> ScenarioConfig {
        ScenarioConfig::reference().for_case(case).unwrap()
    }

    #[test]
    fn bundled_config_matches_reference() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
        assert_eq!(ScenarioConfig::load(&path).unwrap(), ScenarioConfig::reference());
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ScenarioConfig::reference();
        cfg.horizon = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::reference();
        cfg.gain = vec![vec![1.0, 2.0, 3.0]];
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::reference();
        cfg.cost = None;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::reference();
        cfg.expander = Some(ExpanderSpec::E1 { gammas: vec![0.1; 3] });
        assert!(cfg.validate().is_err());
        assert!(cfg.for_case(Case::Learning).is_err());
        let mut cfg = ScenarioConfig::reference();
        cfg.plant.a[1].pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn open_loop_settles_at_disturbance_gain() {
        let trace = run_case(&reference(Case::NoFeedback)).unwrap();
        assert_relative_eq!(trace.last().unwrap().y[0], 3.5, epsilon = 1e-9);
        assert!(trace.iter().all(|r| r.u == vec![0.0; 3]));
        assert_eq!(trace.last().unwrap().f_of_u, Some(0.0));
    }

    #[test]
    fn nominal_case_regulates() {
        let cfg = ScenarioConfig { horizon: 200, ..reference(Case::Nominal) };
        let trace = run_case(&cfg).unwrap();
        let last = trace.last().unwrap();
        assert!(last.y[0].abs() < 1e-6);
        // oracle: f(v_ss) with v_ss = -3.5 K_e
        let v_ss = [-7.0 / 6.0, -7.0 / 3.0, -7.0 / 12.0];
        let f_ss = 2.0 * v_ss.iter().map(|x| x * x).sum::<f64>() - (v_ss[0] + 4.0 * v_ss[2]);
        assert_relative_eq!(last.f_of_u.unwrap(), f_ss, epsilon = 1e-6);
        assert!((f_ss - 17.79).abs() < 0.01);
        assert!(last.delta.is_empty());
        assert_eq!(last.gamma, 0.0);
    }

    #[test]
    fn fixed_expander_trades_output_for_cost() {
        let trace = run_case(&reference(Case::Fixed)).unwrap();
        let steady = steady_state(&trace).unwrap();
        assert!(steady.settled);
        assert!(steady.y_abs_max <= 0.2 + 1e-6);
        assert!((steady.f_final.unwrap() - 16.74).abs() < 0.02);
        assert!(trace.iter().all(|r| !r.interior_flag || r.t < 5));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = reference(Case::Learning);
        assert_eq!(run_case(&cfg).unwrap(), run_case(&cfg).unwrap());
        let mut random = reference(Case::Fixed);
        random.policy = PolicySpec::RandomUniform { seed: None };
        assert_eq!(run_case(&random).unwrap(), run_case(&random).unwrap());
        random.seed = 99;
        assert_ne!(run_case(&random).unwrap(), run_case(&reference(Case::Fixed)).unwrap());
    }

    #[test]
    fn logged_actions_are_admissible() {
        let cfg = reference(Case::Learning);
        let c = cfg.clone();
        let mut engine = Engine::new(&c).unwrap();
        let mut policy = engine.build_policy(&c).unwrap();
        for _ in 0..cfg.horizon {
            let obs = engine.observe().unwrap();
            assert_eq!(engine.observe().unwrap(), obs);
            let u = policy.decide(&obs.set).unwrap();
            assert!(obs.set.contains(&u, 1e-9));
            engine.apply(u).unwrap();
        }
    }

    #[test]
    fn engine_rejects_inadmissible_actions() {
        let mut engine = Engine::new(&reference(Case::Fixed)).unwrap();
        assert!(matches!(engine.apply(DVector::zeros(3)), Err(Error::DecisionPending)));
        for _ in 0..20 {
            let obs = engine.observe().unwrap();
            engine.apply(obs.v).unwrap();
        }
        let obs = engine.observe().unwrap();
        let far = &obs.v + DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert!(matches!(engine.apply(far), Err(Error::NotAdmissible { .. })));
        assert_eq!(engine.t(), 20);
        engine.apply(obs.v).unwrap();
        assert_eq!(engine.t(), 21);
    }

    #[test]
    fn reference_signal_shifts_output() {
        let mut cfg = reference(Case::Nominal);
        cfg.reference = Some(StepSignal { time: 10, magnitude: vec![0.5] });
        let trace = run_case(&cfg).unwrap();
        assert!((trace.last().unwrap().y[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn box_expander_run() {
        let mut cfg = reference(Case::Nominal);
        cfg.expander = Some(ExpanderSpec::E1 { gammas: vec![0.05, 0.05, 0.05] });
        let trace = run_case(&cfg).unwrap();
        let last = trace.last().unwrap();
        assert_eq!(last.delta.len(), 3);
        assert!(last.f_of_u.unwrap() < 17.79);
    }

    fn sample_trace() -> Vec<TraceRecord> {
        let cfg = ScenarioConfig { horizon: 30, ..reference(Case::Learning) };
        run_case(&cfg).unwrap()
    }

    #[test]
    fn trace_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = sample_trace();
        for (name, format) in [("t.csv", TraceFormat::Csv), ("t.jsonl", TraceFormat::JsonLines)] {
            let path = dir.path().join(name);
            assert_eq!(TraceFormat::from_path(&path), format);
            emit_trace(&trace, format, &path).unwrap();
            let back = parse_trace(&path, format).unwrap();
            assert_eq!(back.len(), trace.len());
            for (a, b) in back.iter().zip(&trace) {
                assert_eq!(a, &rounded(b));
                for (x, y) in a.u.iter().zip(&b.u) {
                    assert!((x - y).abs() <= 1e-11 * y.abs().max(1e-300));
                }
            }
            // re-emitting the parsed trace reproduces the file byte for byte
            let again = dir.path().join(format!("again_{name}"));
            emit_trace(&back, format, &again).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_trace(&[], TraceFormat::Csv, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,y,v,u,delta,f_of_u,gamma,e_l,interior_flag,case_label\n");
        assert!(parse_trace(&path, TraceFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn trace_io_errors_carry_path() {
        let err = emit_trace(&[], TraceFormat::Csv, Path::new("/nonexistent/dir/t.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/t.csv"));
    }

    #[test]
    fn rounding_keeps_twelve_digits() {
        assert_eq!(round12(0.1 + 0.2), 0.3);
        assert_eq!(round12(1.0 / 3.0).to_string(), "0.333333333333");
        assert_eq!(round12(-2.0 / 3.0 * 1e-20).to_string(), "-0.00000000000000000000666666666667");
        assert_eq!(round12(0.0), 0.0);
    }
}

//! Weak control for human-in-the-loop systems.
//!
//! An internal-model controller emits a *set* of admissible actions instead of
//! a single command. A decision maker (an optimizer, a random probe, or a live
//! human through [`session`]) picks any point of that set, and the closed loop
//! keeps its stability and a bounded DC performance loss regardless of the
//! choice. The [`learner`] reshapes the set online so that the decision
//! maker's achievable cost decreases while the budget stays enforced.
//!
//! Module map:
//!
//! - [`lti`]: continuous plants, exact zero-order-hold discretization, DC gains.
//! - [`expander`]: set-valued signal generators and admissible-set geometry.
//! - [`controller`]: the IMC controller and the open-loop cascade replay.
//! - [`decision`]: decision-maker policies and constrained quadratic solvers.
//! - [`learner`]: hyperplane accumulation, optimum estimation, expander updates.
//! - [`verify`]: DC performance checks and closed-loop probes.
//! - [`sim`]: scenario configuration, the loop engine, traces.
//! - [`session`]: step-by-step sessions driven by an external decision maker.

pub mod controller;
pub mod decision;
pub mod error;
pub mod expander;
pub mod learner;
pub mod lti;
pub mod serde_util;
pub mod session;
pub mod sim;
pub mod verify;

pub use controller::{cascade_response, ImcController};
pub use decision::{Choice, DecisionPolicy, QuadraticCost};
pub use error::{Error, Result};
pub use expander::{AdmissibleSet, Delta, Expander, ExpanderE1, ExpanderE2};
pub use learner::{LearnerConfig, LearnerState, PerfBudget, StepOutcome};
pub use lti::{Channel, DiscreteStateSpace, PlantState, StateSpace};
pub use session::{Session, SessionStatus, SessionStore, SessionView};
pub use sim::{Case, Engine, PolicySpec, RunManifest, ScenarioConfig, TraceFormat, TraceRecord};
pub use verify::PerfReport;

pub use nalgebra::{DMatrix, DVector};

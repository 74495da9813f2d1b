//! Step-by-step runs driven by an external decision maker.
//!
//! A session pauses at every sample with the admissible set published and
//! waits for a [`Choice`]. Rejected choices leave the session untouched.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::decision::{Choice, DecisionPolicy};
use crate::error::{Error, Result};
use crate::expander::AdmissibleSet;
use crate::sim::{Engine, PolicySpec, ScenarioConfig, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingDecision,
    /// A decision is being applied.
    Advancing,
    Done,
}

/// Public snapshot of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub t: usize,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    /// Admissible set for the pending sample; absent once the run is done.
    pub set: Option<AdmissibleSet>,
    pub gamma: f64,
    pub e_l: Vec<f64>,
    /// Sum of the cost over the applied actions.
    pub f_so_far: f64,
    pub status: SessionStatus,
    pub delta_rho: f64,
    pub horizon: usize,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    config: ScenarioConfig,
    engine: Engine,
    policy: DecisionPolicy,
    trace: Vec<TraceRecord>,
    choices: Vec<Choice>,
    status: SessionStatus,
    last_activity: Instant,
}

impl Session {
    /// Creates a session; the configured policy is replaced by an external one.
    pub fn new(id: impl Into<String>, config: &ScenarioConfig) -> Result<Self> {
        let config = ScenarioConfig { policy: PolicySpec::External, ..config.clone() };
        let mut engine = Engine::new(&config)?;
        engine.observe()?;
        Ok(Self {
            id: id.into(),
            policy: engine.build_policy(&config)?,
            engine,
            config,
            trace: Vec::new(),
            choices: Vec::new(),
            status: SessionStatus::AwaitingDecision,
            last_activity: Instant::now(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn t(&self) -> usize {
        self.engine.t()
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// The accepted choices, in order.
    pub fn choices(&self) -> &[Choice] {
        &self.choices
    }

    pub fn pending_set(&self) -> Option<&AdmissibleSet> {
        match self.status {
            SessionStatus::Done => None,
            _ => self.engine.pending().map(|o| &o.set),
        }
    }

    pub fn state(&self) -> SessionView {
        let pending = self.engine.pending().filter(|_| self.status != SessionStatus::Done);
        let (y, v) = match (pending, self.trace.last()) {
            (Some(obs), _) => (obs.y.as_slice().to_vec(), obs.v.as_slice().to_vec()),
            (None, Some(last)) => (last.y.clone(), last.v.clone()),
            (None, None) => (Vec::new(), Vec::new()),
        };
        let segment = self.engine.segment_expander();
        SessionView {
            id: self.id.clone(),
            t: self.engine.t(),
            y,
            v,
            set: pending.map(|o| o.set.clone()),
            gamma: segment.map_or(0.0, |e| e.gamma),
            e_l: segment.map_or_else(Vec::new, |e| e.e_l.as_slice().to_vec()),
            f_so_far: self.trace.iter().filter_map(|r| r.f_of_u).sum(),
            status: self.status,
            delta_rho: self.config.delta_rho,
            horizon: self.config.horizon,
        }
    }

    /// Applies `choice` to the pending sample.
    ///
    /// `expected_t`, when given, must equal the pending sample index; a stale
    /// value is a conflict. An inadmissible choice is rejected and nothing changes.
    pub fn decide(&mut self, choice: Choice, expected_t: Option<usize>) -> Result<TraceRecord> {
        if self.status == SessionStatus::Done {
            return Err(Error::Conflict(format!("session {} is done", self.id)));
        }
        if let Some(t) = expected_t {
            if t != self.engine.t() {
                return Err(Error::Conflict(format!("decision for t = {t}, session is at t = {}", self.engine.t())));
            }
        }
        let obs = self.engine.observe()?;
        self.policy.submit(choice.clone())?;
        let u = self.policy.decide(&obs.set)?;
        self.status = SessionStatus::Advancing;
        let record = match self.engine.apply(u) {
            Ok(r) => r,
            Err(e) => {
                self.status = SessionStatus::AwaitingDecision;
                return Err(e);
            }
        };
        self.trace.push(record.clone());
        self.choices.push(choice);
        self.last_activity = Instant::now();
        if self.engine.t() >= self.config.horizon {
            self.status = SessionStatus::Done;
        } else {
            self.engine.observe()?;
            self.status = SessionStatus::AwaitingDecision;
        }
        Ok(record)
    }

    /// Applies the nominal action for every full `timeout` elapsed since the last decision.
    pub fn apply_timeouts(&mut self, timeout: Duration, now: Instant) -> Result<usize> {
        let mut applied = 0;
        while self.status == SessionStatus::AwaitingDecision && now.duration_since(self.last_activity) >= timeout {
            let due = self.last_activity + timeout;
            let v = self.engine.observe()?.v;
            self.decide(Choice::U(v), None)?;
            self.last_activity = due;
            applied += 1;
        }
        Ok(applied)
    }

    /// Re-runs a list of choices in a fresh session.
    pub fn replay(config: &ScenarioConfig, choices: &[Choice]) -> Result<Vec<TraceRecord>> {
        let mut session = Session::new("replay", config)?;
        for choice in choices {
            session.decide(choice.clone(), None)?;
        }
        Ok(session.trace)
    }
}

/// Shared registry of live sessions.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    /// Unanswered samples fall back to the nominal action after this long.
    pub auto_nominal: Option<Duration>,
}

impl SessionStore {
    pub fn new(auto_nominal: Option<Duration>) -> Self {
        Self { sessions: RwLock::default(), auto_nominal }
    }

    pub fn create(&self, config: &ScenarioConfig) -> Result<SessionView> {
        let id = uuid::Uuid::new_v4().to_string();
        let session = Session::new(id.clone(), config)?;
        let view = session.state();
        self.sessions
            .write()
            .map_err(|_| Error::Numerical("session store lock poisoned".into()))?
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn len(&self) -> usize {
        self.sessions.read().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs `f` on the session with the given id, after catching up on timeouts.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let session = self
            .sessions
            .read()
            .map_err(|_| Error::Numerical("session store lock poisoned".into()))?
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))?;
        let mut session = session.lock().map_err(|_| Error::Numerical("session lock poisoned".into()))?;
        if let Some(timeout) = self.auto_nominal {
            session.apply_timeouts(timeout, Instant::now())?;
        }
        f(&mut session)
    }

    pub fn state(&self, id: &str) -> Result<SessionView> {
        self.with_session(id, |s| Ok(s.state()))
    }

    pub fn decide(&self, id: &str, choice: Choice, expected_t: Option<usize>) -> Result<SessionView> {
        self.with_session(id, |s| {
            s.decide(choice, expected_t)?;
            Ok(s.state())
        })
    }
}

/// Convenience for tests and clients: the nominal choice.
pub fn nominal_choice(set: &AdmissibleSet) -> Choice {
    Choice::U(DVector::clone(set.center()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expander::Delta;
    use crate::sim::{run_case, Case};

    fn config() -> ScenarioConfig {
        ScenarioConfig { horizon: 40, ..ScenarioConfig::reference().for_case(Case::Learning).unwrap() }
    }

    #[test]
    fn fresh_session_awaits_first_decision() {
        let s = Session::new("a", &config()).unwrap();
        let view = s.state();
        assert_eq!(view.t, 0);
        assert_eq!(view.status, SessionStatus::AwaitingDecision);
        assert_eq!(view.y, vec![0.0]);
        assert!(view.set.is_some());
        assert_eq!(view.f_so_far, 0.0);
        assert_eq!(view.horizon, 40);
    }

    #[test]
    fn rejected_choice_leaves_state_unchanged() {
        let mut s = Session::new("a", &config()).unwrap();
        for _ in 0..5 {
            s.decide(Choice::Delta(Delta::Scalar(0.0)), None).unwrap();
        }
        let before = s.state();
        let gamma = before.gamma;
        let err = s.decide(Choice::Delta(Delta::Scalar(gamma * 2.0 + 1.0)), Some(5)).unwrap_err();
        assert!(matches!(err, Error::Selection(_)));
        let far = DVector::from_vec(vec![10.0, 10.0, 10.0]);
        assert!(matches!(s.decide(Choice::U(far), None), Err(Error::NotAdmissible { .. })));
        assert_eq!(s.state(), before);
        assert_eq!(s.trace().len(), 5);
        s.decide(Choice::Delta(Delta::Scalar(0.0)), Some(5)).unwrap();
        assert_eq!(s.t(), 6);
    }

    #[test]
    fn stale_t_and_done_are_conflicts() {
        let mut s = Session::new("a", &ScenarioConfig { horizon: 2, ..config() }).unwrap();
        s.decide(Choice::Delta(Delta::Scalar(0.0)), Some(0)).unwrap();
        assert!(matches!(s.decide(Choice::Delta(Delta::Scalar(0.0)), Some(0)), Err(Error::Conflict(_))));
        s.decide(Choice::Delta(Delta::Scalar(0.0)), Some(1)).unwrap();
        assert_eq!(s.status(), SessionStatus::Done);
        assert!(s.state().set.is_none());
        assert!(matches!(s.decide(Choice::Delta(Delta::Scalar(0.0)), None), Err(Error::Conflict(_))));
    }

    #[test]
    fn session_with_optimal_choices_matches_batch_run() {
        let cfg = config();
        let batch = run_case(&cfg).unwrap();
        let mut s = Session::new("a", &cfg).unwrap();
        for r in &batch {
            s.decide(Choice::U(DVector::from_vec(r.u.clone())), Some(r.t)).unwrap();
        }
        assert_eq!(s.trace(), batch.as_slice());
        assert_eq!(Session::replay(&cfg, s.choices()).unwrap(), batch);
    }

    #[test]
    fn timeouts_apply_nominal_actions() {
        let mut s = Session::new("a", &config()).unwrap();
        let start = s.last_activity;
        let n = s.apply_timeouts(Duration::from_secs(1), start + Duration::from_millis(3500)).unwrap();
        assert_eq!(n, 3);
        assert_eq!(s.t(), 3);
        assert!(s.trace().iter().all(|r| r.u == r.v));
    }

    #[test]
    fn store_lookup_and_errors() {
        let store = SessionStore::new(None);
        let view = store.create(&config()).unwrap();
        assert_eq!(store.len(), 1);
        assert!(matches!(store.state("nope"), Err(Error::NotFound(_))));
        let set = view.set.clone().unwrap();
        let after = store.decide(&view.id, nominal_choice(&set), Some(0)).unwrap();
        assert_eq!(after.t, 1);
        assert_eq!(store.state(&view.id).unwrap(), after);
    }
}

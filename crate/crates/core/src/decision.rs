//! Decision makers: policies that pick an action out of the admissible set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expander::{AdmissibleSet, Delta};

/// Tolerance for accepting an externally supplied action.
pub const EXTERNAL_TOLERANCE: f64 = 1e-6;

/// Convex quadratic cost `f(u) = u' Q u - c' u` with `Q` symmetric positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    #[serde(with = "crate::serde_util::matrix")]
    pub q: DMatrix<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub c: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let m = c.len();
        if q.nrows() != m || q.ncols() != m {
            return Err(Error::dim(format!("Q is {}x{}, c has {m} entries", q.nrows(), q.ncols())));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Config("Q must be symmetric".into()));
        }
        if q.clone().cholesky().is_none() {
            return Err(Error::Config("Q must be positive definite".into()));
        }
        Ok(Self { q, c })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.q * u)) - self.c.dot(u)
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.q * u * 2.0 - &self.c
    }

    /// Unconstrained minimizer `Q^{-1} c / 2`.
    pub fn unconstrained_minimizer(&self) -> DVector<f64> {
        let chol = self.q.clone().cholesky().expect("checked positive definite in new");
        chol.solve(&self.c) * 0.5
    }

    fn is_diagonal(&self) -> bool {
        let m = self.dim();
        (0..m).all(|i| (0..m).all(|j| i == j || self.q[(i, j)] == 0.0))
    }
}

/// Minimizes `f(center + delta d)` over `|delta| <= delta_max`. Returns `(u, delta)`.
pub fn minimize_on_segment(
    cost: &QuadraticCost,
    center: &DVector<f64>,
    d: &DVector<f64>,
    delta_max: f64,
) -> (DVector<f64>, f64) {
    // f(center + delta d) = a delta^2 + b delta + const
    let a = d.dot(&(&cost.q * d));
    let b = d.dot(&cost.gradient(center));
    let delta = if a > 0.0 {
        (-b / (2.0 * a)).clamp(-delta_max, delta_max)
    } else if b == 0.0 {
        0.0
    } else {
        -delta_max * b.signum()
    };
    (center + d * delta, delta)
}

/// Minimizes the cost over the box `|u_i - center_i| <= half_lengths_i`.
///
/// Diagonal `Q` separates, so the answer is the per-axis clamp of the
/// unconstrained optimum. Otherwise projected gradient descent with step
/// `1 / L`, `L = 2 lambda_max(Q)` the gradient's Lipschitz constant.
pub fn minimize_on_box(cost: &QuadraticCost, center: &DVector<f64>, half_lengths: &DVector<f64>) -> Result<DVector<f64>> {
    const MAX_ITERATIONS: usize = 100_000;
    const STEP_TOL: f64 = 1e-10;

    let m = center.len();
    if half_lengths.len() != m || cost.dim() != m {
        return Err(Error::dim("box and cost dimensions differ"));
    }
    let clamp = |u: &DVector<f64>| {
        DVector::from_iterator(m, (0..m).map(|i| u[i].clamp(center[i] - half_lengths[i], center[i] + half_lengths[i])))
    };
    if half_lengths.iter().all(|h| *h == 0.0) {
        return Ok(center.clone());
    }
    if cost.is_diagonal() {
        return Ok(clamp(&cost.unconstrained_minimizer()));
    }

    let lipschitz = 2.0 * cost.q.symmetric_eigenvalues().max();
    let step = 1.0 / lipschitz;
    let mut u = center.clone();
    for _ in 0..MAX_ITERATIONS {
        let next = clamp(&(&u - cost.gradient(&u) * step));
        let moved = (&next - &u).norm();
        u = next;
        if moved < STEP_TOL {
            return Ok(u);
        }
    }
    Err(Error::Optimization { iterations: MAX_ITERATIONS })
}

/// An externally supplied decision: a selection parameter or a raw action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Delta(Delta),
    U(#[serde(with = "crate::serde_util::vector")] DVector<f64>),
}

impl Choice {
    /// Resolves the choice to a member of `set`, or explains why it is not one.
    pub fn resolve(&self, set: &AdmissibleSet) -> Result<DVector<f64>> {
        match self {
            Choice::Delta(delta) => set.select(delta),
            Choice::U(u) => {
                if u.len() != set.dim() {
                    return Err(Error::dim(format!("u has {} entries, set has {}", u.len(), set.dim())));
                }
                let distance = set.distance(u);
                if distance <= EXTERNAL_TOLERANCE {
                    Ok(u.clone())
                } else {
                    Err(Error::NotAdmissible { distance })
                }
            }
        }
    }
}

/// How `u` is picked from `U`.
#[derive(Debug, Clone)]
pub enum DecisionPolicy {
    /// Always the nominal action `v`.
    Nominal,
    /// The rational decision maker: the constrained minimizer of a quadratic cost.
    QuadraticOptimizer(QuadraticCost),
    /// Uniform over the selection parameter.
    RandomUniform(Box<ChaCha8Rng>),
    /// The point maximizing the predicted DC output deviation `|P_u(0) (u - v)|`;
    /// ties go to the positive parameter.
    Extreme {
        dc_gain: DMatrix<f64>,
    },
    /// Selection supplied from outside, one per step.
    External { pending: Option<Choice> },
}

impl DecisionPolicy {
    pub fn random_uniform(seed: u64) -> Self {
        DecisionPolicy::RandomUniform(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn external() -> Self {
        DecisionPolicy::External { pending: None }
    }

    /// Queues the next external selection. Fails when one is already queued.
    pub fn submit(&mut self, choice: Choice) -> Result<()> {
        match self {
            DecisionPolicy::External { pending } => {
                if pending.is_some() {
                    return Err(Error::Conflict("a decision is already pending".into()));
                }
                *pending = Some(choice);
                Ok(())
            }
            _ => Err(Error::Config("policy does not accept external decisions".into())),
        }
    }

    pub fn decide(&mut self, set: &AdmissibleSet) -> Result<DVector<f64>> {
        let u = match self {
            DecisionPolicy::Nominal => set.center().clone(),
            DecisionPolicy::QuadraticOptimizer(cost) => match set {
                AdmissibleSet::Segment { center, direction, gamma } => {
                    minimize_on_segment(cost, center, direction, *gamma).0
                }
                AdmissibleSet::Box { center, half_lengths } => minimize_on_box(cost, center, half_lengths)?,
            },
            DecisionPolicy::RandomUniform(rng) => match set {
                AdmissibleSet::Segment { gamma, .. } => {
                    let delta = if *gamma > 0.0 { rng.random_range(-*gamma..=*gamma) } else { 0.0 };
                    set.select(&Delta::Scalar(delta))?
                }
                AdmissibleSet::Box { center, .. } => {
                    let delta = DVector::from_iterator(center.len(), (0..center.len()).map(|_| rng.random_range(-1.0..=1.0)));
                    set.select(&Delta::PerAxis(delta))?
                }
            },
            DecisionPolicy::Extreme { dc_gain } => extreme_point(dc_gain, set)?,
            DecisionPolicy::External { pending } => {
                let choice = pending.take().ok_or(Error::DecisionPending)?;
                choice.resolve(set)?
            }
        };
        debug_assert!(set.contains(&u, 1e-9), "policy left the admissible set");
        Ok(u)
    }
}

fn extreme_point(dc_gain: &DMatrix<f64>, set: &AdmissibleSet) -> Result<DVector<f64>> {
    if dc_gain.ncols() != set.dim() {
        return Err(Error::dim("DC gain columns must match the action dimension"));
    }
    match set {
        AdmissibleSet::Segment { gamma, .. } => set.select(&Delta::Scalar(*gamma)),
        AdmissibleSet::Box { center, half_lengths } => {
            // the deviation norm is convex in u, so a vertex attains the maximum
            let m = center.len();
            let free: Vec<usize> = (0..m).filter(|&i| half_lengths[i] > 0.0).collect();
            if free.len() > 20 {
                return Err(Error::dim("extreme policy enumerates vertices; too many axes"));
            }
            let mut best = (f64::NEG_INFINITY, DVector::zeros(m));
            for mask in 0u32..(1u32 << free.len()) {
                let mut signs = DVector::zeros(m);
                for (bit, &i) in free.iter().enumerate() {
                    signs[i] = if mask & (1 << bit) == 0 { 1.0 } else { -1.0 };
                }
                let deviation = (dc_gain * half_lengths.component_mul(&signs)).norm();
                if deviation > best.0 {
                    best = (deviation, signs);
                }
            }
            set.select(&Delta::PerAxis(best.1))
        }
    }
}

//! Online reshaping of a segment expander.
//!
//! Whenever the decision maker's constrained optimum `u_dagger` lies strictly
//! inside the segment, first-order optimality along the segment says the
//! unconstrained optimum `u*` lies on the hyperplane `e_l . (u* - u_dagger) = 0`.
//! Collecting such hyperplanes for linearly independent `e_l` pins `u*` down by
//! least squares. The expander is then re-aimed along `v - u*` and its
//! `gamma` recomputed as the largest value the DC performance budget allows.
//! While too few independent hyperplanes are known, the direction is
//! perturbed to explore.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expander::ExpanderE2;
use crate::lti::{Channel, StateSpace};

/// Frozen DC loop data that bounds how far an expander may degrade performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfBudget {
    /// Nominal DC performance `|(I - P_u(0) K_e) P_w(0)|`.
    pub rho: f64,
    /// Allowed deterioration on top of `rho`.
    pub delta_rho: f64,
    /// `P_u(0)`, l x m.
    #[serde(with = "crate::serde_util::matrix")]
    pub dc_pu: DMatrix<f64>,
    /// `P_w(0)`, l x q.
    #[serde(with = "crate::serde_util::matrix")]
    pub dc_pw: DMatrix<f64>,
    /// `K_e`, m x l.
    #[serde(with = "crate::serde_util::matrix")]
    pub gain: DMatrix<f64>,
    /// Used in place of an unbounded gamma.
    pub gamma_cap: f64,
}

pub const DEFAULT_GAMMA_CAP: f64 = 1e3;

impl PerfBudget {
    pub fn new(plant: &StateSpace, gain: DMatrix<f64>, delta_rho: f64) -> Result<Self> {
        if !(delta_rho.is_finite() && delta_rho >= 0.0) {
            return Err(Error::Config(format!("delta_rho must be non-negative, got {delta_rho}")));
        }
        let dc_pu = plant.dc_gain(Channel::Control)?;
        let dc_pw = plant.dc_gain(Channel::Disturbance)?;
        if gain.nrows() != dc_pu.ncols() || gain.ncols() != dc_pu.nrows() {
            return Err(Error::dim("gain does not match the plant"));
        }
        let rho = crate::verify::nominal_dc(&dc_pu, &dc_pw, &gain);
        Ok(Self { rho, delta_rho, dc_pu, dc_pw, gain, gamma_cap: DEFAULT_GAMMA_CAP })
    }

    /// DC deviation per unit `delta`: `|P_u(0) e_l e_r' K_e P_w(0)|`.
    ///
    /// The matrix is the outer product of `P_u(0) e_l` and `e_r' K_e P_w(0)`,
    /// so its induced 2-norm is the product of the two vector norms.
    pub fn sensitivity(&self, e_l: &DVector<f64>, e_r: &DVector<f64>) -> f64 {
        let left = &self.dc_pu * e_l;
        let right = e_r.transpose() * &self.gain * &self.dc_pw;
        left.norm() * right.norm()
    }
}

/// Largest `gamma` keeping the DC deviation within `delta_rho`.
pub fn max_gamma(e_l: &DVector<f64>, e_r: &DVector<f64>, budget: &PerfBudget) -> Result<f64> {
    let s = budget.sensitivity(e_l, e_r);
    if s <= f64::EPSILON * (e_l.norm() * e_r.norm()).max(1.0) {
        return Err(Error::UnboundedGamma { cap: budget.gamma_cap });
    }
    Ok(budget.delta_rho / s)
}

fn max_gamma_capped(e_l: &DVector<f64>, e_r: &DVector<f64>, budget: &PerfBudget) -> f64 {
    match max_gamma(e_l, e_r, budget) {
        Ok(g) => g.min(budget.gamma_cap),
        Err(_) => budget.gamma_cap,
    }
}

/// Strict interiority of the decision in the segment, with a relative margin.
pub fn is_interior(v: &DVector<f64>, u_dagger: &DVector<f64>, expander: &ExpanderE2, margin: f64) -> bool {
    let radius = expander.gamma * expander.e_l.norm() * expander.e_r.dot(v).abs();
    (u_dagger - v).norm() < (1.0 - margin) * radius
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Relative margin that makes the interiority test strict.
    pub margin: f64,
    /// Consecutive non-interior samples tolerated before exploring.
    pub patience: usize,
    /// Perturbation size for exploration.
    pub perturbation: f64,
    /// Singular values below `rank_tol * sigma_max` count as zero.
    pub rank_tol: f64,
    pub converge_tol: f64,
    pub converge_updates: usize,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            margin: 0.01,
            patience: 5,
            perturbation: 0.1,
            rank_tol: 1e-8,
            converge_tol: 1e-6,
            converge_updates: 3,
            seed: 0,
        }
    }
}

/// What a [`LearnerState::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    /// Learning has converged; the expander is frozen.
    Frozen,
    /// Nothing changed (the sample may still have been recorded).
    Held,
    /// Direction re-aimed at `v - u*`.
    Reaimed,
    /// Direction perturbed for exploration.
    Perturbed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerState {
    #[serde(with = "crate::serde_util::vectors")]
    pub directions: Vec<DVector<f64>>,
    pub offsets: Vec<f64>,
    pub current: ExpanderE2,
    #[serde(with = "crate::serde_util::option_vector")]
    pub ustar_estimate: Option<DVector<f64>>,
    /// Number of direction updates so far.
    pub k: usize,
    /// Consecutive non-interior samples.
    pub skips: usize,
    /// Consecutive updates that moved the direction less than `converge_tol`.
    pub still_updates: usize,
    pub converged: bool,
    pub config: LearnerConfig,
    pub budget: PerfBudget,
    rng: ChaCha8Rng,
}

impl LearnerState {
    /// Starts from `initial`, with `gamma` replaced by the budget maximum.
    pub fn new(initial: ExpanderE2, budget: PerfBudget, config: LearnerConfig) -> Result<Self> {
        if budget.dc_pu.ncols() != initial.dim() {
            return Err(Error::dim("expander and budget dimensions differ"));
        }
        if !(config.margin > 0.0 && config.margin < 1.0) {
            return Err(Error::Config(format!("margin must lie in (0, 1), got {}", config.margin)));
        }
        let mut current = initial;
        current.gamma = max_gamma_capped(&current.e_l, &current.e_r, &budget);
        Ok(Self {
            directions: Vec::new(),
            offsets: Vec::new(),
            current,
            ustar_estimate: None,
            k: 0,
            skips: 0,
            still_updates: 0,
            converged: false,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            budget,
        })
    }

    pub fn dim(&self) -> usize {
        self.current.dim()
    }

    /// Appends the hyperplane `e_l . u* = e_l . u_dagger` for the current direction.
    pub fn record_hyperplane(&mut self, v: &DVector<f64>, u_dagger: &DVector<f64>) -> Result<()> {
        if !is_interior(v, u_dagger, &self.current, self.config.margin) {
            return Err(Error::Interiority);
        }
        self.offsets.push(self.current.e_l.dot(u_dagger));
        self.directions.push(self.current.e_l.clone());
        Ok(())
    }

    /// Stacked directions as columns, m x k.
    pub fn direction_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.directions)
    }

    pub fn rank(&self) -> usize {
        if self.directions.is_empty() {
            return 0;
        }
        let sv = self.direction_matrix().singular_values();
        let max = sv.max();
        sv.iter().filter(|s| **s > self.config.rank_tol * max).count()
    }

    /// Least-squares intersection of the recorded hyperplanes:
    /// `u* = (E E')^{-1} E b` with `E` the stacked directions and `b` the offsets.
    pub fn estimate_ustar(&self) -> Result<DVector<f64>> {
        let m = self.dim();
        let rank = self.rank();
        if rank < m {
            return Err(Error::Rank { rank, needed: m });
        }
        let e = self.direction_matrix();
        let b = DVector::from_column_slice(&self.offsets);
        let normal = &e * e.transpose();
        let rhs = &e * b;
        normal
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or(Error::Rank { rank: m - 1, needed: m })
    }

    /// The expander re-aimed along `v - u*` (unit length), gamma not yet updated.
    pub fn update_direction(&self, v: &DVector<f64>, ustar: &DVector<f64>) -> Result<ExpanderE2> {
        let diff = v - ustar;
        let norm = diff.norm();
        if norm <= 1e-12 * (1.0 + v.norm()) {
            return Err(Error::DegenerateDirection);
        }
        Ok(ExpanderE2 { e_l: diff / norm, ..self.current.clone() })
    }

    /// The expander with its direction nudged by a random unit vector.
    pub fn perturb_direction(&mut self) -> ExpanderE2 {
        let m = self.dim();
        let eta = self.config.perturbation;
        loop {
            let g = random_unit(&mut self.rng, m);
            let nudged = &self.current.e_l / self.current.e_l.norm() + g * eta;
            let norm = nudged.norm();
            if norm > 1e-9 {
                return ExpanderE2 { e_l: nudged / norm, ..self.current.clone() };
            }
        }
    }

    /// One pass of the update loop on the sample `(v, u_dagger)`.
    pub fn step(&mut self, v: &DVector<f64>, u_dagger: &DVector<f64>) -> Result<StepOutcome> {
        if self.converged {
            return Ok(StepOutcome::Frozen);
        }
        if v.len() != self.dim() || u_dagger.len() != self.dim() {
            return Err(Error::dim("learner sample has the wrong dimension"));
        }

        let interior = is_interior(v, u_dagger, &self.current, self.config.margin);
        if interior {
            self.record_hyperplane(v, u_dagger)?;
            self.skips = 0;
        } else {
            self.skips += 1;
        }

        let (next, outcome) = match self.estimate_ustar() {
            Ok(ustar) => {
                let aimed = self.update_direction(v, &ustar);
                self.ustar_estimate = Some(ustar);
                match aimed {
                    Ok(e) => (e, StepOutcome::Reaimed),
                    Err(Error::DegenerateDirection) => return Ok(StepOutcome::Held),
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Rank { .. }) => {
                if !(interior || self.skips >= self.config.patience) {
                    return Ok(StepOutcome::Held);
                }
                self.skips = 0;
                (self.perturb_direction(), StepOutcome::Perturbed)
            }
            Err(e) => return Err(e),
        };

        let moved = (&next.e_l - &self.current.e_l).norm();
        self.still_updates = if moved < self.config.converge_tol { self.still_updates + 1 } else { 0 };
        self.current = next;
        self.current.gamma = max_gamma_capped(&self.current.e_l, &self.current.e_r, &self.budget);
        self.k += 1;
        if self.still_updates >= self.config.converge_updates {
            self.converged = true;
        }
        Ok(outcome)
    }
}

/// Uniform direction on the unit sphere by rejection from the cube.
fn random_unit(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let n = g.norm();
        if n > 1e-6 && n <= 1.0 {
            return g / n;
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::decision::{minimize_on_segment, QuadraticCost};
    use proptest::prelude::*;

    fn budget() -> PerfBudget {
        let plant = StateSpace::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -0.5])),
            DMatrix::identity(3, 3),
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(1, 3, 1.0),
        )
        .unwrap();
        PerfBudget::new(&plant, DMatrix::from_column_slice(3, 1, &[2.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0]), 0.2).unwrap()
    }

    fn vector(m: usize, r: f64) -> impl Strategy<Value = DVector<f64>> {
        proptest::collection::vec(-r..r, m).prop_map(DVector::from_vec)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_step_respects_budget(
            samples in proptest::collection::vec((vector(3, 3.0), -1.0f64..1.0), 1..60),
            seed in any::<u64>(),
        ) {
            let e_r = DVector::from_element(3, 1.0 / 3f64.sqrt());
            let cost = QuadraticCost::new(DMatrix::identity(3, 3) * 2.0, DVector::from_vec(vec![1.0, 0.0, 4.0])).unwrap();
            let mut st = LearnerState::new(
                ExpanderE2::new(DVector::from_vec(vec![1.0, 0.0, 0.0]), e_r, 0.0).unwrap(),
                budget(),
                LearnerConfig { seed, ..Default::default() },
            ).unwrap();
            for (v, t) in samples {
                let set = st.current.expand(&v).unwrap();
                let crate::expander::AdmissibleSet::Segment { center, direction, gamma } = &set else { unreachable!() };
                // alternate between rational and arbitrary decisions
                let u = if t > 0.0 { minimize_on_segment(&cost, center, direction, *gamma).0 } else { center + direction * (t * gamma) };
                let before = st.directions.len();
                let interior = is_interior(&v, &u, &st.current, st.config.margin);
                st.step(&v, &u).unwrap();
                prop_assert!(st.current.gamma * st.budget.sensitivity(&st.current.e_l, &st.current.e_r) <= 0.2 + 1e-9);
                if !interior {
                    prop_assert_eq!(st.directions.len(), before);
                }
            }
        }

        #[test]
        // The recorded hyperplane passes through u* only when Q is a multiple of
        // the identity; for general Q its normal is Q e_l, not e_l.
        fn exact_interior_optima_recover_true_optimum(
            scale in 0.2f64..5.0,
            c in vector(3, 3.0),
            dirs in proptest::collection::vec(vector(3, 1.0), 3..6),
            center_offsets in proptest::collection::vec(vector(3, 0.5), 6),
        ) {
            let cost = QuadraticCost::new(DMatrix::identity(3, 3) * scale, c).unwrap();
            let truth = cost.unconstrained_minimizer();
            let mut st = LearnerState::new(
                ExpanderE2::new(DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::from_element(3, 1.0), 1.0).unwrap(),
                budget(),
                LearnerConfig::default(),
            ).unwrap();
            for (d, off) in dirs.iter().zip(&center_offsets) {
                prop_assume!(d.norm() > 0.1);
                // wide segment centered near the optimum: the optimum is interior
                st.current = ExpanderE2::new(d.normalize(), DVector::from_element(3, 1.0), 50.0).unwrap();
                let v = &truth + off + DVector::from_element(3, 2.0);
                let set = st.current.expand(&v).unwrap();
                let crate::expander::AdmissibleSet::Segment { center, direction, gamma } = &set else { unreachable!() };
                let (u, delta) = minimize_on_segment(&cost, center, direction, *gamma);
                prop_assume!(delta.abs() < 0.9 * gamma);
                st.record_hyperplane(&v, &u).unwrap();
            }
            prop_assume!(st.rank() == 3);
            let sv = st.direction_matrix().singular_values();
            prop_assume!(sv.min() > 1e-2 * sv.max());
            let est = st.estimate_ustar().unwrap();
            prop_assert!((est - truth).amax() < 1e-6);
        }
    }
}

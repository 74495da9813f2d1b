//! Linear time-invariant plants.
//!
//! A plant is `dx/dt = A x + B_u u + B_w w`, `y = C x`. The loop runs in
//! discrete time, so every continuous model is converted with an exact
//! zero-order hold before simulation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which input channel a transfer quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// Manipulated input `u`.
    Control,
    /// Disturbance input `w`.
    Disturbance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    #[serde(with = "crate::serde_util::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub b_u: DMatrix<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub b_w: DMatrix<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub c: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b_u: DMatrix<f64>, b_w: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim(format!("A is {}x{}, must be square", n, a.ncols())));
        }
        if b_u.nrows() != n {
            return Err(Error::dim(format!("B_u has {} rows, expected {n}", b_u.nrows())));
        }
        if b_w.nrows() != n {
            return Err(Error::dim(format!("B_w has {} rows, expected {n}", b_w.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::dim(format!("C has {} columns, expected {n}", c.ncols())));
        }
        Ok(Self { a, b_u, b_w, c })
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b_u.ncols()
    }

    pub fn disturbances(&self) -> usize {
        self.b_w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    fn channel(&self, channel: Channel) -> &DMatrix<f64> {
        match channel {
            Channel::Control => &self.b_u,
            Channel::Disturbance => &self.b_w,
        }
    }

    /// Largest real part over the eigenvalues of `A`.
    pub fn spectral_abscissa(&self) -> f64 {
        if self.states() == 0 {
            return f64::NEG_INFINITY;
        }
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_hurwitz(&self) -> bool {
        self.spectral_abscissa() < 0.0
    }

    fn is_nilpotent(&self) -> bool {
        let n = self.states();
        let scale = self.a.amax().max(1.0);
        let mut power = DMatrix::<f64>::identity(n, n);
        for _ in 0..n {
            power = &power * &self.a;
        }
        power.amax() <= 1e-12 * scale.powi(n as i32)
    }

    fn require_hurwitz(&self) -> Result<()> {
        if self.is_hurwitz() {
            Ok(())
        } else {
            Err(Error::NotHurwitz { max_real: self.spectral_abscissa() })
        }
    }

    /// Exact zero-order-hold discretization with sample time `dt`.
    ///
    /// Both input matrices come out of one exponential of the block matrix
    /// `[[A, B_u, B_w], [0, 0, 0]] * dt`, which stays exact when `A` is
    /// singular (integrators).
    pub fn zoh_discretize(&self, dt: f64) -> Result<DiscreteStateSpace> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Discretization(format!("sample time must be positive, got {dt}")));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
        if !(finite(&self.a) && finite(&self.b_u) && finite(&self.b_w) && finite(&self.c)) {
            return Err(Error::Discretization("non-finite entry in plant matrices".into()));
        }
        if !self.is_hurwitz() && !self.is_nilpotent() {
            return Err(Error::NotHurwitz { max_real: self.spectral_abscissa() });
        }

        let (n, m, q) = (self.states(), self.inputs(), self.disturbances());
        let size = n + m + q;
        let mut aug = DMatrix::<f64>::zeros(size, size);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&self.a * dt));
        aug.view_mut((0, n), (n, m)).copy_from(&(&self.b_u * dt));
        aug.view_mut((0, n + m), (n, q)).copy_from(&(&self.b_w * dt));
        let phi = aug.exp();
        if !finite(&phi) {
            return Err(Error::Discretization("matrix exponential overflowed".into()));
        }

        Ok(DiscreteStateSpace {
            ad: phi.view((0, 0), (n, n)).into_owned(),
            bd_u: phi.view((0, n), (n, m)).into_owned(),
            bd_w: phi.view((0, n + m), (n, q)).into_owned(),
            c: self.c.clone(),
            dt,
        })
    }

    /// Steady-state gain `-C A^{-1} B` of the selected channel.
    pub fn dc_gain(&self, channel: Channel) -> Result<DMatrix<f64>> {
        self.require_hurwitz()?;
        let inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singularity("state matrix A".into()))?;
        Ok(-(&self.c * inv * self.channel(channel)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteStateSpace {
    #[serde(with = "crate::serde_util::matrix")]
    pub ad: DMatrix<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub bd_u: DMatrix<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub bd_w: DMatrix<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub c: DMatrix<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    #[serde(with = "crate::serde_util::vector")]
    pub x: DVector<f64>,
    pub t: usize,
}

impl PlantState {
    pub fn zeros(n: usize) -> Self {
        Self { x: DVector::zeros(n), t: 0 }
    }
}

impl DiscreteStateSpace {
    pub fn states(&self) -> usize {
        self.ad.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.bd_u.ncols()
    }

    pub fn disturbances(&self) -> usize {
        self.bd_w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn output(&self, state: &PlantState) -> DVector<f64> {
        &self.c * &state.x
    }

    /// Advances one sample. The returned output is `C x` of the state
    /// *before* the update, so `y_k` never depends on `u_k`.
    pub fn step(&self, state: &PlantState, u: &DVector<f64>, w: &DVector<f64>) -> Result<(PlantState, DVector<f64>)> {
        if state.x.len() != self.states() {
            return Err(Error::dim(format!("state has {} entries, expected {}", state.x.len(), self.states())));
        }
        if u.len() != self.inputs() {
            return Err(Error::dim(format!("u has {} entries, expected {}", u.len(), self.inputs())));
        }
        if w.len() != self.disturbances() {
            return Err(Error::dim(format!("w has {} entries, expected {}", w.len(), self.disturbances())));
        }
        let y = self.output(state);
        let x = &self.ad * &state.x + &self.bd_u * u + &self.bd_w * w;
        Ok((PlantState { x, t: state.t + 1 }, y))
    }

    /// Advances the state with the control channel only (the internal model).
    pub(crate) fn advance_control(&self, state: &mut PlantState, u: &DVector<f64>) {
        state.x = &self.ad * &state.x + &self.bd_u * u;
        state.t += 1;
    }

    /// Spectral radius of `Ad`.
    pub fn spectral_radius(&self) -> f64 {
        self.ad
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Discrete steady-state gain `C (I - Ad)^{-1} Bd`.
    pub fn dc_gain(&self, channel: Channel) -> Result<DMatrix<f64>> {
        let n = self.states();
        let inv = (DMatrix::<f64>::identity(n, n) - &self.ad)
            .try_inverse()
            .ok_or_else(|| Error::Singularity("I - Ad".into()))?;
        let b = match channel {
            Channel::Control => &self.bd_u,
            Channel::Disturbance => &self.bd_w,
        };
        Ok(&self.c * inv * b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn plant() -> StateSpace {
        StateSpace::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -0.5])),
            DMatrix::identity(3, 3),
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(1, 3, 1.0),
        )
        .unwrap()
    }

    /// Truncated Taylor series of the ZOH integrals, no scaling (dt * |A| <= 2).
    fn taylor_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64, terms: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = a.nrows();
        let mut ad = DMatrix::identity(n, n);
        let mut integral = DMatrix::identity(n, n) * dt;
        let mut term = DMatrix::<f64>::identity(n, n);
        for k in 1..terms {
            term = &term * a * (dt / k as f64);
            ad += &term;
            integral += &term * (dt / (k + 1) as f64);
        }
        (ad, integral * b)
    }

    #[test]
    fn integrator_discretizes_to_unit_gains() {
        let sys = StateSpace::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let d = sys.zoh_discretize(1.0).unwrap();
        assert_relative_eq!(d.ad[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(d.bd_u[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn diagonal_plant_matches_scalar_exponentials() {
        let d = plant().zoh_discretize(1.0).unwrap();
        for (i, a) in [-1.0f64, -2.0, -0.5].into_iter().enumerate() {
            assert_relative_eq!(d.ad[(i, i)], a.exp(), epsilon = 1e-14);
            assert_relative_eq!(d.bd_u[(i, i)], (a.exp() - 1.0) / a, epsilon = 1e-14);
        }
        assert!(d.spectral_radius() < 1.0);
    }

    #[test]
    fn zoh_matches_taylor_oracle() {
        let sys = plant();
        let d = sys.zoh_discretize(1.0).unwrap();
        let (ad, bd_u) = taylor_zoh(&sys.a, &sys.b_u, 1.0, 30);
        let (_, bd_w) = taylor_zoh(&sys.a, &sys.b_w, 1.0, 30);
        assert!((&d.ad - ad).amax() < 1e-12);
        assert!((&d.bd_u - bd_u).amax() < 1e-12);
        assert!((&d.bd_w - bd_w).amax() < 1e-12);

        // a coupled, non-normal plant
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.7, 0.0, -0.3, -1.5, 0.4, 0.2, 0.0, -0.8]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -1.0, 0.0, 2.0]);
        let sys = StateSpace::new(a.clone(), b.clone(), DMatrix::zeros(3, 0), DMatrix::identity(3, 3)).unwrap();
        let d = sys.zoh_discretize(0.7).unwrap();
        let (ad, bd) = taylor_zoh(&a, &b, 0.7, 30);
        assert!((&d.ad - ad).amax() < 1e-12);
        assert!((&d.bd_u - bd).amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(plant().zoh_discretize(0.0), Err(Error::Discretization(_))));
        let mut sys = plant();
        sys.a[(0, 0)] = f64::NAN;
        assert!(matches!(sys.zoh_discretize(1.0), Err(Error::Discretization(_))));
        let unstable = StateSpace::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(matches!(unstable.zoh_discretize(1.0), Err(Error::NotHurwitz { .. })));
        assert!(StateSpace::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2)).is_err());
        assert!(StateSpace::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn dc_gains_of_reference_plant() {
        let sys = plant();
        let pu = sys.dc_gain(Channel::Control).unwrap();
        let pw = sys.dc_gain(Channel::Disturbance).unwrap();
        for (got, want) in pu.iter().zip([1.0, 0.5, 2.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
        assert_relative_eq!(pw[(0, 0)], 3.5, epsilon = 1e-12);

        let d = sys.zoh_discretize(1.0).unwrap();
        assert!((d.dc_gain(Channel::Control).unwrap() - pu).amax() < 1e-9);
        assert!((d.dc_gain(Channel::Disturbance).unwrap() - pw).amax() < 1e-9);
    }

    #[test]
    fn dc_gain_zero_output_and_singular() {
        let mut sys = plant();
        sys.c = DMatrix::zeros(1, 3);
        assert_eq!(sys.dc_gain(Channel::Control).unwrap(), DMatrix::zeros(1, 3));

        let integrator = StateSpace::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(integrator.dc_gain(Channel::Control).is_err());
    }

    #[test]
    fn step_equilibrium_and_single_disturbance_step() {
        let d = plant().zoh_discretize(1.0).unwrap();
        let s0 = PlantState::zeros(3);
        let zero_u = DVector::zeros(3);
        let (s1, y) = d.step(&s0, &zero_u, &DVector::zeros(1)).unwrap();
        assert_eq!(s1.x, DVector::zeros(3));
        assert_eq!(y[0], 0.0);

        let (s1, y) = d.step(&s0, &zero_u, &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(y[0], 0.0);
        assert!((&s1.x - d.bd_w.column(0)).amax() < 1e-15);
        assert_eq!(s1.t, 1);
        assert!(d.step(&s0, &DVector::zeros(2), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn constant_nominal_input_rejects_disturbance() {
        let d = plant().zoh_discretize(1.0).unwrap();
        let gain = DVector::from_vec(vec![2.0, 4.0, 1.0]) / 6.0;
        let u = gain * -3.5;
        let w = DVector::from_element(1, 1.0);

        // oracle: x_ss = (I - Ad)^{-1} (Bd_u u + Bd_w w)
        let x_ss = (DMatrix::<f64>::identity(3, 3) - &d.ad).try_inverse().unwrap() * (&d.bd_u * &u + &d.bd_w * &w);
        assert!((&d.c * &x_ss)[0].abs() < 1e-12);

        let mut s = PlantState::zeros(3);
        let mut y = DVector::zeros(1);
        for _ in 0..200 {
            (s, y) = d.step(&s, &u, &w).unwrap();
        }
        assert!(y[0].abs() < 1e-6);
        assert!((&s.x - x_ss).amax() < 1e-9);
    }

    #[test]
    fn one_step_matches_analytic_solution() {
        let d = plant().zoh_discretize(1.0).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let u = DVector::from_vec(vec![0.5, -0.25, 1.5]);
        let w = 0.8;
        let (s1, _) = d.step(&PlantState { x: x0.clone(), t: 0 }, &u, &DVector::from_element(1, w)).unwrap();
        for (i, a) in [-1.0f64, -2.0, -0.5].into_iter().enumerate() {
            let e = a.exp();
            let want = e * x0[i] + (e - 1.0) / a * (u[i] + w);
            assert!((s1.x[i] - want).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hurwitz_plants_stay_bounded(
            poles in proptest::collection::vec(-3.0f64..-0.05, 1..5),
            dt in 0.05f64..2.0,
            inputs in proptest::collection::vec(-1.0f64..1.0, 50),
        ) {
            let n = poles.len();
            let sys = StateSpace::new(
                DMatrix::from_diagonal(&DVector::from_vec(poles)),
                DMatrix::from_element(n, 1, 1.0),
                DMatrix::zeros(n, 0),
                DMatrix::from_element(1, n, 1.0),
            ).unwrap();
            let d = sys.zoh_discretize(dt).unwrap();
            prop_assert!(d.spectral_radius() < 1.0);
            let bound = sys.dc_gain(Channel::Control).unwrap().abs().sum() + 1e-9;
            let mut s = PlantState::zeros(n);
            for u in inputs {
                let (next, y) = d.step(&s, &DVector::from_element(1, u), &DVector::zeros(0)).unwrap();
                // positive impulse responses: |y| <= sum of DC gains * max|u|
                prop_assert!(y[0].abs() <= bound);
                s = next;
            }
            let dc_c = sys.dc_gain(Channel::Control).unwrap();
            let dc_d = d.dc_gain(Channel::Control).unwrap();
            prop_assert!((dc_c - dc_d).amax() < 1e-9);
        }
    }
}

//! Internal model controller with set-valued output.
//!
//! The controller keeps a copy of the plant's control channel, drives it with
//! the action that was actually applied, and feeds back the mismatch between
//! the measured and the modelled output: `v = K_e (r - y + y_model)`. With an
//! exact model the mismatch is the disturbance response alone, so the loop is
//! an open cascade and stays stable whatever the decision maker picks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expander::{AdmissibleSet, Expander};
use crate::lti::{DiscreteStateSpace, PlantState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImcController {
    /// Static gain `K_e`, m x l.
    #[serde(with = "crate::serde_util::matrix")]
    pub gain: DMatrix<f64>,
    pub model: DiscreteStateSpace,
    pub model_state: PlantState,
    pub expander: Option<Expander>,
}

impl ImcController {
    pub fn new(gain: DMatrix<f64>, model: DiscreteStateSpace, expander: Option<Expander>) -> Result<Self> {
        if gain.nrows() != model.inputs() || gain.ncols() != model.outputs() {
            return Err(Error::dim(format!(
                "gain is {}x{}, model needs {}x{}",
                gain.nrows(),
                gain.ncols(),
                model.inputs(),
                model.outputs()
            )));
        }
        let n = model.states();
        Ok(Self { gain, model, model_state: PlantState::zeros(n), expander })
    }

    /// One controller sample.
    ///
    /// `u_prev` is the action applied at the previous sample (zero at `t = 0`).
    /// The internal model advances with it before the output is compared, so
    /// the model stays aligned with a plant that started at rest.
    pub fn step(
        &mut self,
        r: &DVector<f64>,
        y: &DVector<f64>,
        u_prev: &DVector<f64>,
    ) -> Result<(DVector<f64>, AdmissibleSet)> {
        let l = self.model.outputs();
        if r.len() != l || y.len() != l {
            return Err(Error::dim(format!("r and y must have {l} entries")));
        }
        if u_prev.len() != self.model.inputs() {
            return Err(Error::dim(format!("u_prev must have {} entries", self.model.inputs())));
        }
        if !(r.iter().chain(y.iter()).chain(u_prev.iter()).all(|x| x.is_finite())) {
            return Err(Error::Numerical("controller input".into()));
        }
        self.model.advance_control(&mut self.model_state, u_prev);
        let y_model = self.model.output(&self.model_state);
        let v = &self.gain * (r - y + y_model);
        let set = match &self.expander {
            Some(e) => e.expand(&v)?,
            None => AdmissibleSet::point(v.clone()),
        };
        Ok((v, set))
    }

    pub fn set_expander(&mut self, expander: Option<Expander>) {
        self.expander = expander;
    }
}

/// Open-loop evaluation of the closed loop, for an exact internal model.
///
/// The disturbance response `y_w` is computed alone, the nominal command is
/// `v_k = K_e (r_k - y_w,k)`, the recorded offsets are added, and the result
/// is pushed through the control channel. Returns the output trace.
pub fn cascade_response(
    plant: &DiscreteStateSpace,
    gain: &DMatrix<f64>,
    offsets: &[DVector<f64>],
    reference: &[DVector<f64>],
    disturbance: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let steps = offsets.len();
    if reference.len() != steps || disturbance.len() != steps {
        return Err(Error::dim("offset, reference and disturbance sequences differ in length"));
    }
    let n = plant.states();
    let zero_u = DVector::zeros(plant.inputs());
    let zero_w = DVector::zeros(plant.disturbances());

    let mut w_state = PlantState::zeros(n);
    let mut u_state = PlantState::zeros(n);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let (next_w, y_w) = plant.step(&w_state, &zero_u, &disturbance[k])?;
        let v = gain * (&reference[k] - &y_w);
        let u = v + &offsets[k];
        let (next_u, y_u) = plant.step(&u_state, &u, &zero_w)?;
        out.push(y_u + y_w);
        w_state = next_w;
        u_state = next_u;
    }
    Ok(out)
}

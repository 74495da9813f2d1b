//! DC performance checks and closed-loop probes.
//!
//! The budget is enforced in the DC criterion: the steady output per unit
//! step disturbance. A frequency sweep of the same loop is available as a
//! diagnostic but plays no part in enforcement.

use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expander::ExpanderE2;
use crate::lti::{Channel, StateSpace};
use crate::sim::{Engine, PolicySpec, ScenarioConfig};

/// Induced 2-norm (largest singular value).
fn induced_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// `|(I - P_u(0) K_e) P_w(0)|` from precomputed DC gains.
pub fn nominal_dc(dc_pu: &DMatrix<f64>, dc_pw: &DMatrix<f64>, gain: &DMatrix<f64>) -> f64 {
    let l = dc_pu.nrows();
    induced_norm(&((DMatrix::identity(l, l) - dc_pu * gain) * dc_pw))
}

/// Nominal DC performance `rho` of the loop without expander.
pub fn nominal_perf_dc(plant: &StateSpace, gain: &DMatrix<f64>) -> Result<f64> {
    let dc_pu = plant.dc_gain(Channel::Control)?;
    let dc_pw = plant.dc_gain(Channel::Disturbance)?;
    check_gain(&dc_pu, gain)?;
    Ok(nominal_dc(&dc_pu, &dc_pw, gain))
}

/// `|I - P_u(0) K_e|`: how far the gain is from inverting the plant at DC.
pub fn ke_dc_residual(plant: &StateSpace, gain: &DMatrix<f64>) -> Result<f64> {
    let dc_pu = plant.dc_gain(Channel::Control)?;
    check_gain(&dc_pu, gain)?;
    let l = dc_pu.nrows();
    Ok(induced_norm(&(DMatrix::identity(l, l) - dc_pu * gain)))
}

fn check_gain(dc_pu: &DMatrix<f64>, gain: &DMatrix<f64>) -> Result<()> {
    if gain.nrows() != dc_pu.ncols() || gain.ncols() != dc_pu.nrows() {
        return Err(Error::dim(format!(
            "gain is {}x{}, plant needs {}x{}",
            gain.nrows(),
            gain.ncols(),
            dc_pu.ncols(),
            dc_pu.nrows()
        )));
    }
    Ok(())
}

/// Worst DC deviation `max_{delta = +-gamma} |(I - P_u(0)(I + delta e_l e_r') K_e) P_w(0)|`.
/// The expression is affine in `delta`, so the endpoints attain the maximum.
pub fn worst_case_dc(plant: &StateSpace, gain: &DMatrix<f64>, expander: &ExpanderE2) -> Result<f64> {
    let dc_pu = plant.dc_gain(Channel::Control)?;
    let dc_pw = plant.dc_gain(Channel::Disturbance)?;
    check_gain(&dc_pu, gain)?;
    let (l, m) = (dc_pu.nrows(), dc_pu.ncols());
    if expander.dim() != m {
        return Err(Error::dim("expander does not match the plant input"));
    }
    let outer = &expander.e_l * expander.e_r.transpose();
    let worst = [-expander.gamma, expander.gamma]
        .into_iter()
        .map(|delta| {
            let perturbed = DMatrix::identity(m, m) + &outer * delta;
            induced_norm(&((DMatrix::identity(l, l) - &dc_pu * perturbed * gain) * &dc_pw))
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

fn frequency_response(plant: &StateSpace, omega: f64, channel: &DMatrix<f64>) -> Option<DMatrix<Complex<f64>>> {
    let n = plant.states();
    let jw = DMatrix::<Complex<f64>>::identity(n, n) * Complex::new(0.0, omega);
    let a = plant.a.map(|x| Complex::new(x, 0.0));
    let inv = (jw - a).try_inverse()?;
    Some(plant.c.map(|x| Complex::new(x, 0.0)) * inv * channel.map(|x| Complex::new(x, 0.0)))
}

/// Largest singular value of the perturbed loop `(I - P_u(jw)(I + delta e_l e_r') K_e) P_w(jw)`
/// over `delta = +-gamma` on a log-spaced frequency grid. Returns `(omega, gain)` pairs.
pub fn worst_gain_sweep(
    plant: &StateSpace,
    gain: &DMatrix<f64>,
    expander: &ExpanderE2,
    points: usize,
    omega_min: f64,
    omega_max: f64,
) -> Result<Vec<(f64, f64)>> {
    if points < 2 || !(omega_min > 0.0 && omega_max > omega_min) {
        return Err(Error::Config("sweep needs >= 2 points over a positive increasing range".into()));
    }
    let (l, m) = (plant.outputs(), plant.inputs());
    let outer = &expander.e_l * expander.e_r.transpose();
    let (lo, hi) = (omega_min.log10(), omega_max.log10());
    (0..points)
        .map(|i| {
            let omega = 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64);
            let pu = frequency_response(plant, omega, &plant.b_u)
                .ok_or_else(|| Error::Singularity(format!("jwI - A at w = {omega}")))?;
            let pw = frequency_response(plant, omega, &plant.b_w)
                .ok_or_else(|| Error::Singularity(format!("jwI - A at w = {omega}")))?;
            let worst = [-expander.gamma, expander.gamma]
                .into_iter()
                .map(|delta| {
                    let k = ((DMatrix::identity(m, m) + &outer * delta) * gain).map(|x| Complex::new(x, 0.0));
                    let loop_tf = (DMatrix::<Complex<f64>>::identity(l, l) - &pu * k) * &pw;
                    if loop_tf.is_empty() {
                        0.0
                    } else {
                        loop_tf.singular_values().max()
                    }
                })
                .fold(0.0, f64::max);
            Ok((omega, worst))
        })
        .collect()
}

/// Outcome of [`stability_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub max_output: f64,
    pub final_output: f64,
    /// Largest `|y|` over the last tenth of the run.
    pub steady_max_output: f64,
    /// Plant state norm at the end within 1% of its value at mid-run.
    pub settled: bool,
}

/// State norm beyond which a run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Runs `steps` closed-loop samples of `cfg` under `policy` and records the output envelope.
pub fn stability_probe(cfg: &ScenarioConfig, policy: &PolicySpec, steps: usize) -> Result<ProbeResult> {
    if steps == 0 {
        return Err(Error::Config("probe needs at least one step".into()));
    }
    let cfg = ScenarioConfig { horizon: steps, policy: policy.clone(), ..cfg.clone() };
    let mut engine = Engine::new(&cfg)?;
    let mut policy = engine.build_policy(&cfg)?;
    let tail_start = steps - (steps / 10).max(1);
    let mut max_output: f64 = 0.0;
    let mut steady_max: f64 = 0.0;
    let mut final_output = 0.0;
    let mut mid_norm = 0.0;
    for k in 0..steps {
        let obs = engine.observe()?;
        let u = policy.decide(&obs.set)?;
        let rec = engine.apply(u)?;
        let y = DVector::from_vec(rec.y).norm();
        max_output = max_output.max(y);
        if k >= tail_start {
            steady_max = steady_max.max(y);
        }
        final_output = y;
        let norm = engine.plant_state().x.norm();
        if norm.is_nan() || norm > DIVERGENCE_NORM {
            return Err(Error::Instability { step: k, norm });
        }
        if k + 1 == steps / 2 {
            mid_norm = norm;
        }
    }
    let end_norm = engine.plant_state().x.norm();
    let settled = (end_norm - mid_norm).abs() <= 0.01 * mid_norm.max(f64::MIN_POSITIVE);
    Ok(ProbeResult { max_output, final_output, steady_max_output: steady_max, settled })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub rho_nominal: f64,
    pub worst_dc_deviation: f64,
    pub budget_satisfied: bool,
    pub ke_dc_residual: f64,
    pub probe_max_output: f64,
}

impl PerfReport {
    /// Nominal and worst-case DC checks plus an extreme-policy probe of `cfg`.
    pub fn evaluate(cfg: &ScenarioConfig) -> Result<Self> {
        let plant = cfg.plant.build()?;
        let gain = cfg.gain_matrix()?;
        let rho_nominal = nominal_perf_dc(&plant, &gain)?;
        let ke_dc_residual = ke_dc_residual(&plant, &gain)?;
        let worst_dc_deviation = match cfg.resolved_expander(&plant)? {
            Some(crate::expander::Expander::E2(e)) => worst_case_dc(&plant, &gain, &e)?,
            Some(crate::expander::Expander::E1(e)) => worst_case_dc_box(&plant, &gain, &e.gammas)?,
            None => rho_nominal,
        };
        let budget_satisfied = worst_dc_deviation <= rho_nominal + cfg.delta_rho + 1e-9;
        let probe = stability_probe(cfg, &PolicySpec::Extreme, cfg.horizon)?;
        Ok(Self {
            rho_nominal,
            worst_dc_deviation,
            budget_satisfied,
            ke_dc_residual,
            probe_max_output: probe.max_output,
        })
    }
}

/// Box expanders: `u = (I + diag(delta)) v`, `|delta_i| <= gamma_i`; a vertex attains the maximum.
fn worst_case_dc_box(plant: &StateSpace, gain: &DMatrix<f64>, gammas: &DVector<f64>) -> Result<f64> {
    let dc_pu = plant.dc_gain(Channel::Control)?;
    let dc_pw = plant.dc_gain(Channel::Disturbance)?;
    check_gain(&dc_pu, gain)?;
    let (l, m) = (dc_pu.nrows(), dc_pu.ncols());
    if gammas.len() != m || m > 20 {
        return Err(Error::dim("box expander size"));
    }
    let mut worst: f64 = 0.0;
    for mask in 0u32..(1u32 << m) {
        let diag = DVector::from_fn(m, |i, _| 1.0 + if mask & (1 << i) == 0 { gammas[i] } else { -gammas[i] });
        let perturbed = DMatrix::from_diagonal(&diag);
        worst = worst.max(induced_norm(&((DMatrix::identity(l, l) - &dc_pu * perturbed * gain) * &dc_pw)));
    }
    Ok(worst)
}

impl fmt::Display for PerfReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rho_nominal = {}", self.rho_nominal)?;
        writeln!(f, "worst_dc_deviation = {}", self.worst_dc_deviation)?;
        writeln!(f, "budget_satisfied = {}", self.budget_satisfied)?;
        writeln!(f, "ke_dc_residual = {}", self.ke_dc_residual)?;
        write!(f, "probe_max_output = {}", self.probe_max_output)
    }
}

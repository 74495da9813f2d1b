//! Set-valued signal generators.
//!
//! An expander maps the nominal control `v` to an offset set, and the
//! controller publishes `U = v + E(v)`. Two families are supported:
//!
//! - [`ExpanderE1`], an axis-aligned box with per-axis half-lengths `gamma_i |v_i|`;
//! - [`ExpanderE2`], a segment `{v + delta * e_l (e_r . v) : |delta| <= gamma}`.
//!
//! Both vanish at `v = 0`, so the expansion is proportional to the nominal action.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpanderE1 {
    #[serde(with = "crate::serde_util::vector")]
    pub gammas: DVector<f64>,
}

impl ExpanderE1 {
    pub fn new(gammas: DVector<f64>) -> Result<Self> {
        if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config("box expansion ratios must be finite and non-negative".into()));
        }
        Ok(Self { gammas })
    }

    pub fn expand(&self, v: &DVector<f64>) -> Result<AdmissibleSet> {
        if v.len() != self.gammas.len() {
            return Err(Error::dim(format!("v has {} entries, expander has {}", v.len(), self.gammas.len())));
        }
        Ok(AdmissibleSet::Box {
            center: v.clone(),
            half_lengths: self.gammas.component_mul(&v.abs()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpanderE2 {
    /// Expansion direction.
    #[serde(with = "crate::serde_util::vector")]
    pub e_l: DVector<f64>,
    /// Sensing direction; `e_r . v` scales the segment.
    #[serde(with = "crate::serde_util::vector")]
    pub e_r: DVector<f64>,
    pub gamma: f64,
}

impl ExpanderE2 {
    pub fn new(e_l: DVector<f64>, e_r: DVector<f64>, gamma: f64) -> Result<Self> {
        if e_l.len() != e_r.len() {
            return Err(Error::dim("e_l and e_r lengths differ"));
        }
        if e_l.norm() == 0.0 || e_r.norm() == 0.0 {
            return Err(Error::Config("e_l and e_r must be non-zero".into()));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be finite and non-negative, got {gamma}")));
        }
        Ok(Self { e_l, e_r, gamma })
    }

    pub fn dim(&self) -> usize {
        self.e_l.len()
    }

    pub fn expand(&self, v: &DVector<f64>) -> Result<AdmissibleSet> {
        if v.len() != self.dim() {
            return Err(Error::dim(format!("v has {} entries, expander has {}", v.len(), self.dim())));
        }
        Ok(AdmissibleSet::Segment {
            center: v.clone(),
            direction: &self.e_l * self.e_r.dot(v),
            gamma: self.gamma,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expander {
    E1(ExpanderE1),
    E2(ExpanderE2),
}

impl Expander {
    pub fn expand(&self, v: &DVector<f64>) -> Result<AdmissibleSet> {
        match self {
            Expander::E1(e) => e.expand(v),
            Expander::E2(e) => e.expand(v),
        }
    }
}

/// Selection parameter for [`AdmissibleSet::select`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta {
    /// Segment parameter, `|delta| <= gamma`.
    Scalar(f64),
    /// Box parameters, `|delta_i| <= 1` per axis.
    PerAxis(#[serde(with = "crate::serde_util::vector")] DVector<f64>),
}

/// The realized candidate set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdmissibleSet {
    /// `{center + delta * direction : delta in [-gamma, gamma]}`.
    Segment {
        #[serde(with = "crate::serde_util::vector")]
        center: DVector<f64>,
        #[serde(with = "crate::serde_util::vector")]
        direction: DVector<f64>,
        gamma: f64,
    },
    /// `{u : |u_i - center_i| <= half_lengths_i}`.
    Box {
        #[serde(with = "crate::serde_util::vector")]
        center: DVector<f64>,
        #[serde(with = "crate::serde_util::vector")]
        half_lengths: DVector<f64>,
    },
}

impl AdmissibleSet {
    /// The single point `{v}` (no expander).
    pub fn point(v: DVector<f64>) -> Self {
        let m = v.len();
        AdmissibleSet::Box { center: v, half_lengths: DVector::zeros(m) }
    }

    pub fn center(&self) -> &DVector<f64> {
        match self {
            AdmissibleSet::Segment { center, .. } | AdmissibleSet::Box { center, .. } => center,
        }
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    /// Euclidean half-width: the largest `|u - center|` over the set.
    pub fn half_width(&self) -> f64 {
        match self {
            AdmissibleSet::Segment { direction, gamma, .. } => gamma * direction.norm(),
            AdmissibleSet::Box { half_lengths, .. } => half_lengths.norm(),
        }
    }

    pub fn is_point(&self) -> bool {
        self.half_width() == 0.0
    }

    /// Closest point of the set to `u`.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            AdmissibleSet::Segment { center, direction, gamma } => {
                let dd = direction.norm_squared();
                if dd == 0.0 {
                    return center.clone();
                }
                let delta = (direction.dot(&(u - center)) / dd).clamp(-gamma, *gamma);
                center + direction * delta
            }
            AdmissibleSet::Box { center, half_lengths } => DVector::from_iterator(
                center.len(),
                (0..center.len()).map(|i| u[i].clamp(center[i] - half_lengths[i], center[i] + half_lengths[i])),
            ),
        }
    }

    pub fn distance(&self, u: &DVector<f64>) -> f64 {
        (u - self.project(u)).norm()
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.len() == self.dim() && self.distance(u) <= tol
    }

    /// The point of the set addressed by `delta`.
    pub fn select(&self, delta: &Delta) -> Result<DVector<f64>> {
        match (self, delta) {
            (AdmissibleSet::Segment { center, direction, gamma }, Delta::Scalar(d)) => {
                if d.is_nan() || d.abs() > *gamma {
                    return Err(Error::Selection(format!("|delta| = {} exceeds gamma = {gamma}", d.abs())));
                }
                Ok(center + direction * *d)
            }
            (AdmissibleSet::Box { center, half_lengths }, Delta::PerAxis(d)) => {
                if d.len() != center.len() {
                    return Err(Error::dim(format!("delta has {} entries, set has {}", d.len(), center.len())));
                }
                if let Some(i) = d.iter().position(|x| x.is_nan() || x.abs() > 1.0) {
                    return Err(Error::Selection(format!("|delta[{i}]| = {} exceeds 1", d[i].abs())));
                }
                Ok(center + half_lengths.component_mul(d))
            }
            // a 1-axis box accepts a scalar as well
            (AdmissibleSet::Box { .. }, Delta::Scalar(d)) if self.dim() == 1 => {
                self.select(&Delta::PerAxis(DVector::from_element(1, *d)))
            }
            (AdmissibleSet::Segment { .. }, Delta::PerAxis(_)) => {
                Err(Error::Selection("segment sets take a scalar delta".into()))
            }
            (AdmissibleSet::Box { .. }, Delta::Scalar(_)) => {
                Err(Error::Selection("box sets take one delta per axis".into()))
            }
        }
    }

    /// Recovers the selection parameter of a member `u` (inverse of [`select`](Self::select)).
    /// Degenerate axes map to zero.
    pub fn parameter_of(&self, u: &DVector<f64>) -> Delta {
        match self {
            AdmissibleSet::Segment { center, direction, .. } => {
                let dd = direction.norm_squared();
                Delta::Scalar(if dd == 0.0 { 0.0 } else { direction.dot(&(u - center)) / dd })
            }
            AdmissibleSet::Box { center, half_lengths } => Delta::PerAxis(DVector::from_iterator(
                center.len(),
                (0..center.len()).map(|i| if half_lengths[i] == 0.0 { 0.0 } else { (u[i] - center[i]) / half_lengths[i] }),
            )),
        }
    }

    /// Support function `max_{u in U} s . u`.
    pub fn support(&self, s: &DVector<f64>) -> f64 {
        match self {
            AdmissibleSet::Segment { center, direction, gamma } => s.dot(center) + gamma * s.dot(direction).abs(),
            AdmissibleSet::Box { center, half_lengths } => s.dot(center) + half_lengths.dot(&s.abs()),
        }
    }
}

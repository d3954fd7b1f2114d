//! Squash functions mapping a free parameter to a position inside a
//! feasibility interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{clip_unit, logit, Real};
use crate::transport::FeasibleInterval;

/// Distance from the ends of `(0, 1)` below which a chart inverse refuses to
/// take a logit.
pub const BOUNDARY_DELTA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashKind {
    /// `σ(t)`
    Sigmoid,
    /// `σ(β t / (Δ + ε))`
    Scaled,
    /// `ρ + (1 − 2ρ) σ(β t / (Δ + ε))`
    MarginedScaled,
    /// `clip(t, 0, 1)`
    LinearClipped,
}

/// Which squash a chart uses, with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SquashSpec {
    pub kind: SquashKind,
    pub beta: f64,
    pub epsilon: f64,
    pub rho: f64,
}

impl Default for SquashSpec {
    fn default() -> Self {
        Self {
            kind: SquashKind::Sigmoid,
            beta: 4.0,
            epsilon: 1e-6,
            rho: 1e-4,
        }
    }
}

impl SquashSpec {
    pub fn sigmoid() -> Self {
        Self::default()
    }

    pub fn of_kind(kind: SquashKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return Err(Error::InvalidSpec(format!(
                "rho must lie in (0, 0.5), got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Relative position `(x − L) / Δ ∈ [0, 1]` produced by parameter `t` in an
    /// interval of width `width`.
    pub fn fraction<S: Real>(&self, t: S, width: S) -> S {
        match self.kind {
            SquashKind::Sigmoid => t.sigmoid(),
            SquashKind::Scaled => self.scaled_argument(t, width).sigmoid(),
            SquashKind::MarginedScaled => {
                let s = self.scaled_argument(t, width).sigmoid();
                s.scale(1.0 - 2.0 * self.rho) + S::constant(self.rho)
            }
            SquashKind::LinearClipped => clip_unit(t),
        }
    }

    fn scaled_argument<S: Real>(&self, t: S, width: S) -> S {
        t.scale(self.beta) / (width + S::constant(self.epsilon))
    }

    /// Parameter producing relative position `fraction` in an interval of width
    /// `width`, or `None` if the position is outside the open range the squash
    /// can reach (up to [`BOUNDARY_DELTA`]).
    pub fn inverse_fraction(&self, fraction: f64, width: f64) -> Option<f64> {
        let interior = |s: f64| s > BOUNDARY_DELTA && s < 1.0 - BOUNDARY_DELTA;
        match self.kind {
            SquashKind::Sigmoid => interior(fraction).then(|| logit(fraction)),
            SquashKind::Scaled => {
                interior(fraction).then(|| logit(fraction) * (width + self.epsilon) / self.beta)
            }
            SquashKind::MarginedScaled => {
                let s = (fraction - self.rho) / (1.0 - 2.0 * self.rho);
                interior(s).then(|| logit(s) * (width + self.epsilon) / self.beta)
            }
            SquashKind::LinearClipped => (-BOUNDARY_DELTA..=1.0 + BOUNDARY_DELTA)
                .contains(&fraction)
                .then(|| fraction.clamp(0.0, 1.0)),
        }
    }
}

/// Position of parameter `t` inside `interval` under `spec`.
pub fn squash(t: f64, interval: &FeasibleInterval, spec: &SquashSpec) -> f64 {
    interval.lower + interval.width * spec.fraction(t, interval.width)
}

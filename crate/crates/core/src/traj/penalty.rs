//! Piecewise-exponential safety penalty on signed C-space distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyParams {
    /// Softness inside obstacles (rad).
    pub d0: f64,
    /// Decay rate outside obstacles (1/rad).
    pub alpha: f64,
    /// Offset the penetration branch by `exp(-alpha d0)` so the penalty is
    /// continuous at zero.
    pub continuity_shim: bool,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            d0: 0.1,
            alpha: 5.0,
            continuity_shim: true,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::invalid("penalty needs d0 > 0 and alpha > 0"));
        }
        Ok(())
    }

    /// Penalty and its derivative with respect to `phi`.
    pub fn eval(&self, phi: f64) -> (f64, f64) {
        if phi < 0.0 {
            let e = (-phi / self.d0).exp();
            let shim = if self.continuity_shim {
                (-self.alpha * self.d0).exp()
            } else {
                0.0
            };
            (e - 1.0 + shim, -e / self.d0)
        } else {
            let e = (-self.alpha * (phi + self.d0)).exp();
            (e, -self.alpha * e)
        }
    }
}

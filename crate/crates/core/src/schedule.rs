//! Variance-preserving noise schedule with a linear noise rate.
//!
//! `beta(t) = beta_min + (t / T) (beta_max - beta_min)` and the forward
//! dynamics `dx = -1/2 beta(t) x dt + sqrt(beta(t)) dw` have the Gaussian
//! transition kernel `x_t | x_0 ~ N(alpha_t x_0, sigma_t^2 I)` with
//! `alpha_t = exp(-1/2 int_0^t beta)` and `sigma_t = sqrt(1 - alpha_t^2)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{normal, LabRng};

/// Lower cutoff of the training and sampling time range; keeps `1/sigma_t` bounded.
pub const DEFAULT_T_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", deny_unknown_fields)]
pub struct VpSchedule {
    beta_min: f64,
    beta_max: f64,
    t_max: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    beta_min: f64,
    beta_max: f64,
    t_max: f64,
}

impl TryFrom<RawSchedule> for VpSchedule {
    type Error = LabError;
    fn try_from(r: RawSchedule) -> Result<Self> {
        VpSchedule::new(r.beta_min, r.beta_max, r.t_max)
    }
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
        }
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_max: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite() && t_max.is_finite()) {
            return Err(LabError::InvalidParameter("schedule parameters must be finite".into()));
        }
        if !(beta_min > 0.0 && beta_min < beta_max) {
            return Err(LabError::InvalidParameter(format!(
                "need 0 < beta_min < beta_max, got beta_min={beta_min}, beta_max={beta_max}"
            )));
        }
        if t_max <= 0.0 {
            return Err(LabError::InvalidParameter(format!("t_max must be > 0, got {t_max}")));
        }
        Ok(Self {
            beta_min,
            beta_max,
            t_max,
        })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    fn check(&self, t: f64) -> Result<()> {
        if t.is_nan() || t < 0.0 || t > self.t_max {
            return Err(LabError::TimeOutOfRange { t, t_max: self.t_max });
        }
        Ok(())
    }

    pub fn beta_at(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta_unchecked(t))
    }

    #[inline]
    fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + (t / self.t_max) * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds` in closed form.
    #[inline]
    fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.t_max
    }

    pub fn alpha_at(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok((-0.5 * self.integrated_beta(t)).exp())
    }

    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        // 1 - alpha^2 = -expm1(-B(t)); avoids cancellation near t = 0.
        Ok((-(-self.integrated_beta(t)).exp_m1()).sqrt())
    }

    /// `(alpha_t, sigma_t)` in one call.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        Ok((self.alpha_at(t)?, self.sigma_at(t)?))
    }

    /// Draws `x_t = alpha_t x0 + sigma_t eps` with `eps ~ N(0, I)`.
    pub fn noise_sample(&self, x0: &[f64], t: f64, rng: &mut LabRng) -> Result<Vec<f64>> {
        let (a, s) = self.alpha_sigma(t)?;
        Ok(x0.iter().map(|&x| a * x + s * normal(rng)).collect())
    }

    /// Forward drift `f(x, t) = -1/2 beta(t) x` and diffusion `g(t) = sqrt(beta(t))`.
    pub fn drift_diffusion(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let b = self.beta_at(t)?;
        Ok((x.iter().map(|&v| -0.5 * b * v).collect(), b.sqrt()))
    }
}

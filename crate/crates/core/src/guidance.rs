//! Negative guidance by score extrapolation.
//!
//! Inside the guidance interval the composed score is
//! `base - omega * (aux - base) = (1 + omega) base - omega aux`; outside it is
//! the base score. It is evaluated in the first form so that `omega = 0` or
//! `aux == base` reproduce the base score bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::score::{ScoreFunction, ScoreModel};

/// Closed time interval `[t_low, t_high]` on which guidance is active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceInterval {
    pub t_low: f64,
    pub t_high: f64,
}

impl GuidanceInterval {
    pub fn full(t_max: f64) -> Self {
        Self {
            t_low: 0.0,
            t_high: t_max,
        }
    }

    pub fn validate(&self, t_max: f64) -> Result<()> {
        if !(0.0 <= self.t_low && self.t_low <= self.t_high && self.t_high <= t_max) {
            return Err(LabError::InvalidParameter(format!(
                "guidance interval needs 0 <= t_low <= t_high <= {t_max}, got [{}, {}]",
                self.t_low, self.t_high
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        self.t_low <= t && t <= self.t_high
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimsGuidance<B = ScoreModel, A = ScoreModel> {
    base: B,
    aux: A,
    omega: f64,
    interval: GuidanceInterval,
}

impl<B: ScoreFunction, A: ScoreFunction> SimsGuidance<B, A> {
    pub fn new(base: B, aux: A, omega: f64, interval: GuidanceInterval, t_max: f64) -> Result<Self> {
        if base.dim() != aux.dim() {
            return Err(LabError::DimensionMismatch {
                expected: base.dim(),
                got: aux.dim(),
            });
        }
        if !omega.is_finite() {
            return Err(LabError::InvalidParameter("omega must be finite".into()));
        }
        interval.validate(t_max)?;
        Ok(Self {
            base,
            aux,
            omega,
            interval,
        })
    }

    pub fn base(&self) -> &B {
        &self.base
    }

    pub fn aux(&self) -> &A {
        &self.aux
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn interval(&self) -> GuidanceInterval {
        self.interval
    }

    /// Same backends, different guidance strength.
    pub fn with_omega(&self, omega: f64) -> Self
    where
        B: Clone,
        A: Clone,
    {
        Self {
            base: self.base.clone(),
            aux: self.aux.clone(),
            omega,
            interval: self.interval,
        }
    }

    pub fn guided_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.score(x, t)
    }

    /// `aux(x, t) - base(x, t)`, the model-induced shift surrogate.
    pub fn guidance_delta(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let b = self.base.score(x, t)?;
        let a = self.aux.score(x, t)?;
        Ok(a.iter().zip(&b).map(|(a, b)| a - b).collect())
    }
}

impl<B: ScoreFunction, A: ScoreFunction> ScoreFunction for SimsGuidance<B, A> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.base.score_batch(xs, t, out)?;
        if !self.interval.contains(t) || self.omega == 0.0 {
            return Ok(());
        }
        let mut aux = vec![0.0; out.len()];
        self.aux.score_batch(xs, t, &mut aux)?;
        for (o, a) in out.iter_mut().zip(&aux) {
            let delta = a - *o;
            *o -= self.omega * delta;
        }
        Ok(())
    }
}

//! Reverse-time generation from a score function.
//!
//! All samplers use a uniform time grid from `t_start` down to `t_end` and
//! start from `x ~ N(0, I)`. Particles are integrated as one batch, so every
//! score call evaluates all particles at the same time point.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::points::Points;
use crate::rng::{fill_normal, LabRng};
use crate::schedule::{VpSchedule, DEFAULT_T_EPS};
use crate::score::ScoreFunction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Euler-Maruyama on the reverse-time SDE.
    ReverseSdeEuler,
    /// Heun predictor-corrector on the probability-flow ODE.
    PfOdeHeun,
    /// Discrete ancestral sampling with posterior-mean updates.
    DdpmAncestral,
}

impl SamplerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SamplerKind::ReverseSdeEuler => "reverse-sde-euler",
            SamplerKind::PfOdeHeun => "pf-ode-heun",
            SamplerKind::DdpmAncestral => "ddpm-ancestral",
        }
    }

    pub fn default_steps(&self) -> usize {
        match self {
            SamplerKind::PfOdeHeun => 64,
            _ => 256,
        }
    }

    /// Score evaluations per generated sample for `steps` steps.
    pub fn nfe(&self, steps: usize) -> usize {
        match self {
            SamplerKind::PfOdeHeun => 2 * steps - 1,
            _ => steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Defaults to the schedule horizon `T`.
    #[serde(default)]
    pub t_start: Option<f64>,
    /// Defaults to [`DEFAULT_T_EPS`].
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            t_start: None,
            t_end: None,
            seed: 0,
        }
    }

    pub fn default_for(kind: SamplerKind) -> Self {
        Self::new(kind, kind.default_steps())
    }

    /// Uniform grid `t_0 = t_start > ... > t_steps = t_end`.
    pub fn grid(&self, sched: &VpSchedule) -> Result<Vec<f64>> {
        let t_start = self.t_start.unwrap_or(sched.t_max());
        let t_end = self.t_end.unwrap_or(DEFAULT_T_EPS);
        if self.steps == 0 {
            return Err(LabError::InvalidParameter("sampler needs steps >= 1".into()));
        }
        if !(t_end >= 0.0 && t_end < t_start && t_start <= sched.t_max()) {
            return Err(LabError::InvalidParameter(format!(
                "sampler needs 0 <= t_end < t_start <= T, got t_end={t_end}, t_start={t_start}"
            )));
        }
        let n = self.steps as f64;
        Ok((0..=self.steps)
            .map(|i| {
                if i == self.steps {
                    t_end
                } else {
                    t_start + (t_end - t_start) * (i as f64 / n)
                }
            })
            .collect())
    }
}

fn expect_kind(cfg: &SamplerConfig, kind: SamplerKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(LabError::InvalidParameter(format!(
            "sampler config is {}, expected {}",
            cfg.kind.tag(),
            kind.tag()
        )));
    }
    Ok(())
}

fn eval_score(score: &dyn ScoreFunction, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    score.score_batch(xs, t, out)
}

fn check_finite(xs: &[f64], sampler: SamplerKind, step: usize, t: f64) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite(format!(
            "{} state at step {step} (t={t})",
            sampler.tag()
        )));
    }
    Ok(())
}

/// Draws `n` latents `x_T ~ N(0, I)` from `rng`.
pub fn draw_latents(dim: usize, n: usize, rng: &mut LabRng) -> Points {
    let mut data = vec![0.0; dim * n];
    fill_normal(rng, &mut data);
    Points::from_flat(dim, data).expect("multiple of dim")
}

/// Runs the configured sampler: latents are drawn from `rng` first, then any
/// per-step noise.
pub fn sample(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut LabRng,
) -> Result<Points> {
    let latents = draw_latents(score.dim(), n, rng);
    sample_from_latents(score, sched, cfg, latents, rng)
}

/// Integrates given initial latents; `rng` supplies per-step noise only.
pub fn sample_from_latents(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    cfg: &SamplerConfig,
    latents: Points,
    rng: &mut LabRng,
) -> Result<Points> {
    if latents.dim() != score.dim() {
        return Err(LabError::DimensionMismatch {
            expected: score.dim(),
            got: latents.dim(),
        });
    }
    let grid = cfg.grid(sched)?;
    let dim = latents.dim();
    let mut x = latents.into_flat();
    match cfg.kind {
        SamplerKind::ReverseSdeEuler => euler_maruyama(score, sched, &grid, &mut x, rng)?,
        SamplerKind::PfOdeHeun => heun(score, sched, &grid, &mut x)?,
        SamplerKind::DdpmAncestral => ancestral(score, sched, &grid, &mut x, rng)?,
    }
    Points::from_flat(dim, x)
}

pub fn sample_reverse_sde_euler(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut LabRng,
) -> Result<Points> {
    expect_kind(cfg, SamplerKind::ReverseSdeEuler)?;
    sample(score, sched, cfg, n, rng)
}

pub fn sample_pf_ode_heun(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut LabRng,
) -> Result<Points> {
    expect_kind(cfg, SamplerKind::PfOdeHeun)?;
    sample(score, sched, cfg, n, rng)
}

pub fn sample_ddpm_ancestral(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    cfg: &SamplerConfig,
    n: usize,
    rng: &mut LabRng,
) -> Result<Points> {
    expect_kind(cfg, SamplerKind::DdpmAncestral)?;
    sample(score, sched, cfg, n, rng)
}

/// `x <- x + [1/2 beta x + beta s] h + sqrt(beta h) z`, stepping backwards by `h`.
fn euler_maruyama(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    grid: &[f64],
    x: &mut [f64],
    rng: &mut LabRng,
) -> Result<()> {
    let mut s = vec![0.0; x.len()];
    let mut z = vec![0.0; x.len()];
    for (i, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let h = t - t_next;
        let beta = sched.beta_at(t)?;
        eval_score(score, x, t, &mut s)?;
        fill_normal(rng, &mut z);
        let noise = (beta * h).sqrt();
        for k in 0..x.len() {
            x[k] += (0.5 * beta * x[k] + beta * s[k]) * h + noise * z[k];
        }
        check_finite(x, SamplerKind::ReverseSdeEuler, i, t)?;
    }
    Ok(())
}

/// Probability-flow velocity `f - 1/2 g^2 s = -1/2 beta (x + s)`.
fn pf_velocity(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    x: &[f64],
    t: f64,
    out: &mut [f64],
) -> Result<()> {
    eval_score(score, x, t, out)?;
    let beta = sched.beta_at(t)?;
    for (o, &xv) in out.iter_mut().zip(x) {
        *o = -0.5 * beta * (xv + *o);
    }
    Ok(())
}

/// Heun's method; the final step is a plain Euler step (2 * steps - 1 evaluations).
fn heun(score: &dyn ScoreFunction, sched: &VpSchedule, grid: &[f64], x: &mut [f64]) -> Result<()> {
    let mut d0 = vec![0.0; x.len()];
    let mut d1 = vec![0.0; x.len()];
    let mut trial = vec![0.0; x.len()];
    let last = grid.len() - 2;
    for (i, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let dt = t_next - t;
        pf_velocity(score, sched, x, t, &mut d0)?;
        if i == last {
            for k in 0..x.len() {
                x[k] += dt * d0[k];
            }
        } else {
            for k in 0..x.len() {
                trial[k] = x[k] + dt * d0[k];
            }
            pf_velocity(score, sched, &trial, t_next, &mut d1)?;
            for k in 0..x.len() {
                x[k] += 0.5 * dt * (d0[k] + d1[k]);
            }
        }
        check_finite(x, SamplerKind::PfOdeHeun, i, t)?;
    }
    Ok(())
}

/// Ancestral steps `t -> s`: predict `x0 = (x + sigma_t^2 score) / a_t`, then
/// draw from the Gaussian posterior `q(x_s | x_t, x0)`. The final step returns
/// the posterior mean without noise.
fn ancestral(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    grid: &[f64],
    x: &mut [f64],
    rng: &mut LabRng,
) -> Result<()> {
    let mut sc = vec![0.0; x.len()];
    let mut z = vec![0.0; x.len()];
    let last = grid.len() - 2;
    for (i, w) in grid.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        let (a_t, sig_t) = sched.alpha_sigma(t)?;
        let (a_s, sig_s) = sched.alpha_sigma(s)?;
        let a_ts = a_t / a_s;
        let var_ts = (sig_t * sig_t - a_ts * a_ts * sig_s * sig_s).max(0.0);
        let var_t = sig_t * sig_t;
        let c_x0 = a_s * var_ts / var_t;
        let c_xt = a_ts * sig_s * sig_s / var_t;
        let post_std = (var_ts * sig_s * sig_s / var_t).sqrt();
        eval_score(score, x, t, &mut sc)?;
        let noisy = i != last;
        if noisy {
            fill_normal(rng, &mut z);
        }
        for k in 0..x.len() {
            let x0 = (x[k] + var_t * sc[k]) / a_t;
            let mean = c_x0 * x0 + c_xt * x[k];
            x[k] = if noisy { mean + post_std * z[k] } else { mean };
        }
        check_finite(x, SamplerKind::DdpmAncestral, i, t)?;
    }
    Ok(())
}

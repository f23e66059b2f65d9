//! Denoising score matching: loss, gradients, and the budgeted training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::points::Points;
use crate::rng::{fill_normal, LabRng};
use crate::schedule::{VpSchedule, DEFAULT_T_EPS};
use crate::score::mlp::{Gradients, MlpScoreNet, TimeInput};
use crate::score::ScoreFunction;

/// Temporal weighting `lambda(t)` of the score-matching objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `lambda(t) = sigma_t^2`; the loss becomes `|sigma_t s + eps|^2`.
    #[default]
    SigmaSquared,
    Uniform,
}

/// How many training examples the optimizer sees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    Samples(u64),
    /// Whole passes over the dataset; `epochs * |dataset|` samples, rounded.
    Epochs(f64),
}

impl Budget {
    pub fn resolve(&self, dataset_len: usize) -> u64 {
        match *self {
            Budget::Samples(s) => s,
            Budget::Epochs(e) => (e * dataset_len as f64).round().max(0.0) as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub budget: Budget,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weighting: Weighting,
    /// Leading layers held fixed.
    pub freeze_prefix: usize,
    pub optimizer: Optimizer,
    pub t_eps: f64,
    /// Emit a copy of the network every this many samples seen.
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Epochs(100.0),
            batch_size: 64,
            learning_rate: 1e-2,
            weighting: Weighting::SigmaSquared,
            freeze_prefix: 0,
            optimizer: Optimizer::Sgd,
            t_eps: DEFAULT_T_EPS,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &MlpScoreNet, sched: &VpSchedule) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LabError::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::InvalidParameter("learning_rate must be > 0".into()));
        }
        if self.freeze_prefix >= net.layers().len() {
            return Err(LabError::InvalidParameter(format!(
                "freeze_prefix {} must be < number of layers {}",
                self.freeze_prefix,
                net.layers().len()
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < sched.t_max()) {
            return Err(LabError::InvalidParameter("t_eps must lie in (0, T)".into()));
        }
        if let Budget::Epochs(e) = self.budget {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(LabError::InvalidParameter("epochs must be >= 0".into()));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(LabError::InvalidParameter("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Visits dataset indices in shuffled passes until a sample budget is spent.
pub struct ExampleStream {
    n: usize,
    remaining: u64,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl ExampleStream {
    pub fn new(n: usize, budget: u64, batch: usize) -> Self {
        Self {
            n,
            remaining: if n == 0 { 0 } else { budget },
            batch: batch.max(1),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    /// Next minibatch; batches never straddle two passes.
    pub fn next_batch(&mut self, rng: &mut LabRng) -> Option<Vec<usize>> {
        if self.remaining == 0 {
            return None;
        }
        if self.cursor >= self.n {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let take = self
            .batch
            .min(self.n - self.cursor)
            .min(self.remaining.min(usize::MAX as u64) as usize);
        let out = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        self.remaining -= take as u64;
        Some(out)
    }
}

/// Diffusion times and Gaussian noise for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub times: Vec<f64>,
    /// Row-major `rows x dim`.
    pub eps: Vec<f64>,
}

impl NoiseDraws {
    /// For each row in turn: `t ~ U[t_eps, T]` then `dim` standard normals.
    pub fn draw(rows: usize, dim: usize, sched: &VpSchedule, t_eps: f64, rng: &mut LabRng) -> Self {
        let mut times = Vec::with_capacity(rows);
        let mut eps = vec![0.0; rows * dim];
        for i in 0..rows {
            let u: f64 = rng.random();
            times.push(t_eps + u * (sched.t_max() - t_eps));
            fill_normal(rng, &mut eps[i * dim..(i + 1) * dim]);
        }
        Self { times, eps }
    }
}

/// Noised inputs `x_t = a_t x0 + sigma_t eps`, plus `(a_t, sigma_t)` per row.
fn noised_inputs(
    sched: &VpSchedule,
    batch: &Points,
    draws: &NoiseDraws,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = batch.dim();
    let n = batch.len();
    if draws.times.len() != n || draws.eps.len() != n * d {
        return Err(LabError::DimensionMismatch {
            expected: n,
            got: draws.times.len(),
        });
    }
    let mut xt = vec![0.0; n * d];
    let mut alphas = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        let (a, s) = sched.alpha_sigma(draws.times[i])?;
        if s <= 0.0 {
            return Err(LabError::InvalidParameter(
                "score matching needs sigma_t > 0; raise t_eps".into(),
            ));
        }
        alphas.push(a);
        sigmas.push(s);
        let x0 = batch.row(i);
        for k in 0..d {
            xt[i * d + k] = a * x0[k] + s * draws.eps[i * d + k];
        }
    }
    Ok((xt, alphas, sigmas))
}

#[inline]
fn weight(w: Weighting, sigma: f64) -> f64 {
    match w {
        Weighting::SigmaSquared => sigma * sigma,
        Weighting::Uniform => 1.0,
    }
}

/// Mean weighted loss and its exact gradient on fixed draws.
pub fn dsm_loss_and_grad_with(
    net: &MlpScoreNet,
    sched: &VpSchedule,
    batch: &Points,
    draws: &NoiseDraws,
    weighting: Weighting,
    freeze_prefix: usize,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(LabError::Empty("score-matching batch".into()));
    }
    if batch.dim() != net.dim() {
        return Err(LabError::DimensionMismatch {
            expected: net.dim(),
            got: batch.dim(),
        });
    }
    let d = batch.dim();
    let n = batch.len();
    let (xt, _, sigmas) = noised_inputs(sched, batch, draws)?;
    let cache = net.forward_cached(&xt, TimeInput::PerRow(&draws.times))?;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; n * d];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let s = sigmas[i];
        let lam = weight(weighting, s);
        for k in 0..d {
            let target = -draws.eps[i * d + k] / s;
            let r = cache.output[i * d + k] - target;
            loss += lam * r * r;
            d_out[i * d + k] = 2.0 * lam * r * inv_n;
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(LabError::NonFinite(format!("score-matching loss {loss}")));
    }
    let grads = net.backward(&cache, d_out, freeze_prefix);
    Ok((loss, grads))
}

/// Draws `(t, eps)` for every row of `batch` from `rng`, then evaluates loss and gradient.
pub fn dsm_loss_and_grad(
    net: &MlpScoreNet,
    sched: &VpSchedule,
    batch: &Points,
    rng: &mut LabRng,
    weighting: Weighting,
    t_eps: f64,
) -> Result<(f64, Gradients)> {
    let draws = NoiseDraws::draw(batch.len(), batch.dim(), sched, t_eps, rng);
    dsm_loss_and_grad_with(net, sched, batch, &draws, weighting, 0)
}

/// Score-matching loss of any score function on fixed draws (no gradient).
pub fn dsm_loss_of(
    score: &dyn ScoreFunction,
    sched: &VpSchedule,
    batch: &Points,
    draws: &NoiseDraws,
    weighting: Weighting,
) -> Result<f64> {
    let d = batch.dim();
    let (xt, _, sigmas) = noised_inputs(sched, batch, draws)?;
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let s = sigmas[i];
        let out = score.score(&xt[i * d..(i + 1) * d], draws.times[i])?;
        let lam = weight(weighting, s);
        for k in 0..d {
            let r = out[k] + draws.eps[i * d + k] / s;
            loss += lam * r * r;
        }
    }
    Ok(loss / batch.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub samples_seen: u64,
    pub steps: u64,
    /// Minibatch loss at every optimizer step.
    pub losses: Vec<f64>,
    /// `(samples_seen, network)` snapshots when `checkpoint_every` is set.
    pub checkpoints: Vec<(u64, MlpScoreNet)>,
}

impl TrainReport {
    pub fn mean_loss_tail(&self, frac: f64) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        let k = ((self.losses.len() as f64 * frac).ceil() as usize).clamp(1, self.losses.len());
        let tail = &self.losses[self.losses.len() - k..];
        tail.iter().sum::<f64>() / k as f64
    }
}

enum OptState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<(Vec<f64>, Vec<f64>)>,
        v: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

impl OptState {
    fn new(opt: Optimizer, net: &MlpScoreNet) -> Self {
        match opt {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => {
                let zeros: Vec<(Vec<f64>, Vec<f64>)> = net
                    .layers()
                    .iter()
                    .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                    .collect();
                OptState::Adam {
                    beta1,
                    beta2,
                    eps,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    fn step(&mut self, net: &mut MlpScoreNet, grads: &Gradients, lr: f64) {
        match self {
            OptState::Sgd => {
                for (layer, g) in net.layers_mut().iter_mut().zip(&grads.layers) {
                    if let Some(g) = g {
                        for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                            *w -= lr * gw;
                        }
                        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                            *b -= lr * gb;
                        }
                    }
                }
            }
            OptState::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for i in 0..p.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + *eps);
                    }
                };
                for (l, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
                    if let Some(g) = g {
                        let (mw, mb) = &mut m[l];
                        let (vw, vb) = &mut v[l];
                        update(&mut layer.weights, &g.weights, mw, vw);
                        update(&mut layer.bias, &g.bias, mb, vb);
                    }
                }
            }
        }
    }
}

/// Minibatch score-matching training until the configured budget is spent.
///
/// Starts from a copy of `net`; layers below `cfg.freeze_prefix` are never
/// modified. A budget of zero returns an exact copy.
pub fn train_dsm(
    net: &MlpScoreNet,
    dataset: &Points,
    sched: &VpSchedule,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<(MlpScoreNet, TrainReport)> {
    cfg.validate(net, sched)?;
    if dataset.is_empty() {
        return Err(LabError::Empty("training dataset".into()));
    }
    if dataset.dim() != net.dim() {
        return Err(LabError::DimensionMismatch {
            expected: net.dim(),
            got: dataset.dim(),
        });
    }
    let budget = cfg.budget.resolve(dataset.len());
    let mut out = net.clone();
    let mut report = TrainReport::default();
    let mut opt = OptState::new(cfg.optimizer, &out);
    let mut stream = ExampleStream::new(dataset.len(), budget, cfg.batch_size);
    let mut next_checkpoint = cfg.checkpoint_every;
    while let Some(idx) = stream.next_batch(rng) {
        let batch = dataset.select(&idx);
        let draws = NoiseDraws::draw(batch.len(), batch.dim(), sched, cfg.t_eps, rng);
        let (loss, grads) =
            dsm_loss_and_grad_with(&out, sched, &batch, &draws, cfg.weighting, cfg.freeze_prefix)
                .map_err(|e| match e {
                    LabError::NonFinite(m) => LabError::NonFinite(format!(
                        "{m} at step {} after {} samples",
                        report.steps, report.samples_seen
                    )),
                    other => other,
                })?;
        opt.step(&mut out, &grads, cfg.learning_rate);
        if !out.all_finite() {
            return Err(LabError::NonFinite(format!(
                "network parameters after step {} (loss {loss})",
                report.steps
            )));
        }
        report.steps += 1;
        report.samples_seen += idx.len() as u64;
        report.losses.push(loss);
        if let (Some(every), Some(at)) = (cfg.checkpoint_every, next_checkpoint.as_mut()) {
            while report.samples_seen >= *at {
                report.checkpoints.push((*at, out.clone()));
                *at += every;
            }
        }
    }
    Ok((out, report))
}

/// Continues training an existing network on `dataset` with the given budget.
pub fn fine_tune(
    net: &MlpScoreNet,
    dataset: &Points,
    sched: &VpSchedule,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<(MlpScoreNet, TrainReport)> {
    train_dsm(net, dataset, sched, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::score::mlp::{Activation, TimeEmbedding};

    #[test]
    fn example_stream_spends_budget_exactly() {
        let mut rng = rng_from_seed(0);
        let mut s = ExampleStream::new(10, 25, 4);
        let mut seen = 0;
        let mut counts = [0usize; 10];
        while let Some(b) = s.next_batch(&mut rng) {
            assert!(b.len() <= 4);
            seen += b.len();
            for i in b {
                counts[i] += 1;
            }
        }
        assert_eq!(seen, 25);
        // Two full passes plus five extra visits.
        assert_eq!(counts.iter().filter(|&&c| c == 3).count(), 5);
        assert!(counts.iter().all(|&c| c == 2 || c == 3));
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::Epochs(100.0).resolve(1000), 100_000);
        assert_eq!(Budget::Samples(7).resolve(1000), 7);
        assert_eq!(Budget::Epochs(0.0).resolve(1000), 0);
    }

    #[test]
    fn sigma_squared_loss_is_noise_prediction_error() {
        let sched = VpSchedule::default();
        let net = MlpScoreNet::new(2, &[8], Activation::Tanh, TimeEmbedding::AppendScalar, &mut rng_from_seed(1))
            .unwrap();
        let batch = Points::from_rows(&[[0.5, -1.0], [2.0, 0.0], [0.0, 0.3]]).unwrap();
        let draws = NoiseDraws::draw(3, 2, &sched, DEFAULT_T_EPS, &mut rng_from_seed(2));
        let (loss, _) = dsm_loss_and_grad_with(&net, &sched, &batch, &draws, Weighting::SigmaSquared, 0).unwrap();
        let mut direct = 0.0;
        for i in 0..3 {
            let t = draws.times[i];
            let (a, s) = sched.alpha_sigma(t).unwrap();
            let x0 = batch.row(i);
            let xt: Vec<f64> = (0..2).map(|k| a * x0[k] + s * draws.eps[2 * i + k]).collect();
            let out = net.forward(&xt, t).unwrap();
            for k in 0..2 {
                direct += (s * out[k] + draws.eps[2 * i + k]).powi(2);
            }
        }
        assert!((loss - direct / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_returns_identical_net() {
        let sched = VpSchedule::default();
        let net = MlpScoreNet::new(2, &[8], Activation::Silu, TimeEmbedding::default(), &mut rng_from_seed(1)).unwrap();
        let data = Points::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let cfg = TrainConfig {
            budget: Budget::Samples(0),
            ..TrainConfig::default()
        };
        let (out, report) = train_dsm(&net, &data, &sched, &cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(out, net);
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let sched = VpSchedule::default();
        let net = MlpScoreNet::zeros(2, &[8], Activation::Silu, TimeEmbedding::default()).unwrap();
        let data = Points::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut rng = rng_from_seed(0);
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { freeze_prefix: 2, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        ] {
            assert!(train_dsm(&net, &data, &sched, &cfg, &mut rng).is_err());
        }
        assert!(train_dsm(&net, &Points::new(2), &sched, &TrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn divergent_training_aborts_with_diagnostic() {
        let sched = VpSchedule::default();
        let net = MlpScoreNet::new(2, &[8], Activation::Identity, TimeEmbedding::AppendScalar, &mut rng_from_seed(1))
            .unwrap();
        let data = Points::from_rows(&[[1e3, 1e3], [-1e3, 1e3]]).unwrap();
        let cfg = TrainConfig {
            budget: Budget::Samples(10_000),
            learning_rate: 1e3,
            weighting: Weighting::Uniform,
            ..TrainConfig::default()
        };
        let err = train_dsm(&net, &data, &sched, &cfg, &mut rng_from_seed(2)).unwrap_err();
        assert!(matches!(err, LabError::NonFinite(_)), "{err}");
    }
}

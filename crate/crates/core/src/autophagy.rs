//! Self-consuming training loops.
//!
//! A loop alternates training and generation: generation `t` trains on a set
//! assembled from real data and generation `t - 1`'s synthetic output, then
//! produces the synthetic data consumed by generation `t + 1`. Training is
//! either standard score matching or the self-improving procedure: train a
//! base model, fine-tune an auxiliary copy on the base model's own samples,
//! then guide generation away from the auxiliary score.
//!
//! Seeds come from the path `master / run[r] / generation[t] / purpose`, so a
//! run's records do not depend on worker scheduling.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::guidance::{GuidanceInterval, SimsGuidance};
use crate::metrics::{component_fractions, empirical_dist_to_ref, gaussian_w2, nearest_component};
use crate::points::Points;
use crate::reference::{GaussianMixture, Reference};
use crate::rng::{split, LabRng, SeedPath};
use crate::sampling::{sample, SamplerConfig};
use crate::schedule::VpSchedule;
use crate::score::gaussian::DEFAULT_RIDGE;
use crate::score::{
    fine_tune, fit_gaussian, train_dsm, Activation, AnalyticScore, Budget, MlpScoreNet, ScoreFunction, ScoreModel,
    TimeEmbedding, TrainConfig,
};

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

/// MLP shape for the network backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed: TimeEmbedding,
}

impl Default for MlpArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Silu,
            time_embed: TimeEmbedding::default(),
        }
    }
}

/// How a model is learned from data.
///
/// `gaussian` fits a Gaussian by maximum likelihood and uses its exact score;
/// fine-tuning pools the current fit with the streamed examples. `mlp` trains
/// a score network by denoising score matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Backend {
    Gaussian {
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    Mlp(MlpArch),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Mlp(MlpArch::default())
    }
}

impl Backend {
    pub fn tag(&self) -> &'static str {
        match self {
            Backend::Gaussian { .. } => "gaussian",
            Backend::Mlp(_) => "mlp",
        }
    }

    /// Trains a model on `data`, from scratch or continuing from `init`.
    pub fn train(
        &self,
        data: &Points,
        sched: &VpSchedule,
        cfg: &TrainConfig,
        init: Option<&ScoreModel>,
        rng: &mut LabRng,
    ) -> Result<ScoreModel> {
        if data.is_empty() {
            return Err(LabError::Empty("training dataset".into()));
        }
        match (self, init) {
            (Backend::Gaussian { ridge }, None) => {
                Ok(ScoreModel::Analytic(AnalyticScore::new(fit_gaussian(data, *ridge)?, *sched)))
            }
            (Backend::Gaussian { .. }, Some(ScoreModel::Analytic(prev))) => {
                let budget = cfg.budget.resolve(data.len());
                let model = prev.model.fine_tune(data.len(), data, budget, rng)?;
                Ok(ScoreModel::Analytic(AnalyticScore::new(model, *sched)))
            }
            (Backend::Mlp(arch), None) => {
                let net = MlpScoreNet::new(data.dim(), &arch.hidden, arch.activation, arch.time_embed, rng)?;
                Ok(ScoreModel::Mlp(train_dsm(&net, data, sched, cfg, rng)?.0))
            }
            (Backend::Mlp(_), Some(ScoreModel::Mlp(prev))) => Ok(ScoreModel::Mlp(train_dsm(prev, data, sched, cfg, rng)?.0)),
            _ => Err(LabError::Config("warm-start model does not match the backend".into())),
        }
    }

    /// Fine-tunes `model` on `data` for `budget` examples.
    ///
    /// For the Gaussian backend the current fit counts as `prior_count`
    /// observations. `budget = 0` returns an exact copy for both backends.
    pub fn fine_tune(
        &self,
        model: &ScoreModel,
        data: &Points,
        sched: &VpSchedule,
        cfg: &TrainConfig,
        budget: u64,
        prior_count: usize,
        rng: &mut LabRng,
    ) -> Result<ScoreModel> {
        match model {
            ScoreModel::Analytic(a) => {
                let m = a.model.fine_tune(prior_count, data, budget, rng)?;
                Ok(ScoreModel::Analytic(AnalyticScore::new(m, a.schedule)))
            }
            ScoreModel::Mlp(net) => {
                let mut c = cfg.clone();
                c.budget = Budget::Samples(budget);
                Ok(ScoreModel::Mlp(fine_tune(net, data, sched, &c, rng)?.0))
            }
        }
    }
}

/// Hyperparameters of self-improving training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimsHyper {
    /// Size of the internal synthetic set; defaults to the training-set size.
    #[serde(default)]
    pub n_s: Option<usize>,
    /// Examples seen while fine-tuning the auxiliary model (epochs resolve against `n_s`).
    pub budget: Budget,
    pub omega: f64,
    /// Defaults to the whole horizon `[0, T]`.
    #[serde(default)]
    pub interval: Option<GuidanceInterval>,
    /// Optimizer settings for the auxiliary fine-tune; the budget field is ignored.
    /// Defaults to the base training config.
    #[serde(default)]
    pub aux_train: Option<TrainConfig>,
}

impl SimsHyper {
    pub fn new(budget: Budget, omega: f64) -> Self {
        Self {
            n_s: None,
            budget,
            omega,
            interval: None,
            aux_train: None,
        }
    }
}

/// Result of self-improving training.
pub struct SimsOutcome {
    pub guidance: SimsGuidance,
    /// The internal synthetic set, kept only on request.
    pub internal: Option<Points>,
}

/// Draws the base-model training stream; shared by both trainers so that
/// standard and self-improving training produce the same base model.
fn base_rng(rng: &mut LabRng) -> LabRng {
    split(rng, "base").rng()
}

/// Standard training: the base model alone.
pub fn standard_train(
    dataset: &Points,
    sched: &VpSchedule,
    backend: &Backend,
    base_cfg: &TrainConfig,
    init: Option<&ScoreModel>,
    rng: &mut LabRng,
) -> Result<ScoreModel> {
    backend.train(dataset, sched, base_cfg, init, &mut base_rng(rng))
}

/// Self-improving training: base model, internal synthetic set, auxiliary
/// fine-tune, and the guided combination.
#[allow(clippy::too_many_arguments)]
pub fn sims_train(
    dataset: &Points,
    sched: &VpSchedule,
    backend: &Backend,
    base_cfg: &TrainConfig,
    hyper: &SimsHyper,
    sampler: &SamplerConfig,
    init: Option<&ScoreModel>,
    keep_internal: bool,
    rng: &mut LabRng,
) -> Result<SimsOutcome> {
    let base = standard_train(dataset, sched, backend, base_cfg, init, rng)?;
    let mut internal_rng = split(rng, "internal-synthetic").rng();
    let mut aux_rng = split(rng, "aux").rng();
    let n_s = hyper.n_s.unwrap_or(dataset.len());
    let budget = hyper.budget.resolve(n_s);
    let interval = hyper.interval.unwrap_or(GuidanceInterval::full(sched.t_max()));
    let (aux, internal) = if budget == 0 {
        (base.clone(), None)
    } else {
        if n_s == 0 {
            return Err(LabError::InvalidParameter("a positive aux budget needs n_s >= 1".into()));
        }
        let s = sample(&base, sched, sampler, n_s, &mut internal_rng)?;
        let aux_cfg = hyper.aux_train.as_ref().unwrap_or(base_cfg);
        let aux = backend.fine_tune(&base, &s, sched, aux_cfg, budget, dataset.len(), &mut aux_rng)?;
        (aux, Some(s))
    };
    let guidance = SimsGuidance::new(base, aux, hyper.omega, interval, sched.t_max())?;
    Ok(SimsOutcome {
        guidance,
        internal: if keep_internal { internal } else { None },
    })
}

/// Auxiliary models at each budget in `budgets`, all fine-tuned from `base`
/// on `data`. Network budgets continue from the previous checkpoint; Gaussian
/// budgets are pooled from `base` directly.
#[allow(clippy::too_many_arguments)]
pub fn aux_budget_path(
    backend: &Backend,
    base: &ScoreModel,
    data: &Points,
    sched: &VpSchedule,
    cfg: &TrainConfig,
    budgets: &[u64],
    prior_count: usize,
    rng: &mut LabRng,
) -> Result<Vec<(u64, ScoreModel)>> {
    let mut sorted: Vec<u64> = budgets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len());
    let mut current = base.clone();
    let mut seen = 0u64;
    for b in sorted {
        let model = match base {
            ScoreModel::Analytic(_) => backend.fine_tune(base, data, sched, cfg, b, prior_count, rng)?,
            ScoreModel::Mlp(_) => {
                current = backend.fine_tune(&current, data, sched, cfg, b - seen, prior_count, rng)?;
                seen = b;
                current.clone()
            }
        };
        out.push((b, model));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopKind {
    FullySynthetic,
    SyntheticAugmentation,
    FreshData,
}

/// Training set of generation `gen_index >= 2`.
pub fn build_training_set(
    kind: LoopKind,
    d_r: &Points,
    d_s_prev: &Points,
    reference: &Reference,
    gen_index: usize,
    rng: &mut LabRng,
) -> Result<Points> {
    if gen_index < 2 {
        return Err(LabError::InvalidParameter(
            "generation 1 trains on the real data alone".into(),
        ));
    }
    let mut out = match kind {
        LoopKind::FullySynthetic => Points::new(d_s_prev.dim()),
        LoopKind::SyntheticAugmentation => d_r.clone(),
        LoopKind::FreshData => reference.sample(d_r.len(), rng),
    };
    out.extend(d_s_prev)?;
    if out.is_empty() {
        return Err(LabError::Empty(format!("training set of generation {gen_index}")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Trainer {
    Standard,
    Sims(SimsHyper),
}

/// Source of the synthetic data injected into the next generation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Pollution {
    /// The generation's own output (the guided score under self-improving training).
    #[default]
    SelfOutput,
    /// A fixed external model.
    External { model: Box<ScoreModel> },
}

fn default_probe_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub kind: LoopKind,
    pub generations: usize,
    pub n_real: usize,
    pub n_pollute: usize,
    pub trainer: Trainer,
    #[serde(default)]
    pub backend: Backend,
    pub base_train: TrainConfig,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub schedule: VpSchedule,
    pub runs: usize,
    pub master_seed: u64,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default)]
    pub pollute_with: Pollution,
    /// Continue from the previous generation's base model instead of retraining.
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_ridge")]
    pub metric_ridge: f64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generations < 1 {
            return Err(LabError::Config("generations must be >= 1".into()));
        }
        if self.kind == LoopKind::FullySynthetic && self.n_pollute < 1 {
            return Err(LabError::Config("fully-synthetic loops need n_pollute >= 1".into()));
        }
        if self.n_real < 1 {
            return Err(LabError::Config("n_real must be >= 1 (generation 1 trains on real data)".into()));
        }
        if self.runs < 1 {
            return Err(LabError::Config("runs must be >= 1".into()));
        }
        if self.probe_samples < self.reference.dim() + 1 {
            return Err(LabError::Config("probe_samples must exceed the data dimension".into()));
        }
        self.reference.validate()?;
        self.sampler.grid(&self.schedule)?;
        if let Trainer::Sims(h) = &self.trainer {
            if !h.omega.is_finite() {
                return Err(LabError::Config("omega must be finite".into()));
            }
            if let Some(iv) = h.interval {
                iv.validate(self.schedule.t_max())?;
            }
        }
        if let Pollution::External { model } = &self.pollute_with {
            if model.dim() != self.reference.dim() {
                return Err(LabError::DimensionMismatch {
                    expected: self.reference.dim(),
                    got: model.dim(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub run: usize,
    pub generation: usize,
    pub dist: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Seed of the generation's stream path.
    pub seed: u64,
}

/// Receives records as they are produced. Calls for one run arrive in order
/// from one thread; different runs may report concurrently.
pub trait RecordSink: Sync {
    fn record(&self, rec: &GenerationRecord) -> Result<()>;

    /// Called once per run after its last record, with the failure if any.
    fn finish_run(&self, _run: usize, _error: Option<&LabError>) -> Result<()> {
        Ok(())
    }

    /// The internal synthetic set of a generation, only when retention was requested.
    fn internal_set(&self, _run: usize, _generation: usize, _points: &Points) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Mutex<Vec<GenerationRecord>>,
    pub internal: Mutex<Vec<(usize, usize, Points)>>,
}

impl RecordSink for MemorySink {
    fn record(&self, rec: &GenerationRecord) -> Result<()> {
        self.records.lock().expect("sink lock").push(rec.clone());
        Ok(())
    }

    fn internal_set(&self, run: usize, generation: usize, points: &Points) -> Result<()> {
        self.internal.lock().expect("sink lock").push((run, generation, points.clone()));
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&self, _rec: &GenerationRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    pub records: Vec<GenerationRecord>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

/// Seed path of run `r`.
pub fn run_path(master_seed: u64, run: usize) -> SeedPath {
    SeedPath::root(master_seed).index("run", run as u64)
}

enum Trained {
    Plain(ScoreModel),
    Guided(SimsGuidance),
}

impl Trained {
    fn score(&self) -> &dyn ScoreFunction {
        match self {
            Trained::Plain(m) => m,
            Trained::Guided(g) => g,
        }
    }

    fn base(&self) -> &ScoreModel {
        match self {
            Trained::Plain(m) => m,
            Trained::Guided(g) => g.base(),
        }
    }
}

fn summarize(
    run: usize,
    generation: usize,
    seed: u64,
    probes: &Points,
    ref_mu: &DVector<f64>,
    ref_sigma: &DMatrix<f64>,
    ridge: f64,
) -> Result<GenerationRecord> {
    let dist = empirical_dist_to_ref(probes, ref_mu, ref_sigma, ridge)?;
    if !(dist.is_finite() && dist >= 0.0) {
        return Err(LabError::NonFinite(format!("distance at generation {generation}")));
    }
    let cov = probes.covariance();
    Ok(GenerationRecord {
        run,
        generation,
        dist,
        mean: probes.mean().iter().copied().collect(),
        cov: crate::linalg::to_rows(&cov),
        seed,
    })
}

/// One independent repetition of the loop.
///
/// With `keep_internal`, internal synthetic sets are passed to the sink.
pub fn run_single(
    cfg: &LoopConfig,
    run: usize,
    keep_internal: bool,
    sink: &dyn RecordSink,
) -> Result<Vec<GenerationRecord>> {
    let sched = &cfg.schedule;
    let path = run_path(cfg.master_seed, run);
    let (ref_mu, ref_sigma) = cfg.reference.moments();
    let d_r = cfg.reference.sample(cfg.n_real, &mut path.child("real-data").rng());
    let mut d_s_prev: Option<Points> = None;
    let mut prev_base: Option<ScoreModel> = None;
    let mut records = Vec::with_capacity(cfg.generations);
    for t in 1..=cfg.generations {
        let gen = path.index("generation", t as u64);
        let data = match &d_s_prev {
            None => d_r.clone(),
            Some(prev) => build_training_set(cfg.kind, &d_r, prev, &cfg.reference, t, &mut gen.child("fresh-data").rng())?,
        };
        let init = if cfg.warm_start { prev_base.as_ref() } else { None };
        let mut train_rng = gen.child("train").rng();
        let trained = match &cfg.trainer {
            Trainer::Standard => Trained::Plain(standard_train(&data, sched, &cfg.backend, &cfg.base_train, init, &mut train_rng)?),
            Trainer::Sims(h) => {
                let out = sims_train(
                    &data,
                    sched,
                    &cfg.backend,
                    &cfg.base_train,
                    h,
                    &cfg.sampler,
                    init,
                    keep_internal,
                    &mut train_rng,
                )?;
                if let Some(s) = &out.internal {
                    sink.internal_set(run, t, s)?;
                }
                Trained::Guided(out.guidance)
            }
        };
        if t < cfg.generations {
            let mut pollute_rng = gen.child("pollute").rng();
            let source: &dyn ScoreFunction = match &cfg.pollute_with {
                Pollution::SelfOutput => trained.score(),
                Pollution::External { model } => model.as_ref(),
            };
            d_s_prev = Some(sample(source, sched, &cfg.sampler, cfg.n_pollute, &mut pollute_rng)?);
        }
        let probes = sample(trained.score(), sched, &cfg.sampler, cfg.probe_samples, &mut gen.child("probe").rng())?;
        let rec = summarize(run, t, gen.seed_u64(), &probes, &ref_mu, &ref_sigma, cfg.metric_ridge)?;
        sink.record(&rec)?;
        records.push(rec);
        if cfg.warm_start {
            prev_base = Some(trained.base().clone());
        }
    }
    Ok(records)
}

/// Runs all repetitions on a pool of `workers` threads. Failed runs are
/// reported in their outcome and do not stop the others.
pub fn run_loop(
    cfg: &LoopConfig,
    workers: usize,
    keep_internal: bool,
    sink: &dyn RecordSink,
) -> Result<Vec<RunOutcome>> {
    run_loop_range(cfg, 0..cfg.runs, workers, keep_internal, sink)
}

/// Runs the repetitions with indices in `runs`, so that disjoint ranges of one
/// experiment can be computed separately and merged later.
pub fn run_loop_range(
    cfg: &LoopConfig,
    runs: std::ops::Range<usize>,
    workers: usize,
    keep_internal: bool,
    sink: &dyn RecordSink,
) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::Config(format!("worker pool: {e}")))?;
    let outcomes = pool.install(|| {
        runs.into_par_iter()
            .map(|run| {
                let result = run_single(cfg, run, keep_internal, sink);
                let (records, error) = match result {
                    Ok(r) => (r, None),
                    Err(e) => (Vec::new(), Some(e)),
                };
                let finish = sink.finish_run(run, error.as_ref());
                RunOutcome {
                    run,
                    records,
                    error: error.map(|e| e.to_string()).or_else(|| finish.err().map(|e| e.to_string())),
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(outcomes)
}

/// Distance ratios relative to generation 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadRatio {
    /// `E[dist(G^t)] / E[dist(G^1)]` for `t = 1..=generations` (index 0 is generation 1).
    pub ratio_curve: Vec<f64>,
    /// Mean over the window `[tail_start, generations]` of the expected
    /// distance, divided by the expected distance of generation 1.
    pub converged_ratio: f64,
    /// 95% interval for `converged_ratio` (delta method for a ratio of means over runs).
    pub ci_low: f64,
    pub ci_high: f64,
    pub runs: usize,
    pub tail_start: usize,
    /// Set when fewer than two runs make the interval width zero.
    pub degenerate_ci: bool,
}

/// Default window start: 20% of the generations, at least 1.
pub fn default_tail_start(generations: usize) -> usize {
    ((generations as f64 * 0.2).round() as usize).clamp(1, generations.max(1))
}

/// Ratio of expected distances across runs; each run contributes its
/// complete record sequence `generation = 1..=G`.
pub fn mad_ratio(runs: &[Vec<GenerationRecord>], tail_start: usize) -> Result<MadRatio> {
    if runs.is_empty() {
        return Err(LabError::Empty("mad_ratio needs at least one completed run".into()));
    }
    let g = runs[0].len();
    for (i, r) in runs.iter().enumerate() {
        if r.len() != g {
            return Err(LabError::InvalidParameter(format!(
                "run {i} has {} generations, expected {g}",
                r.len()
            )));
        }
        for (k, rec) in r.iter().enumerate() {
            if rec.generation != k + 1 {
                return Err(LabError::InvalidParameter(format!(
                    "run {i} record {k} is generation {}",
                    rec.generation
                )));
            }
        }
    }
    if g == 0 {
        return Err(LabError::Empty("runs without generations".into()));
    }
    if !(1..=g).contains(&tail_start) {
        return Err(LabError::InvalidParameter(format!(
            "tail_start {tail_start} outside [1, {g}]"
        )));
    }
    let n = runs.len() as f64;
    let mean_at = |k: usize| runs.iter().map(|r| r[k].dist).sum::<f64>() / n;
    let e1 = mean_at(0);
    if !(e1 > 0.0) {
        return Err(LabError::InvalidParameter("expected generation-1 distance is zero".into()));
    }
    let mut ratio_curve: Vec<f64> = (0..g).map(|k| mean_at(k) / e1).collect();
    ratio_curve[0] = 1.0;
    let window = (tail_start - 1)..g;
    let width = window.len() as f64;
    // Per-run tail means y_r and generation-1 distances x_r; R = mean(y) / mean(x).
    let y: Vec<f64> = runs
        .iter()
        .map(|r| r[window.clone()].iter().map(|rec| rec.dist).sum::<f64>() / width)
        .collect();
    let x: Vec<f64> = runs.iter().map(|r| r[0].dist).collect();
    let converged_ratio = ratio_curve[window.clone()].iter().sum::<f64>() / width;
    let (ci_low, ci_high, degenerate_ci) = if runs.len() < 2 {
        (converged_ratio, converged_ratio, true)
    } else {
        let resid_var = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| {
                let r = yi - converged_ratio * xi;
                r * r
            })
            .sum::<f64>()
            / (n - 1.0);
        let se = (resid_var / n).sqrt() / e1;
        (converged_ratio - 1.96 * se, converged_ratio + 1.96 * se, false)
    };
    Ok(MadRatio {
        ratio_curve,
        converged_ratio,
        ci_low,
        ci_high,
        runs: runs.len(),
        tail_start,
        degenerate_ci,
    })
}

/// Settings of the distribution-shift experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub mixture: GaussianMixture,
    /// Desired component proportions; the auxiliary set uses the complement.
    pub target_weights: Vec<f64>,
    pub n_train: usize,
    #[serde(default)]
    pub backend: Backend,
    pub base_train: TrainConfig,
    pub n_s: usize,
    pub budget: Budget,
    #[serde(default)]
    pub aux_train: Option<TrainConfig>,
    #[serde(default)]
    pub interval: Option<GuidanceInterval>,
    pub omegas: Vec<f64>,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub schedule: VpSchedule,
    pub n_eval: usize,
    #[serde(default = "default_ridge")]
    pub metric_ridge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub omega: f64,
    pub fractions: Vec<f64>,
    /// Squared W2 between the Gaussian fit of each labelled group and its
    /// real component; `None` when a group has too few samples to fit.
    pub frechet: Vec<Option<f64>>,
}

/// Complement proportions `(1 - w_k) / (K - 1)`.
pub fn complement_weights(target: &[f64]) -> Vec<f64> {
    let k = target.len() as f64;
    target.iter().map(|w| (1.0 - w) / (k - 1.0)).collect()
}

/// Largest subset of labelled points whose label proportions match `weights`.
fn subsample_to_proportions(points: &Points, labels: &[usize], weights: &[f64], rng: &mut LabRng) -> Result<Points> {
    let k = weights.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let size = groups
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(g, w)| g.len() as f64 / w)
        .fold(f64::INFINITY, f64::min);
    let mut chosen = Vec::new();
    for (g, w) in groups.iter_mut().zip(weights) {
        g.shuffle(rng);
        let take = ((size * w).floor() as usize).min(g.len());
        chosen.extend_from_slice(&g[..take]);
    }
    chosen.sort_unstable();
    if chosen.is_empty() {
        return Err(LabError::Empty("auxiliary set after proportion matching".into()));
    }
    Ok(points.select(&chosen))
}

/// Steers the component balance of a model's output with negative guidance
/// from an auxiliary model fine-tuned on complement-proportioned samples.
pub fn distribution_shift_experiment(cfg: &ShiftConfig, rng: &mut LabRng) -> Result<Vec<ShiftRow>> {
    let mix = &cfg.mixture;
    mix.validate()?;
    mix.check_separable()?;
    if cfg.target_weights.len() != mix.components.len() {
        return Err(LabError::Config("target_weights needs one entry per component".into()));
    }
    let sched = &cfg.schedule;
    let means = mix.means();
    let train = mix.sample_labeled(cfg.n_train, &mut split(rng, "train-data").rng()).0;
    let base = cfg.backend.train(&train, sched, &cfg.base_train, None, &mut split(rng, "base").rng())?;
    let synthetic = sample(&base, sched, &cfg.sampler, cfg.n_s, &mut split(rng, "internal-synthetic").rng())?;
    let labels = nearest_component(&synthetic, &means)?;
    let complement = complement_weights(&cfg.target_weights);
    let aux_set = subsample_to_proportions(&synthetic, &labels, &complement, &mut split(rng, "aux-subset").rng())?;
    let budget = cfg.budget.resolve(aux_set.len());
    let aux_cfg = cfg.aux_train.as_ref().unwrap_or(&cfg.base_train);
    let aux = cfg
        .backend
        .fine_tune(&base, &aux_set, sched, aux_cfg, budget, train.len(), &mut split(rng, "aux").rng())?;
    let interval = cfg.interval.unwrap_or(GuidanceInterval::full(sched.t_max()));
    let eval_path = split(rng, "eval");
    let mut rows = Vec::with_capacity(cfg.omegas.len());
    for &omega in &cfg.omegas {
        let guided = SimsGuidance::new(base.clone(), aux.clone(), omega, interval, sched.t_max())?;
        let pts = sample(&guided, sched, &cfg.sampler, cfg.n_eval, &mut eval_path.rng())?;
        let fractions = component_fractions(&pts, &means)?;
        let lab = nearest_component(&pts, &means)?;
        let frechet = mix
            .components
            .iter()
            .enumerate()
            .map(|(k, comp)| {
                let idx: Vec<usize> = lab.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i).collect();
                if idx.len() < pts.dim() + 1 {
                    return Ok(None);
                }
                let fit = fit_gaussian(&pts.select(&idx), cfg.metric_ridge)?;
                let w = gaussian_w2(fit.mu(), fit.sigma(), comp.mu(), comp.sigma())?;
                Ok(Some(w * w))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(ShiftRow { omega, fractions, frechet });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sampling::SamplerKind;
    use crate::score::GaussianScoreModel;

    fn rec(run: usize, generation: usize, dist: f64) -> GenerationRecord {
        GenerationRecord {
            run,
            generation,
            dist,
            mean: vec![0.0, 0.0],
            cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            seed: 0,
        }
    }

    fn gaussian_loop(kind: LoopKind, trainer: Trainer, generations: usize) -> LoopConfig {
        LoopConfig {
            kind,
            generations,
            n_real: 200,
            n_pollute: 100,
            trainer,
            backend: Backend::Gaussian { ridge: 1e-6 },
            base_train: TrainConfig::default(),
            sampler: SamplerConfig::new(SamplerKind::DdpmAncestral, 16),
            reference: Reference::default(),
            schedule: VpSchedule::default(),
            runs: 3,
            master_seed: 11,
            probe_samples: 500,
            pollute_with: Pollution::SelfOutput,
            warm_start: false,
            metric_ridge: 1e-6,
        }
    }

    #[test]
    fn constant_distances_give_unit_ratio() {
        let runs: Vec<Vec<_>> = (0..3).map(|r| (1..=10).map(|g| rec(r, g, 0.4)).collect()).collect();
        let m = mad_ratio(&runs, 3).unwrap();
        assert!(m.ratio_curve.iter().all(|&v| v == 1.0));
        assert_eq!(m.converged_ratio, 1.0);
    }

    #[test]
    fn tail_window_returns_tail_constant() {
        let runs: Vec<Vec<_>> = (0..2)
            .map(|r| (1..=100).map(|g| rec(r, g, if g >= 20 { 2.5 } else { 1.0 + g as f64 * 0.01 })).collect())
            .collect();
        let m = mad_ratio(&runs, 20).unwrap();
        assert!((m.converged_ratio - 2.5 / 1.01).abs() < 1e-12);
        assert_eq!(m.ratio_curve[0], 1.0);
    }

    #[test]
    fn single_run_interval_is_degenerate() {
        let runs = vec![(1..=4).map(|g| rec(0, g, g as f64)).collect::<Vec<_>>()];
        let m = mad_ratio(&runs, 2).unwrap();
        assert!(m.degenerate_ci);
        assert_eq!(m.ci_low, m.ci_high);
        assert!(mad_ratio(&[], 1).is_err());
        assert!(mad_ratio(&runs, 5).is_err());
    }

    #[test]
    fn training_sets() {
        let r = Reference::default();
        let d_r = r.sample(1000, &mut rng_from_seed(1));
        let d_s = r.sample(250, &mut rng_from_seed(2));
        let aug = build_training_set(LoopKind::SyntheticAugmentation, &d_r, &d_s, &r, 2, &mut rng_from_seed(3)).unwrap();
        assert_eq!(aug.len(), 1250);
        assert_eq!(&aug.as_flat()[..2000], d_r.as_flat());
        let full = build_training_set(LoopKind::FullySynthetic, &d_r, &d_s, &r, 2, &mut rng_from_seed(3)).unwrap();
        assert_eq!(full, d_s);
        let f1 = build_training_set(LoopKind::FreshData, &d_r, &d_s, &r, 2, &mut rng_from_seed(4)).unwrap();
        let f2 = build_training_set(LoopKind::FreshData, &d_r, &d_s, &r, 2, &mut rng_from_seed(4)).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), 1250);
        assert_ne!(&f1.as_flat()[..2000], d_r.as_flat());
        assert!(build_training_set(LoopKind::FreshData, &d_r, &d_s, &r, 1, &mut rng_from_seed(4)).is_err());
        let empty = Points::new(2);
        assert!(build_training_set(LoopKind::FullySynthetic, &d_r, &empty, &r, 2, &mut rng_from_seed(4)).is_err());
    }

    #[test]
    fn zero_budget_guidance_is_base() {
        let r = Reference::default();
        let data = r.sample(300, &mut rng_from_seed(5));
        let sched = VpSchedule::default();
        let backend = Backend::Gaussian { ridge: 1e-6 };
        let hyper = SimsHyper::new(Budget::Samples(0), 3.0);
        let sampler = SamplerConfig::new(SamplerKind::DdpmAncestral, 8);
        let out = sims_train(&data, &sched, &backend, &TrainConfig::default(), &hyper, &sampler, None, true, &mut rng_from_seed(6)).unwrap();
        assert!(out.internal.is_none());
        assert_eq!(out.guidance.base(), out.guidance.aux());
        let x = [0.3, -0.8];
        assert_eq!(out.guidance.guided_score(&x, 0.4).unwrap(), out.guidance.base().score(&x, 0.4).unwrap());
    }

    #[test]
    fn internal_set_only_on_request() {
        let r = Reference::default();
        let data = r.sample(300, &mut rng_from_seed(5));
        let sched = VpSchedule::default();
        let backend = Backend::Gaussian { ridge: 1e-6 };
        let mut hyper = SimsHyper::new(Budget::Epochs(2.0), 1.0);
        hyper.n_s = Some(50);
        let sampler = SamplerConfig::new(SamplerKind::DdpmAncestral, 8);
        let cfg = TrainConfig::default();
        let kept = sims_train(&data, &sched, &backend, &cfg, &hyper, &sampler, None, true, &mut rng_from_seed(6)).unwrap();
        assert_eq!(kept.internal.as_ref().map(|p| p.len()), Some(50));
        let dropped = sims_train(&data, &sched, &backend, &cfg, &hyper, &sampler, None, false, &mut rng_from_seed(6)).unwrap();
        assert!(dropped.internal.is_none());
        assert_eq!(kept.guidance.aux(), dropped.guidance.aux());
    }

    #[test]
    fn sims_with_zero_omega_reproduces_standard_records() {
        let std_cfg = gaussian_loop(LoopKind::SyntheticAugmentation, Trainer::Standard, 3);
        let mut hyper = SimsHyper::new(Budget::Epochs(5.0), 0.0);
        hyper.n_s = Some(200);
        let sims_cfg = gaussian_loop(LoopKind::SyntheticAugmentation, Trainer::Sims(hyper), 3);
        let a = run_loop(&std_cfg, 1, false, &NullSink).unwrap();
        let b = run_loop(&sims_cfg, 1, false, &NullSink).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_one_is_kind_independent_and_workers_do_not_matter() {
        let a = run_loop(&gaussian_loop(LoopKind::SyntheticAugmentation, Trainer::Standard, 2), 1, false, &NullSink).unwrap();
        let b = run_loop(&gaussian_loop(LoopKind::FullySynthetic, Trainer::Standard, 2), 2, false, &NullSink).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.records[0], y.records[0]);
        }
        let c = run_loop(&gaussian_loop(LoopKind::SyntheticAugmentation, Trainer::Standard, 2), 3, false, &NullSink).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn failed_runs_are_recorded() {
        let mut cfg = gaussian_loop(LoopKind::FullySynthetic, Trainer::Standard, 3);
        // A single synthetic point cannot be fitted at generation 2.
        cfg.n_pollute = 1;
        let out = run_loop(&cfg, 1, false, &NullSink).unwrap();
        assert!(out.iter().all(|o| !o.completed()));
        assert!(out[0].error.as_ref().unwrap().contains("2"));
    }

    #[test]
    fn fully_synthetic_drifts() {
        let mut cfg = gaussian_loop(LoopKind::FullySynthetic, Trainer::Standard, 12);
        cfg.n_pollute = 200;
        let out = run_loop(&cfg, 1, false, &NullSink).unwrap();
        let runs: Vec<_> = out.into_iter().map(|o| o.records).collect();
        let m = mad_ratio(&runs, 2).unwrap();
        assert!(m.ratio_curve[11] > m.ratio_curve[0]);
    }

    #[test]
    fn memory_sink_receives_records_and_internal_sets() {
        let mut hyper = SimsHyper::new(Budget::Epochs(1.0), 1.0);
        hyper.n_s = Some(40);
        let cfg = gaussian_loop(LoopKind::SyntheticAugmentation, Trainer::Sims(hyper), 2);
        let sink = MemorySink::default();
        run_loop(&cfg, 1, true, &sink).unwrap();
        assert_eq!(sink.records.lock().unwrap().len(), 6);
        assert_eq!(sink.internal.lock().unwrap().len(), 6);
        let quiet = MemorySink::default();
        run_loop(&cfg, 1, false, &quiet).unwrap();
        assert!(quiet.internal.lock().unwrap().is_empty());
    }

    #[test]
    fn complement_and_subsampling() {
        assert_eq!(complement_weights(&[0.7, 0.3]), vec![0.30000000000000004, 0.7]);
        let pts = Points::from_rows(&(0..100).map(|i| vec![i as f64, 0.0]).collect::<Vec<_>>()).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 50)).collect();
        let sub = subsample_to_proportions(&pts, &labels, &[0.3, 0.7], &mut rng_from_seed(0)).unwrap();
        let n0 = sub.rows().filter(|r| r[0] < 50.0).count();
        let n1 = sub.len() - n0;
        assert_eq!(n1, 50);
        assert_eq!(n0, 21);
    }

    #[test]
    fn shift_rejects_overlapping_mixture() {
        let mix = GaussianMixture::symmetric_pair(2, 1.0, 1.0, 0.5).unwrap();
        let cfg = ShiftConfig {
            mixture: mix,
            target_weights: vec![0.7, 0.3],
            n_train: 100,
            backend: Backend::Gaussian { ridge: 1e-6 },
            base_train: TrainConfig::default(),
            n_s: 100,
            budget: Budget::Epochs(1.0),
            aux_train: None,
            interval: None,
            omegas: vec![0.0],
            sampler: SamplerConfig::new(SamplerKind::DdpmAncestral, 8),
            schedule: VpSchedule::default(),
            n_eval: 100,
            metric_ridge: 1e-6,
        };
        assert!(distribution_shift_experiment(&cfg, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn gaussian_warm_start_pools_previous_fit() {
        let backend = Backend::Gaussian { ridge: 1e-6 };
        let sched = VpSchedule::default();
        let prev = ScoreModel::Analytic(AnalyticScore::new(GaussianScoreModel::standard(2), sched));
        let data = Points::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
        let cfg = TrainConfig {
            budget: Budget::Epochs(1.0),
            ..TrainConfig::default()
        };
        let m = backend.train(&data, &sched, &cfg, Some(&prev), &mut rng_from_seed(0)).unwrap();
        match m {
            ScoreModel::Analytic(a) => assert!((a.model.mu()[0] - 1.0).abs() < 1e-12),
            _ => unreachable!(),
        }
    }
}

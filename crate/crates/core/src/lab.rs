//! Experiment recipes behind the command-line tool.
//!
//! One JSON config file describes one experiment. The schema is strict:
//! unknown keys and sections that the chosen experiment does not use are
//! rejected before any computation starts. Every command writes its outputs
//! plus a `manifest.json` listing each output file with its SHA-256 hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autophagy::{
    aux_budget_path, default_tail_start, distribution_shift_experiment, mad_ratio, run_loop_range, run_path,
    standard_train, Backend, GenerationRecord, LoopConfig, LoopKind, Pollution, ShiftConfig, ShiftRow, Trainer,
};
use crate::error::{LabError, Result};
use crate::guidance::{GuidanceInterval, SimsGuidance};
use crate::io::{
    file_hash, group_by_run, load_checkpoint, read_json, read_records_csv, read_samples_csv, save_checkpoint,
    write_json, write_samples_bin, write_samples_csv, AggregateReport, FailedRun, Provenance, RunCsvSink,
};
use crate::metrics::empirical_dist_to_ref;
use crate::points::Points;
use crate::reference::{GaussianMixture, Reference};
use crate::rng::{split, SeedPath};
use crate::sampling::{sample, SamplerConfig, SamplerKind};
use crate::schedule::VpSchedule;
use crate::score::gaussian::DEFAULT_RIDGE;
use crate::score::{Budget, ScoreModel, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "simslab";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WORKERS_ENV: &str = "SIMSLAB_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Fit,
    Sample,
    SimsSweep,
    Loop,
    Shift,
    Report,
}

impl Experiment {
    pub fn tag(&self) -> &'static str {
        match self {
            Experiment::Fit => "fit",
            Experiment::Sample => "sample",
            Experiment::SimsSweep => "sims-sweep",
            Experiment::Loop => "loop",
            Experiment::Shift => "shift",
            Experiment::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// CSV of training samples; mutually exclusive with `reference`.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Draw `n` training samples from this distribution instead.
    #[serde(default)]
    pub reference: Option<Reference>,
    #[serde(default)]
    pub n: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFormat {
    #[default]
    Csv,
    Bin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub checkpoint: PathBuf,
    /// With an auxiliary checkpoint, samples follow the guided score.
    #[serde(default)]
    pub aux_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub omega: f64,
    #[serde(default)]
    pub interval: Option<GuidanceInterval>,
    pub n: usize,
    #[serde(default)]
    pub format: SampleFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub reference: Reference,
    pub n_real: usize,
    #[serde(default)]
    pub n_s: Option<usize>,
    pub omegas: Vec<f64>,
    /// Auxiliary budgets; epochs resolve against `n_s`.
    pub budgets: Vec<Budget>,
    #[serde(default)]
    pub interval: Option<GuidanceInterval>,
    #[serde(default)]
    pub aux_train: Option<TrainConfig>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_probe")]
    pub probe_samples: usize,
}

fn default_runs() -> usize {
    1
}

fn default_probe() -> usize {
    10_000
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolluteWith {
    #[default]
    #[serde(rename = "self")]
    SelfOutput,
    External { checkpoint: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub kind: LoopKind,
    pub generations: usize,
    pub n_real: usize,
    pub n_pollute: usize,
    pub trainer: Trainer,
    #[serde(default)]
    pub reference: Reference,
    pub runs: usize,
    /// First run index; shards of one experiment use disjoint ranges.
    #[serde(default)]
    pub run_offset: usize,
    #[serde(default = "default_probe")]
    pub probe_samples: usize,
    #[serde(default)]
    pub pollute_with: PolluteWith,
    #[serde(default)]
    pub warm_start: bool,
    /// Defaults to 20% of the generations.
    #[serde(default)]
    pub tail_start: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub mixture: GaussianMixture,
    pub target_weights: Vec<f64>,
    pub n_train: usize,
    pub n_s: usize,
    pub budget: Budget,
    #[serde(default)]
    pub aux_train: Option<TrainConfig>,
    #[serde(default)]
    pub interval: Option<GuidanceInterval>,
    pub omegas: Vec<f64>,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub tail_start: Option<usize>,
}

fn default_metric_ridge() -> f64 {
    DEFAULT_RIDGE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: VpSchedule,
    #[serde(default)]
    pub model: Backend,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    #[serde(default = "default_metric_ridge")]
    pub metric_ridge: f64,
    #[serde(default)]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub sample: Option<SampleSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default, rename = "loop")]
    pub loop_: Option<LoopSection>,
    #[serde(default)]
    pub shift: Option<ShiftSection>,
    #[serde(default)]
    pub report: Option<ReportSection>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.check_inputs_exist()?;
        Ok(cfg)
    }

    /// Makes relative input paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(f) = &mut self.fit {
            if let Some(d) = &mut f.data {
                fix(d);
            }
        }
        if let Some(s) = &mut self.sample {
            fix(&mut s.checkpoint);
            if let Some(a) = &mut s.aux_checkpoint {
                fix(a);
            }
        }
        if let Some(l) = &mut self.loop_ {
            if let PolluteWith::External { checkpoint } = &mut l.pollute_with {
                fix(checkpoint);
            }
        }
        if let Some(r) = &mut self.report {
            r.inputs.iter_mut().for_each(fix);
        }
    }

    /// Input files named by the config.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if let Some(FitSection { data: Some(d), .. }) = &self.fit {
            out.push(d.clone());
        }
        if let Some(s) = &self.sample {
            out.push(s.checkpoint.clone());
            out.extend(s.aux_checkpoint.clone());
        }
        if let Some(LoopSection {
            pollute_with: PolluteWith::External { checkpoint },
            ..
        }) = &self.loop_
        {
            out.push(checkpoint.clone());
        }
        out
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        for p in self.input_files() {
            if !p.is_file() {
                return Err(LabError::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let present = [
            ("fit", self.fit.is_some(), Experiment::Fit),
            ("sample", self.sample.is_some(), Experiment::Sample),
            ("sweep", self.sweep.is_some(), Experiment::SimsSweep),
            ("loop", self.loop_.is_some(), Experiment::Loop),
            ("shift", self.shift.is_some(), Experiment::Shift),
            ("report", self.report.is_some(), Experiment::Report),
        ];
        for (name, is_set, owner) in present {
            if is_set && owner != self.experiment {
                return Err(LabError::Config(format!(
                    "section `{name}` is not used by experiment `{}`",
                    self.experiment.tag()
                )));
            }
            if !is_set && owner == self.experiment && owner != Experiment::Report {
                return Err(LabError::Config(format!(
                    "experiment `{}` needs a `{name}` section",
                    self.experiment.tag()
                )));
            }
        }
        if let Some(s) = &self.sampler {
            s.grid(&self.schedule)?;
        }
        if let Some(f) = &self.fit {
            match (&f.data, &f.reference, f.n) {
                (Some(_), None, None) | (None, Some(_), Some(_)) => {}
                _ => {
                    return Err(LabError::Config(
                        "fit needs either `data` or both `reference` and `n`".into(),
                    ))
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.omegas.is_empty() || s.budgets.is_empty() || s.runs == 0 {
                return Err(LabError::Config("sweep needs omegas, budgets, and runs >= 1".into()));
            }
        }
        if self.loop_.is_some() {
            self.loop_config_unchecked()?.validate()?;
        }
        Ok(())
    }

    pub fn sampler_or_default(&self) -> SamplerConfig {
        self.sampler.unwrap_or_else(|| {
            let kind = match (&self.experiment, &self.model) {
                (Experiment::Loop | Experiment::SimsSweep, _) => SamplerKind::DdpmAncestral,
                _ => SamplerKind::PfOdeHeun,
            };
            SamplerConfig::default_for(kind)
        })
    }

    fn loop_config_unchecked(&self) -> Result<LoopConfig> {
        let l = self
            .loop_
            .as_ref()
            .ok_or_else(|| LabError::Config("missing `loop` section".into()))?;
        let pollute_with = match &l.pollute_with {
            PolluteWith::SelfOutput => Pollution::SelfOutput,
            PolluteWith::External { checkpoint } => {
                if checkpoint.is_file() {
                    Pollution::External {
                        model: Box::new(load_checkpoint(checkpoint)?.0),
                    }
                } else {
                    // Checked again, with a proper error, when the config is loaded from disk.
                    Pollution::SelfOutput
                }
            }
        };
        Ok(LoopConfig {
            kind: l.kind,
            generations: l.generations,
            n_real: l.n_real,
            n_pollute: l.n_pollute,
            trainer: l.trainer.clone(),
            backend: self.model.clone(),
            base_train: self.train.clone(),
            sampler: self.sampler_or_default(),
            reference: l.reference.clone(),
            schedule: self.schedule,
            runs: l.runs,
            master_seed: self.master_seed,
            probe_samples: l.probe_samples,
            pollute_with,
            warm_start: l.warm_start,
            metric_ridge: self.metric_ridge,
        })
    }

    /// Digest of the experiment definition. Output location, run count and
    /// run offset are excluded so that shards of one experiment share it.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            if let Some(l) = o.get_mut("loop").and_then(|l| l.as_object_mut()) {
                l.remove("runs");
                l.remove("run_offset");
            }
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Runtime options from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub keep_internal: bool,
}

/// Worker count: explicit value, else `SIMSLAB_WORKERS`, else available cores.
pub fn resolve_workers(explicit: Option<usize>) -> Result<usize> {
    if let Some(w) = explicit {
        return if w == 0 {
            Err(LabError::Config("--workers must be >= 1".into()))
        } else {
            Ok(w)
        };
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w >= 1)
            .ok_or_else(|| LabError::Config(format!("{WORKERS_ENV}={v} is not a positive integer")));
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub experiment: Experiment,
    pub config_digest: String,
    /// The effective config, after command-line overrides.
    pub config: ExperimentConfig,
    pub master_seed: u64,
    /// Derived seeds by their stream path.
    pub seeds: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<FileEntry>,
    /// Paths relative to the output directory, sorted.
    pub outputs: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    workers: usize,
    keep_internal: bool,
    started_at: String,
    seeds: BTreeMap<String, u64>,
    outputs: Vec<PathBuf>,
}

impl Session {
    fn new(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<Self> {
        if let Some(seed) = opts.seed {
            cfg.master_seed = seed;
        }
        let out = opts
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| LabError::Config("no output directory: set `output_dir` or pass --out".into()))?;
        cfg.output_dir = Some(out.clone());
        fs::create_dir_all(&out).map_err(|e| LabError::io(&out, e))?;
        Ok(Self {
            workers: resolve_workers(opts.workers)?,
            keep_internal: opts.keep_internal,
            started_at: now(),
            seeds: BTreeMap::new(),
            outputs: Vec::new(),
            cfg,
            out,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn produced(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn seed(&mut self, name: &str, path: &SeedPath) {
        self.seeds.insert(name.to_string(), path.seed_u64());
    }

    fn finish(self) -> Result<RunManifest> {
        let mut inputs = Vec::new();
        for p in self.cfg.input_files() {
            inputs.push(FileEntry {
                path: p.display().to_string(),
                sha256: file_hash(&p)?,
            });
        }
        if let Some(r) = &self.cfg.report {
            for p in &r.inputs {
                for f in report_files(p)? {
                    inputs.push(FileEntry {
                        path: f.display().to_string(),
                        sha256: file_hash(&f)?,
                    });
                }
            }
        }
        let mut outputs = Vec::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            outputs.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: file_hash(p)?,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        outputs.dedup_by(|a, b| a.path == b.path);
        let manifest = RunManifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            experiment: self.cfg.experiment,
            config_digest: self.cfg.digest(),
            master_seed: self.cfg.master_seed,
            config: self.cfg.clone(),
            seeds: self.seeds,
            started_at: self.started_at,
            finished_at: now(),
            inputs,
            outputs,
        };
        write_json(&self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LabError::Config(format!("worker pool: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Dispatches on the config's experiment.
pub fn run_experiment(cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    match cfg.experiment {
        Experiment::Fit => cmd_fit(cfg, opts),
        Experiment::Sample => cmd_sample(cfg, opts),
        Experiment::SimsSweep => cmd_sims_sweep(cfg, opts),
        Experiment::Loop => cmd_loop(cfg, opts),
        Experiment::Shift => cmd_shift(cfg, opts),
        Experiment::Report => {
            let inputs = cfg.report.as_ref().map(|r| r.inputs.clone()).unwrap_or_default();
            cmd_report(cfg, &inputs, opts)
        }
    }
}

/// Trains one model and writes `model.json` (and `train_loss.csv` for networks).
pub fn cmd_fit(cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut s = Session::new(cfg, opts)?;
    let fit = s.cfg.fit.clone().expect("validated");
    let root = SeedPath::root(s.cfg.master_seed);
    let data = match (&fit.data, &fit.reference, fit.n) {
        (Some(path), _, _) => read_samples_csv(path)?,
        (None, Some(r), Some(n)) => {
            let p = root.child("data");
            s.seed("data", &p);
            r.sample(n, &mut p.rng())
        }
        _ => unreachable!("validated"),
    };
    let train_path = root.child("train");
    s.seed("train", &train_path);
    let sched = s.cfg.schedule;
    let mut rng = train_path.rng();
    let budget = s.cfg.train.budget.resolve(data.len());
    let (model, losses) = match &s.cfg.model {
        Backend::Mlp(arch) => {
            let net = crate::score::MlpScoreNet::new(data.dim(), &arch.hidden, arch.activation, arch.time_embed, &mut rng)?;
            let (net, report) = crate::score::train_dsm(&net, &data, &sched, &s.cfg.train, &mut rng)?;
            (ScoreModel::Mlp(net), Some(report.losses))
        }
        backend @ Backend::Gaussian { .. } => (backend.train(&data, &sched, &s.cfg.train, None, &mut rng)?, None),
    };
    let ck = s.path("model.json");
    save_checkpoint(
        &ck,
        &model,
        Provenance {
            seed: train_path.seed_u64(),
            budget,
            dataset_hash: data.content_hash(),
        },
    )?;
    s.produced(ck);
    if let Some(losses) = losses {
        let p = s.path("train_loss.csv");
        let mut text = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            text.push_str(&format!("{i},{l}\n"));
        }
        write_text(&p, &text)?;
        s.produced(p);
    }
    s.finish()
}

/// Generates samples from a checkpoint, optionally guided by an auxiliary one.
pub fn cmd_sample(cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut s = Session::new(cfg, opts)?;
    let sec = s.cfg.sample.clone().expect("validated");
    let sampler = s.cfg.sampler_or_default();
    let sched = s.cfg.schedule;
    let (base, _) = load_checkpoint(&sec.checkpoint)?;
    let p = SeedPath::root(s.cfg.master_seed).child("sample");
    s.seed("sample", &p);
    let points = match &sec.aux_checkpoint {
        Some(aux_path) => {
            let (aux, _) = load_checkpoint(aux_path)?;
            let interval = sec.interval.unwrap_or(GuidanceInterval::full(sched.t_max()));
            let g = SimsGuidance::new(base, aux, sec.omega, interval, sched.t_max())?;
            sample(&g, &sched, &sampler, sec.n, &mut p.rng())?
        }
        None => sample(&base, &sched, &sampler, sec.n, &mut p.rng())?,
    };
    let out = match sec.format {
        SampleFormat::Csv => {
            let f = s.path("samples.csv");
            write_samples_csv(&f, &points)?;
            f
        }
        SampleFormat::Bin => {
            let f = s.path("samples.bin");
            write_samples_bin(&f, &points, p.seed_u64(), sampler.kind.tag())?;
            f
        }
    };
    s.produced(out);
    s.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub run: usize,
    pub omega: f64,
    pub budget: u64,
    pub dist: Option<f64>,
    pub error: Option<String>,
}

/// Guided-generation distances on an `omega x budget` grid.
///
/// Each run draws real data, trains the base model once, samples the internal
/// set once, and fine-tunes auxiliary models along the budget grid. Streams
/// match generation 1 of a loop with the same seed, so the `omega = 0` cells
/// reproduce the loop's generation-1 standard-training distance.
pub fn sims_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<SweepCell>> {
    let sec = cfg.sweep.as_ref().ok_or_else(|| LabError::Config("missing `sweep` section".into()))?;
    let sched = cfg.schedule;
    let sampler = cfg.sampler_or_default();
    let (ref_mu, ref_sigma) = sec.reference.moments();
    let per_run = pool(workers)?.install(|| {
        (0..sec.runs)
            .into_par_iter()
            .map(|run| -> Result<Vec<SweepCell>> {
                let path = run_path(cfg.master_seed, run);
                let d_r = sec.reference.sample(sec.n_real, &mut path.child("real-data").rng());
                let gen = path.index("generation", 1);
                let mut train_rng = gen.child("train").rng();
                let base = standard_train(&d_r, &sched, &cfg.model, &cfg.train, None, &mut train_rng)?;
                let mut internal_rng = split(&mut train_rng, "internal-synthetic").rng();
                let mut aux_rng = split(&mut train_rng, "aux").rng();
                let n_s = sec.n_s.unwrap_or(d_r.len());
                let budgets: Vec<u64> = sec.budgets.iter().map(|b| b.resolve(n_s)).collect();
                let needs_internal = budgets.iter().any(|&b| b > 0);
                let internal = if needs_internal {
                    sample(&base, &sched, &sampler, n_s, &mut internal_rng)?
                } else {
                    Points::new(d_r.dim())
                };
                let aux_cfg = sec.aux_train.as_ref().unwrap_or(&cfg.train);
                let auxes = aux_budget_path(&cfg.model, &base, &internal, &sched, aux_cfg, &budgets, d_r.len(), &mut aux_rng)?;
                let interval = sec.interval.unwrap_or(GuidanceInterval::full(sched.t_max()));
                let probe = gen.child("probe");
                let mut cells = Vec::new();
                for &omega in &sec.omegas {
                    for &b in &budgets {
                        let aux = &auxes.iter().find(|(x, _)| *x == b).expect("budget on path").1;
                        let dist = SimsGuidance::new(base.clone(), aux.clone(), omega, interval, sched.t_max())
                            .and_then(|g| sample(&g, &sched, &sampler, sec.probe_samples, &mut probe.rng()))
                            .and_then(|pts| empirical_dist_to_ref(&pts, &ref_mu, &ref_sigma, cfg.metric_ridge));
                        let (dist, error) = match dist {
                            Ok(d) => (Some(d), None),
                            Err(e) => (None, Some(e.to_string())),
                        };
                        cells.push(SweepCell { run, omega, budget: b, dist, error });
                    }
                }
                Ok(cells)
            })
            .collect::<Vec<_>>()
    });
    let mut cells = Vec::new();
    for (run, r) in per_run.into_iter().enumerate() {
        match r {
            Ok(c) => cells.extend(c),
            Err(e) => {
                for &omega in &sec.omegas {
                    cells.push(SweepCell {
                        run,
                        omega,
                        budget: 0,
                        dist: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `sweep.csv` (one row per run and cell) and `sweep_summary.csv`.
pub fn cmd_sims_sweep(cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut s = Session::new(cfg, opts)?;
    let runs = s.cfg.sweep.as_ref().expect("validated").runs;
    for r in 0..runs.min(16) {
        s.seed(&format!("run[{r}]"), &run_path(s.cfg.master_seed, r));
    }
    let cells = sims_sweep(&s.cfg, s.workers)?;
    let mut text = String::from("run,omega,budget,dist_to_ref,error\n");
    for c in &cells {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            c.run,
            c.omega,
            c.budget,
            c.dist.map(|d| d.to_string()).unwrap_or_default(),
            csv_field(c.error.as_deref().unwrap_or(""))
        ));
    }
    let p = s.path("sweep.csv");
    write_text(&p, &text)?;
    s.produced(p);
    let mut groups: BTreeMap<(u64, u64), (f64, u64, Vec<f64>)> = BTreeMap::new();
    for c in &cells {
        let e = groups.entry((c.budget, c.omega.to_bits())).or_insert((c.omega, c.budget, Vec::new()));
        if let Some(d) = c.dist {
            e.2.push(d);
        }
    }
    let mut summary = String::from("omega,budget,runs,mean_dist,stderr\n");
    for (omega, budget, ds) in groups.values() {
        let n = ds.len() as f64;
        let mean = ds.iter().sum::<f64>() / n;
        let se = if ds.len() > 1 {
            (ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        summary.push_str(&format!("{omega},{budget},{},{mean},{se}\n", ds.len()));
    }
    let p = s.path("sweep_summary.csv");
    write_text(&p, &summary)?;
    s.produced(p);
    s.finish()
}

/// Runs a loop: per-run record files in `runs/`, plus `aggregate.json`.
pub fn cmd_loop(cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut s = Session::new(cfg, opts)?;
    let sec = s.cfg.loop_.clone().expect("validated");
    let lc = s.cfg.loop_config_unchecked()?;
    lc.validate()?;
    let sink = RunCsvSink::new(s.path("runs"))?;
    let offset = sec.run_offset;
    for r in offset..(offset + sec.runs).min(offset + 16) {
        s.seed(&format!("run[{r}]"), &run_path(s.cfg.master_seed, r));
    }
    let outcomes = run_loop_range(&lc, offset..offset + sec.runs, s.workers, s.keep_internal, &sink)?;
    let mut completed = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o.error {
            None => {
                s.produced(sink.path_of(o.run));
                completed.push(o.records);
            }
            Some(e) => failed.push(FailedRun { run: o.run, error: e }),
        }
    }
    if s.keep_internal {
        let dir = s.path("runs").join("internal");
        if dir.is_dir() {
            for e in fs::read_dir(&dir).map_err(|e| LabError::io(&dir, e))? {
                let e = e.map_err(|e| LabError::io(&dir, e))?;
                s.produced(e.path());
            }
        }
    }
    let tail = sec.tail_start.unwrap_or_else(|| default_tail_start(sec.generations));
    let agg = s.path("aggregate.json");
    if completed.is_empty() {
        write_json(&agg, &serde_json::json!({ "config_digest": s.cfg.digest(), "runs_completed": 0, "runs_failed": failed }))?;
        s.produced(agg);
        s.finish()?;
        return Err(LabError::Empty("every loop run failed".into()));
    }
    let ratio = mad_ratio(&completed, tail)?;
    write_json(&agg, &AggregateReport::new(s.cfg.digest(), &completed, &ratio, failed))?;
    s.produced(agg);
    s.finish()
}

/// Writes `shift.csv`: per omega, component fractions and per-component
/// squared W2 to the matching real component.
pub fn cmd_shift(cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut s = Session::new(cfg, opts)?;
    let rows = shift_rows(&s.cfg)?;
    s.seed("shift", &SeedPath::root(s.cfg.master_seed).child("shift"));
    let k = s.cfg.shift.as_ref().expect("validated").mixture.components.len();
    let mut text = String::from("omega");
    for i in 0..k {
        text.push_str(&format!(",fraction_{i}"));
    }
    for i in 0..k {
        text.push_str(&format!(",frechet_{i}"));
    }
    text.push('\n');
    for r in &rows {
        text.push_str(&r.omega.to_string());
        for f in &r.fractions {
            text.push_str(&format!(",{f}"));
        }
        for f in &r.frechet {
            text.push_str(&format!(",{}", f.map(|v| v.to_string()).unwrap_or_default()));
        }
        text.push('\n');
    }
    let p = s.path("shift.csv");
    write_text(&p, &text)?;
    s.produced(p);
    s.finish()
}

/// The shift table for a `shift` config.
pub fn shift_rows(cfg: &ExperimentConfig) -> Result<Vec<ShiftRow>> {
    let sec = cfg.shift.as_ref().ok_or_else(|| LabError::Config("missing `shift` section".into()))?;
    let sc = ShiftConfig {
        mixture: sec.mixture.clone(),
        target_weights: sec.target_weights.clone(),
        n_train: sec.n_train,
        backend: cfg.model.clone(),
        base_train: cfg.train.clone(),
        n_s: sec.n_s,
        budget: sec.budget,
        aux_train: sec.aux_train.clone(),
        interval: sec.interval,
        omegas: sec.omegas.clone(),
        sampler: cfg.sampler_or_default(),
        schedule: cfg.schedule,
        n_eval: sec.n_eval,
        metric_ridge: cfg.metric_ridge,
    };
    distribution_shift_experiment(&sc, &mut SeedPath::root(cfg.master_seed).child("shift").rng())
}

/// Record files under a report input: the file itself, or `run_*.csv` in a
/// directory (also looking inside a `runs/` subdirectory).
fn report_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let dir = if input.join("runs").is_dir() { input.join("runs") } else { input.to_path_buf() };
    if !dir.is_dir() {
        return Err(LabError::Config(format!("report input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| LabError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub const REPORT_USAGE: &str = "usage: simslab report [--config PATH] [--out DIR] INPUT...\n\
  INPUT is a loop output directory, a runs/ directory, or a run_*.csv record file";

/// Merges record files into one aggregate and a human-readable summary.
pub fn aggregate_records(inputs: &[PathBuf], tail_start: Option<usize>) -> Result<(Vec<Vec<GenerationRecord>>, crate::autophagy::MadRatio, Option<String>)> {
    if inputs.is_empty() {
        return Err(LabError::Config(format!("no report inputs\n{REPORT_USAGE}")));
    }
    let mut all = Vec::new();
    let mut digests = std::collections::BTreeSet::new();
    for input in inputs {
        let manifest = if input.is_dir() {
            Some(input.join(MANIFEST_FILE))
        } else {
            input.parent().and_then(|p| p.parent()).map(|p| p.join(MANIFEST_FILE))
        };
        if let Some(m) = manifest.filter(|m| m.is_file()) {
            if let Ok(m) = read_json::<RunManifest>(&m) {
                digests.insert(m.config_digest);
            }
        }
        for f in report_files(input)? {
            all.extend(read_records_csv(&f)?);
        }
    }
    if digests.len() > 1 {
        return Err(LabError::Config("report inputs come from different experiment configs".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &all {
        if !seen.insert((r.run, r.generation)) {
            return Err(LabError::Config(format!(
                "run {} generation {} appears in more than one input",
                r.run, r.generation
            )));
        }
    }
    let runs: Vec<Vec<GenerationRecord>> = group_by_run(all).into_values().collect();
    if runs.is_empty() {
        return Err(LabError::Empty(format!("no records found in the report inputs\n{REPORT_USAGE}")));
    }
    let g = runs[0].len();
    let tail = tail_start.unwrap_or_else(|| default_tail_start(g));
    let ratio = mad_ratio(&runs, tail)?;
    Ok((runs, ratio, digests.into_iter().next()))
}

fn summary_table(agg: &AggregateReport) -> String {
    let mut t = String::new();
    t.push_str(&format!(
        "runs completed: {}  failed: {}\nconverged ratio (generations {}..{}): {:.4}  95% CI [{:.4}, {:.4}]{}\n\n",
        agg.runs_completed,
        agg.runs_failed.len(),
        agg.tail_start,
        agg.generations,
        agg.converged_ratio,
        agg.confidence_interval[0],
        agg.confidence_interval[1],
        if agg.degenerate_ci { "  (degenerate: single run)" } else { "" }
    ));
    t.push_str("generation  mean_dist   ratio\n");
    for (i, (d, r)) in agg.mean_dist.iter().zip(&agg.ratio_curve).enumerate() {
        t.push_str(&format!("{:>10}  {:>9.5}  {:>6.4}\n", i + 1, d, r));
    }
    t
}

/// Aggregates loop outputs: writes `aggregate.json` and `summary.txt`.
pub fn cmd_report(cfg: ExperimentConfig, inputs: &[PathBuf], opts: &RunOptions) -> Result<RunManifest> {
    let mut cfg = cfg;
    let tail = cfg.report.as_ref().and_then(|r| r.tail_start);
    cfg.report = Some(ReportSection {
        inputs: inputs.to_vec(),
        tail_start: tail,
    });
    let (runs, ratio, digest) = aggregate_records(inputs, tail)?;
    let mut s = Session::new(cfg, opts)?;
    let agg = AggregateReport::new(digest.unwrap_or_else(|| "unknown".into()), &runs, &ratio, Vec::new());
    let p = s.path("aggregate.json");
    write_json(&p, &agg)?;
    s.produced(p);
    let table = summary_table(&agg);
    let p = s.path("summary.txt");
    write_text(&p, &table)?;
    s.produced(p);
    print!("{table}");
    s.finish()
}

/// A minimal config for `report` when none is given on the command line.
pub fn report_config() -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment: Experiment::Report,
        master_seed: 0,
        output_dir: None,
        schedule: VpSchedule::default(),
        model: Backend::default(),
        train: TrainConfig::default(),
        sampler: None,
        metric_ridge: DEFAULT_RIDGE,
        fit: None,
        sample: None,
        sweep: None,
        loop_: None,
        shift: None,
        report: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOOP: &str = r#"{
        "schema_version": 1,
        "experiment": "loop",
        "master_seed": 3,
        "model": { "kind": "gaussian" },
        "sampler": { "kind": "ddpm-ancestral", "steps": 8 },
        "loop": {
            "kind": "synthetic-augmentation",
            "generations": 3,
            "n_real": 100,
            "n_pollute": 50,
            "trainer": { "kind": "standard" },
            "runs": 2,
            "probe_samples": 200
        }
    }"#;

    #[test]
    fn strict_schema() {
        assert!(ExperimentConfig::from_json(LOOP).is_ok());
        let unknown = LOOP.replace("\"master_seed\": 3,", "\"master_seed\": 3, \"colour\": 1,");
        assert!(ExperimentConfig::from_json(&unknown).is_err());
        let nested = LOOP.replace("\"runs\": 2,", "\"runs\": 2, \"extra\": true,");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let wrong_version = LOOP.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(ExperimentConfig::from_json(&wrong_version).is_err());
        let stray = LOOP.replace("\"master_seed\": 3,", "\"master_seed\": 3, \"shift\": null,");
        assert!(ExperimentConfig::from_json(&stray).is_ok());
        let unused: serde_json::Value = serde_json::from_str(LOOP).unwrap();
        let mut unused = unused;
        unused["report"] = serde_json::json!({ "inputs": [] });
        assert!(ExperimentConfig::from_json(&unused.to_string()).is_err());
        let bad_model = LOOP.replace("{ \"kind\": \"gaussian\" }", "{ \"kind\": \"gaussian\", \"depth\": 3 }");
        assert!(ExperimentConfig::from_json(&bad_model).is_err());
    }

    #[test]
    fn digest_ignores_output_and_sharding() {
        let a = ExperimentConfig::from_json(LOOP).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        b.loop_.as_mut().unwrap().run_offset = 5;
        assert_eq!(a.digest(), b.digest());
        b.master_seed = 4;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn workers_resolution() {
        assert_eq!(resolve_workers(Some(3)).unwrap(), 3);
        assert!(resolve_workers(Some(0)).is_err());
    }

    #[test]
    fn report_needs_inputs() {
        let err = aggregate_records(&[], None).unwrap_err();
        assert!(err.to_string().contains("usage"));
    }
}

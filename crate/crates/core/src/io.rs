//! On-disk formats: model checkpoints, sample batches, loop records, and
//! aggregate reports.
//!
//! JSON floats are written with round-trip precision, so a checkpoint that is
//! written and read back is bit-identical to the original model.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autophagy::{GenerationRecord, MadRatio, RecordSink};
use crate::error::{LabError, Result};
use crate::points::Points;
use crate::schedule::VpSchedule;
use crate::score::mlp::Layer;
use crate::score::{Activation, AnalyticScore, GaussianScoreModel, MlpScoreNet, ScoreModel, TimeEmbedding};

pub const CHECKPOINT_FORMAT: &str = "simslab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const SAMPLE_MAGIC: &[u8; 8] = b"SLSAMP01";

/// Where a model came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// Training examples seen.
    pub budget: u64,
    /// Content hash of the training set, see [`Points::content_hash`].
    pub dataset_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CheckpointModel {
    Mlp {
        layer_widths: Vec<usize>,
        activation: Activation,
        time_embed: TimeEmbedding,
        /// Per layer, input-major: entry `k * outputs + o` multiplies input `k`.
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    },
    Gaussian {
        mu: Vec<f64>,
        sigma: Vec<Vec<f64>>,
        ridge: f64,
        schedule: VpSchedule,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: CheckpointModel,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: &ScoreModel, provenance: Provenance) -> Self {
        let model = match model {
            ScoreModel::Mlp(net) => CheckpointModel::Mlp {
                layer_widths: net.layer_widths(),
                activation: net.activation(),
                time_embed: net.time_embed(),
                weights: net.layers().iter().map(|l| l.weights.clone()).collect(),
                biases: net.layers().iter().map(|l| l.bias.clone()).collect(),
            },
            ScoreModel::Analytic(a) => CheckpointModel::Gaussian {
                mu: a.model.mu().iter().copied().collect(),
                sigma: crate::linalg::to_rows(a.model.sigma()),
                ridge: a.model.ridge(),
                schedule: a.schedule,
            },
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<ScoreModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(LabError::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        match &self.model {
            CheckpointModel::Mlp {
                layer_widths,
                activation,
                time_embed,
                weights,
                biases,
            } => {
                if layer_widths.len() < 2 || weights.len() != layer_widths.len() - 1 || biases.len() != weights.len() {
                    return Err(LabError::Format("checkpoint layer lists are inconsistent".into()));
                }
                let dim = *layer_widths.last().expect("len >= 2");
                let layers = layer_widths
                    .windows(2)
                    .zip(weights.iter().zip(biases))
                    .map(|(w, (wt, b))| Layer {
                        inputs: w[0],
                        outputs: w[1],
                        weights: wt.clone(),
                        bias: b.clone(),
                    })
                    .collect();
                Ok(ScoreModel::Mlp(MlpScoreNet::from_layers(dim, *activation, *time_embed, layers)?))
            }
            CheckpointModel::Gaussian {
                mu,
                sigma,
                ridge,
                schedule,
            } => {
                let g: GaussianScoreModel = serde_json::from_value(serde_json::json!({
                    "mu": mu,
                    "sigma": sigma,
                    "ridge": ridge,
                }))
                .map_err(|e| LabError::Format(format!("gaussian checkpoint: {e}")))?;
                Ok(ScoreModel::Analytic(AnalyticScore::new(g, *schedule)))
            }
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| LabError::Format(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(path: &Path, model: &ScoreModel, provenance: Provenance) -> Result<()> {
    write_json(path, &Checkpoint::new(model, provenance))
}

pub fn load_checkpoint(path: &Path) -> Result<(ScoreModel, Provenance)> {
    let ck: Checkpoint = read_json(path)?;
    Ok((ck.to_model()?, ck.provenance))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| LabError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| LabError::io(path, e))?))
}

/// One row per sample, columns `x0..x{d-1}`.
pub fn write_samples_csv(path: &Path, points: &Points) -> Result<()> {
    let mut w = create(path)?;
    let header: Vec<String> = (0..points.dim()).map(|k| format!("x{k}")).collect();
    let io = |e| LabError::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in points.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_samples_csv(path: &Path) -> Result<Points> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Format(format!("{}: empty sample file", path.display())))?
        .map_err(|e| LabError::io(path, e))?;
    let dim = header.split(',').count();
    let mut pts = Points::new(dim);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| LabError::Format(format!("{} line {}: {e}", path.display(), i + 2)))?;
        pts.push(&row)?;
    }
    Ok(pts)
}

/// Header of the binary sample format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleHeader {
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub sampler: String,
}

/// Binary layout (little endian): magic `SLSAMP01`, `d: u32`, `n: u64`,
/// `seed: u64`, tag length `u16` and UTF-8 tag, then `n * d` `f64` values.
pub fn write_samples_bin(path: &Path, points: &Points, seed: u64, sampler: &str) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| LabError::io(path, e);
    let tag = sampler.as_bytes();
    let tag_len = u16::try_from(tag.len()).map_err(|_| LabError::InvalidParameter("sampler tag too long".into()))?;
    w.write_all(SAMPLE_MAGIC).map_err(io)?;
    w.write_all(&(points.dim() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(points.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&seed.to_le_bytes()).map_err(io)?;
    w.write_all(&tag_len.to_le_bytes()).map_err(io)?;
    w.write_all(tag).map_err(io)?;
    for v in points.as_flat() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_samples_bin(path: &Path) -> Result<(SampleHeader, Points)> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let bad = || LabError::Format(format!("{}: truncated or invalid sample file", path.display()));
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*at..*at + n).ok_or_else(bad)?;
        *at += n;
        Ok(s)
    };
    let mut at = 0;
    if take(&mut at, 8)? != SAMPLE_MAGIC {
        return Err(bad());
    }
    let dim = u32::from_le_bytes(take(&mut at, 4)?.try_into().expect("4 bytes")) as usize;
    let n = u64::from_le_bytes(take(&mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let seed = u64::from_le_bytes(take(&mut at, 8)?.try_into().expect("8 bytes"));
    let tag_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().expect("2 bytes")) as usize;
    let sampler = String::from_utf8(take(&mut at, tag_len)?.to_vec()).map_err(|_| bad())?;
    let count = dim.checked_mul(n).ok_or_else(bad)?;
    let body = take(&mut at, count.checked_mul(8).ok_or_else(bad)?)?;
    if at != bytes.len() || dim == 0 {
        return Err(bad());
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((SampleHeader { dim, n, seed, sampler }, Points::from_flat(dim, data)?))
}

fn axis(k: usize, dim: usize) -> String {
    if dim == 2 {
        ["x", "y"][k].to_string()
    } else {
        k.to_string()
    }
}

/// Record CSV header for `dim`-dimensional data. In 2-D the columns are
/// `run, generation, dist, mean_x, mean_y, cov_xx, cov_xy, cov_yy, seed`.
pub fn record_header(dim: usize) -> Vec<String> {
    let mut h = vec!["run".to_string(), "generation".into(), "dist".into()];
    for k in 0..dim {
        h.push(format!("mean_{}", axis(k, dim)));
    }
    for i in 0..dim {
        for j in i..dim {
            if dim == 2 {
                h.push(format!("cov_{}{}", axis(i, dim), axis(j, dim)));
            } else {
                h.push(format!("cov_{i}_{j}"));
            }
        }
    }
    h.push("seed".into());
    h
}

fn record_fields(rec: &GenerationRecord) -> Vec<String> {
    let d = rec.mean.len();
    let mut f = vec![rec.run.to_string(), rec.generation.to_string(), rec.dist.to_string()];
    f.extend(rec.mean.iter().map(|v| v.to_string()));
    for i in 0..d {
        for j in i..d {
            f.push(rec.cov[i][j].to_string());
        }
    }
    f.push(rec.seed.to_string());
    f
}

pub fn write_records_csv(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let dim = records.first().map(|r| r.mean.len()).unwrap_or(2);
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| LabError::Format(format!("{}: {e}", path.display()));
    w.write_record(record_header(dim)).map_err(err)?;
    for r in records {
        w.write_record(record_fields(r)).map_err(err)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<GenerationRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?;
    let err = |e: String| LabError::Format(format!("{}: {e}", path.display()));
    let header: Vec<String> = r.headers().map_err(|e| err(e.to_string()))?.iter().map(str::to_string).collect();
    let n_mean = header.iter().filter(|h| h.starts_with("mean_")).count();
    if header != record_header(n_mean) {
        return Err(err(format!("unexpected record header {header:?}")));
    }
    let d = n_mean;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| err(e.to_string()))?;
        let num = |i: usize| -> Result<f64> { row[i].parse::<f64>().map_err(|e| err(format!("column {i}: {e}"))) };
        let int = |i: usize| -> Result<u64> { row[i].parse::<u64>().map_err(|e| err(format!("column {i}: {e}"))) };
        let mean = (0..d).map(|k| num(3 + k)).collect::<Result<Vec<_>>>()?;
        let mut cov = vec![vec![0.0; d]; d];
        let mut c = 3 + d;
        for i in 0..d {
            for j in i..d {
                let v = num(c)?;
                cov[i][j] = v;
                cov[j][i] = v;
                c += 1;
            }
        }
        out.push(GenerationRecord {
            run: int(0)? as usize,
            generation: int(1)? as usize,
            dist: num(2)?,
            mean,
            cov,
            seed: int(c)?,
        });
    }
    Ok(out)
}

/// Groups records by run, sorted by generation; runs are ordered by index.
pub fn group_by_run(records: Vec<GenerationRecord>) -> BTreeMap<usize, Vec<GenerationRecord>> {
    let mut by_run: BTreeMap<usize, Vec<GenerationRecord>> = BTreeMap::new();
    for r in records {
        by_run.entry(r.run).or_default().push(r);
    }
    for v in by_run.values_mut() {
        v.sort_by_key(|r| r.generation);
    }
    by_run
}

pub fn run_file_name(run: usize) -> String {
    format!("run_{run:05}.csv")
}

/// Writes each run's records to `dir/run_NNNNN.csv` as they arrive, and
/// internal synthetic sets (when retained) to `dir/internal/`.
pub struct RunCsvSink {
    dir: PathBuf,
    open: Mutex<BTreeMap<usize, csv::Writer<BufWriter<File>>>>,
    failures: Mutex<BTreeMap<usize, String>>,
}

impl RunCsvSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        Ok(Self {
            dir,
            open: Mutex::new(BTreeMap::new()),
            failures: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn path_of(&self, run: usize) -> PathBuf {
        self.dir.join(run_file_name(run))
    }

    pub fn failures(&self) -> BTreeMap<usize, String> {
        self.failures.lock().expect("sink lock").clone()
    }
}

impl RecordSink for RunCsvSink {
    fn record(&self, rec: &GenerationRecord) -> Result<()> {
        let path = self.path_of(rec.run);
        let err = |e: csv::Error| LabError::Format(format!("{}: {e}", path.display()));
        let mut open = self.open.lock().expect("sink lock");
        if !open.contains_key(&rec.run) {
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record(record_header(rec.mean.len())).map_err(err)?;
            open.insert(rec.run, w);
        }
        let w = open.get_mut(&rec.run).expect("inserted");
        w.write_record(record_fields(rec)).map_err(err)?;
        w.flush().map_err(|e| LabError::io(&path, e))
    }

    fn finish_run(&self, run: usize, error: Option<&LabError>) -> Result<()> {
        let writer = self.open.lock().expect("sink lock").remove(&run);
        if let Some(mut w) = writer {
            w.flush().map_err(|e| LabError::io(self.path_of(run), e))?;
        }
        if let Some(e) = error {
            self.failures.lock().expect("sink lock").insert(run, e.to_string());
            // A failed run leaves no partial record file behind.
            let path = self.path_of(run);
            if path.exists() {
                fs::remove_file(&path).map_err(|e| LabError::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn internal_set(&self, run: usize, generation: usize, points: &Points) -> Result<()> {
        let path = self
            .dir
            .join("internal")
            .join(format!("run_{run:05}_gen_{generation:04}.csv"));
        write_samples_csv(&path, points)
    }
}

/// Aggregate loop report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config_digest: String,
    /// Distance used for every record.
    pub metric: String,
    pub generations: usize,
    pub runs_completed: usize,
    pub runs_failed: Vec<FailedRun>,
    pub tail_start: usize,
    pub ratio_curve: Vec<f64>,
    pub converged_ratio: f64,
    pub confidence_interval: [f64; 2],
    pub degenerate_ci: bool,
    /// Mean distance at each generation.
    pub mean_dist: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: usize,
    pub error: String,
}

pub const DIST_METRIC: &str = "2-Wasserstein (unsquared), Gaussian plug-in fit of probe samples vs reference moments";

impl AggregateReport {
    pub fn new(config_digest: String, runs: &[Vec<GenerationRecord>], ratio: &MadRatio, failed: Vec<FailedRun>) -> Self {
        let g = ratio.ratio_curve.len();
        let n = runs.len() as f64;
        let mean_dist = (0..g).map(|k| runs.iter().map(|r| r[k].dist).sum::<f64>() / n).collect();
        Self {
            config_digest,
            metric: DIST_METRIC.into(),
            generations: g,
            runs_completed: runs.len(),
            runs_failed: failed,
            tail_start: ratio.tail_start,
            ratio_curve: ratio.ratio_curve.clone(),
            converged_ratio: ratio.converged_ratio,
            confidence_interval: [ratio.ci_low, ratio.ci_high],
            degenerate_ci: ratio.degenerate_ci,
            mean_dist,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn rec(run: usize, generation: usize) -> GenerationRecord {
        GenerationRecord {
            run,
            generation,
            dist: 0.1 + 1.0 / 3.0 * generation as f64,
            mean: vec![0.1, -2.5e-7],
            cov: vec![vec![2.0, 1.0 / 7.0], vec![1.0 / 7.0, 1.9]],
            seed: u64::MAX - run as u64,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = MlpScoreNet::new(2, &[5, 3], Activation::Tanh, TimeEmbedding::default(), &mut rng_from_seed(3)).unwrap();
        let model = ScoreModel::Mlp(net);
        let prov = Provenance {
            seed: 9,
            budget: 1234,
            dataset_hash: "abc".into(),
        };
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &model, prov.clone()).unwrap();
        let (back, prov2) = load_checkpoint(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(prov2, prov);
        let g = ScoreModel::Analytic(AnalyticScore::new(GaussianScoreModel::paper_reference(), VpSchedule::default()));
        save_checkpoint(&p, &g, Provenance::default()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().0, g);
    }

    #[test]
    fn checkpoint_rejects_unknown_fields_and_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let net = MlpScoreNet::zeros(2, &[3], Activation::Silu, TimeEmbedding::AppendScalar).unwrap();
        save_checkpoint(&p, &ScoreModel::Mlp(net), Provenance::default()).unwrap();
        let mut v: serde_json::Value = read_json(&p).unwrap();
        v["extra"] = serde_json::json!(1);
        write_json(&p, &v).unwrap();
        assert!(load_checkpoint(&p).is_err());
        v.as_object_mut().unwrap().remove("extra");
        v["model"]["layer_widths"] = serde_json::json!([3, 4, 2]);
        write_json(&p, &v).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = GaussianScoreModel::paper_reference().sample(50, &mut rng_from_seed(1));
        let c = dir.path().join("s.csv");
        write_samples_csv(&c, &pts).unwrap();
        assert_eq!(read_samples_csv(&c).unwrap(), pts);
        let b = dir.path().join("s.bin");
        write_samples_bin(&b, &pts, 77, "pf-ode-heun").unwrap();
        let (h, back) = read_samples_bin(&b).unwrap();
        assert_eq!(back, pts);
        assert_eq!(h, SampleHeader { dim: 2, n: 50, seed: 77, sampler: "pf-ode-heun".into() });
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_samples_bin(&b).is_err());
    }

    #[test]
    fn record_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let recs: Vec<_> = (1..=3).map(|g| rec(4, g)).collect();
        write_records_csv(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("run,generation,dist,mean_x,mean_y,cov_xx,cov_xy,cov_yy,seed\n"));
        assert_eq!(read_records_csv(&p).unwrap(), recs);
    }

    #[test]
    fn run_sink_writes_per_run_files() {
        let dir = tempfile::tempdir().unwrap();
        let sink = RunCsvSink::new(dir.path()).unwrap();
        sink.record(&rec(0, 1)).unwrap();
        sink.record(&rec(1, 1)).unwrap();
        sink.record(&rec(0, 2)).unwrap();
        sink.finish_run(0, None).unwrap();
        sink.finish_run(1, Some(&LabError::Empty("x".into()))).unwrap();
        assert_eq!(read_records_csv(&sink.path_of(0)).unwrap(), vec![rec(0, 1), rec(0, 2)]);
        assert!(!sink.path_of(1).exists());
        assert_eq!(sink.failures().len(), 1);
    }
}

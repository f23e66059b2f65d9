//! Score functions: analytic Gaussian scores, MLP score networks, and training.

pub mod gaussian;
pub mod mlp;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use gaussian::{fit_gaussian, AnalyticScore, GaussianScoreModel};
pub use mlp::{Activation, MlpScoreNet, TimeEmbedding};
pub use train::{fine_tune, train_dsm, Budget, TrainConfig, Weighting};

/// A score field `s(x, t)`, evaluated on row-major batches sharing one time.
pub trait ScoreFunction: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes the scores of the rows of `xs` (n x dim) into `out` (n x dim).
    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; x.len()];
        self.score_batch(x, t, &mut out)?;
        Ok(out)
    }
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_batch(xs, t, out)
    }
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for std::sync::Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_batch(xs, t, out)
    }
}

/// Either score backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum ScoreModel {
    Analytic(AnalyticScore),
    Mlp(MlpScoreNet),
}

impl ScoreFunction for ScoreModel {
    fn dim(&self) -> usize {
        match self {
            ScoreModel::Analytic(a) => a.dim(),
            ScoreModel::Mlp(m) => m.dim(),
        }
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match self {
            ScoreModel::Analytic(a) => a.score_batch(xs, t, out),
            ScoreModel::Mlp(m) => m.score_batch(xs, t, out),
        }
    }
}

/// Counts batch evaluations of the wrapped score function.
///
/// Samplers evaluate the whole particle batch at once, so the count equals
/// the number of function evaluations per generated sample.
pub struct CountingScore<S> {
    inner: S,
    calls: AtomicU64,
}

impl<S: ScoreFunction> CountingScore<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<S: ScoreFunction> ScoreFunction for CountingScore<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_batch(xs, t, out)
    }
}

//! Reference (real-data) distributions: a Gaussian or a Gaussian mixture.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::points::Points;
use crate::rng::LabRng;
use crate::score::GaussianScoreModel;

/// Minimum separation between mixture means, in pooled standard deviations,
/// for nearest-mean labelling to be trusted.
pub const SEPARATION_STDS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianScoreModel>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianScoreModel>) -> Result<Self> {
        let m = Self { weights, components };
        m.validate()?;
        Ok(m)
    }

    /// Two isotropic components at `±offset` along the first axis.
    pub fn symmetric_pair(dim: usize, offset: f64, std: f64, weight_a: f64) -> Result<Self> {
        let mut mu_a = vec![0.0; dim];
        let mut mu_b = vec![0.0; dim];
        mu_a[0] = -offset;
        mu_b[0] = offset;
        let cov = DMatrix::identity(dim, dim) * (std * std);
        Self::new(
            vec![weight_a, 1.0 - weight_a],
            vec![
                GaussianScoreModel::new(DVector::from_vec(mu_a), cov.clone())?,
                GaussianScoreModel::new(DVector::from_vec(mu_b), cov)?,
            ],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.weights.len() != self.components.len() {
            return Err(LabError::InvalidParameter(
                "mixture needs one weight per component and at least one component".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(LabError::InvalidParameter("mixture weights must be >= 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(LabError::InvalidParameter(format!("mixture weights sum to {total}, not 1")));
        }
        let d = self.components[0].dim();
        if self.components.iter().any(|c| c.dim() != d) {
            return Err(LabError::InvalidParameter("mixture components differ in dimension".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mu().iter().copied().collect()).collect()
    }

    /// Checks every pair of means is at least [`SEPARATION_STDS`] pooled
    /// standard deviations apart along the line joining them.
    pub fn check_separable(&self) -> Result<()> {
        for i in 0..self.components.len() {
            for j in i + 1..self.components.len() {
                let (a, b) = (&self.components[i], &self.components[j]);
                let diff = b.mu() - a.mu();
                let gap = diff.norm();
                if gap == 0.0 {
                    return Err(LabError::InvalidParameter(format!("components {i} and {j} share a mean")));
                }
                let u = &diff / gap;
                let pooled = (a.sigma() + b.sigma()) * 0.5;
                let std = (u.dot(&(&pooled * &u))).sqrt();
                if gap < SEPARATION_STDS * std {
                    return Err(LabError::InvalidParameter(format!(
                        "components {i} and {j} overlap: gap {gap:.4} < {SEPARATION_STDS} x pooled std {std:.4}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draws `n` points and their component labels.
    pub fn sample_labeled(&self, n: usize, rng: &mut LabRng) -> (Points, Vec<usize>) {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            labels.push(k);
        }
        let pts = self.sample_with_labels(&labels, rng);
        (pts, labels)
    }

    /// Draws one point per entry of `labels` from the labelled component.
    pub fn sample_with_labels(&self, labels: &[usize], rng: &mut LabRng) -> Points {
        let blocks: Vec<Points> = (0..self.components.len())
            .map(|k| {
                let count = labels.iter().filter(|&&l| l == k).count();
                self.components[k].sample(count, rng)
            })
            .collect();
        let mut next = vec![0usize; blocks.len()];
        let mut pts = Points::with_capacity(self.dim(), labels.len());
        for &k in labels {
            pts.push(blocks[k].row(next[k])).expect("component dimension");
            next[k] += 1;
        }
        pts
    }

    /// Mean and covariance of the mixture.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean += c.mu() * *w;
        }
        let mut cov = DMatrix::zeros(d, d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let dm = c.mu() - &mean;
            cov += (c.sigma() + &dm * dm.transpose()) * *w;
        }
        (mean, cov)
    }
}

/// The distribution real data is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    Gaussian(GaussianScoreModel),
    Mixture(GaussianMixture),
}

impl Default for Reference {
    fn default() -> Self {
        Reference::Gaussian(GaussianScoreModel::paper_reference())
    }
}

impl Reference {
    pub fn dim(&self) -> usize {
        match self {
            Reference::Gaussian(g) => g.dim(),
            Reference::Mixture(m) => m.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Reference::Gaussian(_) => Ok(()),
            Reference::Mixture(m) => m.validate(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut LabRng) -> Points {
        match self {
            Reference::Gaussian(g) => g.sample(n, rng),
            Reference::Mixture(m) => m.sample_labeled(n, rng).0,
        }
    }

    /// Mean and covariance; distances to a mixture reference use these moments.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            Reference::Gaussian(g) => (g.mu().clone(), g.sigma().clone()),
            Reference::Mixture(m) => m.moments(),
        }
    }
}

//! Gaussian score models: maximum-likelihood fits with an exact noised score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, sym_sqrt};
use crate::points::Points;
use crate::rng::{fill_normal, LabRng};
use crate::schedule::VpSchedule;
use crate::score::train::ExampleStream;
use crate::score::ScoreFunction;

/// Default diagonal regularizer added by [`fit_gaussian`].
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian", into = "RawGaussian")]
pub struct GaussianScoreModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    ridge: f64,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGaussian {
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    #[serde(default)]
    ridge: f64,
}

impl TryFrom<RawGaussian> for GaussianScoreModel {
    type Error = LabError;
    fn try_from(r: RawGaussian) -> Result<Self> {
        let sigma = linalg::from_rows(&r.sigma)?;
        Self::with_ridge(DVector::from_vec(r.mu), sigma, r.ridge)
    }
}

impl From<GaussianScoreModel> for RawGaussian {
    fn from(g: GaussianScoreModel) -> Self {
        RawGaussian {
            mu: g.mu.iter().cloned().collect(),
            sigma: linalg::to_rows(&g.sigma),
            ridge: g.ridge,
        }
    }
}

impl GaussianScoreModel {
    /// A Gaussian `N(mu, sigma)`; `sigma` must be symmetric PSD.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::with_ridge(mu, sigma, 0.0)
    }

    /// `sigma` is taken to already include the recorded `ridge`.
    fn with_ridge(mu: DVector<f64>, sigma: DMatrix<f64>, ridge: f64) -> Result<Self> {
        if sigma.nrows() != mu.len() {
            return Err(LabError::DimensionMismatch {
                expected: mu.len(),
                got: sigma.nrows(),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("gaussian mean".into()));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(LabError::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
        }
        linalg::check_psd(&sigma)?;
        Ok(Self { mu, sigma, ridge })
    }

    pub fn from_slices(mu: &[f64], sigma_rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = sigma_rows.iter().map(|r| r.to_vec()).collect();
        Self::new(DVector::from_column_slice(mu), linalg::from_rows(&rows)?)
    }

    /// The two-dimensional reference used throughout the Gaussian experiments:
    /// mean `[0, 0]`, covariance `[[2, 1], [1, 2]]`.
    pub fn paper_reference() -> Self {
        Self::from_slices(&[0.0, 0.0], &[&[2.0, 1.0], &[1.0, 2.0]]).expect("valid reference")
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is PSD")
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `(alpha_t^2 Sigma + sigma_t^2 I)^{-1}`, the precision of the noised marginal.
    pub fn noised_precision(&self, sched: &VpSchedule, t: f64) -> Result<DMatrix<f64>> {
        let (a, s) = sched.alpha_sigma(t)?;
        let d = self.dim();
        let cov = &self.sigma * (a * a) + DMatrix::identity(d, d) * (s * s);
        cov.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| LabError::Singular(format!("noised covariance at t={t}")))
    }

    /// Exact score `-(a_t^2 Sigma + sigma_t^2 I)^{-1} (x - a_t mu)` of the noised Gaussian.
    pub fn analytic_score(&self, sched: &VpSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; x.len()];
        self.score_rows(sched, x, t, &mut out)?;
        Ok(out)
    }

    fn score_rows(&self, sched: &VpSchedule, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let prec = self.noised_precision(sched, t)?;
        let a = sched.alpha_at(t)?;
        let shift: Vec<f64> = self.mu.iter().map(|m| a * m).collect();
        let mut centered = vec![0.0; d];
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            for k in 0..d {
                centered[k] = x[k] - shift[k];
            }
            for i in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += prec[(i, k)] * centered[k];
                }
                o[i] = -acc;
            }
        }
        Ok(())
    }

    /// Draws `n` points via the symmetric square root of `sigma` (works for singular `sigma`).
    pub fn sample(&self, n: usize, rng: &mut LabRng) -> Points {
        let d = self.dim();
        let root = sym_sqrt(&self.sigma);
        let mut out = Points::with_capacity(d, n);
        let mut z = vec![0.0; d];
        let mut x = vec![0.0; d];
        for _ in 0..n {
            fill_normal(rng, &mut z);
            for i in 0..d {
                let mut acc = self.mu[i];
                for k in 0..d {
                    acc += root[(i, k)] * z[k];
                }
                x[i] = acc;
            }
            out.push(&x).expect("dimension matches");
        }
        out
    }

    /// Budgeted update toward `data`, the Gaussian analogue of fine-tuning.
    ///
    /// The current parameters act as `prior_count` pseudo-observations. The
    /// model then streams `budget` examples from `data` (shuffled passes, the
    /// same visiting order as network training) and returns the pooled
    /// maximum-likelihood estimate. `budget = 0` returns an exact copy.
    pub fn fine_tune(
        &self,
        prior_count: usize,
        data: &Points,
        budget: u64,
        rng: &mut LabRng,
    ) -> Result<GaussianScoreModel> {
        if budget == 0 {
            return Ok(self.clone());
        }
        let d = self.dim();
        if data.dim() != d {
            return Err(LabError::DimensionMismatch {
                expected: d,
                got: data.dim(),
            });
        }
        if data.is_empty() {
            return Err(LabError::Empty("fine-tuning dataset".into()));
        }
        let mut stream = ExampleStream::new(data.len(), budget, data.len().max(1));
        let mut seen = Points::with_capacity(d, budget as usize);
        while let Some(batch) = stream.next_batch(rng) {
            for &i in &batch {
                seen.push(data.row(i))?;
            }
        }
        let w0 = prior_count as f64;
        let w1 = budget as f64;
        let m1 = seen.mean();
        let c1 = seen.covariance();
        let mu = (&self.mu * w0 + &m1 * w1) / (w0 + w1);
        let second0 = &self.sigma + &self.mu * self.mu.transpose();
        let second1 = &c1 + &m1 * m1.transpose();
        let sigma = (second0 * w0 + second1 * w1) / (w0 + w1) - &mu * mu.transpose();
        let sigma = linalg::symmetrize(&sigma);
        let sigma = sigma + DMatrix::identity(d, d) * self.ridge;
        Self::with_ridge(mu, sigma, self.ridge)
    }
}

/// Maximum-likelihood Gaussian: sample mean and biased covariance plus `ridge * I`.
pub fn fit_gaussian(samples: &Points, ridge: f64) -> Result<GaussianScoreModel> {
    if samples.len() < 2 {
        return Err(LabError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    if !samples.all_finite() {
        return Err(LabError::NonFinite("sample coordinates".into()));
    }
    let d = samples.dim();
    let sigma = samples.covariance() + DMatrix::identity(d, d) * ridge;
    GaussianScoreModel::with_ridge(samples.mean(), sigma, ridge)
}

/// A Gaussian model bound to a schedule, evaluable as a score function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScore {
    pub model: GaussianScoreModel,
    pub schedule: VpSchedule,
}

impl AnalyticScore {
    pub fn new(model: GaussianScoreModel, schedule: VpSchedule) -> Self {
        Self { model, schedule }
    }
}

impl ScoreFunction for AnalyticScore {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.model.score_rows(&self.schedule, xs, t, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn constant_samples_give_ridge_covariance() {
        let pts = Points::from_rows(&[[1.5, -2.0]; 10]).unwrap();
        let g = fit_gaussian(&pts, 0.25).unwrap();
        assert_eq!(g.mu().as_slice(), &[1.5, -2.0]);
        assert_eq!(g.sigma()[(0, 0)], 0.25);
        assert_eq!(g.sigma()[(1, 1)], 0.25);
        assert_eq!(g.sigma()[(0, 1)], 0.0);
    }

    #[test]
    fn two_point_fit_is_singular_without_ridge() {
        let pts = Points::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let g = fit_gaussian(&pts, 0.0).unwrap();
        assert_eq!(g.mu().as_slice(), &[0.0, 0.0]);
        assert_eq!(linalg::to_rows(g.sigma()), vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let s = VpSchedule::default();
        assert!(matches!(
            g.analytic_score(&s, &[0.0, 0.0], 0.0),
            Err(LabError::Singular(_))
        ));
        // Any positive noise level regularizes the marginal.
        assert!(g.analytic_score(&s, &[0.0, 0.0], 0.1).is_ok());
    }

    #[test]
    fn fit_errors() {
        let one = Points::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(fit_gaussian(&one, 0.0), Err(LabError::TooFewSamples { .. })));
        let bad = Points::from_rows(&[[1.0, f64::NAN], [0.0, 0.0]]).unwrap();
        assert!(matches!(fit_gaussian(&bad, 0.0), Err(LabError::NonFinite(_))));
    }

    #[test]
    fn recovers_reference_parameters() {
        let reference = GaussianScoreModel::paper_reference();
        let pts = reference.sample(1_000_000, &mut rng_from_seed(5));
        let g = fit_gaussian(&pts, DEFAULT_RIDGE).unwrap();
        for k in 0..2 {
            assert!(g.mu()[k].abs() < 0.01);
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.sigma()[(i, j)] - reference.sigma()[(i, j)]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn analytic_score_examples() {
        let s = VpSchedule::default();
        let g = GaussianScoreModel::paper_reference();
        let sc = g.analytic_score(&s, &[1.0, 0.0], 0.0).unwrap();
        assert!((sc[0] + 2.0 / 3.0).abs() < 1e-12);
        assert!((sc[1] - 1.0 / 3.0).abs() < 1e-12);

        let shifted = GaussianScoreModel::from_slices(&[1.0, -2.0], &[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        for t in [0.0, 0.3, 0.9] {
            let a = s.alpha_at(t).unwrap();
            let sc = shifted.analytic_score(&s, &[a, -2.0 * a], t).unwrap();
            assert!(sc.iter().all(|v| v.abs() < 1e-12));
        }

        let x = [0.7, -1.3];
        let sc = g.analytic_score(&s, &x, 1.0).unwrap();
        for k in 0..2 {
            assert!((sc[k] + x[k]).abs() < 1e-2);
        }
        assert!(g.analytic_score(&s, &[1.0], 0.5).is_err());
    }

    #[test]
    fn fine_tune_zero_budget_is_identity() {
        let g = GaussianScoreModel::paper_reference();
        let data = GaussianScoreModel::standard(2).sample(50, &mut rng_from_seed(1));
        let out = g.fine_tune(1000, &data, 0, &mut rng_from_seed(2)).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn fine_tune_moves_toward_data() {
        let g = GaussianScoreModel::standard(2);
        let data = GaussianScoreModel::from_slices(&[3.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]])
            .unwrap()
            .sample(2000, &mut rng_from_seed(3));
        let small = g.fine_tune(1000, &data, 100, &mut rng_from_seed(4)).unwrap();
        let large = g.fine_tune(1000, &data, 100_000, &mut rng_from_seed(4)).unwrap();
        assert!(small.mu()[0] > 0.0 && small.mu()[0] < large.mu()[0]);
        assert!((large.mu()[0] - 3.0).abs() < 0.1);
        // Pooling two unit-variance groups 3 apart inflates the first coordinate's variance.
        assert!(small.sigma()[(0, 0)] > 1.0);
    }

    #[test]
    fn serde_validates() {
        let g = GaussianScoreModel::paper_reference();
        let json = serde_json::to_string(&g).unwrap();
        let back: GaussianScoreModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"mu":[0,0],"sigma":[[1,2],[2,1]]}"#;
        assert!(serde_json::from_str::<GaussianScoreModel>(bad).is_err());
    }
}

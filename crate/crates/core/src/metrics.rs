//! Distances between distributions and mixture-component fractions.
//!
//! `gaussian_w2` and `empirical_dist_to_ref` report the 2-Wasserstein distance
//! (unsquared). `frechet_distance` reports its square, following the FID
//! convention. `sliced_w2` is a distribution-free cross-check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{check_psd, sym_sqrt, symmetrize, trace_sqrt};
use crate::points::Points;
use crate::rng::{fill_normal, split, LabRng};
use crate::score::fit_gaussian;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    GaussianW2,
    Frechet,
    SlicedW2,
    ComponentFraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Fractions(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDetails {
    /// Human-readable estimator description, including squared/unsquared convention.
    pub estimator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projections: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub value: MetricValue,
    pub n_samples: Vec<usize>,
    pub details: EstimatorDetails,
}

impl MetricReport {
    pub fn dist_to_ref(value: f64, n: usize, ridge: f64) -> Self {
        Self {
            metric: MetricKind::GaussianW2,
            value: MetricValue::Scalar(value),
            n_samples: vec![n],
            details: EstimatorDetails {
                estimator: "2-Wasserstein (unsquared), Gaussian plug-in fit vs reference".into(),
                projections: None,
                ridge: Some(ridge),
            },
        }
    }

    pub fn frechet(value: f64, n_a: usize, n_b: usize, ridge: f64) -> Self {
        Self {
            metric: MetricKind::Frechet,
            value: MetricValue::Scalar(value),
            n_samples: vec![n_a, n_b],
            details: EstimatorDetails {
                estimator: "squared 2-Wasserstein between Gaussian fits".into(),
                projections: None,
                ridge: Some(ridge),
            },
        }
    }

    pub fn sliced(value: f64, n_a: usize, n_b: usize, projections: usize) -> Self {
        Self {
            metric: MetricKind::SlicedW2,
            value: MetricValue::Scalar(value),
            n_samples: vec![n_a, n_b],
            details: EstimatorDetails {
                estimator: "sliced 2-Wasserstein (unsquared), exact 1-D quantile coupling".into(),
                projections: Some(projections),
                ridge: None,
            },
        }
    }

    pub fn fractions(fractions: Vec<f64>, n: usize) -> Self {
        Self {
            metric: MetricKind::ComponentFraction,
            value: MetricValue::Fractions(fractions),
            n_samples: vec![n],
            details: EstimatorDetails {
                estimator: "nearest component mean, ties to lower index".into(),
                projections: None,
                ridge: None,
            },
        }
    }
}

/// Closed-form 2-Wasserstein distance between `N(mu1, s1)` and `N(mu2, s2)`.
pub fn gaussian_w2(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    for got in [mu2.len(), s1.nrows(), s2.nrows()] {
        if got != d {
            return Err(LabError::DimensionMismatch { expected: d, got });
        }
    }
    if s1.ncols() != d || s2.ncols() != d {
        return Err(LabError::InvalidParameter("covariances must be square".into()));
    }
    check_psd(s1)?;
    check_psd(s2)?;
    if mu1 == mu2 && s1 == s2 {
        return Ok(0.0);
    }
    let mean_term = (mu1 - mu2).norm_squared();
    let r = sym_sqrt(s1);
    let cross = symmetrize(&(&r * s2 * &r));
    let w2_sq = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt(&cross);
    Ok(w2_sq.max(0.0).sqrt())
}

/// Plug-in estimate of `W2(samples, N(ref_mu, ref_sigma))` from a Gaussian fit.
pub fn empirical_dist_to_ref(
    samples: &Points,
    ref_mu: &DVector<f64>,
    ref_sigma: &DMatrix<f64>,
    ridge: f64,
) -> Result<f64> {
    need_fit_samples(samples)?;
    let fit = fit_gaussian(samples, ridge)?;
    gaussian_w2(fit.mu(), fit.sigma(), ref_mu, ref_sigma)
}

/// Squared 2-Wasserstein distance between Gaussian fits of two sample sets.
pub fn frechet_distance(a: &Points, b: &Points, ridge: f64) -> Result<f64> {
    need_fit_samples(a)?;
    need_fit_samples(b)?;
    if a.dim() != b.dim() {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let fa = fit_gaussian(a, ridge)?;
    let fb = fit_gaussian(b, ridge)?;
    let w = gaussian_w2(fa.mu(), fa.sigma(), fb.mu(), fb.sigma())?;
    Ok(w * w)
}

fn need_fit_samples(p: &Points) -> Result<()> {
    if p.len() < p.dim() + 1 {
        return Err(LabError::TooFewSamples {
            needed: p.dim() + 1,
            got: p.len(),
        });
    }
    Ok(())
}

/// Squared 1-D W2 between two sorted empirical measures with uniform weights.
///
/// Integrates the squared quantile-function difference exactly by merging the
/// breakpoints `i/n` and `j/m`.
pub fn w2_sq_sorted_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        total += (next - u) * diff * diff;
        u = next;
        // Advance by integer comparison to avoid drift from float breakpoints.
        let ca = (i + 1) * m;
        let cb = (j + 1) * n;
        if ca <= cb {
            i += 1;
        }
        if cb <= ca {
            j += 1;
        }
    }
    total
}

/// Monte-Carlo sliced 2-Wasserstein distance over `n_projections` random
/// unit directions. Direction `p` comes from its own substream, so the value
/// does not depend on thread scheduling.
pub fn sliced_w2(a: &Points, b: &Points, n_projections: usize, rng: &mut LabRng) -> Result<f64> {
    if n_projections < 1 {
        return Err(LabError::InvalidParameter("sliced_w2 needs n_projections >= 1".into()));
    }
    if a.dim() != b.dim() {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.is_empty() || b.is_empty() {
        return Err(LabError::Empty("sliced_w2 sample set".into()));
    }
    let d = a.dim();
    let root = split(rng, "sliced-w2");
    let per_projection: Vec<f64> = (0..n_projections)
        .into_par_iter()
        .map(|p| {
            let mut prng = root.index("projection", p as u64).rng();
            let mut dir = vec![0.0; d];
            loop {
                fill_normal(&mut prng, &mut dir);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    dir.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
            let project = |pts: &Points| {
                let mut v: Vec<f64> = pts
                    .rows()
                    .map(|r| r.iter().zip(&dir).map(|(x, w)| x * w).sum())
                    .collect();
                v.sort_by(f64::total_cmp);
                v
            };
            w2_sq_sorted_1d(&project(a), &project(b))
        })
        .collect();
    let mean = per_projection.iter().sum::<f64>() / n_projections as f64;
    Ok(mean.max(0.0).sqrt())
}

/// Fraction of samples nearest to each component mean (Euclidean).
pub fn component_fractions(samples: &Points, means: &[Vec<f64>]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(LabError::Empty("component_fractions samples".into()));
    }
    let counts = component_counts(samples, means)?;
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Nearest-mean label of each sample; ties go to the lower index.
pub fn nearest_component(samples: &Points, means: &[Vec<f64>]) -> Result<Vec<usize>> {
    validate_means(samples.dim(), means)?;
    Ok(samples
        .rows()
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, m) in means.iter().enumerate() {
                let dk: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                if dk < best_d {
                    best = k;
                    best_d = dk;
                }
            }
            best
        })
        .collect())
}

fn component_counts(samples: &Points, means: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; means.len()];
    for k in nearest_component(samples, means)? {
        counts[k] += 1;
    }
    Ok(counts)
}

fn validate_means(dim: usize, means: &[Vec<f64>]) -> Result<()> {
    if means.len() < 2 {
        return Err(LabError::InvalidParameter("need at least 2 component means".into()));
    }
    for m in means {
        if m.len() != dim {
            return Err(LabError::DimensionMismatch { expected: dim, got: m.len() });
        }
    }
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            if means[i] == means[j] {
                return Err(LabError::InvalidParameter(format!("component means {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::score::GaussianScoreModel;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        let d = rows.len();
        DMatrix::from_fn(d, d, |i, j| rows[i][j])
    }

    #[test]
    fn analytic_w2_examples() {
        let s = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert_eq!(gaussian_w2(&v(&[0.0, 0.0]), &s, &v(&[0.0, 0.0]), &s).unwrap(), 0.0);
        let w = gaussian_w2(&v(&[1.0, 0.0]), &s, &v(&[0.0, 0.0]), &s).unwrap();
        assert!((w - 1.0).abs() < 1e-9, "{w}");
        let four = DMatrix::identity(2, 2) * 4.0;
        let w = gaussian_w2(&v(&[0.0, 0.0]), &four, &v(&[0.0, 0.0]), &DMatrix::identity(2, 2)).unwrap();
        assert!((w - 2f64.sqrt()).abs() < 1e-9, "{w}");
    }

    #[test]
    fn non_psd_rejected() {
        let bad = m(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let id = DMatrix::identity(2, 2);
        let z = v(&[0.0, 0.0]);
        assert!(gaussian_w2(&z, &bad, &z, &id).is_err());
        assert!(gaussian_w2(&z, &id, &z, &bad).is_err());
    }

    #[test]
    fn dist_to_ref_degenerate_samples() {
        let ref_sigma = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let pts = Points::from_rows(&vec![vec![0.0, 0.0]; 10]).unwrap();
        let d = empirical_dist_to_ref(&pts, &v(&[0.0, 0.0]), &ref_sigma, 1e-12).unwrap();
        assert!((d - 2.0).abs() < 1e-5, "{d}");
        let few = Points::from_rows(&vec![vec![0.0, 0.0]; 2]).unwrap();
        assert!(empirical_dist_to_ref(&few, &v(&[0.0, 0.0]), &ref_sigma, 1e-6).is_err());
    }

    #[test]
    fn dist_to_ref_null_check() {
        let r = GaussianScoreModel::paper_reference();
        let pts = r.sample(1_000_000, &mut rng_from_seed(1));
        let d = empirical_dist_to_ref(&pts, r.mu(), r.sigma(), 1e-6).unwrap();
        assert!(d < 0.01, "{d}");
    }

    #[test]
    fn translation_equivariance() {
        let r = GaussianScoreModel::paper_reference();
        let pts = r.sample(500, &mut rng_from_seed(2));
        let c = [3.5, -1.25];
        let shifted = Points::from_rows(&pts.rows().map(|x| vec![x[0] + c[0], x[1] + c[1]]).collect::<Vec<_>>()).unwrap();
        let mu = v(&[0.2, 0.1]);
        let d0 = empirical_dist_to_ref(&pts, &mu, r.sigma(), 1e-6).unwrap();
        let d1 = empirical_dist_to_ref(&shifted, &(mu + v(&c)), r.sigma(), 1e-6).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn frechet_identities() {
        let r = GaussianScoreModel::paper_reference();
        let a = r.sample(2000, &mut rng_from_seed(3));
        assert_eq!(frechet_distance(&a, &a, 1e-6).unwrap(), 0.0);
        let b = r.sample(2000, &mut rng_from_seed(4));
        let fa = fit_gaussian(&a, 1e-6).unwrap();
        let fb = fit_gaussian(&b, 1e-6).unwrap();
        let w = gaussian_w2(fa.mu(), fa.sigma(), fb.mu(), fb.sigma()).unwrap();
        assert!((frechet_distance(&a, &b, 1e-6).unwrap() - w * w).abs() < 1e-9);
    }

    #[test]
    fn frechet_mean_gap() {
        let std = GaussianScoreModel::standard(2);
        let a = std.sample(100_000, &mut rng_from_seed(5));
        let b0 = std.sample(100_000, &mut rng_from_seed(6));
        let b = Points::from_rows(&b0.rows().map(|x| vec![x[0] + 3.0, x[1]]).collect::<Vec<_>>()).unwrap();
        let f = frechet_distance(&a, &b, 1e-9).unwrap();
        assert!((f - 9.0).abs() < 0.1, "{f}");
    }

    #[test]
    fn one_d_w2_oracle() {
        // Equal sizes: mean squared sorted difference.
        assert!((w2_sq_sorted_1d(&[0.0, 1.0], &[1.0, 3.0]) - (1.0 + 4.0) / 2.0).abs() < 1e-15);
        // Unequal: [0,1] vs [0.5]: integral of (q_a - 0.5)^2 = 0.25.
        assert!((w2_sq_sorted_1d(&[0.0, 1.0], &[0.5]) - 0.25).abs() < 1e-15);
        // Three vs two points: breakpoints 1/3, 1/2, 2/3.
        let a = [0.0, 3.0, 6.0];
        let b = [1.0, 5.0];
        let oracle = (1.0 / 3.0) * 1.0 + (1.0 / 6.0) * 4.0 + (1.0 / 6.0) * 4.0 + (1.0 / 3.0) * 1.0;
        assert!((w2_sq_sorted_1d(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn sliced_basics() {
        let r = GaussianScoreModel::paper_reference();
        let a = r.sample(1000, &mut rng_from_seed(7));
        assert_eq!(sliced_w2(&a, &a, 16, &mut rng_from_seed(0)).unwrap(), 0.0);
        assert!(sliced_w2(&a, &a, 0, &mut rng_from_seed(0)).is_err());
        let x = sliced_w2(&a, &a.select(&[0, 1, 2]), 8, &mut rng_from_seed(9)).unwrap();
        let y = sliced_w2(&a, &a.select(&[0, 1, 2]), 8, &mut rng_from_seed(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sliced_null_check() {
        let r = GaussianScoreModel::paper_reference();
        let a = r.sample(100_000, &mut rng_from_seed(10));
        let b = r.sample(100_000, &mut rng_from_seed(11));
        let s = sliced_w2(&a, &b, 256, &mut rng_from_seed(12)).unwrap();
        assert!(s < 0.05, "{s}");
    }

    #[test]
    fn fractions_and_ties() {
        let means = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let at0 = Points::from_rows(&vec![vec![0.0, 0.0]; 5]).unwrap();
        assert_eq!(component_fractions(&at0, &means).unwrap(), vec![1.0, 0.0]);
        let mid = Points::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(component_fractions(&mid, &means).unwrap(), vec![1.0, 0.0]);
        assert!(component_fractions(&Points::new(2), &means).is_err());
        assert!(component_fractions(&mid, &means[..1]).is_err());
        assert!(component_fractions(&mid, &[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn balanced_mixture_fractions() {
        let mut rng = rng_from_seed(13);
        let mut rows = Vec::new();
        let std = GaussianScoreModel::standard(2);
        for c in [-4.0, 4.0] {
            for r in std.sample(5000, &mut rng).rows() {
                rows.push(vec![r[0] + c, r[1]]);
            }
        }
        let pts = Points::from_rows(&rows).unwrap();
        let f = component_fractions(&pts, &[vec![-4.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert!((f[0] - 0.5).abs() < 0.02 && (f[0] + f[1] - 1.0).abs() < 1e-9);
    }
}

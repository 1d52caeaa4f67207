//! Gaussian mixtures with closed-form smoothed densities and scores.
//!
//! Convolving a mixture with isotropic noise `N(0, σ²I)` gives another
//! mixture whose covariances are `Σ_k + σ²I`. Everything here evaluates that
//! smoothed mixture exactly: log-density, posterior responsibilities and the
//! score `∇_x log p_σ(x)`. These serve as the ground truth every trained
//! model is compared against.

mod catalog;
mod dataset;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, standard_normal_vec};

pub use catalog::{make_catalog, CatalogName};
pub use dataset::{disjoint_pair, DatasetHandle, ALLOWED_CARDINALITIES};

/// Largest condition number accepted for a smoothed covariance.
pub const MAX_CONDITION: f64 = 1e12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A finite mixture of full-covariance Gaussians.
///
/// Cholesky factors and eigenvalues of each covariance are computed once at
/// construction; the value is immutable afterwards and cheap to share.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    sample_factors: Vec<DMatrix<f64>>,
    eigen_bounds: Vec<(f64, f64)>,
}

/// JSON layout of a mixture: row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDoc {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::config(format!(
                "mixture needs equal, nonzero counts of weights ({k}), means ({}) and covariances ({})",
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be >= 1"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(
                "mixture weights must be finite and nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let mut sample_factors = Vec::with_capacity(k);
        let mut eigen_bounds = Vec::with_capacity(k);
        for (i, (mean, cov)) in means.iter().zip(&covariances).enumerate() {
            if mean.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::config(format!(
                    "component {i} has inconsistent dimension"
                )));
            }
            if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "component {i} has non-finite entries"
                )));
            }
            let asym = (cov - cov.transpose()).amax();
            if asym > 1e-12 {
                return Err(Error::config(format!(
                    "covariance {i} is not symmetric (max asymmetry {asym:e})"
                )));
            }
            let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
            let lo = eig.min();
            let hi = eig.max();
            if !(lo > 0.0) {
                return Err(Error::config(format!(
                    "covariance {i} is not positive definite (smallest eigenvalue {lo:e})"
                )));
            }
            let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
                Error::Degenerate(format!("covariance {i} has no Cholesky factor"))
            })?;
            sample_factors.push(chol.l());
            eigen_bounds.push((lo, hi));
        }
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
            sample_factors,
            eigen_bounds,
        })
    }

    pub fn from_doc(doc: &MixtureDoc) -> Result<Self> {
        let means = doc
            .means
            .iter()
            .map(|m| DVector::from_column_slice(m))
            .collect::<Vec<_>>();
        let mut covs = Vec::with_capacity(doc.covariances.len());
        for (i, rows) in doc.covariances.iter().enumerate() {
            if rows.len() != doc.dim || rows.iter().any(|r| r.len() != doc.dim) {
                return Err(Error::config(format!(
                    "covariance {i} is not {0}x{0}",
                    doc.dim
                )));
            }
            covs.push(DMatrix::from_fn(doc.dim, doc.dim, |r, c| rows[r][c]));
        }
        let mix = Self::new(doc.weights.clone(), means, covs)?;
        if mix.dim != doc.dim {
            return Err(Error::config(format!(
                "declared dim {} but means have dimension {}",
                doc.dim, mix.dim
            )));
        }
        Ok(mix)
    }

    pub fn to_doc(&self) -> MixtureDoc {
        MixtureDoc {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| {
                    (0..self.dim)
                        .map(|r| (0..self.dim).map(|col| c[(r, col)]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// The mixture `{w_k, μ_k, Σ_k + σ²I}`.
    pub fn smoothed_mixture(&self, sigma: f64) -> Result<GaussianMixture> {
        check_sigma(sigma)?;
        let covs = self
            .covariances
            .iter()
            .map(|c| smoothed_cov(c, sigma))
            .collect();
        GaussianMixture::new(self.weights.clone(), self.means.clone(), covs)
    }

    /// Factorizes every `Σ_k + σ²I` once for repeated evaluation at one σ.
    pub fn smoothed(&self, sigma: f64) -> Result<Smoothed<'_>> {
        check_sigma(sigma)?;
        let s2 = sigma * sigma;
        let mut factors = Vec::with_capacity(self.num_components());
        let mut log_norms = Vec::with_capacity(self.num_components());
        for (k, cov) in self.covariances.iter().enumerate() {
            let (lo, hi) = self.eigen_bounds[k];
            let cond = (hi + s2) / (lo + s2);
            if !(cond <= MAX_CONDITION) {
                return Err(Error::Degenerate(format!(
                    "component {k} smoothed covariance has condition number {cond:e} at sigma {sigma}"
                )));
            }
            let chol = Cholesky::new(smoothed_cov(cov, sigma)).ok_or_else(|| {
                Error::Degenerate(format!(
                    "component {k} smoothed covariance is not factorizable at sigma {sigma}"
                ))
            })?;
            let log_det = 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|v| v.ln())
                    .sum::<f64>();
            let log_w = self.weights[k].ln();
            log_norms.push(log_w - 0.5 * (self.dim as f64 * LN_2PI + log_det));
            factors.push(chol);
        }
        Ok(Smoothed {
            mixture: self,
            sigma,
            factors,
            log_norms,
        })
    }

    pub fn smoothed_log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.smoothed(sigma)?.log_density(x)
    }

    pub fn analytic_score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.smoothed(sigma)?.score(x)
    }

    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.smoothed(sigma)?.responsibilities(x)
    }

    /// Draws `n` points: component `k` with probability `w_k`, then `N(μ_k, Σ_k)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::config("sample size must be >= 1"));
        }
        let mut rng = rng_from_seed(seed);
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        let mut cumulative = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let last_positive = self
            .weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("weights sum to one");
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = unit.sample(&mut rng);
            let k = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(last_positive)
                .min(last_positive);
            let z = DVector::from_iterator(
                self.dim,
                (0..self.dim).map(|_| StandardNormal.sample(&mut rng)),
            );
            let x = &self.means[k] + &self.sample_factors[k] * z;
            points.push(x.iter().copied().collect());
        }
        Ok(points)
    }

    /// Smallest Mahalanobis distance from `x` to any component under `Σ_k + σ²I`.
    pub fn min_mahalanobis(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.smoothed(sigma)?.min_mahalanobis(x)
    }
}

/// A mixture with its covariances smoothed at one fixed σ and factorized.
#[derive(Debug, Clone)]
pub struct Smoothed<'a> {
    mixture: &'a GaussianMixture,
    sigma: f64,
    factors: Vec<Cholesky<f64, Dyn>>,
    log_norms: Vec<f64>,
}

impl Smoothed<'_> {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn check_point(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.mixture.dim {
            return Err(Error::config(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.mixture.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite point"));
        }
        Ok(DVector::from_column_slice(x))
    }

    /// Per component: `log w_k + log N(x; μ_k, Σ_k + σ²I)` and `(Σ_k + σ²I)⁻¹(μ_k − x)`.
    fn component_terms(&self, x: &DVector<f64>, want_pull: bool) -> (Vec<f64>, Vec<DVector<f64>>) {
        let mut logs = Vec::with_capacity(self.factors.len());
        let mut pulls = Vec::new();
        for (k, chol) in self.factors.iter().enumerate() {
            let diff = &self.mixture.means[k] - x;
            let l = chol.l_dirty();
            let mut z = diff.clone();
            l.solve_lower_triangular_mut(&mut z);
            logs.push(self.log_norms[k] - 0.5 * z.norm_squared());
            if want_pull {
                pulls.push(chol.solve(&diff));
            }
        }
        (logs, pulls)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let x = self.check_point(x)?;
        let (logs, _) = self.component_terms(&x, false);
        Ok(log_sum_exp(&logs))
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = self.check_point(x)?;
        let (logs, _) = self.component_terms(&x, false);
        Ok(normalize_log_weights(&logs))
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = self.check_point(x)?;
        let (logs, pulls) = self.component_terms(&x, true);
        let resp = normalize_log_weights(&logs);
        let mut out = DVector::zeros(self.mixture.dim);
        for (r, pull) in resp.iter().zip(&pulls) {
            if *r > 0.0 {
                out.axpy(*r, pull, 1.0);
            }
        }
        Ok(out.iter().copied().collect())
    }

    pub fn min_mahalanobis(&self, x: &[f64]) -> Result<f64> {
        let x = self.check_point(x)?;
        let mut best = f64::INFINITY;
        for (k, chol) in self.factors.iter().enumerate() {
            let mut z = &x - &self.mixture.means[k];
            chol.l_dirty().solve_lower_triangular_mut(&mut z);
            let mut d = z.norm();
            if !d.is_finite() {
                d = crate::metrics::scaled_norm(z.as_slice());
            }
            best = best.min(d);
        }
        Ok(best)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    Ok(())
}

fn smoothed_cov(cov: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let mut c = cov.clone();
    let s2 = sigma * sigma;
    for i in 0..c.nrows() {
        c[(i, i)] += s2;
    }
    c
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize_log_weights(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    let mut r: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = r.iter().sum();
    for v in &mut r {
        *v /= total;
    }
    r
}

/// `y = x0 + σε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn corrupt(x0: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let eps = standard_normal_vec(&mut rng_from_seed(seed), x0.len());
    Ok(x0.iter().zip(eps).map(|(x, e)| x + sigma * e).collect())
}

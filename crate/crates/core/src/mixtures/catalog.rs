//! The six benchmark mixtures.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GaussianMixture;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal_vec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CatalogName {
    Uniform,
    SharpCov,
    Spiral,
    HDUniform,
    HDSharpCov,
    ThinManifold,
}

impl CatalogName {
    pub const ALL: [CatalogName; 6] = [
        CatalogName::Uniform,
        CatalogName::SharpCov,
        CatalogName::Spiral,
        CatalogName::HDUniform,
        CatalogName::HDSharpCov,
        CatalogName::ThinManifold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CatalogName::Uniform => "Uniform",
            CatalogName::SharpCov => "SharpCov",
            CatalogName::Spiral => "Spiral",
            CatalogName::HDUniform => "HDUniform",
            CatalogName::HDSharpCov => "HDSharpCov",
            CatalogName::ThinManifold => "ThinManifold",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            CatalogName::Uniform | CatalogName::SharpCov | CatalogName::Spiral => 2,
            _ => HD_DIM,
        }
    }
}

impl fmt::Display for CatalogName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CatalogName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CatalogName::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown catalog `{s}` (expected one of Uniform, SharpCov, Spiral, HDUniform, HDSharpCov, ThinManifold)"
                ))
            })
    }
}

const HD_DIM: usize = 100;

/// Builds a catalog mixture. The seed only matters for HDSharpCov and
/// ThinManifold, whose orientations are random.
pub fn make_catalog(name: CatalogName, seed: u64) -> Result<GaussianMixture> {
    match name {
        CatalogName::Uniform => uniform(),
        CatalogName::SharpCov => sharp_cov(),
        CatalogName::Spiral => spiral(),
        CatalogName::HDUniform => hd_uniform(),
        CatalogName::HDSharpCov => hd_sharp_cov(seed),
        CatalogName::ThinManifold => thin_manifold(seed),
    }
}

fn equal_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Covariance with eigenvalues `(major, minor)` and major axis at `angle`.
fn rotated_2d(angle: f64, major: f64, minor: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    let xx = c * c * major + s * s * minor;
    let yy = s * s * major + c * c * minor;
    let xy = c * s * (major - minor);
    DMatrix::from_row_slice(2, 2, &[xx, xy, xy, yy])
}

fn pentagon(radius: f64) -> Vec<DVector<f64>> {
    (0..5)
        .map(|k| {
            let a = PI / 2.0 + 2.0 * PI * k as f64 / 5.0;
            DVector::from_vec(vec![radius * a.cos(), radius * a.sin()])
        })
        .collect()
}

fn uniform() -> Result<GaussianMixture> {
    let means = pentagon(2.0);
    let covs = vec![DMatrix::identity(2, 2) * 0.05; means.len()];
    GaussianMixture::new(equal_weights(5), means, covs)
}

fn sharp_cov() -> Result<GaussianMixture> {
    let centers = [(2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)];
    let means = centers
        .iter()
        .map(|&(x, y)| DVector::from_vec(vec![x, y]))
        .collect();
    let covs = (0..4)
        .map(|k| rotated_2d(k as f64 * PI / 4.0, 1.0, 0.01))
        .collect();
    GaussianMixture::new(equal_weights(4), means, covs)
}

fn spiral() -> Result<GaussianMixture> {
    let mut means = Vec::with_capacity(12);
    let mut covs = Vec::with_capacity(12);
    for i in 0..12 {
        let theta = 0.5 * PI + i as f64 * (2.5 * PI / 11.0);
        let r = 0.3 * theta;
        let (s, c) = theta.sin_cos();
        means.push(DVector::from_vec(vec![r * c, r * s]));
        // d/dθ of (0.3θ cos θ, 0.3θ sin θ)
        let tx = 0.3 * c - r * s;
        let ty = 0.3 * s + r * c;
        covs.push(rotated_2d(ty.atan2(tx), 0.05, 0.005));
    }
    GaussianMixture::new(equal_weights(12), means, covs)
}

fn hd_centers() -> Vec<DVector<f64>> {
    (0..5)
        .map(|i| {
            let mut m = DVector::zeros(HD_DIM);
            m[20 * i] = 4.0;
            m
        })
        .collect()
}

fn hd_uniform() -> Result<GaussianMixture> {
    let covs = vec![DMatrix::identity(HD_DIM, HD_DIM); 5];
    GaussianMixture::new(equal_weights(5), hd_centers(), covs)
}

/// Haar-distributed orthogonal matrix from the QR of a Gaussian matrix.
fn random_orthogonal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let g = DMatrix::from_column_slice(rows, cols, &standard_normal_vec(&mut rng, rows * cols));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `Q diag(λ) Qᵀ`, symmetrized to remove rounding asymmetry.
fn from_eigen(q: &DMatrix<f64>, eigenvalues: &[f64]) -> DMatrix<f64> {
    let scaled = q * DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
    let c = scaled * q.transpose();
    (&c + c.transpose()) * 0.5
}

fn hd_sharp_cov(seed: u64) -> Result<GaussianMixture> {
    let mut eig = vec![1.0; 10];
    eig.extend(std::iter::repeat_n(0.01, HD_DIM - 10));
    let covs = (0..5)
        .map(|k| {
            let q = random_orthogonal(HD_DIM, HD_DIM, derive_seed(seed, "hdsharpcov", k));
            from_eigen(&q, &eig)
        })
        .collect();
    GaussianMixture::new(equal_weights(5), hd_centers(), covs)
}

fn thin_manifold(seed: u64) -> Result<GaussianMixture> {
    let basis = random_orthogonal(HD_DIM, 2, derive_seed(seed, "thinmanifold", 0));
    let k = 4;
    let means = (0..k)
        .map(|i| {
            let a = PI / 2.0 + 2.0 * PI * i as f64 / k as f64;
            let offset = DVector::from_vec(vec![2.0 * a.cos(), 2.0 * a.sin()]);
            &basis * offset
        })
        .collect();
    let mut cov = &basis * basis.transpose();
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..HD_DIM {
        cov[(i, i)] += 0.001;
    }
    GaussianMixture::new(equal_weights(k), means, vec![cov; k])
}

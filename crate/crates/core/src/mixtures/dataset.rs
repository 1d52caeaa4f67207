use std::sync::Arc;

use super::{CatalogName, GaussianMixture};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Training-set sizes of the size sweep.
pub const ALLOWED_CARDINALITIES: [usize; 6] = [1, 10, 100, 1_000, 10_000, 100_000];

/// A seeded draw of `cardinality` points from a catalog mixture.
///
/// Points are generated sequentially from one seeded stream, so the dataset
/// with cardinality `n` is a prefix of every larger one with the same seed.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: CatalogName,
    pub seed: u64,
    pub cardinality: usize,
    pub points: Vec<Vec<f64>>,
    pub source_mixture: Arc<GaussianMixture>,
    /// Position of the first point inside the pool it was drawn for.
    pub pool_offset: usize,
}

impl DatasetHandle {
    pub fn generate(
        name: CatalogName,
        mixture: Arc<GaussianMixture>,
        cardinality: usize,
        seed: u64,
    ) -> Result<Self> {
        if cardinality == 0 {
            return Err(Error::config("dataset cardinality must be >= 1"));
        }
        if mixture.dim() != name.dim() {
            return Err(Error::config(format!(
                "{name} has dimension {}, mixture has {}",
                name.dim(),
                mixture.dim()
            )));
        }
        let points = mixture.sample(cardinality, seed)?;
        Ok(Self {
            name,
            seed,
            cardinality,
            points,
            source_mixture: mixture,
            pool_offset: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.source_mixture.dim()
    }

    /// Indices this dataset occupies in its pool.
    pub fn pool_indices(&self) -> std::ops::Range<usize> {
        self.pool_offset..self.pool_offset + self.cardinality
    }

    /// `<catalog>_<cardinality>_<seed>.csv`
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.csv", self.name, self.cardinality, self.seed)
    }
}

/// Two disjoint training sets of `size` points each, the halves of a
/// `2·size` pool. Each half is its own seeded stream (seeds derived from
/// `seed` with labels `A` and `B`); in pool coordinates A occupies
/// `[0, size)` and B `[size, 2·size)`.
pub fn disjoint_pair(
    name: CatalogName,
    mixture: Arc<GaussianMixture>,
    size: usize,
    seed: u64,
) -> Result<(DatasetHandle, DatasetHandle)> {
    let a = DatasetHandle::generate(name, mixture.clone(), size, derive_seed(seed, "subset", 0))?;
    let mut b = DatasetHandle::generate(name, mixture, size, derive_seed(seed, "subset", 1))?;
    b.pool_offset = size;
    Ok((a, b))
}

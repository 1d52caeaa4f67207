//! Trajectory comparison metrics, score error and distance-from-center bins.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixtures::{DatasetHandle, GaussianMixture};
use crate::sampler::{ScoreField, Trajectory, ZERO_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
    /// Set where the value was produced by a convention rather than computed.
    pub flags: Vec<bool>,
}

impl MetricSeries {
    fn new(name: &str, values: Vec<f64>, flags: Vec<bool>) -> Self {
        Self {
            name: name.to_string(),
            steps: (0..values.len()).collect(),
            values,
            flags,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    if d.is_finite() {
        return d;
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    scaled_norm(&diff)
}

pub fn norm(a: &[f64]) -> f64 {
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n.is_finite() {
        n
    } else {
        scaled_norm(a)
    }
}

/// Norm computed as `m·‖a/m‖` with `m = max |aᵢ|`, so squares of large but
/// finite entries do not overflow.
pub(crate) fn scaled_norm(a: &[f64]) -> f64 {
    let m = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * a.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    for (t, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(Error::config(format!(
                "dimension mismatch at step {t}: {} vs {}",
                x.len(),
                y.len()
            )));
        }
    }
    Ok(())
}

/// Per-step distance between two state sequences over their common range.
pub fn l2_series(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MetricSeries> {
    check_dims(a, b)?;
    let values: Vec<f64> = a.iter().zip(b).map(|(x, y)| euclidean(x, y)).collect();
    let flags = vec![false; values.len()];
    Ok(MetricSeries::new("l2_divergence", values, flags))
}

/// `‖x_A(t) − x_B(t)‖` per step; the shorter trajectory sets the range.
pub fn l2_divergence(a: &Trajectory, b: &Trajectory) -> Result<MetricSeries> {
    l2_series(&a.states, &b.states)
}

/// `1 − cos∠(a_t, b_t)` per step. A direction with norm below 1e-12 gives 1
/// and sets the flag.
pub fn cosine_divergence(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MetricSeries> {
    check_dims(a, b)?;
    let mut values = Vec::with_capacity(a.len().min(b.len()));
    let mut flags = Vec::with_capacity(values.capacity());
    for (x, y) in a.iter().zip(b) {
        let (nx, ny) = (norm(x), norm(y));
        if nx < ZERO_NORM || ny < ZERO_NORM {
            values.push(1.0);
            flags.push(true);
        } else {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let mut c = dot / (nx * ny);
            if !c.is_finite() {
                c = x.iter().zip(y).map(|(p, q)| (p / nx) * (q / ny)).sum();
            }
            let c = c.clamp(-1.0, 1.0);
            values.push(1.0 - c);
            flags.push(false);
        }
    }
    Ok(MetricSeries::new("cosine_divergence", values, flags))
}

/// Per-step distance from the state to the nearest reference point.
pub fn manifold_distance_points(traj: &Trajectory, points: &[Vec<f64>]) -> Result<MetricSeries> {
    if points.is_empty() {
        return Err(Error::config("reference set is empty"));
    }
    let dim = traj.states[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::config(
            "reference points and trajectory differ in dimension",
        ));
    }
    let values: Vec<f64> = traj
        .states
        .iter()
        .map(|x| {
            points
                .iter()
                .map(|p| euclidean(x, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let flags = vec![false; values.len()];
    Ok(MetricSeries::new("manifold_distance", values, flags))
}

pub fn manifold_distance(traj: &Trajectory, dataset: &DatasetHandle) -> Result<MetricSeries> {
    manifold_distance_points(traj, &dataset.points)
}

/// `‖s_field(x, σ) − ∇log p_σ(x)‖` for each point.
pub fn score_error(
    field: &dyn ScoreField,
    mixture: &GaussianMixture,
    points: &[Vec<f64>],
    sigma: f64,
) -> Result<Vec<f64>> {
    if field.dim() != mixture.dim() {
        return Err(Error::config("field and mixture differ in dimension"));
    }
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let dim = mixture.dim();
    let mut xs = Array2::zeros((points.len(), dim));
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::config(format!("point {i} has the wrong dimension")));
        }
        for (k, v) in p.iter().enumerate() {
            xs[[i, k]] = *v;
        }
    }
    let est = field.evaluate_batch(xs.view(), sigma)?.scores;
    let smoothed = mixture.smoothed(sigma)?;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let truth = smoothed.score(p)?;
            Ok(euclidean(
                &truth,
                est.row(i).as_slice().expect("contiguous"),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistanceBin {
    Close,
    Mid,
    Far,
}

impl DistanceBin {
    pub const ALL: [DistanceBin; 3] = [DistanceBin::Close, DistanceBin::Mid, DistanceBin::Far];
    /// Boundaries in Mahalanobis units.
    pub const CLOSE_BELOW: f64 = 1.0;
    pub const MID_BELOW: f64 = 3.0;

    pub fn from_distance(m: f64) -> Self {
        if m < Self::CLOSE_BELOW {
            DistanceBin::Close
        } else if m < Self::MID_BELOW {
            DistanceBin::Mid
        } else {
            DistanceBin::Far
        }
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            DistanceBin::Close => (0.0, Self::CLOSE_BELOW),
            DistanceBin::Mid => (Self::CLOSE_BELOW, Self::MID_BELOW),
            DistanceBin::Far => (Self::MID_BELOW, f64::INFINITY),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceBin::Close => "Close",
            DistanceBin::Mid => "Mid",
            DistanceBin::Far => "Far",
        }
    }
}

impl fmt::Display for DistanceBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Minimum Mahalanobis distance to any component under `Σ_k + σ²I`.
pub fn center_distances(
    points: &[Vec<f64>],
    mixture: &GaussianMixture,
    sigma: f64,
) -> Result<Vec<f64>> {
    let smoothed = mixture.smoothed(sigma)?;
    points.iter().map(|p| smoothed.min_mahalanobis(p)).collect()
}

pub fn bin_by_center_distance(
    points: &[Vec<f64>],
    mixture: &GaussianMixture,
    sigma: f64,
) -> Result<Vec<DistanceBin>> {
    Ok(center_distances(points, mixture, sigma)?
        .into_iter()
        .map(DistanceBin::from_distance)
        .collect())
}

/// Count, mean and quartiles of a sample. Quartiles interpolate linearly
/// between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(with = "nan_as_null")]
    pub mean: f64,
    #[serde(with = "nan_as_null")]
    pub median: f64,
    #[serde(with = "nan_as_null")]
    pub q1: f64,
    #[serde(with = "nan_as_null")]
    pub q3: f64,
}

/// Summaries of empty selections are NaN, which JSON writes as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    Summary {
        count: values.len(),
        mean,
        median: quantile_sorted(&sorted, 0.5),
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
    }
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Uniform bins over `[lo, hi]`; values outside are clamped into the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!(
            "histogram needs bins >= 1 and lo < hi, got {bins} bins over [{lo}, {hi}]"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for v in values.iter().filter(|v| !v.is_nan()) {
        let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        out[idx].count += 1;
    }
    Ok(out)
}

/// Range a metric's histogram spans: `[0, 2]` for cosine divergence,
/// `[0, max]` for distances.
pub fn natural_range(name: &str, values: &[f64]) -> (f64, f64) {
    if name == "cosine_divergence" {
        return (0.0, 2.0);
    }
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    (0.0, if max > 0.0 { max } else { 1.0 })
}

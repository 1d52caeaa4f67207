//! Experimental procedures built from the sampler and the metrics.
//!
//! Every probe returns a [`ProbeReport`]: raw per-sample records, summaries
//! over selections of those records, and the seeds and sources needed to
//! rerun it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    bin_by_center_distance, center_distances, cosine_divergence, euclidean, l2_divergence, norm,
    score_error, summarize, DistanceBin, Summary,
};
use crate::mixtures::{
    disjoint_pair, CatalogName, DatasetHandle, GaussianMixture, ALLOWED_CARDINALITIES,
};
use crate::objectives::{ObjectiveSpec, TrainedModel};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{
    denoise_batch, run_trajectories, AnalyticField, DenoisePolicy, FieldMetadata, NoiseSchedule,
    RunOptions, ScoreField, TrainedField, Trajectory,
};

/// Noise levels probed by default.
pub const DEFAULT_SIGMAS: [f64; 6] = [0.001, 0.01, 0.05, 0.1, 0.2, 1.0];
/// Evaluation points per probe and σ.
pub const DEFAULT_SAMPLES: usize = 200;
/// Levels at or below this count as low noise.
pub const LOW_NOISE_MAX: f64 = 0.05;
/// Largest sample pool a size sweep may draw.
pub const MAX_POOL: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Consistency,
    DenoisingPerformance,
    Attractor,
    ScoreAccuracy,
    TrajectoryComparison,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::Consistency,
        ProbeKind::DenoisingPerformance,
        ProbeKind::Attractor,
        ProbeKind::ScoreAccuracy,
        ProbeKind::TrajectoryComparison,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Consistency => "consistency",
            ProbeKind::DenoisingPerformance => "denoising_performance",
            ProbeKind::Attractor => "attractor",
            ProbeKind::ScoreAccuracy => "score_accuracy",
            ProbeKind::TrajectoryComparison => "trajectory_comparison",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown probe `{s}`")))
    }
}

/// One raw observation. `step` is `None` for per-sample scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub sigma: f64,
    pub sample: usize,
    pub metric: String,
    pub group: Option<String>,
    pub step: Option<usize>,
    pub is_final: bool,
    pub value: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSelector {
    /// Per-sample scalars.
    Scalar,
    /// The last step of every series.
    Final,
    At(usize),
    All,
}

/// Which records an aggregate summarizes; `None` fields match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub metric: String,
    pub sigma: Option<f64>,
    pub group: Option<String>,
    pub steps: StepSelector,
}

impl Selector {
    pub fn new(metric: &str, sigma: Option<f64>, group: Option<&str>, steps: StepSelector) -> Self {
        Self {
            metric: metric.to_string(),
            sigma,
            group: group.map(str::to_string),
            steps,
        }
    }

    pub fn matches(&self, r: &Record) -> bool {
        r.metric == self.metric
            && self.sigma.is_none_or(|s| s.to_bits() == r.sigma.to_bits())
            && self
                .group
                .as_ref()
                .is_none_or(|g| r.group.as_ref() == Some(g))
            && match self.steps {
                StepSelector::Scalar => r.step.is_none(),
                StepSelector::Final => r.step.is_some() && r.is_final,
                StepSelector::At(t) => r.step == Some(t),
                StepSelector::All => r.step.is_some(),
            }
    }

    pub fn values(&self, records: &[Record]) -> Vec<f64> {
        records
            .iter()
            .filter(|r| self.matches(r))
            .map(|r| r.value)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub selector: Selector,
    pub summary: Summary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub fields: Vec<FieldMetadata>,
    pub datasets: Vec<String>,
    pub policy: Option<DenoisePolicy>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub sample: usize,
    pub sigma: f64,
    pub first: Trajectory,
    pub second: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: ProbeKind,
    pub aggregates: Vec<Aggregate>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub records: Vec<Record>,
    #[serde(skip)]
    pub pairs: Vec<TrajectoryPair>,
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

impl ProbeReport {
    fn new(probe: ProbeKind, provenance: Provenance) -> Self {
        Self {
            probe,
            aggregates: Vec::new(),
            provenance,
            records: Vec::new(),
            pairs: Vec::new(),
        }
    }

    pub fn add_aggregate(&mut self, selector: Selector) {
        let summary = summarize(&selector.values(&self.records));
        self.aggregates.push(Aggregate { selector, summary });
    }

    pub fn find(&self, selector: &Selector) -> Option<&Summary> {
        self.aggregates
            .iter()
            .find(|a| &a.selector == selector)
            .map(|a| &a.summary)
    }

    /// Summary of any selection, computed from the raw records.
    pub fn summary(&self, selector: &Selector) -> Summary {
        summarize(&selector.values(&self.records))
    }

    /// Recomputes every aggregate from the records; errors on any bit mismatch.
    pub fn audit(&self) -> Result<()> {
        for a in &self.aggregates {
            let s = self.summary(&a.selector);
            let ok = s.count == a.summary.count
                && same(s.mean, a.summary.mean)
                && same(s.median, a.summary.median)
                && same(s.q1, a.summary.q1)
                && same(s.q3, a.summary.q3);
            if !ok {
                return Err(Error::numerical(format!(
                    "aggregate {:?} does not match its records",
                    a.selector
                )));
            }
        }
        Ok(())
    }

    /// Distinct σ values in record order.
    pub fn sigmas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|s| s.to_bits() == r.sigma.to_bits()) {
                out.push(r.sigma);
            }
        }
        out
    }

    fn push_scalar(
        &mut self,
        sigma: f64,
        sample: usize,
        metric: &str,
        group: Option<&str>,
        value: f64,
    ) {
        self.records.push(Record {
            sigma,
            sample,
            metric: metric.to_string(),
            group: group.map(str::to_string),
            step: None,
            is_final: false,
            value,
            flag: false,
        });
    }

    fn push_series(
        &mut self,
        sigma: f64,
        sample: usize,
        metric: &str,
        group: Option<&str>,
        values: &[f64],
        flags: &[bool],
    ) {
        let n = values.len();
        for (t, (v, f)) in values.iter().zip(flags).enumerate() {
            self.records.push(Record {
                sigma,
                sample,
                metric: metric.to_string(),
                group: group.map(str::to_string),
                step: Some(t),
                is_final: t + 1 == n,
                value: *v,
                flag: *f,
            });
        }
    }
}

pub fn noise_group(sigma: f64) -> &'static str {
    if sigma <= LOW_NOISE_MAX {
        "low"
    } else {
        "high"
    }
}

fn sample_seeds(seed: u64, label: &str, sigma: f64, n: usize) -> Vec<u64> {
    let base = derive_seed(seed, label, sigma.to_bits());
    (0..n as u64)
        .map(|i| derive_seed(base, "sample", i))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::config("sigma_list must not be empty"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || **s > 1.0) {
        return Err(Error::config(format!(
            "sigma_list entries must lie in (0, 1], found {s}"
        )));
    }
    Ok(())
}

/// Denoises the same corrupted inputs under two fields and compares the runs.
///
/// Records per sample: `l2_divergence` and `cosine_similarity` per step, and
/// the scalars `mean_l2_divergence`, `initial_norm` and
/// `final_l2_normalized` (final divergence over the corruption norm).
pub fn consistency_probe(
    field_a: &dyn ScoreField,
    field_b: &dyn ScoreField,
    eval_points: &[Vec<f64>],
    sigma_list: &[f64],
    policy: &DenoisePolicy,
    seed: u64,
) -> Result<ProbeReport> {
    if field_a.dim() != field_b.dim() {
        return Err(Error::config("fields differ in dimension"));
    }
    check_sigmas(sigma_list)?;
    let mut report = ProbeReport::new(
        ProbeKind::Consistency,
        Provenance {
            seed,
            sigmas: sigma_list.to_vec(),
            fields: vec![field_a.metadata(), field_b.metadata()],
            policy: Some(*policy),
            ..Provenance::default()
        },
    );
    for &sigma in sigma_list {
        let seeds = sample_seeds(seed, "corrupt", sigma, eval_points.len());
        let ta = denoise_batch(field_a, eval_points, sigma, policy, &seeds)?;
        let tb = denoise_batch(field_b, eval_points, sigma, policy, &seeds)?;
        let group = Some(noise_group(sigma));
        for (i, ((a, b), x)) in ta.iter().zip(&tb).zip(eval_points).enumerate() {
            let l2 = l2_divergence(a, b)?;
            let cos = cosine_divergence(&a.directions, &b.directions)?;
            let similarity: Vec<f64> = cos.values.iter().map(|v| 1.0 - v).collect();
            report.push_series(sigma, i, "l2_divergence", group, &l2.values, &l2.flags);
            report.push_series(
                sigma,
                i,
                "cosine_similarity",
                group,
                &similarity,
                &cos.flags,
            );
            let init = euclidean(&a.states[0], x);
            report.push_scalar(sigma, i, "mean_l2_divergence", group, mean(&l2.values));
            report.push_scalar(sigma, i, "initial_norm", group, init);
            report.push_scalar(
                sigma,
                i,
                "final_l2_normalized",
                group,
                l2.last().unwrap_or(0.0) / init,
            );
        }
        for (metric, steps) in [
            ("l2_divergence", StepSelector::Final),
            ("cosine_similarity", StepSelector::Final),
            ("mean_l2_divergence", StepSelector::Scalar),
            ("final_l2_normalized", StepSelector::Scalar),
            ("initial_norm", StepSelector::Scalar),
        ] {
            report.add_aggregate(Selector::new(metric, Some(sigma), None, steps));
        }
    }
    for group in ["low", "high"] {
        if sigma_list.iter().any(|s| noise_group(*s) == group) {
            report.add_aggregate(Selector::new(
                "mean_l2_divergence",
                None,
                Some(group),
                StepSelector::Scalar,
            ));
            report.add_aggregate(Selector::new(
                "cosine_similarity",
                None,
                Some(group),
                StepSelector::Final,
            ));
        }
    }
    Ok(report)
}

fn choose(points: &[Vec<f64>], n: usize, seed: u64) -> (Vec<Vec<f64>>, bool) {
    let mut rng = rng_from_seed(seed);
    if n <= points.len() {
        let idx = index::sample(&mut rng, points.len(), n);
        let mut idx: Vec<usize> = idx.into_iter().collect();
        idx.sort_unstable();
        (idx.into_iter().map(|i| points[i].clone()).collect(), false)
    } else {
        let picks = (0..n)
            .map(|_| points[rng.random_range(0..points.len())].clone())
            .collect();
        (picks, true)
    }
}

/// Distance to the clean point along denoising runs, for training points and
/// held-out points. Records `distance_to_clean` per step and the scalars
/// `initial_distance`, `final_distance` and `improvement` (1 − final/initial),
/// grouped `train` / `test`.
pub fn denoising_performance_probe(
    field: &dyn ScoreField,
    trainset: &DatasetHandle,
    testset: &DatasetHandle,
    sigma_list: &[f64],
    samples: usize,
    policy: &DenoisePolicy,
    seed: u64,
) -> Result<ProbeReport> {
    check_sigmas(sigma_list)?;
    if samples == 0 {
        return Err(Error::config("samples must be >= 1"));
    }
    let mut report = ProbeReport::new(
        ProbeKind::DenoisingPerformance,
        Provenance {
            seed,
            sigmas: sigma_list.to_vec(),
            fields: vec![field.metadata()],
            datasets: vec![trainset.file_name(), testset.file_name()],
            policy: Some(*policy),
            ..Provenance::default()
        },
    );
    let (train_pts, train_rep) = choose(&trainset.points, samples, derive_seed(seed, "select", 0));
    let (test_pts, test_rep) = choose(&testset.points, samples, derive_seed(seed, "select", 1));
    for (name, rep) in [("train", train_rep), ("test", test_rep)] {
        report
            .provenance
            .notes
            .insert(format!("{name}_with_replacement"), rep.to_string());
    }
    for &sigma in sigma_list {
        for (group, pts, label) in [
            ("train", &train_pts, "corrupt_train"),
            ("test", &test_pts, "corrupt_test"),
        ] {
            let seeds = sample_seeds(seed, label, sigma, pts.len());
            let trajs = denoise_batch(field, pts, sigma, policy, &seeds)?;
            for (i, (t, x)) in trajs.iter().zip(pts.iter()).enumerate() {
                let d: Vec<f64> = t.states.iter().map(|s| euclidean(s, x)).collect();
                let flags = vec![false; d.len()];
                report.push_series(sigma, i, "distance_to_clean", Some(group), &d, &flags);
                let (first, last) = (d[0], *d.last().expect("nonempty"));
                report.push_scalar(sigma, i, "initial_distance", Some(group), first);
                report.push_scalar(sigma, i, "final_distance", Some(group), last);
                report.push_scalar(sigma, i, "improvement", Some(group), 1.0 - last / first);
            }
            for metric in ["initial_distance", "final_distance", "improvement"] {
                report.add_aggregate(Selector::new(
                    metric,
                    Some(sigma),
                    Some(group),
                    StepSelector::Scalar,
                ));
            }
        }
    }
    Ok(report)
}

/// Corrupt, denoise, corrupt the output with a fresh draw, denoise again.
/// Records `d_x_o1`, `d_x_o2` and `d_o1_o2` per point.
pub fn attractor_probe(
    field: &dyn ScoreField,
    points: &[Vec<f64>],
    sigma: f64,
    policy: &DenoisePolicy,
    seed: u64,
) -> Result<ProbeReport> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be > 0, got {sigma}")));
    }
    let mut report = ProbeReport::new(
        ProbeKind::Attractor,
        Provenance {
            seed,
            sigmas: vec![sigma],
            fields: vec![field.metadata()],
            policy: Some(*policy),
            ..Provenance::default()
        },
    );
    let first = denoise_batch(
        field,
        points,
        sigma,
        policy,
        &sample_seeds(seed, "first", sigma, points.len()),
    )?;
    let o1: Vec<Vec<f64>> = first.iter().map(|t| t.final_state().to_vec()).collect();
    let second = denoise_batch(
        field,
        &o1,
        sigma,
        policy,
        &sample_seeds(seed, "second", sigma, points.len()),
    )?;
    for (i, ((x, a), b)) in points.iter().zip(&first).zip(&second).enumerate() {
        let (o1, o2) = (a.final_state(), b.final_state());
        report.push_scalar(sigma, i, "d_x_o1", None, euclidean(x, o1));
        report.push_scalar(sigma, i, "d_x_o2", None, euclidean(x, o2));
        report.push_scalar(sigma, i, "d_o1_o2", None, euclidean(o1, o2));
        report.pairs.push(TrajectoryPair {
            sample: i,
            sigma,
            first: a.clone(),
            second: b.clone(),
        });
    }
    for metric in ["d_x_o1", "d_x_o2", "d_o1_o2"] {
        report.add_aggregate(Selector::new(
            metric,
            Some(sigma),
            None,
            StepSelector::Scalar,
        ));
    }
    Ok(report)
}

/// Score error against the analytic score on points drawn from the
/// σ-smoothed mixture, binned by distance from the component centers.
/// Records `score_error`, `true_score_norm` and `center_distance`, each
/// grouped by bin label.
pub fn score_accuracy_probe(
    field: &dyn ScoreField,
    mixture: &GaussianMixture,
    n_eval: usize,
    sigma: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if n_eval == 0 {
        return Err(Error::config("n_eval must be >= 1"));
    }
    let points = mixture
        .smoothed_mixture(sigma)?
        .sample(n_eval, derive_seed(seed, "eval", sigma.to_bits()))?;
    let mut report = ProbeReport::new(
        ProbeKind::ScoreAccuracy,
        Provenance {
            seed,
            sigmas: vec![sigma],
            fields: vec![field.metadata()],
            ..Provenance::default()
        },
    );
    let errors = score_error(field, mixture, &points, sigma)?;
    let dist = center_distances(&points, mixture, sigma)?;
    let smoothed = mixture.smoothed(sigma)?;
    for (i, ((p, e), m)) in points.iter().zip(&errors).zip(&dist).enumerate() {
        let bin = Some(DistanceBin::from_distance(*m).as_str());
        report.push_scalar(sigma, i, "score_error", bin, *e);
        report.push_scalar(sigma, i, "true_score_norm", bin, norm(&smoothed.score(p)?));
        report.push_scalar(sigma, i, "center_distance", bin, *m);
    }
    for bin in DistanceBin::ALL {
        for metric in ["score_error", "true_score_norm"] {
            report.add_aggregate(Selector::new(
                metric,
                Some(sigma),
                Some(bin.as_str()),
                StepSelector::Scalar,
            ));
        }
    }
    report.add_aggregate(Selector::new(
        "score_error",
        Some(sigma),
        None,
        StepSelector::Scalar,
    ));
    Ok(report)
}

/// First step at which a path has covered half of its total length.
pub fn midway_step(states: &[Vec<f64>]) -> usize {
    let legs: Vec<f64> = states.windows(2).map(|w| euclidean(&w[0], &w[1])).collect();
    let half = 0.5 * legs.iter().sum::<f64>();
    let mut covered = 0.0;
    for (t, leg) in legs.iter().enumerate() {
        covered += leg;
        if covered >= half {
            return t + 1;
        }
    }
    0
}

/// Runs the field and the analytic score from the same inits with the same
/// settings. Records the per-step `l2_divergence` between the paths and the
/// scalars `mid_divergence` (where the analytic path is halfway along its
/// length, see [`midway_step`]), `end_divergence` and `end_center_distance`
/// (at the schedule's last σ, grouped by bin).
pub fn trajectory_comparison_probe(
    field: &dyn ScoreField,
    mixture: Arc<GaussianMixture>,
    inits: &[Vec<f64>],
    schedule: &NoiseSchedule,
    options: &RunOptions,
) -> Result<ProbeReport> {
    if inits.is_empty() {
        return Err(Error::config("inits must not be empty"));
    }
    let oracle = AnalyticField::new(mixture.clone());
    let learned = run_trajectories(field, inits, schedule, options, None)?;
    let truth = run_trajectories(&oracle, inits, schedule, options, None)?;
    let sigma_end = *schedule.sigmas.last().expect("nonempty schedule");
    let sigma0 = schedule.sigmas[0];
    let mut report = ProbeReport::new(
        ProbeKind::TrajectoryComparison,
        Provenance {
            sigmas: schedule.sigmas.clone(),
            fields: vec![field.metadata(), oracle.metadata()],
            ..Provenance::default()
        },
    );
    report.provenance.notes.insert(
        "run_options".into(),
        serde_json::to_string(options).expect("serializable"),
    );
    let ends: Vec<Vec<f64>> = learned.iter().map(|t| t.final_state().to_vec()).collect();
    let end_dist = center_distances(&ends, &mixture, sigma_end)?;
    for (i, (a, b)) in learned.iter().zip(&truth).enumerate() {
        let l2 = l2_divergence(a, b)?;
        report.push_series(sigma0, i, "l2_divergence", None, &l2.values, &l2.flags);
        let mid = midway_step(&b.states).min(l2.len() - 1);
        report.push_scalar(sigma0, i, "mid_step", None, mid as f64);
        report.push_scalar(sigma0, i, "mid_divergence", None, l2.values[mid]);
        report.push_scalar(sigma0, i, "end_divergence", None, l2.last().unwrap_or(0.0));
        let bin = DistanceBin::from_distance(end_dist[i]);
        report.push_scalar(
            sigma0,
            i,
            "end_center_distance",
            Some(bin.as_str()),
            end_dist[i],
        );
        report.pairs.push(TrajectoryPair {
            sample: i,
            sigma: sigma0,
            first: a.clone(),
            second: b.clone(),
        });
    }
    for metric in ["mid_divergence", "end_divergence", "end_center_distance"] {
        report.add_aggregate(Selector::new(metric, None, None, StepSelector::Scalar));
    }
    Ok(report)
}

/// `n` draws from the σ-smoothed mixture that fall in its Far bin, in draw
/// order. Gives up after `1000·n` candidates.
pub fn far_inits(
    mixture: &GaussianMixture,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let smoothed = mixture.smoothed_mixture(sigma)?;
    let batch = (20 * n).max(1000);
    let mut out = Vec::with_capacity(n);
    let mut round = 0u64;
    while out.len() < n {
        if round as usize * batch >= 1000 * n.max(1) {
            return Err(Error::Degenerate(format!(
                "only {} of {n} Far-bin draws at sigma {sigma}",
                out.len()
            )));
        }
        let draws = smoothed.sample(batch, derive_seed(seed, "far", round))?;
        let bins = bin_by_center_distance(&draws, mixture, sigma)?;
        out.extend(
            draws
                .into_iter()
                .zip(bins)
                .filter(|(_, b)| *b == DistanceBin::Far)
                .map(|(p, _)| p)
                .take(n - out.len()),
        );
        round += 1;
    }
    Ok(out)
}

/// Fraction of trajectories whose endpoint fell in the Close bin.
pub fn close_fraction(report: &ProbeReport) -> f64 {
    let all = Selector::new("end_center_distance", None, None, StepSelector::Scalar);
    let close = Selector::new(
        "end_center_distance",
        None,
        Some("Close"),
        StepSelector::Scalar,
    );
    report.summary(&close).count as f64 / report.summary(&all).count as f64
}

/// Probe settings shared by every size in a sweep.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub objective: ObjectiveSpec,
    pub catalog: CatalogName,
    pub mixture: Arc<GaussianMixture>,
    pub sizes: Vec<usize>,
    pub probes: Vec<ProbeKind>,
    pub sigma_list: Vec<f64>,
    pub samples: usize,
    pub policy: DenoisePolicy,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SizeReport {
    pub size: usize,
    pub subset_a: DatasetHandle,
    pub subset_b: DatasetHandle,
    pub testset: DatasetHandle,
    pub reports: Vec<ProbeReport>,
}

/// Trains a pair of models per size on disjoint subsets and probes them.
/// `trainer` produces (or loads) a model for a dataset.
pub fn train_size_sweep(
    spec: &SweepSpec,
    trainer: &mut dyn FnMut(&ObjectiveSpec, &DatasetHandle) -> Result<TrainedModel>,
) -> Result<Vec<SizeReport>> {
    for &size in &spec.sizes {
        if !ALLOWED_CARDINALITIES.contains(&size) {
            return Err(Error::config(format!(
                "size {size} is not one of {ALLOWED_CARDINALITIES:?}"
            )));
        }
        if 2 * size > MAX_POOL {
            return Err(Error::config(format!(
                "size {size} needs a pool of {} points, more than the {MAX_POOL} available",
                2 * size
            )));
        }
    }
    let mut out = Vec::with_capacity(spec.sizes.len());
    for &size in &spec.sizes {
        let (a, b) = disjoint_pair(
            spec.catalog,
            spec.mixture.clone(),
            size,
            derive_seed(spec.seed, "pool", size as u64),
        )?;
        let testset = DatasetHandle::generate(
            spec.catalog,
            spec.mixture.clone(),
            spec.samples.max(1),
            derive_seed(spec.seed, "test", size as u64),
        )?;
        let model_a = trainer(&spec.objective, &a)?;
        let model_b = trainer(&spec.objective, &b)?;
        let field_a = TrainedField::from_model(&model_a, a.file_name());
        let field_b = TrainedField::from_model(&model_b, b.file_name());
        let probe_seed = derive_seed(spec.seed, "probe", size as u64);
        let mut reports = Vec::new();
        for &probe in &spec.probes {
            let mut report = match probe {
                ProbeKind::Consistency => consistency_probe(
                    &field_a,
                    &field_b,
                    &testset.points,
                    &spec.sigma_list,
                    &spec.policy,
                    probe_seed,
                )?,
                ProbeKind::DenoisingPerformance => denoising_performance_probe(
                    &field_a,
                    &a,
                    &testset,
                    &spec.sigma_list,
                    spec.samples,
                    &spec.policy,
                    probe_seed,
                )?,
                ProbeKind::Attractor => {
                    let mut merged: Option<ProbeReport> = None;
                    for &sigma in &spec.sigma_list {
                        let r = attractor_probe(
                            &field_a,
                            &testset.points,
                            sigma,
                            &spec.policy,
                            probe_seed,
                        )?;
                        merged = Some(match merged {
                            None => r,
                            Some(mut m) => {
                                m.records.extend(r.records);
                                m.aggregates.extend(r.aggregates);
                                m.pairs.extend(r.pairs);
                                m.provenance.sigmas.push(sigma);
                                m
                            }
                        });
                    }
                    merged.expect("nonempty sigma list")
                }
                ProbeKind::ScoreAccuracy => {
                    let mut merged: Option<ProbeReport> = None;
                    for &sigma in &spec.sigma_list {
                        let r = score_accuracy_probe(
                            &field_a,
                            &spec.mixture,
                            spec.samples,
                            sigma,
                            probe_seed,
                        )?;
                        merged = Some(match merged {
                            None => r,
                            Some(mut m) => {
                                m.records.extend(r.records);
                                m.aggregates.extend(r.aggregates);
                                m.provenance.sigmas.push(sigma);
                                m
                            }
                        });
                    }
                    merged.expect("nonempty sigma list")
                }
                ProbeKind::TrajectoryComparison => {
                    let start = spec.sigma_list.iter().copied().fold(0.0, f64::max);
                    let schedule = spec.policy.schedule(start)?;
                    let inits = spec
                        .mixture
                        .smoothed_mixture(start)?
                        .sample(spec.samples, derive_seed(probe_seed, "inits", 0))?;
                    trajectory_comparison_probe(
                        &field_a,
                        spec.mixture.clone(),
                        &inits,
                        &schedule,
                        &spec.policy.run_options(),
                    )?
                }
            };
            report.provenance.seed = probe_seed;
            report.provenance.datasets = vec![a.file_name(), b.file_name(), testset.file_name()];
            reports.push(report);
        }
        out.push(SizeReport {
            size,
            subset_a: a,
            subset_b: b,
            testset,
            reports,
        });
    }
    Ok(out)
}

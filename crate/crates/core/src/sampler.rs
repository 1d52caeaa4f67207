//! Reverse-diffusion integration over a common score-field interface.
//!
//! The update is `x ← x + h·s(x, σ) + γ·z` with `h = η·σ²` and `γ = κ·σ`.
//! It ascends the score. The opposite sign is available through [`Sign::Literal`].

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixtures::{corrupt, GaussianMixture};
use crate::models::NetworkParams;
use crate::objectives::{ObjectiveKind, TrainedModel};
use crate::rng::{rng_from_seed, standard_normal_vec, SeededRng};

/// Lowest σ a trajectory is ever conditioned on.
pub const SIGMA_FLOOR_MIN: f64 = 0.001;
/// Largest σ the networks are conditioned for.
pub const SIGMA_MAX: f64 = 1.0;
/// Norm below which a direction counts as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    AnalyticOracle,
    Reconstruction,
    #[serde(rename = "NCSN")]
    Ncsn,
    #[serde(rename = "SSM")]
    Ssm,
    /// Hand-written fields (tests, idealized attractors).
    Custom,
}

impl From<ObjectiveKind> for FieldKind {
    fn from(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::Reconstruction => FieldKind::Reconstruction,
            ObjectiveKind::Ncsn => FieldKind::Ncsn,
            ObjectiveKind::Ssm => FieldKind::Ssm,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub objective: Option<String>,
    pub seed: Option<u64>,
    pub training_size: Option<usize>,
    pub source: String,
}

/// Scores and denoising directions for a batch of points at one σ.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub scores: Array2<f64>,
    pub directions: Array2<f64>,
}

impl FieldEval {
    pub fn from_scores(scores: Array2<f64>, sigma: f64) -> Self {
        let directions = &scores * (sigma * sigma);
        Self { scores, directions }
    }
}

/// A vector field usable by the sampler: `d(x, σ) = σ²·s(x, σ)`.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;
    fn kind(&self) -> FieldKind;

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata::default()
    }

    /// Evaluates every row of `xs` at the same σ.
    fn evaluate_batch(&self, xs: ArrayView2<f64>, sigma: f64) -> Result<FieldEval>;

    fn evaluate(&self, x: &[f64], sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let row = row_matrix(x, self.dim())?;
        let eval = self.evaluate_batch(row.view(), sigma)?;
        Ok((eval.scores.row(0).to_vec(), eval.directions.row(0).to_vec()))
    }

    fn score_estimate(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.evaluate(x, sigma)?.0)
    }

    fn denoise_direction(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.evaluate(x, sigma)?.1)
    }
}

fn row_matrix(x: &[f64], dim: usize) -> Result<Array2<f64>> {
    if x.len() != dim {
        return Err(Error::config(format!(
            "point has dimension {}, field expects {dim}",
            x.len()
        )));
    }
    Ok(Array2::from_shape_vec((1, dim), x.to_vec()).expect("shape"))
}

fn check_batch(xs: &ArrayView2<f64>, dim: usize, sigma: f64) -> Result<()> {
    if xs.ncols() != dim {
        return Err(Error::config(format!(
            "points have dimension {}, field expects {dim}",
            xs.ncols()
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// Exact score of the σ-smoothed mixture.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    mixture: Arc<GaussianMixture>,
    source: String,
}

impl AnalyticField {
    pub fn new(mixture: Arc<GaussianMixture>) -> Self {
        Self {
            mixture,
            source: String::from("analytic"),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl ScoreField for AnalyticField {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn kind(&self) -> FieldKind {
        FieldKind::AnalyticOracle
    }

    fn metadata(&self) -> FieldMetadata {
        FieldMetadata {
            source: self.source.clone(),
            ..FieldMetadata::default()
        }
    }

    fn evaluate_batch(&self, xs: ArrayView2<f64>, sigma: f64) -> Result<FieldEval> {
        check_batch(&xs, self.dim(), sigma)?;
        let smoothed = self.mixture.smoothed(sigma)?;
        let mut scores = Array2::zeros(xs.raw_dim());
        for (row, mut out) in xs.axis_iter(Axis(0)).zip(scores.axis_iter_mut(Axis(0))) {
            let x = row.to_vec();
            for (o, v) in out.iter_mut().zip(smoothed.score(&x)?) {
                *o = v;
            }
        }
        Ok(FieldEval::from_scores(scores, sigma))
    }
}

/// A trained network read according to its objective.
#[derive(Debug, Clone)]
pub struct TrainedField {
    objective: ObjectiveKind,
    params: Arc<NetworkParams>,
    metadata: FieldMetadata,
}

impl TrainedField {
    pub fn new(
        objective: ObjectiveKind,
        params: Arc<NetworkParams>,
        metadata: FieldMetadata,
    ) -> Self {
        Self {
            objective,
            params,
            metadata,
        }
    }

    pub fn from_model(model: &TrainedModel, source: impl Into<String>) -> Self {
        Self::new(
            model.objective.kind,
            Arc::new(model.params.clone()),
            FieldMetadata {
                objective: Some(model.objective.kind.to_string()),
                seed: Some(model.config.seed),
                training_size: Some(model.training_size),
                source: source.into(),
            },
        )
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn objective(&self) -> ObjectiveKind {
        self.objective
    }
}

impl ScoreField for TrainedField {
    fn dim(&self) -> usize {
        self.params.data_dim()
    }

    fn kind(&self) -> FieldKind {
        self.objective.into()
    }

    fn metadata(&self) -> FieldMetadata {
        self.metadata.clone()
    }

    fn evaluate_batch(&self, xs: ArrayView2<f64>, sigma: f64) -> Result<FieldEval> {
        check_batch(&xs, self.dim(), sigma)?;
        let sigmas = vec![sigma; xs.nrows()];
        let out = self.params.forward_batch(xs, &sigmas)?;
        match self.objective {
            ObjectiveKind::Reconstruction => {
                if !(sigma > 0.0) {
                    return Err(Error::config(
                        "a reconstruction model has no score at sigma 0",
                    ));
                }
                let directions = out - xs;
                let scores = &directions / (sigma * sigma);
                Ok(FieldEval { scores, directions })
            }
            ObjectiveKind::Ncsn | ObjectiveKind::Ssm => Ok(FieldEval::from_scores(out, sigma)),
        }
    }
}

/// The zero vector field.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl ScoreField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> FieldKind {
        FieldKind::Custom
    }

    fn evaluate_batch(&self, xs: ArrayView2<f64>, sigma: f64) -> Result<FieldEval> {
        check_batch(&xs, self.dim, sigma)?;
        Ok(FieldEval::from_scores(Array2::zeros(xs.raw_dim()), sigma))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
    pub eta: f64,
    pub kappa: f64,
}

impl NoiseSchedule {
    fn validated(sigmas: Vec<f64>, eta: f64, kappa: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::config(format!("eta must be > 0, got {eta}")));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::config(format!("kappa must be >= 0, got {kappa}")));
        }
        if sigmas[0] > SIGMA_MAX {
            return Err(Error::config(format!(
                "schedule starts at sigma {} above the conditioning range (max {SIGMA_MAX})",
                sigmas[0]
            )));
        }
        Ok(Self { sigmas, eta, kappa })
    }

    /// Geometric schedule from `sigma_start` down to `sigma_end`.
    pub fn make(
        sigma_start: f64,
        sigma_end: f64,
        steps: usize,
        eta: f64,
        kappa: f64,
    ) -> Result<Self> {
        if !(sigma_start > sigma_end) || !(sigma_end > 0.0) {
            return Err(Error::config(format!(
                "need sigma_start > sigma_end > 0, got {sigma_start} and {sigma_end}"
            )));
        }
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let sigmas = if steps == 1 {
            vec![sigma_start]
        } else {
            let ratio = sigma_end / sigma_start;
            let last = (steps - 1) as f64;
            (0..steps)
                .map(|t| sigma_start * ratio.powf(t as f64 / last))
                .collect()
        };
        Self::validated(sigmas, eta, kappa)
    }

    /// A single σ held for the whole run.
    pub fn constant(sigma: f64, eta: f64, kappa: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::config(format!("sigma must be > 0, got {sigma}")));
        }
        Self::validated(vec![sigma], eta, kappa)
    }

    /// σ used at step `t`; the last entry is held past the end.
    pub fn sigma_at(&self, t: usize) -> f64 {
        self.sigmas[t.min(self.sigmas.len() - 1)]
    }

    pub fn h_at(&self, t: usize) -> f64 {
        let s = self.sigma_at(t);
        self.eta * s * s
    }

    pub fn gamma_at(&self, t: usize) -> f64 {
        self.kappa * self.sigma_at(t)
    }
}

pub fn make_schedule(
    sigma_start: f64,
    sigma_end: f64,
    steps: usize,
    eta: f64,
    kappa: f64,
) -> Result<NoiseSchedule> {
    NoiseSchedule::make(sigma_start, sigma_end, steps, eta, kappa)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sign {
    /// `x + h·s`: moves up the density.
    #[default]
    ScoreAscent,
    /// `x − h·s`, as the update is literally written with `d = −s`.
    Literal,
}

impl Sign {
    fn factor(self) -> f64 {
        match self {
            Sign::ScoreAscent => 1.0,
            Sign::Literal => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConvergenceMode {
    #[default]
    Absolute,
    /// Threshold `conv_tol·σ_t`.
    SigmaScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub max_steps: usize,
    pub conv_tol: f64,
    pub conv_mode: ConvergenceMode,
    pub sign: Sign,
}

impl RunOptions {
    pub fn new(max_steps: usize, conv_tol: f64) -> Self {
        Self {
            max_steps,
            conv_tol,
            conv_mode: ConvergenceMode::Absolute,
            sign: Sign::ScoreAscent,
        }
    }

    fn threshold(&self, sigma: f64) -> f64 {
        match self.conv_mode {
            ConvergenceMode::Absolute => self.conv_tol,
            ConvergenceMode::SigmaScaled => self.conv_tol * sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub stop_reason: StopReason,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.directions.len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }
}

/// One update `x + sign·h·s(x, σ) + γ·z`.
pub fn step(
    field: &dyn ScoreField,
    x: &[f64],
    sigma_t: f64,
    h_t: f64,
    gamma_t: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    step_with_sign(field, x, sigma_t, h_t, gamma_t, z, Sign::ScoreAscent)
}

pub fn step_with_sign(
    field: &dyn ScoreField,
    x: &[f64],
    sigma_t: f64,
    h_t: f64,
    gamma_t: f64,
    z: &[f64],
    sign: Sign,
) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::config(format!(
            "step needs sigma > 0, got {sigma_t}"
        )));
    }
    if z.len() != x.len() {
        return Err(Error::config("noise and point dimensions differ"));
    }
    let score = field.score_estimate(x, sigma_t)?;
    check_finite(&score, x, sigma_t)?;
    let h = sign.factor() * h_t;
    Ok(x.iter()
        .zip(&score)
        .zip(z)
        .map(|((xi, si), zi)| xi + h * si + gamma_t * zi)
        .collect())
}

fn check_finite(score: &[f64], x: &[f64], sigma: f64) -> Result<()> {
    if score.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "non-finite score at x = {x:?}, sigma = {sigma}"
        )))
    }
}

/// Integrates one trajectory. `seed = None` runs deterministically (γ = 0).
pub fn run_trajectory(
    field: &dyn ScoreField,
    x_init: &[f64],
    schedule: &NoiseSchedule,
    options: &RunOptions,
    seed: Option<u64>,
) -> Result<Trajectory> {
    let seeds = seed.map(|s| vec![s]);
    let mut out = run_trajectories(
        field,
        &[x_init.to_vec()],
        schedule,
        options,
        seeds.as_deref(),
    )?;
    Ok(out.pop().expect("one trajectory"))
}

/// Integrates several trajectories in lockstep, evaluating the field once per
/// step for all still-running points. Each trajectory stops on its own.
/// With `seeds`, trajectory `i` draws its noise from `seeds[i]`.
pub fn run_trajectories(
    field: &dyn ScoreField,
    inits: &[Vec<f64>],
    schedule: &NoiseSchedule,
    options: &RunOptions,
    seeds: Option<&[u64]>,
) -> Result<Vec<Trajectory>> {
    if options.max_steps == 0 {
        return Err(Error::config("max_steps must be >= 1"));
    }
    if !(options.conv_tol >= 0.0) {
        return Err(Error::config("conv_tol must be >= 0"));
    }
    let dim = field.dim();
    for x in inits {
        if x.len() != dim {
            return Err(Error::config(format!(
                "initial point has dimension {}, field expects {dim}",
                x.len()
            )));
        }
    }
    if let Some(s) = seeds {
        if s.len() != inits.len() {
            return Err(Error::config("one seed per trajectory required"));
        }
    }
    let mut rngs: Option<Vec<SeededRng>> =
        seeds.map(|s| s.iter().map(|&v| rng_from_seed(v)).collect());
    let mut trajs: Vec<Trajectory> = inits
        .iter()
        .map(|x| Trajectory {
            states: vec![x.clone()],
            sigmas: Vec::new(),
            directions: Vec::new(),
            stop_reason: StopReason::MaxSteps,
        })
        .collect();
    let mut active: Vec<usize> = (0..inits.len()).collect();
    let sign = options.sign.factor();

    for t in 0..options.max_steps {
        if active.is_empty() {
            break;
        }
        let sigma = schedule.sigma_at(t);
        let h = sign * schedule.h_at(t);
        let gamma = if rngs.is_some() {
            schedule.gamma_at(t)
        } else {
            0.0
        };
        let mut xs = Array2::zeros((active.len(), dim));
        for (r, &i) in active.iter().enumerate() {
            for (k, v) in trajs[i].final_state().iter().enumerate() {
                xs[[r, k]] = *v;
            }
        }
        let eval = field.evaluate_batch(xs.view(), sigma)?;
        let threshold = options.threshold(sigma);
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let x = xs.row(r);
            let score = eval.scores.row(r);
            if score.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite score at step {t}, x = {:?}, sigma = {sigma}",
                    x.to_vec()
                )));
            }
            let z = match rngs.as_mut() {
                Some(r) => standard_normal_vec(&mut r[i], dim),
                None => vec![0.0; dim],
            };
            let next: Vec<f64> = x
                .iter()
                .zip(score.iter())
                .zip(&z)
                .map(|((xi, si), zi)| xi + h * si + gamma * zi)
                .collect();
            let moved = x
                .iter()
                .zip(&next)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt();
            let traj = &mut trajs[i];
            traj.sigmas.push(sigma);
            traj.directions.push(eval.directions.row(r).to_vec());
            traj.states.push(next);
            if moved < threshold {
                traj.stop_reason = StopReason::Converged;
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(trajs)
}

/// Settings for local denoising runs started from a corrupted clean point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoisePolicy {
    pub steps: usize,
    pub eta: f64,
    pub max_steps: usize,
    pub conv_tol: f64,
    pub conv_mode: ConvergenceMode,
    pub sign: Sign,
}

impl DenoisePolicy {
    /// Defaults for a `dim`-dimensional problem.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            steps: 200,
            eta: 0.5,
            max_steps: default_max_steps(dim),
            conv_tol: 1e-2,
            conv_mode: ConvergenceMode::Absolute,
            sign: Sign::ScoreAscent,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            max_steps: self.max_steps,
            conv_tol: self.conv_tol,
            conv_mode: self.conv_mode,
            sign: self.sign,
        }
    }

    /// Geometric schedule from `sigma_init` to the floor, or a constant one
    /// when `sigma_init` is already at the floor.
    pub fn schedule(&self, sigma_init: f64) -> Result<NoiseSchedule> {
        if !(sigma_init > 0.0) || sigma_init > SIGMA_MAX {
            return Err(Error::config(format!(
                "sigma_init must lie in (0, {SIGMA_MAX}], got {sigma_init}"
            )));
        }
        let floor = sigma_floor(sigma_init);
        if sigma_init <= floor {
            NoiseSchedule::constant(sigma_init, self.eta, 0.0)
        } else {
            NoiseSchedule::make(sigma_init, floor, self.steps, self.eta, 0.0)
        }
    }
}

pub fn default_max_steps(dim: usize) -> usize {
    if dim <= 10 {
        300
    } else {
        2000
    }
}

pub fn sigma_floor(sigma_init: f64) -> f64 {
    SIGMA_FLOOR_MIN.max(sigma_init / 100.0)
}

/// Corrupts `x_clean` at `sigma_init` and denoises it deterministically.
pub fn denoise_from(
    field: &dyn ScoreField,
    x_clean: &[f64],
    sigma_init: f64,
    policy: &DenoisePolicy,
    seed: u64,
) -> Result<Trajectory> {
    let mut out = denoise_batch(field, &[x_clean.to_vec()], sigma_init, policy, &[seed])?;
    Ok(out.pop().expect("one trajectory"))
}

/// [`denoise_from`] over many points; point `i` is corrupted with `seeds[i]`.
pub fn denoise_batch(
    field: &dyn ScoreField,
    x_clean: &[Vec<f64>],
    sigma_init: f64,
    policy: &DenoisePolicy,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    if seeds.len() != x_clean.len() {
        return Err(Error::config("one seed per point required"));
    }
    let schedule = policy.schedule(sigma_init)?;
    let inits = x_clean
        .iter()
        .zip(seeds)
        .map(|(x, &s)| corrupt(x, sigma_init, s))
        .collect::<Result<Vec<_>>>()?;
    run_trajectories(field, &inits, &schedule, &policy.run_options(), None)
}

/// Largest relative mismatch between recorded directions and the field
/// re-evaluated at the recorded states.
pub fn audit_trajectory(field: &dyn ScoreField, traj: &Trajectory) -> Result<f64> {
    if traj.states.len() != traj.directions.len() + 1 || traj.sigmas.len() != traj.directions.len()
    {
        return Err(Error::config("trajectory lengths are inconsistent"));
    }
    let mut worst = 0.0f64;
    for ((x, &sigma), d) in traj.states.iter().zip(&traj.sigmas).zip(&traj.directions) {
        let fresh = field.denoise_direction(x, sigma)?;
        let norm = fresh.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = fresh
            .iter()
            .zip(d)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(if norm > 0.0 { diff / norm } else { diff });
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::{make_catalog, CatalogName};
    use crate::models::Activation;
    use nalgebra::{DMatrix, DVector};

    fn gaussian(mean: &[f64], var: f64) -> Arc<GaussianMixture> {
        let d = mean.len();
        Arc::new(
            GaussianMixture::new(
                vec![1.0],
                vec![DVector::from_column_slice(mean)],
                vec![DMatrix::identity(d, d) * var],
            )
            .unwrap(),
        )
    }

    #[test]
    fn schedule_shapes() {
        let s = make_schedule(1.0, 0.01, 3, 0.5, 0.0).unwrap();
        assert_eq!(s.sigmas.len(), 3);
        assert!((s.sigmas[1] - 0.1).abs() < 1e-15);
        assert!((s.sigmas[2] - 0.01).abs() < 1e-15);
        assert_eq!(
            make_schedule(0.3, 0.01, 1, 0.5, 0.0).unwrap().sigmas,
            vec![0.3]
        );
        let s = make_schedule(0.1, 0.001, 101, 0.5, 0.0).unwrap();
        let r0 = s.sigmas[1] / s.sigmas[0];
        assert!(s
            .sigmas
            .windows(2)
            .all(|w| (w[1] / w[0] - r0).abs() < 1e-12));
        assert!(make_schedule(0.01, 0.1, 3, 0.5, 0.0).is_err());
        assert!(make_schedule(0.1, 0.0, 3, 0.5, 0.0).is_err());
        assert!(make_schedule(0.1, 0.01, 0, 0.5, 0.0).is_err());
        assert!(make_schedule(2.0, 0.01, 3, 0.5, 0.0).is_err());
        assert!(make_schedule(1.0, 0.01, 3, 0.0, 0.0).is_err());
        assert!(make_schedule(1.0, 0.01, 3, 0.5, -1.0).is_err());
    }

    #[test]
    fn schedule_holds_last_sigma() {
        let s = make_schedule(1.0, 0.01, 3, 0.5, 2.0).unwrap();
        assert_eq!(s.sigma_at(10), s.sigmas[2]);
        assert!((s.h_at(0) - 0.5).abs() < 1e-15);
        assert!((s.gamma_at(0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_field_step_is_identity() {
        let f = ZeroField { dim: 2 };
        let x = step(&f, &[0.3, -0.7], 0.5, 0.1, 0.0, &[1.0, 1.0]).unwrap();
        assert_eq!(x, vec![0.3, -0.7]);
    }

    #[test]
    fn standard_normal_step_closed_form() {
        // Smoothed variance 1 + σ² = 2, so s(x) = −x/2 and x + η·σ²·s = (1 − η/2)·x.
        let f = AnalyticField::new(gaussian(&[0.0, 0.0], 1.0));
        let x = step(&f, &[1.0, 0.0], 1.0, 0.5, 0.0, &[0.0, 0.0]).unwrap();
        assert!((x[0] - 0.75).abs() < 1e-15 && x[1] == 0.0);
        let x = step(&f, &[1.0, 0.0], 1.0, 0.25, 0.0, &[0.0, 0.0]).unwrap();
        assert!((x[0] - 0.875).abs() < 1e-15 && x[1] == 0.0);
    }

    #[test]
    fn oracle_step_moves_toward_mean() {
        let f = AnalyticField::new(gaussian(&[0.0, 0.0], 0.25));
        let sigma = 0.01;
        let x = step(
            &f,
            &[1.0, 0.0],
            sigma,
            0.5 * sigma * sigma,
            0.0,
            &[0.0, 0.0],
        )
        .unwrap();
        assert!(x[0].abs() < 1.0);
        let back = step_with_sign(
            &f,
            &[1.0, 0.0],
            sigma,
            0.5 * sigma * sigma,
            0.0,
            &[0.0, 0.0],
            Sign::Literal,
        )
        .unwrap();
        assert!(back[0] > 1.0);
    }

    #[test]
    fn step_rejects_zero_sigma() {
        let f = ZeroField { dim: 1 };
        assert!(step(&f, &[0.0], 0.0, 0.1, 0.0, &[0.0]).is_err());
    }

    struct NanField;

    impl ScoreField for NanField {
        fn dim(&self) -> usize {
            1
        }
        fn kind(&self) -> FieldKind {
            FieldKind::Custom
        }
        fn evaluate_batch(&self, xs: ArrayView2<f64>, sigma: f64) -> Result<FieldEval> {
            Ok(FieldEval::from_scores(
                Array2::from_elem(xs.raw_dim(), f64::NAN),
                sigma,
            ))
        }
    }

    #[test]
    fn non_finite_score_is_numerical_error() {
        assert!(matches!(
            step(&NanField, &[0.0], 0.1, 0.1, 0.0, &[0.0]),
            Err(Error::Numerical(_))
        ));
        let s = NoiseSchedule::constant(0.1, 0.5, 0.0).unwrap();
        let r = run_trajectory(&NanField, &[0.0], &s, &RunOptions::new(3, 0.0), None);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn zero_field_converges_immediately() {
        let s = make_schedule(0.5, 0.005, 10, 0.5, 0.0).unwrap();
        let t = run_trajectory(
            &ZeroField { dim: 2 },
            &[1.0, 2.0],
            &s,
            &RunOptions::new(100, 1e-2),
            None,
        )
        .unwrap();
        assert_eq!(t.stop_reason, StopReason::Converged);
        assert_eq!(t.states, vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(t.steps(), 1);
    }

    #[test]
    fn max_steps_with_zero_tolerance() {
        let s = make_schedule(0.5, 0.005, 3, 0.5, 0.0).unwrap();
        let t = run_trajectory(
            &ZeroField { dim: 2 },
            &[1.0, 2.0],
            &s,
            &RunOptions::new(5, 0.0),
            None,
        )
        .unwrap();
        assert_eq!(t.stop_reason, StopReason::MaxSteps);
        assert_eq!(t.steps(), 5);
        assert_eq!(t.states.len(), 6);
        assert_eq!(t.sigmas[4], s.sigmas[2]);
    }

    #[test]
    fn single_gaussian_flow_reaches_mean() {
        let mean = [0.7, -1.3];
        let f = AnalyticField::new(gaussian(&mean, 0.05));
        let s = NoiseSchedule::constant(1.0, 0.5, 0.0).unwrap();
        let t = run_trajectory(&f, &[2.0, 2.0], &s, &RunOptions::new(500, 1e-9), None).unwrap();
        let end = t.final_state();
        let dist = ((end[0] - mean[0]).powi(2) + (end[1] - mean[1]).powi(2)).sqrt();
        assert!(dist < 1e-2, "{dist}");
    }

    #[test]
    fn denoise_from_mode_at_minimal_sigma() {
        let g = Arc::new(make_catalog(CatalogName::Uniform, 0).unwrap());
        let mean: Vec<f64> = g.means()[0].iter().copied().collect();
        let f = AnalyticField::new(g);
        let policy = DenoisePolicy::for_dim(2);
        let t = denoise_from(&f, &mean, 0.001, &policy, 5).unwrap();
        let end = t.final_state();
        let dist = ((end[0] - mean[0]).powi(2) + (end[1] - mean[1]).powi(2)).sqrt();
        assert!(dist < 0.05);
        assert_eq!(t.states[0], corrupt(&mean, 0.001, 5).unwrap());
        assert_eq!(t, denoise_from(&f, &mean, 0.001, &policy, 5).unwrap());
    }

    #[test]
    fn floor_and_constant_schedule() {
        let p = DenoisePolicy::for_dim(2);
        assert_eq!(p.schedule(0.001).unwrap().sigmas, vec![0.001]);
        let s = p.schedule(0.5).unwrap();
        assert_eq!(s.sigmas.len(), 200);
        assert!((s.sigmas[199] - 0.005).abs() < 1e-15);
        assert!(p.schedule(0.0).is_err());
        assert!(p.schedule(1.5).is_err());
        assert_eq!(DenoisePolicy::for_dim(100).max_steps, 2000);
    }

    #[test]
    fn stochastic_runs_reproduce_with_seed() {
        let f = AnalyticField::new(gaussian(&[0.0, 0.0], 1.0));
        let s = make_schedule(1.0, 0.01, 20, 0.5, 1.0).unwrap();
        let o = RunOptions::new(20, 0.0);
        let a = run_trajectory(&f, &[1.0, 1.0], &s, &o, Some(9)).unwrap();
        let b = run_trajectory(&f, &[1.0, 1.0], &s, &o, Some(9)).unwrap();
        let c = run_trajectory(&f, &[1.0, 1.0], &s, &o, Some(10)).unwrap();
        let det = run_trajectory(&f, &[1.0, 1.0], &s, &o, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, det);
    }

    fn small_trained(kind: ObjectiveKind) -> TrainedField {
        let params = NetworkParams::init(&[3, 16, 2], Activation::Silu, 4).unwrap();
        TrainedField::new(kind, Arc::new(params), FieldMetadata::default())
    }

    #[test]
    fn direction_score_relation_for_every_kind() {
        let g = Arc::new(make_catalog(CatalogName::SharpCov, 0).unwrap());
        let fields: Vec<Box<dyn ScoreField>> = vec![
            Box::new(AnalyticField::new(g.clone())),
            Box::new(small_trained(ObjectiveKind::Reconstruction)),
            Box::new(small_trained(ObjectiveKind::Ncsn)),
            Box::new(small_trained(ObjectiveKind::Ssm)),
        ];
        let pts = g.sample(20, 3).unwrap();
        for f in &fields {
            for (i, x) in pts.iter().enumerate() {
                let sigma = [1.0, 0.1, 0.001][i % 3];
                let (s, d) = f.evaluate(x, sigma).unwrap();
                for (si, di) in s.iter().zip(&d) {
                    let expect = sigma * sigma * si;
                    assert!((di - expect).abs() <= 1e-12 * di.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn analytic_field_matches_mixture_score() {
        let g = Arc::new(make_catalog(CatalogName::Spiral, 0).unwrap());
        let f = AnalyticField::new(g.clone());
        for x in g.sample(10, 1).unwrap() {
            assert_eq!(
                f.score_estimate(&x, 0.05).unwrap(),
                g.analytic_score(&x, 0.05).unwrap()
            );
        }
    }

    #[test]
    fn recon_field_reads_clean_estimate() {
        let f = small_trained(ObjectiveKind::Reconstruction);
        let x = [0.4, -0.2];
        let fx = f.params().forward(&x, 0.1).unwrap();
        let d = f.denoise_direction(&x, 0.1).unwrap();
        assert_eq!(d, vec![fx[0] - x[0], fx[1] - x[1]]);
        assert!(f.score_estimate(&x, 0.0).is_err());
    }

    #[test]
    fn trajectory_audit_is_exact() {
        let f = small_trained(ObjectiveKind::Ncsn);
        let s = make_schedule(0.5, 0.005, 30, 0.5, 0.0).unwrap();
        let inits: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.3 - 1.0, 0.5]).collect();
        let trajs = run_trajectories(&f, &inits, &s, &RunOptions::new(30, 0.0), None).unwrap();
        for t in &trajs {
            assert_eq!(audit_trajectory(&f, t).unwrap(), 0.0);
        }
        let single = run_trajectory(&f, &inits[3], &s, &RunOptions::new(30, 0.0), None).unwrap();
        assert_eq!(single, trajs[3]);
    }

    #[test]
    fn integrator_is_first_order() {
        // N(0, I) with σ = 1 fixed: exact flow x(τ) = x₀·exp(−τ/2). Integrate to τ = 2.
        let f = AnalyticField::new(gaussian(&[0.0], 1.0));
        let exact = (-1.0f64).exp();
        let errs: Vec<f64> = [0.2f64, 0.1, 0.05]
            .iter()
            .map(|&eta| {
                let n = (2.0 / eta).round() as usize;
                let s = NoiseSchedule::constant(1.0, eta, 0.0).unwrap();
                let t = run_trajectory(&f, &[1.0], &s, &RunOptions::new(n, 0.0), None).unwrap();
                (t.final_state()[0] - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..2.2).contains(&ratio), "{errs:?}");
        }
    }
}

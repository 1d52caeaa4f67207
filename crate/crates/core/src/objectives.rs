//! Training objectives and the minibatch Adam loop.
//!
//! All three objectives train the same backbone and differ in how its output
//! is read:
//!
//! * `Reconstruction`: output is a clean estimate `x̂ = f(y, σ)`, loss
//!   `‖x₀ − f(y, σ)‖²`.
//! * `NCSN`: output is the score `s(y, σ)`, loss `‖s + (y − x₀)/σ²‖²`,
//!   optionally weighted by `σ²` (the default), which equals `‖σ·s + ε‖²`.
//! * `SSM`: output is the score, loss `vᵀ(∇_y s)v + ½‖s‖²` averaged over
//!   Gaussian slice directions `v`, evaluated on σ-perturbed data.
//!
//! Each loss is split into a pure function of network outputs (usable with
//! stub outputs) and a wrapper that runs the network and returns exact
//! parameter gradients.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixtures::DatasetHandle;
use crate::models::{
    adam_step, Activation, AdamState, Conditioning, GradientBundle, Layer, NetworkParams,
};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};

/// Noise levels used for training and evaluation, descending.
pub const DEFAULT_LADDER: [f64; 6] = [1.0, 0.2, 0.1, 0.05, 0.01, 0.001];

/// Examples per model the epoch length is stretched to reach for small sets.
pub const TARGET_EXAMPLES_PER_MODEL: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Reconstruction,
    #[serde(rename = "NCSN")]
    Ncsn,
    #[serde(rename = "SSM")]
    Ssm,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::Reconstruction,
        ObjectiveKind::Ncsn,
        ObjectiveKind::Ssm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Reconstruction => "Reconstruction",
            ObjectiveKind::Ncsn => "NCSN",
            ObjectiveKind::Ssm => "SSM",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown objective `{s}` (expected Reconstruction, NCSN or SSM)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NcsnWeighting {
    #[default]
    SigmaSquared,
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub sigma_ladder: Vec<f64>,
    pub ncsn_weighting: NcsnWeighting,
    pub ssm_slices: usize,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            sigma_ladder: DEFAULT_LADDER.to_vec(),
            ncsn_weighting: NcsnWeighting::SigmaSquared,
            ssm_slices: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_ladder(&self.sigma_ladder)?;
        if self.ssm_slices == 0 {
            return Err(Error::config("ssm_slices must be >= 1"));
        }
        Ok(())
    }
}

pub fn validate_ladder(ladder: &[f64]) -> Result<()> {
    if ladder.is_empty() {
        return Err(Error::config("sigma_ladder must not be empty"));
    }
    if let Some(bad) = ladder.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::config(format!(
            "sigma_ladder entries must be finite and > 0, found {bad}"
        )));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("sigma_ladder must be strictly descending"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-3,
            epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        Ok(())
    }

    /// Examples visited per epoch for a dataset of `cardinality` points.
    pub fn epoch_len(&self, cardinality: usize) -> usize {
        cardinality.max(TARGET_EXAMPLES_PER_MODEL.div_ceil(self.epochs))
    }
}

/// Hidden widths and activation of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
        }
    }
}

impl Architecture {
    pub fn layer_dims(&self, data_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(data_dim + 1);
        dims.extend(&self.hidden);
        dims.push(data_dim);
        dims
    }
}

/// Reconstruction loss from clean estimates. Returns the batch-mean loss and
/// its gradient with respect to the outputs.
pub fn recon_terms(outputs: ArrayView2<f64>, clean: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let b = outputs.nrows() as f64;
    let resid = &outputs - &clean;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / b;
    (loss, resid * (2.0 / b))
}

/// NCSN loss from score outputs, given the noise `ε` with `y = x₀ + σε`.
pub fn ncsn_terms(
    outputs: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    sigmas: &[f64],
    weighting: NcsnWeighting,
) -> Result<(f64, Array2<f64>)> {
    let b = outputs.nrows() as f64;
    let mut upstream = Array2::zeros(outputs.raw_dim());
    let mut loss = 0.0;
    for (i, &sigma) in sigmas.iter().enumerate() {
        if !(sigma > 0.0) {
            return Err(Error::config(format!(
                "NCSN target is undefined at sigma {sigma}"
            )));
        }
        let w = match weighting {
            NcsnWeighting::SigmaSquared => sigma * sigma,
            NcsnWeighting::Unweighted => 1.0,
        };
        let mut term = 0.0;
        for k in 0..outputs.ncols() {
            // s + (y − x₀)/σ² = s + ε/σ
            let r = outputs[[i, k]] + noise[[i, k]] / sigma;
            term += r * r;
            upstream[[i, k]] = 2.0 * w * r / b;
        }
        loss += w * term;
    }
    Ok((loss / b, upstream))
}

/// Sliced score matching loss from score outputs and their directional
/// derivatives `(∇s)v` along the slice directions.
pub fn ssm_terms(
    outputs: ArrayView2<f64>,
    jvps: ArrayView2<f64>,
    directions: ArrayView2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let b = outputs.nrows() as f64;
    let jac_term: f64 = (&directions * &jvps).sum();
    let norm_term: f64 = 0.5 * outputs.iter().map(|s| s * s).sum::<f64>();
    let up_out = outputs.to_owned() / b;
    let up_tan = directions.to_owned() / b;
    ((jac_term + norm_term) / b, up_out, up_tan)
}

fn to_matrix(points: &[Vec<f64>], dim: usize) -> Result<Array2<f64>> {
    if points.is_empty() {
        return Err(Error::config("batch must not be empty"));
    }
    let mut m = Array2::zeros((points.len(), dim));
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::config(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        for (k, v) in p.iter().enumerate() {
            m[[i, k]] = *v;
        }
    }
    Ok(m)
}

fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn perturb(clean: &Array2<f64>, noise: &Array2<f64>, sigmas: &[f64]) -> Array2<f64> {
    let mut y = clean.clone();
    for (mut row, (nrow, &s)) in y
        .axis_iter_mut(Axis(0))
        .zip(noise.axis_iter(Axis(0)).zip(sigmas))
    {
        row.scaled_add(s, &nrow);
    }
    y
}

fn check_batch(params: &NetworkParams, batch: &[Vec<f64>], sigmas: &[f64]) -> Result<Array2<f64>> {
    if batch.len() != sigmas.len() {
        return Err(Error::config("one sigma per example required"));
    }
    to_matrix(batch, params.data_dim())
}

/// Loss and gradient for a batch with explicit noise (and slice directions
/// for SSM). This is the path the training loop uses.
pub fn objective_grad(
    params: &NetworkParams,
    spec: &ObjectiveSpec,
    clean: &Array2<f64>,
    sigmas: &[f64],
    noise: &Array2<f64>,
    directions: Option<&Array2<f64>>,
) -> Result<GradientBundle> {
    let y = perturb(clean, noise, sigmas);
    match spec.kind {
        ObjectiveKind::Reconstruction => {
            let cache = params.forward_cached(params.input_matrix(y.view(), sigmas)?, None)?;
            let (loss, up) = recon_terms(cache.output.view(), clean.view());
            let mut g = params.backward(&cache, &up)?;
            g.loss = loss;
            Ok(g)
        }
        ObjectiveKind::Ncsn => {
            let cache = params.forward_cached(params.input_matrix(y.view(), sigmas)?, None)?;
            let (loss, up) = ncsn_terms(
                cache.output.view(),
                noise.view(),
                sigmas,
                spec.ncsn_weighting,
            )?;
            let mut g = params.backward(&cache, &up)?;
            g.loss = loss;
            Ok(g)
        }
        ObjectiveKind::Ssm => {
            let dirs = directions.ok_or_else(|| Error::config("SSM needs slice directions"))?;
            let slices = dirs.nrows() / y.nrows();
            if slices == 0 || dirs.nrows() != slices * y.nrows() {
                return Err(Error::config(
                    "slice directions must be a multiple of the batch",
                ));
            }
            // Row i·slices + j holds example i with direction j.
            let rows = dirs.nrows();
            let mut y_rep = Array2::zeros((rows, y.ncols()));
            let mut s_rep = Vec::with_capacity(rows);
            for (i, row) in y.axis_iter(Axis(0)).enumerate() {
                for j in 0..slices {
                    y_rep.row_mut(i * slices + j).assign(&row);
                    s_rep.push(sigmas[i]);
                }
            }
            let cache = params.forward_cached(
                params.input_matrix(y_rep.view(), &s_rep)?,
                Some(dirs.view()),
            )?;
            let tangent = cache.output_tangent.as_ref().expect("dual pass");
            let (loss, up_out, up_tan) =
                ssm_terms(cache.output.view(), tangent.view(), dirs.view());
            let mut g = params.dual_backward(&cache, &up_out, &up_tan)?;
            g.loss = loss;
            Ok(g)
        }
    }
}

fn draw_noise(
    rng: &mut SeededRng,
    rows: usize,
    dim: usize,
    spec: &ObjectiveSpec,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let noise = normal_matrix(rng, rows, dim);
    let dirs = match spec.kind {
        ObjectiveKind::Ssm => Some(normal_matrix(rng, rows * spec.ssm_slices, dim)),
        _ => None,
    };
    (noise, dirs)
}

/// `mean ‖x₀ − f(x₀ + σε, σ)‖²` and its parameter gradient.
pub fn recon_loss_grad(
    params: &NetworkParams,
    batch: &[Vec<f64>],
    sigmas: &[f64],
    seed: u64,
) -> Result<GradientBundle> {
    let clean = check_batch(params, batch, sigmas)?;
    let spec = ObjectiveSpec::new(ObjectiveKind::Reconstruction);
    let (noise, _) = draw_noise(
        &mut rng_from_seed(seed),
        clean.nrows(),
        clean.ncols(),
        &spec,
    );
    objective_grad(params, &spec, &clean, sigmas, &noise, None)
}

/// Denoising score matching loss and its parameter gradient.
pub fn ncsn_loss_grad(
    params: &NetworkParams,
    batch: &[Vec<f64>],
    sigmas: &[f64],
    weighting: NcsnWeighting,
    seed: u64,
) -> Result<GradientBundle> {
    let clean = check_batch(params, batch, sigmas)?;
    let spec = ObjectiveSpec {
        ncsn_weighting: weighting,
        ..ObjectiveSpec::new(ObjectiveKind::Ncsn)
    };
    let (noise, _) = draw_noise(
        &mut rng_from_seed(seed),
        clean.nrows(),
        clean.ncols(),
        &spec,
    );
    objective_grad(params, &spec, &clean, sigmas, &noise, None)
}

/// Sliced score matching loss (on σ-perturbed points) and its parameter gradient.
pub fn ssm_loss_grad(
    params: &NetworkParams,
    batch: &[Vec<f64>],
    sigmas: &[f64],
    slices: usize,
    seed: u64,
) -> Result<GradientBundle> {
    if slices == 0 {
        return Err(Error::config("ssm slices must be >= 1"));
    }
    let clean = check_batch(params, batch, sigmas)?;
    let spec = ObjectiveSpec {
        ssm_slices: slices,
        ..ObjectiveSpec::new(ObjectiveKind::Ssm)
    };
    let (noise, dirs) = draw_noise(
        &mut rng_from_seed(seed),
        clean.nrows(),
        clean.ncols(),
        &spec,
    );
    objective_grad(params, &spec, &clean, sigmas, &noise, dirs.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Fill `wall_ms` from the clock. Off by default so logs are reproducible.
    pub record_timing: bool,
}

/// Final parameters plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: NetworkParams,
    pub objective: ObjectiveSpec,
    pub config: TrainConfig,
    pub training_size: usize,
    pub dataset: String,
    pub log: Vec<EpochRecord>,
}

/// Minibatch Adam over a dataset. Deterministic given the config seed; the
/// result does not depend on the order of `dataset.points`.
pub fn train(
    objective: &ObjectiveSpec,
    dataset: &DatasetHandle,
    arch: &Architecture,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut model = train_points(
        objective,
        &dataset.points,
        arch,
        config,
        TrainOptions::default(),
    )?;
    model.dataset = dataset.file_name();
    Ok(model)
}

pub fn train_points(
    objective: &ObjectiveSpec,
    points: &[Vec<f64>],
    arch: &Architecture,
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainedModel> {
    objective.validate()?;
    config.validate()?;
    if points.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let dim = points[0].len();
    let mut ordered: Vec<&Vec<f64>> = points.iter().collect();
    ordered.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let data = to_matrix(&ordered.into_iter().cloned().collect::<Vec<_>>(), dim)?;
    let n = data.nrows();

    let conditioning = Conditioning::from_ladder(&objective.sigma_ladder)?;
    let mut params = NetworkParams::init(
        &arch.layer_dims(dim),
        arch.activation,
        derive_seed(config.seed, "init", 0),
    )?
    .with_conditioning(conditioning);
    let mut adam = AdamState::new(&params);
    let epoch_len = config.epoch_len(n);
    let ladder = &objective.sigma_ladder;
    let mut step = 0u64;
    let mut log = Vec::with_capacity(config.epochs);
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let mut rng = rng_from_seed(derive_seed(config.seed, "epoch", epoch as u64));
        let order: Vec<usize> = if epoch_len == n {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        } else {
            (0..epoch_len).map(|_| rng.random_range(0..n)).collect()
        };
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let clean = data.select(Axis(0), chunk);
            let sigmas: Vec<f64> = chunk
                .iter()
                .map(|_| ladder[rng.random_range(0..ladder.len())])
                .collect();
            let (noise, dirs) = draw_noise(&mut rng, chunk.len(), dim, objective);
            let grads = objective_grad(&params, objective, &clean, &sigmas, &noise, dirs.as_ref())
                .map_err(|e| Error::numerical(format!("epoch {epoch} batch {b}: {e}")))?;
            if !grads.loss.is_finite() {
                return Err(Error::numerical(format!(
                    "epoch {epoch} batch {b}: non-finite loss"
                )));
            }
            step += 1;
            adam_step(&mut params, &grads, &mut adam, config.lr, step)
                .map_err(|e| Error::numerical(format!("epoch {epoch} batch {b}: {e}")))?;
            loss_sum += grads.loss * chunk.len() as f64;
        }
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / epoch_len as f64,
            wall_ms: if options.record_timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }

    Ok(TrainedModel {
        params,
        objective: objective.clone(),
        config: *config,
        training_size: n,
        dataset: String::new(),
        log,
    })
}

/// On-disk form of a trained model (`*.ckpt.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub objective: ObjectiveKind,
    pub sigma_ladder: Vec<f64>,
    pub ncsn_weighting: NcsnWeighting,
    pub ssm_slices: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub training_size: usize,
    pub dataset: String,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointLayer {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layer_dims: self.params.layer_dims().to_vec(),
            activation: self.params.activation(),
            objective: self.objective.kind,
            sigma_ladder: self.objective.sigma_ladder.clone(),
            ncsn_weighting: self.objective.ncsn_weighting,
            ssm_slices: self.objective.ssm_slices,
            seed: self.config.seed,
            epochs: self.config.epochs,
            batch_size: self.config.batch_size,
            lr: self.config.lr,
            training_size: self.training_size,
            dataset: self.dataset.clone(),
            layers: self
                .params
                .layers()
                .iter()
                .map(|l| CheckpointLayer {
                    weight: l.weight.outer_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; the training log is not part of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let objective = ObjectiveSpec {
            kind: ckpt.objective,
            sigma_ladder: ckpt.sigma_ladder.clone(),
            ncsn_weighting: ckpt.ncsn_weighting,
            ssm_slices: ckpt.ssm_slices,
        };
        objective.validate()?;
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for (i, l) in ckpt.layers.iter().enumerate() {
            let rows = l.weight.len();
            let cols = l.weight.first().map_or(0, |r| r.len());
            if l.weight.iter().any(|r| r.len() != cols) {
                return Err(Error::config(format!("checkpoint layer {i} is ragged")));
            }
            let flat: Vec<f64> = l.weight.iter().flatten().copied().collect();
            let weight = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| Error::config(format!("checkpoint layer {i}: {e}")))?;
            layers.push(Layer {
                weight,
                bias: l.bias.clone().into(),
            });
        }
        let params = NetworkParams::from_layers(
            layers,
            ckpt.activation,
            Conditioning::from_ladder(&ckpt.sigma_ladder)?,
        )?;
        if params.layer_dims() != ckpt.layer_dims.as_slice() {
            return Err(Error::config(format!(
                "checkpoint declares layer_dims {:?} but parameters have {:?}",
                ckpt.layer_dims,
                params.layer_dims()
            )));
        }
        Ok(Self {
            params,
            objective,
            config: TrainConfig {
                batch_size: ckpt.batch_size,
                lr: ckpt.lr,
                epochs: ckpt.epochs,
                seed: ckpt.seed,
            },
            training_size: ckpt.training_size,
            dataset: ckpt.dataset.clone(),
            log: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::{make_catalog, CatalogName};
    use crate::rng::standard_normal_vec;

    fn small_net(seed: u64) -> NetworkParams {
        let mut net = NetworkParams::init(&[3, 12, 12, 2], Activation::Silu, seed).unwrap();
        let mut rng = rng_from_seed(seed + 1);
        for layer in net.layers_mut() {
            layer.bias =
                ndarray::Array1::from(standard_normal_vec(&mut rng, layer.bias.len())) * 0.1;
        }
        net
    }

    fn batch(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let g = make_catalog(CatalogName::SharpCov, 0).unwrap();
        let pts = g.sample(n, seed).unwrap();
        let mut rng = rng_from_seed(seed);
        let sig = (0..n)
            .map(|_| DEFAULT_LADDER[rng.random_range(0..DEFAULT_LADDER.len())])
            .collect();
        (pts, sig)
    }

    #[test]
    fn ladder_validation() {
        assert!(validate_ladder(&DEFAULT_LADDER).is_ok());
        assert!(validate_ladder(&[0.1, 0.1]).is_err());
        assert!(validate_ladder(&[0.1, 0.2]).is_err());
        assert!(validate_ladder(&[0.1, 0.0]).is_err());
        assert!(validate_ladder(&[]).is_err());
        let mut spec = ObjectiveSpec::new(ObjectiveKind::Ssm);
        spec.ssm_slices = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn epoch_length_rule() {
        let c = TrainConfig::default();
        assert_eq!(c.epoch_len(10), 400);
        assert_eq!(c.epoch_len(100_000), 100_000);
        assert_eq!(c.epoch_len(1000), 1000);
    }

    #[test]
    fn recon_stub_exact_output_has_zero_loss() {
        let clean = ndarray::arr2(&[[0.5, -1.0], [2.0, 0.25]]);
        let (loss, up) = recon_terms(clean.view(), clean.view());
        assert_eq!(loss, 0.0);
        assert!(up.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recon_zero_network_small_sigma() {
        let mut net = small_net(0);
        for l in net.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x0 = vec![vec![1.5, -2.0]];
        let g = recon_loss_grad(&net, &x0, &[1e-9], 3).unwrap();
        assert!((g.loss - (1.5f64 * 1.5 + 4.0)).abs() < 1e-6);
    }

    #[test]
    fn ncsn_stub_exact_target_has_zero_loss() {
        let noise = ndarray::arr2(&[[0.3, -1.2], [0.7, 0.1]]);
        let sigmas = [0.1, 0.01];
        let mut out = Array2::zeros((2, 2));
        for i in 0..2 {
            for k in 0..2 {
                // −(y − x₀)/σ²
                out[[i, k]] = -(sigmas[i] * noise[[i, k]]) / (sigmas[i] * sigmas[i]);
            }
        }
        for w in [NcsnWeighting::SigmaSquared, NcsnWeighting::Unweighted] {
            let (loss, _) = ncsn_terms(out.view(), noise.view(), &sigmas, w).unwrap();
            assert!(loss.abs() < 1e-20, "{loss}");
        }
    }

    #[test]
    fn ncsn_zero_network_unit_sigma() {
        let noise = ndarray::arr2(&[[0.3, -1.2]]);
        let out = Array2::zeros((1, 2));
        let (loss, _) =
            ncsn_terms(out.view(), noise.view(), &[1.0], NcsnWeighting::Unweighted).unwrap();
        assert!((loss - (0.09 + 1.44)).abs() < 1e-15);
    }

    #[test]
    fn ncsn_rejects_zero_sigma() {
        let net = small_net(1);
        let (pts, _) = batch(1, 2);
        let err = ncsn_loss_grad(&net, &pts, &[0.1, 0.0], NcsnWeighting::SigmaSquared, 0);
        assert!(matches!(
            err,
            Err(Error::Numerical(_)) | Err(Error::Config(_))
        ));
    }

    #[test]
    fn ncsn_weighting_identity() {
        let net = small_net(2);
        let mut rng = rng_from_seed(40);
        for trial in 0..20 {
            let (pts, _) = batch(trial, 1);
            let sigma = DEFAULT_LADDER[rng.random_range(0..DEFAULT_LADDER.len())];
            let w =
                ncsn_loss_grad(&net, &pts, &[sigma], NcsnWeighting::SigmaSquared, trial).unwrap();
            let u = ncsn_loss_grad(&net, &pts, &[sigma], NcsnWeighting::Unweighted, trial).unwrap();
            let expected = sigma * sigma * u.loss;
            assert!((w.loss - expected).abs() <= 1e-10 * expected.abs());
        }
    }

    #[test]
    fn ssm_zero_network_zero_loss() {
        let mut net = small_net(3);
        for l in net.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let (pts, sig) = batch(3, 16);
        let g = ssm_loss_grad(&net, &pts, &sig, 3, 1).unwrap();
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn ssm_linear_stub_expectation() {
        // s(y) = −y on standard-normal y: E[vᵀ(−I)v] + E[½‖y‖²] = −d + d/2.
        let n = 100_000;
        let d = 2;
        let mut rng = rng_from_seed(17);
        let y = normal_matrix(&mut rng, n, d);
        let v = normal_matrix(&mut rng, n, d);
        let out = -&y;
        let jv = -&v;
        let per_row: Vec<f64> = (0..n)
            .map(|i| {
                let (l, _, _) = ssm_terms(
                    out.slice(ndarray::s![i..i + 1, ..]),
                    jv.slice(ndarray::s![i..i + 1, ..]),
                    v.slice(ndarray::s![i..i + 1, ..]),
                );
                l
            })
            .collect();
        let (mean, _, _) = ssm_terms(out.view(), jv.view(), v.view());
        let var = per_row.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean + 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    fn check_loss_gradient(
        loss: impl Fn(&NetworkParams) -> GradientBundle,
        net: &NetworkParams,
        tol: f64,
    ) {
        let g = loss(net);
        let h = 1e-5;
        let mut checked = 0;
        for l in 0..net.layers().len() {
            let (rows, cols) = net.layers()[l].weight.dim();
            for i in 0..rows {
                for j in 0..cols {
                    let mut p = net.clone();
                    p.layers_mut()[l].weight[[i, j]] += h;
                    let mut m = net.clone();
                    m.layers_mut()[l].weight[[i, j]] -= h;
                    let fd = (loss(&p).loss - loss(&m).loss) / (2.0 * h);
                    let an = g.weights[l][[i, j]];
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(err < tol, "w{l}[{i},{j}]: fd {fd} analytic {an}");
                    checked += 1;
                }
                let mut p = net.clone();
                p.layers_mut()[l].bias[i] += h;
                let mut m = net.clone();
                m.layers_mut()[l].bias[i] -= h;
                let fd = (loss(&p).loss - loss(&m).loss) / (2.0 * h);
                let an = g.biases[l][i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < tol, "b{l}[{i}]: fd {fd} analytic {an}");
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let net = small_net(5);
        let (pts, sig) = batch(5, 8);
        check_loss_gradient(|n| recon_loss_grad(n, &pts, &sig, 9).unwrap(), &net, 1e-4);
    }

    #[test]
    fn ncsn_gradient_matches_finite_differences() {
        let net = small_net(6);
        let (pts, _) = batch(6, 8);
        let sig = vec![0.2; 8];
        check_loss_gradient(
            |n| ncsn_loss_grad(n, &pts, &sig, NcsnWeighting::SigmaSquared, 9).unwrap(),
            &net,
            1e-4,
        );
    }

    #[test]
    fn ssm_gradient_matches_finite_differences() {
        let net = small_net(7);
        let (pts, sig) = batch(7, 8);
        check_loss_gradient(|n| ssm_loss_grad(n, &pts, &sig, 2, 9).unwrap(), &net, 1e-3);
    }

    #[test]
    fn training_is_deterministic_and_order_invariant() {
        let g = std::sync::Arc::new(make_catalog(CatalogName::Uniform, 0).unwrap());
        let ds = DatasetHandle::generate(CatalogName::Uniform, g, 100, 4).unwrap();
        let arch = Architecture {
            hidden: vec![16, 16],
            activation: Activation::Silu,
        };
        let cfg = TrainConfig {
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let spec = ObjectiveSpec::new(ObjectiveKind::Ncsn);
        let a = train(&spec, &ds, &arch, &cfg).unwrap();
        let b = train(&spec, &ds, &arch, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let mut reversed = ds.clone();
        reversed.points.reverse();
        let c = train(&spec, &reversed, &arch, &cfg).unwrap();
        assert_eq!(a.params, c.params);
        assert!(a.log.iter().all(|r| r.wall_ms == 0));
    }

    #[test]
    fn memorizes_single_point() {
        let pts = vec![vec![0.8, -0.3]];
        let arch = Architecture::default();
        let cfg = TrainConfig {
            epochs: 20,
            seed: 3,
            ..TrainConfig::default()
        };
        let spec = ObjectiveSpec::new(ObjectiveKind::Reconstruction);
        let m = train_points(&spec, &pts, &arch, &cfg, TrainOptions::default()).unwrap();
        let first = m.log[0].mean_loss;
        let last = m.log.last().unwrap().mean_loss;
        assert!(last < 0.1 * first, "first {first} last {last}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let pts = make_catalog(CatalogName::Uniform, 0)
            .unwrap()
            .sample(50, 1)
            .unwrap();
        let arch = Architecture {
            hidden: vec![8],
            activation: Activation::Tanh,
        };
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let spec = ObjectiveSpec::new(ObjectiveKind::Ssm);
        let m = train_points(&spec, &pts, &arch, &cfg, TrainOptions::default()).unwrap();
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let restored = TrainedModel::from_checkpoint(&back).unwrap();
        assert_eq!(restored.params, m.params);
        assert_eq!(restored.objective, m.objective);
    }
}

//! Noise-conditioned feedforward backbone shared by every trained objective.
//!
//! The network maps `(x, σ)` to a vector of the data dimension. Its input is
//! `x` concatenated with a scalar conditioning value `c(σ)`, hidden layers are
//! affine maps followed by a smooth activation, and the output layer is
//! affine. Everything is evaluated on row-major batches (one example per row)
//! so training can use dense matrix products.
//!
//! Three differentiation modes are exact and hand-written for this fixed
//! topology:
//!
//! * reverse mode over parameters ([`NetworkParams::grad_params`]),
//! * forward mode over the data input ([`NetworkParams::jvp_input`]),
//! * reverse over forward ([`NetworkParams::dual_backward`]), which yields the
//!   parameter gradient of a loss that depends on both the output and its
//!   directional derivative. Sliced score matching needs this.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Offset inside the log of the noise conditioning, keeps `c(0)` finite.
pub const CONDITIONING_OFFSET: f64 = 1e-4;

/// Default σ range the conditioning is normalized over.
pub const DEFAULT_SIGMA_RANGE: (f64, f64) = (0.001, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x · sigmoid(x)`
    Silu,
    Tanh,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "silu" | "swish" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    /// Value, first and second derivative at `z`.
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Silu => {
                let sg = 1.0 / (1.0 + (-z).exp());
                let one_minus = 1.0 - sg;
                (
                    z * sg,
                    sg * (1.0 + z * one_minus),
                    sg * one_minus * (2.0 + z * (1.0 - 2.0 * sg)),
                )
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
        }
    }

    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }
}

/// Affine map `σ ↦ c(σ)`: `log(σ + 1e-4)` rescaled so `[lo, hi]` lands on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Conditioning {
    pub fn new(sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        if !(sigma_lo >= 0.0 && sigma_hi > sigma_lo && sigma_hi.is_finite()) {
            return Err(Error::config(format!(
                "conditioning range must satisfy 0 <= lo < hi, got [{sigma_lo}, {sigma_hi}]"
            )));
        }
        Ok(Self { sigma_lo, sigma_hi })
    }

    /// Range spanned by a noise ladder.
    pub fn from_ladder(ladder: &[f64]) -> Result<Self> {
        let lo = ladder.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ladder.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if ladder.len() < 2 {
            // A single level still needs a non-degenerate map.
            return Self::new(lo.min(DEFAULT_SIGMA_RANGE.0), hi.max(DEFAULT_SIGMA_RANGE.1));
        }
        Self::new(lo, hi)
    }

    #[inline]
    pub fn value(&self, sigma: f64) -> f64 {
        let lo = (self.sigma_lo + CONDITIONING_OFFSET).ln();
        let hi = (self.sigma_hi + CONDITIONING_OFFSET).ln();
        2.0 * ((sigma + CONDITIONING_OFFSET).ln() - lo) / (hi - lo) - 1.0
    }
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            sigma_lo: DEFAULT_SIGMA_RANGE.0,
            sigma_hi: DEFAULT_SIGMA_RANGE.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layer_dims: Vec<usize>,
    activation: Activation,
    conditioning: Conditioning,
    layers: Vec<Layer>,
}

/// Parameter gradients congruent with a [`NetworkParams`], plus the scalar loss
/// they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub loss: f64,
}

impl GradientBundle {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
            loss: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Intermediate values of a batched forward pass, kept for differentiation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer; `acts[0]` is the conditioned network input.
    acts: Vec<Array2<f64>>,
    /// Activation first derivative at each hidden pre-activation.
    d1: Vec<Array2<f64>>,
    /// Activation second derivative, present for dual passes only.
    d2: Vec<Array2<f64>>,
    /// Tangent of each layer input, present for dual passes only.
    tangents: Vec<Array2<f64>>,
    /// Tangent of each hidden pre-activation, present for dual passes only.
    tangent_pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
    /// Directional derivative of the output, present for dual passes only.
    pub output_tangent: Option<Array2<f64>>,
}

impl NetworkParams {
    /// He-style initialization: weights `N(0, 2/fan_in)`, zero biases.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = rng_from_seed(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let weight =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            conditioning: Conditioning::default(),
            layers,
        })
    }

    /// Builds parameters from explicit layers.
    pub fn from_layers(
        layers: Vec<Layer>,
        activation: Activation,
        conditioning: Conditioning,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        let mut dims = vec![layers[0].weight.ncols()];
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.ncols() != *dims.last().expect("nonempty") {
                return Err(Error::config(format!(
                    "layer {i} expects input width {}, previous width is {}",
                    layer.weight.ncols(),
                    dims.last().expect("nonempty")
                )));
            }
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::config(format!(
                    "layer {i} bias length {} does not match output width {}",
                    layer.bias.len(),
                    layer.weight.nrows()
                )));
            }
            dims.push(layer.weight.nrows());
        }
        validate_dims(&dims)?;
        let params = Self {
            layer_dims: dims,
            activation,
            conditioning,
            layers,
        };
        if !params.is_finite() {
            return Err(Error::numerical("non-finite parameter entry"));
        }
        Ok(params)
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Dimension of the data points (input width minus the conditioning slot).
    pub fn data_dim(&self) -> usize {
        self.layer_dims[0] - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Stacks points and their conditioning values into the network input.
    pub fn input_matrix(&self, xs: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let dim = self.data_dim();
        if xs.ncols() != dim {
            return Err(Error::config(format!(
                "input has dimension {}, network expects {dim}",
                xs.ncols()
            )));
        }
        if sigmas.len() != xs.nrows() {
            return Err(Error::config("one sigma per input row required"));
        }
        let mut input = Array2::zeros((xs.nrows(), dim + 1));
        input.slice_mut(s![.., ..dim]).assign(&xs);
        for (row, &sigma) in sigmas.iter().enumerate() {
            if !(sigma >= 0.0) {
                return Err(Error::config(format!("sigma must be >= 0, got {sigma}")));
            }
            input[[row, dim]] = self.conditioning.value(sigma);
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite network input"));
        }
        Ok(input)
    }

    /// Single-point evaluation.
    pub fn forward(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let xs =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::config(e.to_string()))?;
        let out = self.forward_batch(xs, &[sigma])?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Output only; skips derivative bookkeeping.
    pub fn forward_batch(&self, xs: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let mut a = self.input_matrix(xs, sigmas)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(&a, layer);
            if i < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.value(v));
            }
            a = z;
        }
        check_finite(&a, "network output")?;
        Ok(a)
    }

    /// Forward pass keeping what reverse mode needs. With `tangent_input`
    /// (shape `(batch, data_dim)`) the directional derivative with respect to
    /// the data input is propagated alongside; the conditioning slot receives
    /// zero tangent.
    pub fn forward_cached(
        &self,
        input: Array2<f64>,
        tangent_input: Option<ArrayView2<f64>>,
    ) -> Result<ForwardCache> {
        let dual = tangent_input.is_some();
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            acts: Vec::with_capacity(n_layers),
            d1: Vec::with_capacity(n_layers - 1),
            d2: Vec::new(),
            tangents: Vec::new(),
            tangent_pre: Vec::new(),
            output: Array2::zeros((0, 0)),
            output_tangent: None,
        };
        if let Some(t) = tangent_input {
            let dim = self.data_dim();
            if t.ncols() != dim || t.nrows() != input.nrows() {
                return Err(Error::config("tangent shape does not match input"));
            }
            let mut t0 = Array2::zeros(input.raw_dim());
            t0.slice_mut(s![.., ..dim]).assign(&t);
            cache.tangents.push(t0);
        }
        cache.acts.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let a = cache.acts.last().expect("input pushed");
            let z = affine(a, layer);
            let tz = if dual {
                let t = cache.tangents.last().expect("tangent pushed");
                let mut tz = Array2::zeros(z.raw_dim());
                general_mat_mul(1.0, t, &layer.weight.t(), 0.0, &mut tz);
                Some(tz)
            } else {
                None
            };
            if i + 1 == n_layers {
                check_finite(&z, "network output")?;
                cache.output = z;
                cache.output_tangent = tz;
                break;
            }
            let mut act = Array2::zeros(z.raw_dim());
            let mut d1 = Array2::zeros(z.raw_dim());
            if dual {
                let mut d2 = Array2::zeros(z.raw_dim());
                let activation = self.activation;
                Zip::from(&mut act)
                    .and(&mut d1)
                    .and(&mut d2)
                    .and(&z)
                    .for_each(|a, g1, g2, &zv| {
                        let (v, dv, ddv) = activation.eval(zv);
                        *a = v;
                        *g1 = dv;
                        *g2 = ddv;
                    });
                let tz = tz.expect("dual pass");
                let tangent = &d1 * &tz;
                cache.d2.push(d2);
                cache.tangent_pre.push(tz);
                cache.tangents.push(tangent);
            } else {
                let activation = self.activation;
                Zip::from(&mut act)
                    .and(&mut d1)
                    .and(&z)
                    .for_each(|a, g1, &zv| {
                        let (v, dv, _) = activation.eval(zv);
                        *a = v;
                        *g1 = dv;
                    });
            }
            cache.d1.push(d1);
            cache.acts.push(act);
        }
        Ok(cache)
    }

    /// Parameter gradient of `Σ_rows upstream · output`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<GradientBundle> {
        if upstream.raw_dim() != cache.output.raw_dim() {
            return Err(Error::config("upstream shape does not match output"));
        }
        let mut grads = GradientBundle::zeros_like(self);
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            general_mat_mul(1.0, &delta.t(), &cache.acts[l], 0.0, &mut grads.weights[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = Array2::zeros(cache.acts[l].raw_dim());
                general_mat_mul(1.0, &delta, &self.layers[l].weight, 0.0, &mut prev);
                prev *= &cache.d1[l - 1];
                delta = prev;
            }
        }
        grads.loss = (upstream * &cache.output).sum();
        if !grads.is_finite() {
            return Err(Error::numerical("non-finite parameter gradient"));
        }
        Ok(grads)
    }

    /// Parameter gradient of `Σ_rows (up_out · output + up_tan · output_tangent)`
    /// for a cache produced with a tangent input.
    pub fn dual_backward(
        &self,
        cache: &ForwardCache,
        up_out: &Array2<f64>,
        up_tan: &Array2<f64>,
    ) -> Result<GradientBundle> {
        let out_tan = cache
            .output_tangent
            .as_ref()
            .ok_or_else(|| Error::config("dual backward needs a tangent forward pass"))?;
        if up_out.raw_dim() != cache.output.raw_dim() || up_tan.raw_dim() != out_tan.raw_dim() {
            return Err(Error::config("upstream shape does not match output"));
        }
        let mut grads = GradientBundle::zeros_like(self);
        let mut zbar = up_out.clone();
        let mut tbar = up_tan.clone();
        for l in (0..self.layers.len()).rev() {
            general_mat_mul(1.0, &zbar.t(), &cache.acts[l], 0.0, &mut grads.weights[l]);
            general_mat_mul(
                1.0,
                &tbar.t(),
                &cache.tangents[l],
                1.0,
                &mut grads.weights[l],
            );
            grads.biases[l] = zbar.sum_axis(Axis(0));
            if l > 0 {
                let w = &self.layers[l].weight;
                let mut abar = Array2::zeros(cache.acts[l].raw_dim());
                general_mat_mul(1.0, &zbar, w, 0.0, &mut abar);
                let mut tabar = Array2::zeros(cache.acts[l].raw_dim());
                general_mat_mul(1.0, &tbar, w, 0.0, &mut tabar);
                let h = l - 1;
                Zip::from(&mut abar)
                    .and(&tabar)
                    .and(&cache.d1[h])
                    .and(&cache.d2[h])
                    .and(&cache.tangent_pre[h])
                    .for_each(|a, &ta, &g1, &g2, &tz| {
                        *a = *a * g1 + ta * g2 * tz;
                    });
                tabar *= &cache.d1[h];
                zbar = abar;
                tbar = tabar;
            }
        }
        grads.loss = (up_out * &cache.output).sum() + (up_tan * out_tan).sum();
        if !grads.is_finite() {
            return Err(Error::numerical("non-finite parameter gradient"));
        }
        Ok(grads)
    }

    /// Gradient of `upstream · forward(x, σ)` with respect to every parameter.
    pub fn grad_params(&self, x: &[f64], sigma: f64, upstream: &[f64]) -> Result<GradientBundle> {
        if upstream.len() != self.data_dim() {
            return Err(Error::config("upstream must have the data dimension"));
        }
        let xs =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::config(e.to_string()))?;
        let cache = self.forward_cached(self.input_matrix(xs, &[sigma])?, None)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .map_err(|e| Error::config(e.to_string()))?;
        self.backward(&cache, &up)
    }

    /// Directional derivative of `forward(·, σ)` at `x` along `v`.
    pub fn jvp_input(&self, x: &[f64], sigma: f64, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.data_dim() {
            return Err(Error::config("direction must have the data dimension"));
        }
        let xs =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::config(e.to_string()))?;
        let vs =
            ArrayView2::from_shape((1, v.len()), v).map_err(|e| Error::config(e.to_string()))?;
        let cache = self.forward_cached(self.input_matrix(xs, &[sigma])?, Some(vs))?;
        let tangent = cache.output_tangent.expect("dual pass");
        Ok(tangent.into_raw_vec_and_offset().0)
    }

    /// Applies `θ ← θ + scale · g` for every parameter.
    pub fn add_scaled(&mut self, grads: &GradientBundle, scale: f64) {
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            layer.weight.scaled_add(scale, gw);
            layer.bias.scaled_add(scale, gb);
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(
            "network needs at least input and output widths",
        ));
    }
    if dims.contains(&0) {
        return Err(Error::config("layer widths must be >= 1"));
    }
    if dims[0] < 2 {
        return Err(Error::config(
            "input width must be data dimension + 1 with data dimension >= 1",
        ));
    }
    if dims[dims.len() - 1] != dims[0] - 1 {
        return Err(Error::config(format!(
            "output width {} must equal data dimension {}",
            dims[dims.len() - 1],
            dims[0] - 1
        )));
    }
    Ok(())
}

fn affine(a: &Array2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = Array2::zeros((a.nrows(), layer.weight.nrows()));
    general_mat_mul(1.0, a, &layer.weight.t(), 0.0, &mut z);
    z += &layer.bias;
    z
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite {what}")))
    }
}

/// Adam optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: GradientBundle,
    pub second: GradientBundle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            first: GradientBundle::zeros_like(params),
            second: GradientBundle::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update. `step_index` counts from 1.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
    step_index: u64,
) -> Result<()> {
    adam_step_with(params, grads, state, lr, step_index, AdamConfig::default())
}

pub fn adam_step_with(
    params: &mut NetworkParams,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
    step_index: u64,
    cfg: AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    if step_index == 0 {
        return Err(Error::config("adam step index counts from 1"));
    }
    if grads.weights.len() != params.layers.len()
        || grads
            .weights
            .iter()
            .zip(&params.layers)
            .any(|(g, l)| g.raw_dim() != l.weight.raw_dim())
    {
        return Err(Error::config("gradient shapes do not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::numerical("non-finite gradient passed to adam"));
    }
    let AdamConfig { beta1, beta2, eps } = cfg;
    let bc1 = 1.0 - beta1.powf(step_index as f64);
    let bc2 = 1.0 - beta2.powf(step_index as f64);
    let update = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (l, layer) in params.layers.iter_mut().enumerate() {
        Zip::from(&mut layer.weight)
            .and(&mut state.first.weights[l])
            .and(&mut state.second.weights[l])
            .and(&grads.weights[l])
            .for_each(|t, m, v, &g| update(t, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut state.first.biases[l])
            .and(&mut state.second.biases[l])
            .and(&grads.biases[l])
            .for_each(|t, m, v, &g| update(t, m, v, g));
    }
    Ok(())
}

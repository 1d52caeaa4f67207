//! Experiment configuration: strict JSON, every default materialized on load.

use std::path::{Path, PathBuf};

use lownoise_core::mixtures::CatalogName;
use lownoise_core::objectives::{
    validate_ladder, NcsnWeighting, ObjectiveKind, ObjectiveSpec, TrainConfig, DEFAULT_LADDER,
};
use lownoise_core::probes::{ProbeKind, DEFAULT_SAMPLES, DEFAULT_SIGMAS, MAX_POOL};
use lownoise_core::sampler::{default_max_steps, ConvergenceMode, DenoisePolicy, Sign, SIGMA_MAX};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, Stage, StageError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub catalog: CatalogName,
    pub objectives: Vec<ObjectiveEntry>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default = "default_probes")]
    pub probes: Vec<ProbeConfig>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_sigmas")]
    pub sigma_list: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_probes() -> Vec<ProbeConfig> {
    vec![ProbeConfig::Consistency(ConsistencyParams::default())]
}

fn default_sizes() -> Vec<usize> {
    vec![1, 10, 100, 1_000, 10_000, 100_000]
}

fn default_sigmas() -> Vec<f64> {
    DEFAULT_SIGMAS.to_vec()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveEntry {
    pub kind: ObjectiveKind,
    #[serde(default = "default_ladder")]
    pub sigma_ladder: Vec<f64>,
    #[serde(default)]
    pub ncsn_weighting: NcsnWeighting,
    #[serde(default = "one")]
    pub ssm_slices: usize,
}

fn default_ladder() -> Vec<f64> {
    DEFAULT_LADDER.to_vec()
}

fn one() -> usize {
    1
}

impl ObjectiveEntry {
    pub fn spec(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            kind: self.kind,
            sigma_ladder: self.sigma_ladder.clone(),
            ncsn_weighting: self.ncsn_weighting,
            ssm_slices: self.ssm_slices,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr: t.lr,
            epochs: t.epochs,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub eta: f64,
    pub kappa: f64,
    pub conv_tol: f64,
    /// `None` until materialized from the catalog dimension.
    pub max_steps: Option<usize>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let p = DenoisePolicy::for_dim(2);
        Self {
            steps: p.steps,
            eta: p.eta,
            kappa: 0.0,
            conv_tol: p.conv_tol,
            max_steps: None,
        }
    }
}

impl SamplerSection {
    pub fn policy(&self, dim: usize) -> DenoisePolicy {
        DenoisePolicy {
            steps: self.steps,
            eta: self.eta,
            max_steps: self.max_steps.unwrap_or_else(|| default_max_steps(dim)),
            conv_tol: self.conv_tol,
            conv_mode: ConvergenceMode::Absolute,
            sign: Sign::ScoreAscent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyParams {
    pub samples: usize,
    /// Run every trajectory for `max_steps` instead of stopping on convergence.
    pub fixed_horizon: bool,
    /// Existing A and B checkpoints to probe instead of training.
    pub checkpoints: Option<[PathBuf; 2]>,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            fixed_horizon: false,
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoisingParams {
    pub samples: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for DenoisingParams {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttractorParams {
    pub samples: usize,
    pub sigma: f64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for AttractorParams {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            sigma: 0.1,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreAccuracyParams {
    pub n_eval: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ScoreAccuracyParams {
    fn default() -> Self {
        Self {
            n_eval: DEFAULT_SAMPLES,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryParams {
    pub samples: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            samples: 100,
            sigma_start: 1.0,
            sigma_end: 0.1,
            checkpoint: None,
        }
    }
}

/// One entry of the `probes` list, `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbe", into = "RawProbe")]
pub enum ProbeConfig {
    Consistency(ConsistencyParams),
    DenoisingPerformance(DenoisingParams),
    Attractor(AttractorParams),
    ScoreAccuracy(ScoreAccuracyParams),
    TrajectoryComparison(TrajectoryParams),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbe {
    kind: ProbeKind,
    #[serde(default)]
    params: Value,
}

fn params<T: for<'de> Deserialize<'de> + Default>(kind: ProbeKind, v: Value) -> Result<T, String> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v).map_err(|e| format!("probes: {kind} params: {e}"))
}

impl TryFrom<RawProbe> for ProbeConfig {
    type Error = String;

    fn try_from(raw: RawProbe) -> Result<Self, String> {
        let k = raw.kind;
        Ok(match k {
            ProbeKind::Consistency => ProbeConfig::Consistency(params(k, raw.params)?),
            ProbeKind::DenoisingPerformance => {
                ProbeConfig::DenoisingPerformance(params(k, raw.params)?)
            }
            ProbeKind::Attractor => ProbeConfig::Attractor(params(k, raw.params)?),
            ProbeKind::ScoreAccuracy => ProbeConfig::ScoreAccuracy(params(k, raw.params)?),
            ProbeKind::TrajectoryComparison => {
                ProbeConfig::TrajectoryComparison(params(k, raw.params)?)
            }
        })
    }
}

impl From<ProbeConfig> for RawProbe {
    fn from(p: ProbeConfig) -> Self {
        let kind = p.kind();
        let params = match p {
            ProbeConfig::Consistency(x) => serde_json::to_value(x),
            ProbeConfig::DenoisingPerformance(x) => serde_json::to_value(x),
            ProbeConfig::Attractor(x) => serde_json::to_value(x),
            ProbeConfig::ScoreAccuracy(x) => serde_json::to_value(x),
            ProbeConfig::TrajectoryComparison(x) => serde_json::to_value(x),
        }
        .expect("params serialize");
        RawProbe { kind, params }
    }
}

impl ProbeConfig {
    pub fn kind(&self) -> ProbeKind {
        match self {
            ProbeConfig::Consistency(_) => ProbeKind::Consistency,
            ProbeConfig::DenoisingPerformance(_) => ProbeKind::DenoisingPerformance,
            ProbeConfig::Attractor(_) => ProbeKind::Attractor,
            ProbeConfig::ScoreAccuracy(_) => ProbeKind::ScoreAccuracy,
            ProbeConfig::TrajectoryComparison(_) => ProbeKind::TrajectoryComparison,
        }
    }

    /// Whether the probe compares two independently trained models.
    pub fn needs_pair(&self) -> bool {
        matches!(self, ProbeConfig::Consistency(_))
    }

    /// Number of held-out points the probe consumes.
    pub fn test_points(&self) -> usize {
        match self {
            ProbeConfig::Consistency(p) => p.samples,
            ProbeConfig::DenoisingPerformance(p) => p.samples,
            ProbeConfig::Attractor(p) => p.samples,
            _ => 0,
        }
    }

    pub fn checkpoints(&self) -> Vec<&Path> {
        match self {
            ProbeConfig::Consistency(p) => p
                .checkpoints
                .iter()
                .flat_map(|c| c.iter().map(PathBuf::as_path))
                .collect(),
            ProbeConfig::DenoisingPerformance(p) => p.checkpoint.as_deref().into_iter().collect(),
            ProbeConfig::Attractor(p) => p.checkpoint.as_deref().into_iter().collect(),
            ProbeConfig::ScoreAccuracy(p) => p.checkpoint.as_deref().into_iter().collect(),
            ProbeConfig::TrajectoryComparison(p) => p.checkpoint.as_deref().into_iter().collect(),
        }
    }
}

fn bad(field: impl AsRef<str>, msg: impl AsRef<str>) -> StageError {
    StageError::new(
        Stage::Config,
        format!("{}: {}", field.as_ref(), msg.as_ref()),
    )
}

fn check_sigma(field: String, s: f64) -> Result<()> {
    if !(s > 0.0 && s <= SIGMA_MAX) {
        return Err(bad(field, format!("must lie in (0, {SIGMA_MAX}], got {s}")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses JSON text. Syntax errors carry line and column; schema errors
    /// name the offending key or field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| StageError::new(Stage::Config, e.to_string()))?;
        cfg.validate()?;
        cfg.materialize();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn materialize(&mut self) {
        if self.sampler.max_steps.is_none() {
            self.sampler.max_steps = Some(default_max_steps(self.catalog.dim()));
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() {
            return Err(bad("objectives", "must list at least one objective"));
        }
        for (i, o) in self.objectives.iter().enumerate() {
            validate_ladder(&o.sigma_ladder)
                .map_err(|e| bad(format!("objectives[{i}].sigma_ladder"), e.to_string()))?;
            if o.ssm_slices == 0 {
                return Err(bad(format!("objectives[{i}].ssm_slices"), "must be >= 1"));
            }
            if self.objectives[..i].iter().any(|p| p.kind == o.kind) {
                return Err(bad(
                    format!("objectives[{i}].kind"),
                    format!("{} listed twice", o.kind),
                ));
            }
        }
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            lr: t.lr,
            epochs: t.epochs,
            seed: t.seed,
        }
        .validate()
        .map_err(|e| bad("train", e.to_string()))?;
        let s = &self.sampler;
        if s.steps == 0 {
            return Err(bad("sampler.steps", "must be >= 1"));
        }
        if !(s.eta > 0.0 && s.eta.is_finite()) {
            return Err(bad("sampler.eta", format!("must be > 0, got {}", s.eta)));
        }
        if !(s.kappa >= 0.0 && s.kappa.is_finite()) {
            return Err(bad(
                "sampler.kappa",
                format!("must be >= 0, got {}", s.kappa),
            ));
        }
        if !(s.conv_tol >= 0.0 && s.conv_tol.is_finite()) {
            return Err(bad(
                "sampler.conv_tol",
                format!("must be >= 0, got {}", s.conv_tol),
            ));
        }
        if s.max_steps == Some(0) {
            return Err(bad("sampler.max_steps", "must be >= 1"));
        }
        if self.sizes.is_empty() {
            return Err(bad("sizes", "must not be empty"));
        }
        for (i, &n) in self.sizes.iter().enumerate() {
            if n == 0 || 2 * n > MAX_POOL {
                return Err(bad(
                    format!("sizes[{i}]"),
                    format!("must lie in [1, {}], got {n}", MAX_POOL / 2),
                ));
            }
            if self.sizes[..i].contains(&n) {
                return Err(bad(format!("sizes[{i}]"), format!("{n} listed twice")));
            }
        }
        if self.sigma_list.is_empty() {
            return Err(bad("sigma_list", "must not be empty"));
        }
        for (i, &sg) in self.sigma_list.iter().enumerate() {
            check_sigma(format!("sigma_list[{i}]"), sg)?;
            if self.sigma_list[..i]
                .iter()
                .any(|x| x.to_bits() == sg.to_bits())
            {
                return Err(bad(
                    format!("sigma_list[{i}]"),
                    format!("{sg} listed twice"),
                ));
            }
        }
        for (i, p) in self.probes.iter().enumerate() {
            if self.probes[..i].iter().any(|q| q.kind() == p.kind()) {
                return Err(bad(
                    format!("probes[{i}].kind"),
                    format!("{} listed twice", p.kind()),
                ));
            }
            let field = |name: &str| format!("probes[{i}].params.{name}");
            match p {
                ProbeConfig::Consistency(c) if c.samples == 0 => {
                    return Err(bad(field("samples"), "must be >= 1"))
                }
                ProbeConfig::DenoisingPerformance(c) if c.samples == 0 => {
                    return Err(bad(field("samples"), "must be >= 1"))
                }
                ProbeConfig::Attractor(c) => {
                    if c.samples == 0 {
                        return Err(bad(field("samples"), "must be >= 1"));
                    }
                    check_sigma(field("sigma"), c.sigma)?;
                }
                ProbeConfig::ScoreAccuracy(c) if c.n_eval == 0 => {
                    return Err(bad(field("n_eval"), "must be >= 1"))
                }
                ProbeConfig::TrajectoryComparison(c) => {
                    if c.samples == 0 {
                        return Err(bad(field("samples"), "must be >= 1"));
                    }
                    check_sigma(field("sigma_start"), c.sigma_start)?;
                    check_sigma(field("sigma_end"), c.sigma_end)?;
                    if c.sigma_end >= c.sigma_start {
                        return Err(bad(field("sigma_end"), "must be below sigma_start"));
                    }
                }
                _ => {}
            }
            if !p.checkpoints().is_empty() && (self.sizes.len() != 1 || self.objectives.len() != 1)
            {
                return Err(bad(
                    field("checkpoint"),
                    "explicit checkpoints need exactly one size and one objective",
                ));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            epochs: self.train.epochs,
            seed,
        }
    }

    pub fn policy(&self) -> DenoisePolicy {
        self.sampler.policy(self.catalog.dim())
    }
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| StageError::new(Stage::Config, format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
        .map_err(|e| StageError::new(Stage::Config, format!("{}: {}", path.display(), e.message)))
}

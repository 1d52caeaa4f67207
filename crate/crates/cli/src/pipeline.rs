//! The stages behind each subcommand and the output layout they share.
//!
//! Every stage reads its inputs from the output directory, so each one can
//! run on its own once the earlier stages have written their files. All seeds
//! come from `master_seed` through [`Seeds`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lownoise_core::export::{
    dataset_csv, histogram_csv, metric_csv, parse_dataset_csv, records_csv,
};
use lownoise_core::metrics::{histogram, MetricSeries, HISTOGRAM_BINS};
use lownoise_core::mixtures::{
    disjoint_pair, make_catalog, CatalogName, DatasetHandle, GaussianMixture, MixtureDoc,
};
use lownoise_core::objectives::{train, Architecture, Checkpoint, ObjectiveKind, TrainedModel};
use lownoise_core::probes::{
    attractor_probe, consistency_probe, denoising_performance_probe, far_inits,
    score_accuracy_probe, trajectory_comparison_probe, ProbeKind, ProbeReport, Record,
};
use lownoise_core::rng::derive_seed;
use lownoise_core::sampler::{make_schedule, FieldMetadata, RunOptions, TrainedField};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ProbeConfig};
use crate::error::{AtStage, Result, Stage, StageError};
use crate::manifest::{refresh, write_atomic};
use crate::plot::{csv_columns, emit_plot, Plot, PlotKind, Series};

/// Seed derivation. Every seed is `derive_seed(master_seed, label, index)`
/// with a label naming the component, so adding a probe or a size never
/// moves an existing seed.
#[derive(Debug, Clone, Copy)]
pub struct Seeds(pub u64);

impl Seeds {
    pub fn catalog(self) -> u64 {
        derive_seed(self.0, "catalog", 0)
    }

    pub fn pool(self, size: usize) -> u64 {
        derive_seed(self.0, "pool", size as u64)
    }

    pub fn test(self, size: usize) -> u64 {
        derive_seed(self.0, "test", size as u64)
    }

    pub fn train(self, objective: ObjectiveKind, half: Half, size: usize, user: u64) -> u64 {
        let base = derive_seed(self.0, &format!("train/{objective}/{half}"), size as u64);
        derive_seed(base, "user", user)
    }

    pub fn probe(self, kind: ProbeKind, size: usize) -> u64 {
        derive_seed(self.0, &format!("probe/{kind}"), size as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Half {
    A,
    B,
}

impl std::fmt::Display for Half {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Half::A => "A",
            Half::B => "B",
        })
    }
}

/// Paths inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub catalog: CatalogName,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, catalog: CatalogName) -> Self {
        Self {
            root: root.into(),
            catalog,
        }
    }

    pub fn mixture(&self) -> PathBuf {
        self.root.join("mixture.json")
    }

    pub fn data_index(&self) -> PathBuf {
        self.root.join("data").join("index.json")
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    /// Relative to the root, as recorded in provenance.
    pub fn checkpoint_rel(&self, objective: ObjectiveKind, size: usize, half: Half) -> String {
        format!(
            "checkpoints/{objective}_{}_{size}_{half}.ckpt.json",
            self.catalog
        )
    }

    pub fn log(&self, objective: ObjectiveKind, size: usize, half: Half) -> PathBuf {
        self.root
            .join("logs")
            .join(format!("{objective}_{}_{size}_{half}.csv", self.catalog))
    }

    fn stem(&self, probe: ProbeKind, size: usize) -> String {
        format!("{probe}_{}_{size}", self.catalog)
    }

    pub fn records(
        &self,
        objective: ObjectiveKind,
        probe: ProbeKind,
        size: usize,
        sigma: f64,
    ) -> PathBuf {
        self.root
            .join("probes")
            .join(objective.as_str())
            .join(format!("{}_{sigma}.csv", self.stem(probe, size)))
    }

    pub fn summary(&self, objective: ObjectiveKind, probe: ProbeKind, size: usize) -> PathBuf {
        self.root
            .join("probes")
            .join(objective.as_str())
            .join(format!("{}.json", self.stem(probe, size)))
    }

    pub fn paths(&self, objective: ObjectiveKind, probe: ProbeKind, size: usize) -> PathBuf {
        self.root
            .join("probes")
            .join(objective.as_str())
            .join(format!("{}_paths.csv", self.stem(probe, size)))
    }

    pub fn report_dir(&self, objective: ObjectiveKind) -> PathBuf {
        self.root.join("reports").join(objective.as_str())
    }

    pub fn report_index(&self) -> PathBuf {
        self.root.join("reports").join("plots.json")
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

fn write_text(path: &Path, text: &str, stage: Stage) -> Result<()> {
    write_atomic(path, text.as_bytes(), stage)
}

fn read_text(path: &Path, stage: Stage) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| StageError::new(stage, format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    let text = read_text(path, stage)?;
    serde_json::from_str(&text)
        .map_err(|e| StageError::new(stage, format!("{}: {e}", path.display())))
}

/// Probe σ values as they appear in record file names.
pub fn probe_sigmas(cfg: &ExperimentConfig, probe: &ProbeConfig) -> Vec<f64> {
    match probe {
        ProbeConfig::Attractor(p) => vec![p.sigma],
        ProbeConfig::TrajectoryComparison(p) => vec![p.sigma_start],
        _ => cfg.sigma_list.clone(),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataEntry {
    pub size: usize,
    pub role: String,
    pub file: String,
    pub seed: u64,
    pub cardinality: usize,
    pub pool_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataIndex {
    pub catalog: CatalogName,
    pub sets: Vec<DataEntry>,
}

fn needs_model(cfg: &ExperimentConfig) -> bool {
    cfg.probes.is_empty() || cfg.probes.iter().any(|p| p.checkpoints().is_empty())
}

fn needs_pair(cfg: &ExperimentConfig) -> bool {
    cfg.probes
        .iter()
        .any(|p| p.needs_pair() && p.checkpoints().is_empty())
}

fn test_cardinality(cfg: &ExperimentConfig) -> usize {
    cfg.probes
        .iter()
        .map(ProbeConfig::test_points)
        .max()
        .unwrap_or(0)
        .max(1)
}

/// Writes the mixture, the A/B training subsets of every size and a held-out
/// test set per size.
pub fn gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let stage = Stage::GenData;
    let layout = Layout::new(root, cfg.catalog);
    let seeds = Seeds(cfg.master_seed);
    let mixture = Arc::new(make_catalog(cfg.catalog, seeds.catalog()).at(stage)?);
    write_text(&layout.mixture(), &to_json(&mixture.to_doc()), stage)?;
    let mut sets = Vec::new();
    for &size in &cfg.sizes {
        let (a, b) =
            disjoint_pair(cfg.catalog, mixture.clone(), size, seeds.pool(size)).at(stage)?;
        let test = DatasetHandle::generate(
            cfg.catalog,
            mixture.clone(),
            test_cardinality(cfg),
            seeds.test(size),
        )
        .at(stage)?;
        let mut handles = vec![("A", a)];
        if needs_pair(cfg) {
            handles.push(("B", b));
        }
        handles.push(("test", test));
        for (role, h) in handles {
            let file = h.file_name();
            write_text(&layout.data(&file), &dataset_csv(&h.points), stage)?;
            sets.push(DataEntry {
                size,
                role: role.into(),
                file,
                seed: h.seed,
                cardinality: h.cardinality,
                pool_offset: h.pool_offset,
            });
        }
    }
    let index = DataIndex {
        catalog: cfg.catalog,
        sets,
    };
    write_text(&layout.data_index(), &to_json(&index), stage)
}

/// Datasets and mixture as written by [`gen_data`].
pub struct LoadedData {
    pub mixture: Arc<GaussianMixture>,
    pub sets: Vec<(DataEntry, DatasetHandle)>,
}

impl LoadedData {
    pub fn get(&self, size: usize, role: &str) -> Result<&DatasetHandle> {
        self.sets
            .iter()
            .find(|(e, _)| e.size == size && e.role == role)
            .map(|(_, h)| h)
            .ok_or_else(|| {
                StageError::new(
                    Stage::Load,
                    format!("no {role} dataset of size {size}; run gen-data with this config"),
                )
            })
    }
}

pub fn load_data(cfg: &ExperimentConfig, root: &Path) -> Result<LoadedData> {
    let stage = Stage::Load;
    let layout = Layout::new(root, cfg.catalog);
    let doc: MixtureDoc = from_json(&layout.mixture(), stage)?;
    let mixture = Arc::new(GaussianMixture::from_doc(&doc).at(stage)?);
    let index: DataIndex = from_json(&layout.data_index(), stage)?;
    if index.catalog != cfg.catalog {
        return Err(StageError::new(
            stage,
            format!(
                "{}: data is for {}, config asks for {}",
                layout.data_index().display(),
                index.catalog,
                cfg.catalog
            ),
        ));
    }
    let mut sets = Vec::new();
    for e in index.sets {
        let path = layout.data(&e.file);
        let points = parse_dataset_csv(&read_text(&path, stage)?)
            .map_err(|err| StageError::new(stage, format!("{}: {err}", path.display())))?;
        if points.len() != e.cardinality || points.iter().any(|p| p.len() != mixture.dim()) {
            return Err(StageError::new(
                stage,
                format!("{}: does not match its index entry", path.display()),
            ));
        }
        let handle = DatasetHandle {
            name: cfg.catalog,
            seed: e.seed,
            cardinality: e.cardinality,
            points,
            source_mixture: mixture.clone(),
            pool_offset: e.pool_offset,
        };
        sets.push((e, handle));
    }
    Ok(LoadedData { mixture, sets })
}

// ------------------------------------------------------------------- train

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let ckpt: Checkpoint = from_json(path, Stage::Load)?;
    TrainedModel::from_checkpoint(&ckpt)
        .map_err(|e| StageError::new(Stage::Load, format!("{}: {e}", path.display())))
}

fn log_csv(model: &TrainedModel) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for r in &model.log {
        writeln!(out, "{},{}", r.epoch, r.mean_loss).expect("write");
    }
    out
}

/// Trains every model the probes need. A checkpoint already on disk is kept
/// when it was trained with exactly the requested settings.
pub fn train_models(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    if !needs_model(cfg) {
        return Ok(());
    }
    let stage = Stage::Train;
    let data = load_data(cfg, root)?;
    let layout = Layout::new(root, cfg.catalog);
    let seeds = Seeds(cfg.master_seed);
    let arch = Architecture::default();
    let mut halves = vec![Half::A];
    if needs_pair(cfg) {
        halves.push(Half::B);
    }
    for entry in &cfg.objectives {
        let spec = entry.spec();
        for &size in &cfg.sizes {
            for &half in &halves {
                let dataset = data.get(size, &half.to_string())?;
                let config = cfg.train_config(seeds.train(entry.kind, half, size, cfg.train.seed));
                let path = root.join(layout.checkpoint_rel(entry.kind, size, half));
                if path.exists() {
                    let m = load_checkpoint(&path)?;
                    let same = m.objective == spec
                        && m.config == config
                        && m.training_size == dataset.cardinality
                        && m.dataset == dataset.file_name()
                        && m.params.layer_dims() == arch.layer_dims(dataset.dim()).as_slice()
                        && m.params.activation() == arch.activation;
                    if same {
                        continue;
                    }
                }
                let model = train(&spec, dataset, &arch, &config)
                    .map_err(|e| StageError::new(stage, format!("{}: {e}", path.display())))?;
                write_text(&path, &to_json(&model.to_checkpoint()), stage)?;
                write_text(&layout.log(entry.kind, size, half), &log_csv(&model), stage)?;
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- probe

/// JSON summary of one probe run: aggregates plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSummary {
    pub objective: ObjectiveKind,
    pub catalog: CatalogName,
    pub size: usize,
    pub checkpoints: Vec<String>,
    pub report: ProbeReport,
}

fn field_for(
    cfg: &ExperimentConfig,
    root: &Path,
    objective: ObjectiveKind,
    size: usize,
    half: Half,
    explicit: Option<&Path>,
) -> Result<(TrainedField, String)> {
    let layout = Layout::new(root, cfg.catalog);
    let (path, source) = match explicit {
        Some(p) => (p.to_path_buf(), p.display().to_string()),
        None => {
            let rel = layout.checkpoint_rel(objective, size, half);
            (root.join(&rel), rel)
        }
    };
    if !path.exists() {
        return Err(StageError::new(
            Stage::Load,
            format!("checkpoint {} does not exist", path.display()),
        ));
    }
    let model = load_checkpoint(&path)?;
    if model.params.data_dim() != cfg.catalog.dim() {
        return Err(StageError::new(
            Stage::Load,
            format!(
                "{}: model dimension {} does not match {}",
                path.display(),
                model.params.data_dim(),
                cfg.catalog
            ),
        ));
    }
    let metadata = FieldMetadata {
        objective: Some(model.objective.kind.to_string()),
        seed: Some(model.config.seed),
        training_size: Some(model.training_size),
        source: source.clone(),
    };
    Ok((
        TrainedField::new(model.objective.kind, Arc::new(model.params), metadata),
        source,
    ))
}

fn paths_csv(report: &ProbeReport) -> String {
    let dim = report
        .pairs
        .first()
        .and_then(|p| p.first.states.first())
        .map_or(0, Vec::len);
    let mut out = String::from("sample,path,t,sigma");
    for k in 0..dim {
        write!(out, ",x{k}").expect("write");
    }
    out.push('\n');
    for pair in &report.pairs {
        for (name, traj) in [("learned", &pair.first), ("analytic", &pair.second)] {
            for (t, x) in traj.states.iter().enumerate() {
                write!(out, "{},{name},{t},", pair.sample).expect("write");
                if let Some(s) = traj.sigmas.get(t) {
                    write!(out, "{s}").expect("write");
                }
                for v in x {
                    write!(out, ",{v}").expect("write");
                }
                out.push('\n');
            }
        }
    }
    out
}

fn run_probe(
    cfg: &ExperimentConfig,
    root: &Path,
    data: &LoadedData,
    objective: ObjectiveKind,
    size: usize,
    probe: &ProbeConfig,
) -> Result<(ProbeReport, Vec<String>)> {
    let stage = Stage::Probe;
    let seed = Seeds(cfg.master_seed).probe(probe.kind(), size);
    let policy = cfg.policy();
    let test = data.get(size, "test")?;
    let head = |n: usize| test.points[..n.min(test.points.len())].to_vec();
    Ok(match probe {
        ProbeConfig::Consistency(p) => {
            let explicit = p.checkpoints.as_ref();
            let (a, sa) = field_for(
                cfg,
                root,
                objective,
                size,
                Half::A,
                explicit.map(|c| c[0].as_path()),
            )?;
            let (b, sb) = field_for(
                cfg,
                root,
                objective,
                size,
                Half::B,
                explicit.map(|c| c[1].as_path()),
            )?;
            let mut policy = policy;
            if p.fixed_horizon {
                policy.conv_tol = 0.0;
            }
            let r = consistency_probe(&a, &b, &head(p.samples), &cfg.sigma_list, &policy, seed)
                .at(stage)?;
            (r, vec![sa, sb])
        }
        ProbeConfig::DenoisingPerformance(p) => {
            let (f, s) = field_for(cfg, root, objective, size, Half::A, p.checkpoint.as_deref())?;
            let train = data.get(size, "A")?;
            let r = denoising_performance_probe(
                &f,
                train,
                test,
                &cfg.sigma_list,
                p.samples,
                &policy,
                seed,
            )
            .at(stage)?;
            (r, vec![s])
        }
        ProbeConfig::Attractor(p) => {
            let (f, s) = field_for(cfg, root, objective, size, Half::A, p.checkpoint.as_deref())?;
            let r = attractor_probe(&f, &head(p.samples), p.sigma, &policy, seed).at(stage)?;
            (r, vec![s])
        }
        ProbeConfig::ScoreAccuracy(p) => {
            let (f, s) = field_for(cfg, root, objective, size, Half::A, p.checkpoint.as_deref())?;
            let mut merged: Option<ProbeReport> = None;
            for &sigma in &cfg.sigma_list {
                let r = score_accuracy_probe(&f, &data.mixture, p.n_eval, sigma, seed).at(stage)?;
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
            (merged.expect("nonempty sigma list"), vec![s])
        }
        ProbeConfig::TrajectoryComparison(p) => {
            let (f, s) = field_for(cfg, root, objective, size, Half::A, p.checkpoint.as_deref())?;
            let inits = far_inits(&data.mixture, p.sigma_start, p.samples, seed).at(stage)?;
            let schedule = make_schedule(
                p.sigma_start,
                p.sigma_end,
                cfg.sampler.steps,
                cfg.sampler.eta,
                0.0,
            )
            .at(stage)?;
            let options = RunOptions::new(policy.max_steps, 0.0);
            let mut r =
                trajectory_comparison_probe(&f, data.mixture.clone(), &inits, &schedule, &options)
                    .at(stage)?;
            r.provenance.seed = seed;
            (r, vec![s])
        }
    })
}

/// Runs every configured probe for every objective and size, writing one
/// records CSV per σ and one JSON summary per probe.
pub fn run_probes(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let stage = Stage::Probe;
    let data = load_data(cfg, root)?;
    let layout = Layout::new(root, cfg.catalog);
    for entry in &cfg.objectives {
        for &size in &cfg.sizes {
            for probe in &cfg.probes {
                let kind = probe.kind();
                let (report, checkpoints) = run_probe(cfg, root, &data, entry.kind, size, probe)?;
                report.audit().at(stage)?;
                for sigma in probe_sigmas(cfg, probe) {
                    let rows = report
                        .records
                        .iter()
                        .filter(|r| r.sigma.to_bits() == sigma.to_bits());
                    write_text(
                        &layout.records(entry.kind, kind, size, sigma),
                        &records_csv(rows),
                        stage,
                    )?;
                }
                if kind == ProbeKind::TrajectoryComparison {
                    write_text(
                        &layout.paths(entry.kind, kind, size),
                        &paths_csv(&report),
                        stage,
                    )?;
                }
                let summary = ProbeSummary {
                    objective: entry.kind,
                    catalog: cfg.catalog,
                    size,
                    checkpoints,
                    report,
                };
                write_text(
                    &layout.summary(entry.kind, kind, size),
                    &to_json(&summary),
                    stage,
                )?;
            }
        }
    }
    Ok(())
}

/// Parses a records CSV back into records at `sigma`.
pub fn parse_records(text: &str, sigma: f64) -> Result<Vec<Record>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("sample,metric,group,t,value,flag") {
        return Err("unexpected header".into());
    }
    let mut out: Vec<Record> = Vec::new();
    for (n, line) in lines.enumerate() {
        let c: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| format!("line {}: bad {what}", n + 2);
        if c.len() != 6 {
            return Err(bad("row"));
        }
        out.push(Record {
            sigma,
            sample: c[0].parse().map_err(|_| bad("sample"))?,
            metric: c[1].to_string(),
            group: (!c[2].is_empty()).then(|| c[2].to_string()),
            step: if c[3].is_empty() {
                None
            } else {
                Some(c[3].parse().map_err(|_| bad("t"))?)
            },
            is_final: false,
            value: c[4].parse().map_err(|_| bad("value"))?,
            flag: c[5] == "1",
        });
    }
    let mut last: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for (i, r) in out.iter().enumerate() {
        if r.step.is_some() {
            last.insert((r.sample, r.metric.clone()), i);
        }
    }
    for i in last.into_values() {
        out[i].is_final = true;
    }
    Ok(out)
}

/// Loads a probe summary with its records reattached from the CSVs.
pub fn load_probe(
    cfg: &ExperimentConfig,
    root: &Path,
    objective: ObjectiveKind,
    size: usize,
    probe: &ProbeConfig,
    stage: Stage,
) -> Result<ProbeSummary> {
    let layout = Layout::new(root, cfg.catalog);
    let mut summary: ProbeSummary =
        from_json(&layout.summary(objective, probe.kind(), size), stage)?;
    for sigma in probe_sigmas(cfg, probe) {
        let path = layout.records(objective, probe.kind(), size, sigma);
        let records = parse_records(&read_text(&path, stage)?, sigma)
            .map_err(|e| StageError::new(stage, format!("{}: {e}", path.display())))?;
        summary.report.records.extend(records);
    }
    Ok(summary)
}

// ------------------------------------------------------------------ report

/// One plot to draw, with the CSV columns it renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub kind: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub output: String,
    pub series: Vec<SeriesSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesSpec {
    pub name: String,
    pub csv: String,
    pub x: String,
    pub y: String,
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .expect("under root")
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Mean over samples at each step. Steps some samples never reached (they
/// converged earlier) are flagged.
pub fn mean_curve(records: &[Record], metric: &str, group: Option<&str>) -> MetricSeries {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut samples = std::collections::BTreeSet::new();
    for r in records
        .iter()
        .filter(|r| r.metric == metric && (group.is_none() || r.group.as_deref() == group))
    {
        if let Some(t) = r.step {
            let e = sums.entry(t).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
            samples.insert(r.sample);
        }
    }
    let mut s = MetricSeries {
        name: metric.to_string(),
        steps: Vec::new(),
        values: Vec::new(),
        flags: Vec::new(),
    };
    for (t, (sum, n)) in sums {
        s.steps.push(t);
        s.values.push(sum / n as f64);
        s.flags.push(n < samples.len());
    }
    s
}

fn step_metrics(records: &[Record]) -> Vec<(String, Option<String>)> {
    let mut out: Vec<(String, Option<String>)> = Vec::new();
    for r in records.iter().filter(|r| r.step.is_some()) {
        let key = (r.metric.clone(), r.group.clone());
        if !out.contains(&key) {
            out.push(key);
        }
    }
    out
}

fn scalar_metrics(records: &[Record]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records.iter().filter(|r| r.step.is_none()) {
        if !out.contains(&r.metric) {
            out.push(r.metric.clone());
        }
    }
    out
}

fn summary_rows(s: &ProbeSummary, out: &mut String) {
    for a in &s.report.aggregates {
        let sel = &a.selector;
        let sigma = sel.sigma.map(|v| v.to_string()).unwrap_or_default();
        let steps = serde_json::to_string(&sel.steps).expect("serializable");
        writeln!(
            out,
            "{},{},{},{},{sigma},{},{},{},{},{},{},{}",
            s.objective,
            s.size,
            s.report.probe,
            sel.metric,
            sel.group.as_deref().unwrap_or(""),
            steps.trim_matches('"').replace(',', ";"),
            a.summary.count,
            a.summary.mean,
            a.summary.median,
            a.summary.q1,
            a.summary.q3
        )
        .expect("write");
    }
}

/// Turns probe outputs into per-step mean curves, histograms, scatter
/// tables, an aggregate table and the plot index.
pub fn report(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let stage = Stage::Report;
    let layout = Layout::new(root, cfg.catalog);
    let mut table =
        String::from("objective,size,probe,metric,sigma,group,steps,count,mean,median,q1,q3\n");
    let mut plots: Vec<PlotSpec> = Vec::new();
    for entry in &cfg.objectives {
        let objective = entry.kind;
        let dir = layout.report_dir(objective);
        for &size in &cfg.sizes {
            for probe in &cfg.probes {
                let kind = probe.kind();
                let summary = load_probe(cfg, root, objective, size, probe, stage)?;
                summary_rows(&summary, &mut table);
                let records = &summary.report.records;
                let stem = format!("{kind}_{}_{size}", cfg.catalog);
                let mut curves: BTreeMap<String, Vec<SeriesSpec>> = BTreeMap::new();
                for sigma in probe_sigmas(cfg, probe) {
                    let at: Vec<Record> = records
                        .iter()
                        .filter(|r| r.sigma.to_bits() == sigma.to_bits())
                        .cloned()
                        .collect();
                    for (metric, group) in step_metrics(&at) {
                        let g = group.as_deref();
                        let name = match g {
                            Some(g) => format!("{metric}_{g}"),
                            None => metric.clone(),
                        };
                        let curve = mean_curve(&at, &metric, g);
                        let path = dir.join(format!("{stem}_{sigma}_{name}_curve.csv"));
                        write_text(&path, &metric_csv(&curve), stage)?;
                        curves.entry(name.clone()).or_default().push(SeriesSpec {
                            name: format!("sigma={sigma}"),
                            csv: rel(root, &path),
                            x: "t".into(),
                            y: "value".into(),
                        });
                        if metric == "cosine_similarity" {
                            let finals: Vec<f64> = at
                                .iter()
                                .filter(|r| {
                                    r.metric == metric && r.is_final && r.group.as_deref() == g
                                })
                                .map(|r| r.value)
                                .collect();
                            let bins = histogram(&finals, -1.0, 1.0, HISTOGRAM_BINS).at(stage)?;
                            let path = dir.join(format!("{stem}_{sigma}_final_{name}_hist.csv"));
                            write_text(&path, &histogram_csv(&bins), stage)?;
                            plots.push(hist_plot(
                                root,
                                objective,
                                &path,
                                &format!("{stem} sigma={sigma}"),
                                &format!("final {name}"),
                            ));
                        }
                    }
                    for metric in scalar_metrics(&at) {
                        let values: Vec<f64> = at
                            .iter()
                            .filter(|r| r.metric == metric && r.step.is_none())
                            .map(|r| r.value)
                            .collect();
                        let (lo, hi) = scalar_range(&values);
                        let bins = histogram(&values, lo, hi, HISTOGRAM_BINS).at(stage)?;
                        let path = dir.join(format!("{stem}_{sigma}_{metric}_hist.csv"));
                        write_text(&path, &histogram_csv(&bins), stage)?;
                        plots.push(hist_plot(
                            root,
                            objective,
                            &path,
                            &format!("{stem} sigma={sigma}"),
                            &metric,
                        ));
                    }
                    if kind == ProbeKind::ScoreAccuracy {
                        let path = dir.join(format!("{stem}_{sigma}_scatter.csv"));
                        write_text(&path, &scatter_csv(&at), stage)?;
                        plots.push(PlotSpec {
                            kind: "scatter".into(),
                            title: format!("{objective} {stem} sigma={sigma}"),
                            x_label: "center_distance".into(),
                            y_label: "score_error".into(),
                            output: format!("plots/{objective}/{stem}_{sigma}_scatter.svg"),
                            series: vec![SeriesSpec {
                                name: "points".into(),
                                csv: rel(root, &path),
                                x: "center_distance".into(),
                                y: "score_error".into(),
                            }],
                        });
                    }
                }
                for (name, series) in curves {
                    plots.push(PlotSpec {
                        kind: "line".into(),
                        title: format!("{objective} {stem}"),
                        x_label: "step".into(),
                        y_label: name.clone(),
                        output: format!("plots/{objective}/{stem}_{name}.svg"),
                        series,
                    });
                }
            }
        }
    }
    write_text(&root.join("reports").join("aggregates.csv"), &table, stage)?;
    write_text(&layout.report_index(), &to_json(&plots), stage)
}

/// `[min(0, lo), hi]` over the finite values, widened when degenerate.
fn scalar_range(values: &[f64]) -> (f64, f64) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(0.0, f64::min);
    let hi = finite.fold(lo, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn hist_plot(
    root: &Path,
    objective: ObjectiveKind,
    csv: &Path,
    title: &str,
    metric: &str,
) -> PlotSpec {
    let file = csv
        .file_name()
        .expect("file")
        .to_string_lossy()
        .replace(".csv", ".svg");
    PlotSpec {
        kind: "line".into(),
        title: format!("{objective} {title}"),
        x_label: metric.to_string(),
        y_label: "count".into(),
        output: format!("plots/{objective}/{file}"),
        series: vec![SeriesSpec {
            name: metric.to_string(),
            csv: rel(root, csv),
            x: "bin_left".into(),
            y: "count".into(),
        }],
    }
}

fn scatter_csv(records: &[Record]) -> String {
    let mut by_sample: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in records {
        let e = by_sample.entry(r.sample).or_default();
        match r.metric.as_str() {
            "center_distance" => e.0 = Some(r.value),
            "score_error" => e.1 = Some(r.value),
            _ => {}
        }
    }
    let mut out = String::from("sample,center_distance,score_error\n");
    for (i, (d, e)) in by_sample {
        if let (Some(d), Some(e)) = (d, e) {
            writeln!(out, "{i},{d},{e}").expect("write");
        }
    }
    out
}

// -------------------------------------------------------------------- plot

/// Renders every plot listed by the report stage.
pub fn plot(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let stage = Stage::Plot;
    let layout = Layout::new(root, cfg.catalog);
    let specs: Vec<PlotSpec> = from_json(&layout.report_index(), stage)?;
    for spec in specs {
        let mut series = Vec::with_capacity(spec.series.len());
        for s in &spec.series {
            let text = read_text(&root.join(&s.csv), stage)?;
            series.push(Series {
                name: s.name.clone(),
                points: csv_columns(&text, &s.x, &s.y)
                    .map_err(|e| StageError::new(stage, format!("{}: {}", s.csv, e.message)))?,
            });
        }
        let kind = match spec.kind.as_str() {
            "scatter" => PlotKind::Scatter,
            _ => PlotKind::Line,
        };
        let plot = Plot {
            kind,
            title: spec.title.clone(),
            x_label: spec.x_label.clone(),
            y_label: spec.y_label.clone(),
            series,
        };
        emit_plot(&plot, &root.join(&spec.output))?;
    }
    Ok(())
}

// ------------------------------------------------------------------ verify

/// Checks manifest hashes and recomputes every probe aggregate from its
/// records CSV. Returns the problems found.
pub fn verify(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<String>> {
    let mut problems = crate::manifest::verify(root)?;
    for entry in &cfg.objectives {
        for &size in &cfg.sizes {
            for probe in &cfg.probes {
                let s = load_probe(cfg, root, entry.kind, size, probe, Stage::Verify)?;
                if let Err(e) = s.report.audit() {
                    problems.push(format!("{} {} {size}: {e}", entry.kind, probe.kind()));
                }
            }
        }
    }
    Ok(problems)
}

// --------------------------------------------------------------------- run

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Probe,
    Report,
    Plot,
    Run,
}

/// Runs one subcommand and refreshes the manifest.
pub fn execute(command: Command, cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let stage = match command {
        Command::GenData => Stage::GenData,
        Command::Train => Stage::Train,
        Command::Probe => Stage::Probe,
        Command::Report => Stage::Report,
        Command::Plot | Command::Run => Stage::Plot,
    };
    match command {
        Command::GenData => gen_data(cfg, root)?,
        Command::Train => train_models(cfg, root)?,
        Command::Probe => run_probes(cfg, root)?,
        Command::Report => report(cfg, root)?,
        Command::Plot => plot(cfg, root)?,
        Command::Run => {
            gen_data(cfg, root)?;
            train_models(cfg, root)?;
            run_probes(cfg, root)?;
            report(cfg, root)?;
            plot(cfg, root)?;
        }
    }
    refresh(root, stage)?;
    Ok(())
}

//! Grid orchestration: sweeps shot counts, seeds, methods, and templates
//! over a shared channel simulation, persists per-cell records with a
//! per-sample probability sidecar, and re-aggregates them bit-exactly.

pub mod persist;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

use crate::calibration::{
    apply_calibration, conc_content_free_probs, conc_params, linc_fit, linc_probe_set, predict,
    CalibError, CalibMethod, CalibParams, LinCConfig,
};
use crate::channel::{
    default_ring_spec, generate_task, make_constellation, ChannelConfig, ChannelError,
    Constellation, ReceivedSample, Ring, TaskDataset,
};
use crate::llm::http::{BackendConfig, HttpBackend, ReplayBackend};
use crate::llm::mock::MockBackend;
use crate::llm::{Backend, ClientError, CountingBackend, LabelProbs};
use crate::metrics::{self, EntropyHistogram, MetricsError};
use crate::mlp::{dnn_model, evaluate, train_on_samples, MlpError, TrainConfig};
use crate::parallel::parallel_map;
use crate::prompting::{
    build_prompt, load_templates, template_registry, PromptError, PromptTemplate,
    QuantizationConfig,
};
use crate::rng::{derive_rng, sha256_hex, SeedRecord};

use persist::{BoxRow, SweepRow};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error("unknown template id '{0}'")]
    UnknownTemplate(String),
    #[error("template id '{0}' already exists")]
    DuplicateTemplate(String),
    #[error("template sweep needs at least 2 templates, found {0}")]
    NotEnoughTemplates(usize),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("cell {cell}: {message}")]
    Cell { cell: String, message: String },
    #[error("stored samples missing for cell {0}")]
    MissingSamples(String),
    #[error("bad sample in cell {cell} at index {idx}: {reason}")]
    BadSample { cell: String, idx: usize, reason: String },
    #[error(
        "report mismatch in {cell} field {field}: stored {stored}, recomputed {recomputed}"
    )]
    ReportMismatch { cell: String, field: String, stored: String, recomputed: String },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

/// Every decision rule in the study. The first three consume backend
/// probabilities, the networks train on the demonstrations from scratch,
/// and guessing draws labels uniformly.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum MethodId {
    Vanilla,
    Conc,
    Linc,
    Dnn4,
    Dnn5,
    Dnn6,
    Dnn7,
    Guessing,
}

impl MethodId {
    pub fn all() -> [MethodId; 8] {
        [
            MethodId::Vanilla,
            MethodId::Conc,
            MethodId::Linc,
            MethodId::Dnn4,
            MethodId::Dnn5,
            MethodId::Dnn6,
            MethodId::Dnn7,
            MethodId::Guessing,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::Vanilla => "vanilla",
            MethodId::Conc => "conc",
            MethodId::Linc => "linc",
            MethodId::Dnn4 => "dnn4",
            MethodId::Dnn5 => "dnn5",
            MethodId::Dnn6 => "dnn6",
            MethodId::Dnn7 => "dnn7",
            MethodId::Guessing => "guessing",
        }
    }

    /// True for the methods that score prompts with a backend.
    pub fn is_llm(&self) -> bool {
        matches!(self, MethodId::Vanilla | MethodId::Conc | MethodId::Linc)
    }

    pub fn dnn_depth(&self) -> Option<usize> {
        match self {
            MethodId::Dnn4 => Some(4),
            MethodId::Dnn5 => Some(5),
            MethodId::Dnn6 => Some(6),
            MethodId::Dnn7 => Some(7),
            _ => None,
        }
    }

    fn calib_method(&self) -> Option<CalibMethod> {
        match self {
            MethodId::Vanilla => Some(CalibMethod::Vanilla),
            MethodId::Conc => Some(CalibMethod::Conc),
            MethodId::Linc => Some(CalibMethod::Linc),
            _ => None,
        }
    }
}

impl FromStr for MethodId {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodId::all()
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| ExperimentError::UnknownMethod(s.to_string()))
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Knobs of the deterministic offline scorer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub temperature: f64,
    pub penalty: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self { temperature: 1.0, penalty: 10.0 }
    }
}

/// Full study configuration. The output directory is a CLI argument, not
/// a config field, so the hash identifies the science and not the paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    /// "mock", "http", a base URL, or "replay:<path>".
    pub backend: String,
    pub http: BackendConfig,
    pub mock: MockSettings,
    pub methods: Vec<MethodId>,
    pub template_ids: Vec<String>,
    /// Extra templates appended to the built-in registry.
    pub templates_file: Option<PathBuf>,
    pub ring_spec: Vec<Ring>,
    pub channel: ChannelConfig,
    pub quantization: QuantizationConfig,
    pub cf_texts: Vec<String>,
    pub linc: LinCConfig,
    pub train: TrainConfig,
    pub ece_bins: usize,
    pub entropy_bins: usize,
    /// 0 means one worker per available core.
    pub workers: usize,
    pub max_backend_calls: Option<u64>,
    /// Default output location; CLI --output overrides it. Not part of
    /// the config hash, since where results land is not part of the
    /// science.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shots: vec![4, 5, 6, 8, 16, 24, 32],
            seeds: vec![0, 1, 2, 3, 4],
            n_test: 100,
            backend: "mock".to_string(),
            http: BackendConfig::default(),
            mock: MockSettings::default(),
            methods: MethodId::all().to_vec(),
            template_ids: vec!["format-1".to_string()],
            templates_file: None,
            ring_spec: default_ring_spec(),
            channel: ChannelConfig::default(),
            quantization: QuantizationConfig::default(),
            cf_texts: vec!["N/A".to_string()],
            linc: LinCConfig::default(),
            train: TrainConfig::default(),
            ece_bins: 10,
            entropy_bins: 10,
            workers: 0,
            max_backend_calls: None,
            output_dir: PathBuf::from("runs/grid"),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| ExperimentError::MissingFile(path.display().to_string()))?;
    Ok(toml::from_str(&text)?)
}

/// Digest of the resolved config. Field order is fixed by the struct, so
/// the hash is stable no matter how the config file arranged its keys,
/// and the output location is blanked so moving a run does not change
/// its identity.
pub fn config_hash(config: &ExperimentConfig) -> Result<String, ExperimentError> {
    let mut keyed = config.clone();
    keyed.output_dir = PathBuf::new();
    Ok(sha256_hex(&serde_json::to_vec(&keyed)?))
}

/// Built-in registry plus any configured extra templates.
pub fn resolve_templates(
    config: &ExperimentConfig,
) -> Result<Vec<PromptTemplate>, ExperimentError> {
    let mut templates = template_registry();
    if let Some(path) = &config.templates_file {
        for t in load_templates(path)? {
            if templates.iter().any(|e| e.id == t.id) {
                return Err(ExperimentError::DuplicateTemplate(t.id));
            }
            templates.push(t);
        }
    }
    Ok(templates)
}

pub fn validate(
    config: &ExperimentConfig,
    templates: &[PromptTemplate],
) -> Result<(), ExperimentError> {
    if config.shots.is_empty() {
        return Err(ExperimentError::Config("shots must be non-empty".into()));
    }
    if config.seeds.is_empty() {
        return Err(ExperimentError::Config("seeds must be non-empty".into()));
    }
    if config.n_test == 0 {
        return Err(ExperimentError::Config("n_test must be positive".into()));
    }
    if config.methods.is_empty() {
        return Err(ExperimentError::Config("methods must be non-empty".into()));
    }
    if config.template_ids.is_empty() {
        return Err(ExperimentError::Config("template_ids must be non-empty".into()));
    }
    for id in &config.template_ids {
        if !templates.iter().any(|t| t.id == *id) {
            return Err(ExperimentError::UnknownTemplate(id.clone()));
        }
    }
    if config.ece_bins == 0 || config.entropy_bins == 0 {
        return Err(ExperimentError::Config("bin counts must be positive".into()));
    }
    Ok(())
}

/// One cell of the grid: a method evaluated on one task realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: String,
    pub method: MethodId,
    pub shots: usize,
    pub seed: u64,
    /// Empty for methods that never render a prompt.
    pub template_id: String,
    pub n_test: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_entropy_bits: f64,
    /// Digest of the demonstration list; equal across every method in a
    /// cell, which is the shared-data contract made checkable.
    pub demos_hash: String,
    pub config_hash: String,
    /// Where the per-sample probabilities live.
    pub probs_ref: String,
    /// Wall time; informational only, excluded from all aggregate tables.
    pub wall_secs: f64,
}

/// One scored test point: the final (calibrated) distribution, the
/// decision actually taken, and the true label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub cell: String,
    pub method: MethodId,
    pub idx: usize,
    pub label: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
    pub coverage: f64,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

pub fn cell_key(method: MethodId, shots: usize, seed: u64, template_id: &str) -> String {
    if template_id.is_empty() {
        format!("{}-s{}-r{}", method.as_str(), shots, seed)
    } else {
        format!("{}-s{}-r{}-{}", method.as_str(), shots, seed, template_id)
    }
}

fn in_cell<T, E: std::fmt::Display>(cell: &str, r: Result<T, E>) -> Result<T, ExperimentError> {
    r.map_err(|e| ExperimentError::Cell { cell: cell.to_string(), message: e.to_string() })
}

fn demos_digest(demos: &[ReceivedSample]) -> String {
    sha256_hex(&serde_json::to_vec(demos).expect("samples serialize"))
}

fn task_for(
    config: &ExperimentConfig,
    constellation: &Constellation,
    shots: usize,
    seed: u64,
) -> Result<TaskDataset, ChannelError> {
    let seed_rec = SeedRecord::new(seed, format!("task/shots={shots}"));
    generate_task(&seed_rec, shots, config.n_test, constellation, &config.channel)
}

/// Accuracy, calibration error, and mean entropy from stored samples.
/// Both the runners and `report` go through this one function, so the
/// recomputation is bit-exact by construction.
pub fn summarize_samples(
    samples: &[SampleRecord],
    ece_bins: usize,
) -> Result<(f64, f64, f64), ExperimentError> {
    for s in samples {
        if s.pred >= s.probs.len() || s.label >= s.probs.len() {
            return Err(ExperimentError::BadSample {
                cell: s.cell.clone(),
                idx: s.idx,
                reason: "pred or label out of range".into(),
            });
        }
    }
    let preds: Vec<usize> = samples.iter().map(|s| s.pred).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let accuracy = metrics::accuracy(&preds, &labels)?;
    let confidences: Vec<f64> = samples.iter().map(|s| s.probs[s.pred]).collect();
    let corrects: Vec<bool> = samples.iter().map(|s| s.pred == s.label).collect();
    let ece = metrics::ece(&confidences, &corrects, ece_bins)?.value;
    let mean_entropy =
        samples.iter().map(|s| metrics::entropy_bits(&s.probs)).sum::<f64>()
            / samples.len() as f64;
    Ok((accuracy, ece, mean_entropy))
}

fn sample_records(
    cell: &str,
    method: MethodId,
    test: &[ReceivedSample],
    probs: &[LabelProbs],
    preds: &[usize],
) -> Vec<SampleRecord> {
    test.iter()
        .zip(probs)
        .zip(preds)
        .enumerate()
        .map(|(idx, ((t, lp), &pred))| SampleRecord {
            cell: cell.to_string(),
            method,
            idx,
            label: t.y,
            pred,
            probs: lp.probs.clone(),
            coverage: lp.coverage,
            source: lp.source.clone(),
        })
        .collect()
}

struct CellContext<'a> {
    config: &'a ExperimentConfig,
    shots: usize,
    seed: u64,
    config_hash: &'a str,
    demos_hash: &'a str,
}

impl CellContext<'_> {
    fn finish(
        &self,
        cell: String,
        method: MethodId,
        template_id: &str,
        task: &TaskDataset,
        probs: &[LabelProbs],
        preds: &[usize],
        wall_secs: f64,
    ) -> Result<(RunRecord, Vec<SampleRecord>), ExperimentError> {
        let samples = sample_records(&cell, method, &task.test, probs, preds);
        let (accuracy, ece, mean_entropy_bits) =
            summarize_samples(&samples, self.config.ece_bins)?;
        let record = RunRecord {
            cell: cell.clone(),
            method,
            shots: self.shots,
            seed: self.seed,
            template_id: template_id.to_string(),
            n_test: task.test.len(),
            accuracy,
            ece,
            mean_entropy_bits,
            demos_hash: self.demos_hash.to_string(),
            config_hash: self.config_hash.to_string(),
            probs_ref: format!("{}#{}", persist::SAMPLES_FILE, cell),
            wall_secs,
        };
        Ok((record, samples))
    }
}

/// Per-method results for one template and task. The outer error covers
/// the shared scoring pass; after that each method fails on its own.
struct GroupOutcome {
    successes: Vec<(RunRecord, Vec<SampleRecord>)>,
    failures: Vec<(MethodId, ExperimentError)>,
}

/// Scores the shared test prompts once, then derives each requested
/// in-context method from those same probabilities. The scoring time is
/// charged to every method since each would pay it standalone.
fn run_llm_group(
    ctx: &CellContext<'_>,
    backend: &dyn Backend,
    template: &PromptTemplate,
    methods: &[MethodId],
    task: &TaskDataset,
) -> Result<GroupOutcome, ExperimentError> {
    let group_cell = format!("llm-s{}-r{}-{}", ctx.shots, ctx.seed, template.id);
    let q = &ctx.config.quantization;
    let scoring_start = Instant::now();
    let mut raw = Vec::with_capacity(task.test.len());
    for t in &task.test {
        let prompt = in_cell(&group_cell, build_prompt(template, &task.demos, t.x, q))?;
        raw.push(in_cell(
            &group_cell,
            crate::llm::label_probabilities(backend, &prompt),
        )?);
    }
    let shared_secs = scoring_start.elapsed().as_secs_f64();
    let mut outcome =
        GroupOutcome { successes: Vec::with_capacity(methods.len()), failures: Vec::new() };
    for &method in methods {
        let cell = cell_key(method, ctx.shots, ctx.seed, &template.id);
        let t0 = Instant::now();
        let run_one = || -> Result<(RunRecord, Vec<SampleRecord>), ExperimentError> {
            let calib = method.calib_method().ok_or_else(|| ExperimentError::Cell {
                cell: cell.clone(),
                message: format!("{method} is not an in-context method"),
            })?;
            let params = match calib {
                CalibMethod::Vanilla => {
                    CalibParams::identity(CalibMethod::Vanilla, template.k())
                }
                CalibMethod::Conc => {
                    let cf = in_cell(
                        &cell,
                        conc_content_free_probs(
                            backend,
                            template,
                            &task.demos,
                            &ctx.config.cf_texts,
                            q,
                        ),
                    )?;
                    in_cell(&cell, conc_params(&cf))?
                }
                CalibMethod::Linc => {
                    let probes =
                        in_cell(&cell, linc_probe_set(backend, template, &task.demos, q))?;
                    in_cell(&cell, linc_fit(&probes, &ctx.config.linc))?.params
                }
            };
            let mut probs = Vec::with_capacity(raw.len());
            for lp in &raw {
                probs.push(in_cell(&cell, apply_calibration(&params, lp))?);
            }
            let preds: Vec<usize> = probs.iter().map(predict).collect();
            let wall = shared_secs + t0.elapsed().as_secs_f64();
            ctx.finish(cell.clone(), method, &template.id, task, &probs, &preds, wall)
        };
        match run_one() {
            Ok(result) => outcome.successes.push(result),
            Err(e) => outcome.failures.push((method, e)),
        }
    }
    Ok(outcome)
}

/// Runs a method that never touches the backend: a trained network or the
/// uniform guesser.
fn run_offline_cell(
    ctx: &CellContext<'_>,
    method: MethodId,
    task: &TaskDataset,
    k: usize,
) -> Result<(RunRecord, Vec<SampleRecord>), ExperimentError> {
    let cell = cell_key(method, ctx.shots, ctx.seed, "");
    let t0 = Instant::now();
    let (probs, preds) = match method.dnn_depth() {
        Some(depth) => {
            let mut rng = derive_rng(ctx.seed, &format!("dnn{depth}/shots={}", ctx.shots));
            let mut model = in_cell(&cell, dnn_model(depth, &mut rng))?;
            in_cell(&cell, train_on_samples(&mut model, &task.demos, &ctx.config.train))?;
            let (_, probs) = in_cell(&cell, evaluate(&model, &task.test))?;
            let preds: Vec<usize> = probs.iter().map(predict).collect();
            (probs, preds)
        }
        None => {
            use rand::Rng;
            let mut rng = derive_rng(ctx.seed, &format!("guessing/shots={}", ctx.shots));
            let preds: Vec<usize> =
                task.test.iter().map(|_| rng.random_range(0..k)).collect();
            let probs = vec![LabelProbs::uniform(k, "guessing"); task.test.len()];
            (probs, preds)
        }
    };
    let wall = t0.elapsed().as_secs_f64();
    ctx.finish(cell, method, "", task, &probs, &preds, wall)
}

/// Builds the configured backend. Remote backends resolve their API key
/// here, before any work is scheduled.
pub fn build_backend(
    config: &ExperimentConfig,
    templates: &[PromptTemplate],
) -> Result<Box<dyn Backend>, ExperimentError> {
    match config.backend.as_str() {
        "mock" => {
            let mut mock = MockBackend::with_templates(templates.to_vec());
            mock.temperature = config.mock.temperature;
            mock.penalty = config.mock.penalty;
            Ok(Box::new(mock))
        }
        "http" => Ok(Box::new(HttpBackend::new(config.http.clone())?)),
        s if s.starts_with("replay:") => {
            let path = &s["replay:".len()..];
            Ok(Box::new(ReplayBackend::from_path(Path::new(path))?))
        }
        url if url.starts_with("http://") || url.starts_with("https://") => {
            let mut http = config.http.clone();
            http.base_url = url.to_string();
            Ok(Box::new(HttpBackend::new(http)?))
        }
        other => Err(ExperimentError::Config(format!(
            "backend must be \"mock\", \"http\", \"replay:<path>\", or a base URL, got \"{other}\""
        ))),
    }
}

/// Runs one cell standalone. Within a cell every method sees the exact
/// same task; the record carries the demonstration digest as proof.
pub fn run_cell(
    config: &ExperimentConfig,
    backend: &dyn Backend,
    method: MethodId,
    shots: usize,
    seed: u64,
    template_id: &str,
) -> Result<(RunRecord, Vec<SampleRecord>), ExperimentError> {
    let templates = resolve_templates(config)?;
    let constellation = make_constellation(&config.ring_spec)?;
    let task = task_for(config, &constellation, shots, seed)?;
    let demos_hash = demos_digest(&task.demos);
    let hash = config_hash(config)?;
    let ctx = CellContext {
        config,
        shots,
        seed,
        config_hash: &hash,
        demos_hash: &demos_hash,
    };
    if method.is_llm() {
        let template = templates
            .iter()
            .find(|t| t.id == template_id)
            .ok_or_else(|| ExperimentError::UnknownTemplate(template_id.to_string()))?;
        let mut outcome = run_llm_group(&ctx, backend, template, &[method], &task)?;
        if let Some((_, e)) = outcome.failures.pop() {
            return Err(e);
        }
        Ok(outcome.successes.pop().expect("one method requested"))
    } else {
        run_offline_cell(&ctx, method, &task, constellation.k())
    }
}

/// Planned backend usage for a grid run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallEstimate {
    pub backend_calls: u64,
    pub llm_cells: usize,
    pub offline_cells: usize,
}

/// Counts the backend calls `run_grid` will make: the shared test scoring
/// per cell group, content-free queries for ConC, and leave-one-out
/// probes for LinC.
pub fn estimate_calls(config: &ExperimentConfig) -> CallEstimate {
    let has = |m: MethodId| config.methods.contains(&m);
    let any_llm = config.methods.iter().any(|m| m.is_llm());
    let seeds = config.seeds.len() as u64;
    let templates = config.template_ids.len() as u64;
    let mut calls = 0u64;
    for &shots in &config.shots {
        let per_group = (if any_llm { config.n_test as u64 } else { 0 })
            + (if has(MethodId::Conc) { config.cf_texts.len() as u64 } else { 0 })
            + (if has(MethodId::Linc) { shots as u64 } else { 0 });
        calls += per_group * seeds * templates;
    }
    let llm_count = config.methods.iter().filter(|m| m.is_llm()).count();
    let offline_count = config.methods.len() - llm_count;
    CallEstimate {
        backend_calls: calls,
        llm_cells: llm_count
            * config.shots.len()
            * config.seeds.len()
            * config.template_ids.len(),
        offline_cells: offline_count * config.shots.len() * config.seeds.len(),
    }
}

#[derive(Debug)]
pub struct GridSummary {
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
    pub total_backend_calls: u64,
    pub wall_secs: f64,
}

fn effective_workers(config: &ExperimentConfig) -> usize {
    if config.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        config.workers
    }
}

type JobOutput = (Vec<RunRecord>, Vec<SampleRecord>, Vec<CellFailure>);

#[allow(clippy::too_many_arguments)]
fn run_job(
    config: &ExperimentConfig,
    backend: &dyn Backend,
    templates: &[PromptTemplate],
    constellation: &Constellation,
    llm_methods: &[MethodId],
    offline_methods: &[MethodId],
    shots: usize,
    seed: u64,
    hash: &str,
) -> JobOutput {
    let mut records = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let fail_all = |failures: &mut Vec<CellFailure>, error: &str| {
        for &m in llm_methods {
            for template_id in &config.template_ids {
                failures.push(CellFailure {
                    cell: cell_key(m, shots, seed, template_id),
                    error: error.to_string(),
                });
            }
        }
        for &m in offline_methods {
            failures.push(CellFailure {
                cell: cell_key(m, shots, seed, ""),
                error: error.to_string(),
            });
        }
    };
    let task = match task_for(config, constellation, shots, seed) {
        Ok(task) => task,
        Err(e) => {
            fail_all(&mut failures, &e.to_string());
            return (records, samples, failures);
        }
    };
    let demos_hash = demos_digest(&task.demos);
    let ctx = CellContext { config, shots, seed, config_hash: hash, demos_hash: &demos_hash };
    if !llm_methods.is_empty() {
        for template_id in &config.template_ids {
            let template = templates
                .iter()
                .find(|t| t.id == *template_id)
                .expect("template ids validated");
            match run_llm_group(&ctx, backend, template, llm_methods, &task) {
                Ok(outcome) => {
                    for (record, cell_samples) in outcome.successes {
                        records.push(record);
                        samples.extend(cell_samples);
                    }
                    for (m, e) in outcome.failures {
                        failures.push(CellFailure {
                            cell: cell_key(m, shots, seed, template_id),
                            error: e.to_string(),
                        });
                    }
                }
                Err(e) => {
                    for &m in llm_methods {
                        failures.push(CellFailure {
                            cell: cell_key(m, shots, seed, template_id),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    for &method in offline_methods {
        match run_offline_cell(&ctx, method, &task, constellation.k()) {
            Ok((record, cell_samples)) => {
                records.push(record);
                samples.extend(cell_samples);
            }
            Err(e) => failures.push(CellFailure {
                cell: cell_key(method, shots, seed, ""),
                error: e.to_string(),
            }),
        }
    }
    (records, samples, failures)
}

fn sort_outputs(
    records: &mut [RunRecord],
    samples: &mut [SampleRecord],
    failures: &mut [CellFailure],
) {
    records.sort_by(|a, b| {
        (a.shots, a.seed, a.method, a.template_id.as_str()).cmp(&(
            b.shots,
            b.seed,
            b.method,
            b.template_id.as_str(),
        ))
    });
    samples.sort_by(|a, b| (a.cell.as_str(), a.idx).cmp(&(b.cell.as_str(), b.idx)));
    failures.sort_by(|a, b| a.cell.cmp(&b.cell));
}

fn entropy_histograms(
    samples: &[SampleRecord],
    bins: usize,
) -> Result<Vec<(MethodId, EntropyHistogram)>, ExperimentError> {
    let methods: BTreeSet<MethodId> = samples.iter().map(|s| s.method).collect();
    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let entropies: Vec<f64> = samples
            .iter()
            .filter(|s| s.method == method)
            .map(|s| metrics::entropy_bits(&s.probs))
            .collect();
        let k = samples
            .iter()
            .find(|s| s.method == method)
            .map(|s| s.probs.len())
            .expect("method came from samples");
        out.push((method, metrics::entropy_histogram(&entropies, k, bins)?));
    }
    Ok(out)
}

/// Runs the full grid of shots x seeds x methods (x templates for the
/// in-context methods) and persists records, per-sample probabilities,
/// aggregate tables, and the resolved config. Cell failures are recorded
/// and the grid keeps going.
pub fn run_grid(
    config: &ExperimentConfig,
    output_dir: &Path,
) -> Result<GridSummary, ExperimentError> {
    let templates = resolve_templates(config)?;
    validate(config, &templates)?;
    let hash = config_hash(config)?;
    std::fs::create_dir_all(output_dir)?;
    let backend = CountingBackend::new(build_backend(config, &templates)?, config.max_backend_calls);
    let constellation = make_constellation(&config.ring_spec)?;
    let llm_methods: Vec<MethodId> =
        config.methods.iter().copied().filter(|m| m.is_llm()).collect();
    let offline_methods: Vec<MethodId> =
        config.methods.iter().copied().filter(|m| !m.is_llm()).collect();
    let mut jobs = Vec::with_capacity(config.shots.len() * config.seeds.len());
    for &shots in &config.shots {
        for &seed in &config.seeds {
            jobs.push((shots, seed));
        }
    }
    let t0 = Instant::now();
    let outputs = parallel_map(jobs, effective_workers(config), |&(shots, seed)| {
        run_job(
            config,
            &backend,
            &templates,
            &constellation,
            &llm_methods,
            &offline_methods,
            shots,
            seed,
            &hash,
        )
    });
    let mut records = Vec::new();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (r, s, f) in outputs {
        records.extend(r);
        samples.extend(s);
        failures.extend(f);
    }
    sort_outputs(&mut records, &mut samples, &mut failures);
    persist::write_config(output_dir, config, &hash)?;
    persist::write_records(output_dir, &records)?;
    persist::write_samples(output_dir, &samples)?;
    persist::write_csvs(output_dir, &records)?;
    if !samples.is_empty() {
        let hists = entropy_histograms(&samples, config.entropy_bins)?;
        persist::write_entropy_hist(output_dir, &hists)?;
    }
    if !failures.is_empty() {
        persist::write_failures(output_dir, &failures)?;
    }
    Ok(GridSummary {
        records,
        failures,
        total_backend_calls: backend.calls(),
        wall_secs: t0.elapsed().as_secs_f64(),
    })
}

/// Hyndman-Fan type 7 quantile (the common linear interpolation).
fn quantile_r7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    // Identical samples must give exactly zero; the two-pass formula would
    // otherwise leak ulp-level noise from the rounded mean.
    if values.iter().all(|v| *v == values[0]) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug)]
pub struct SweepSummary {
    pub records: Vec<RunRecord>,
    pub rows: Vec<SweepRow>,
    pub boxes: Vec<BoxRow>,
    pub total_backend_calls: u64,
}

/// Runs the three in-context methods across every template in the set at
/// one shot count, sharing task realizations, and emits per-template
/// accuracies plus box statistics of the per-template means.
pub fn template_sweep(
    config: &ExperimentConfig,
    shots: usize,
    output_dir: &Path,
) -> Result<SweepSummary, ExperimentError> {
    let templates = resolve_templates(config)?;
    if templates.len() < 2 {
        return Err(ExperimentError::NotEnoughTemplates(templates.len()));
    }
    if config.seeds.is_empty() {
        return Err(ExperimentError::Config("seeds must be non-empty".into()));
    }
    if config.n_test == 0 {
        return Err(ExperimentError::Config("n_test must be positive".into()));
    }
    let methods = [MethodId::Vanilla, MethodId::Conc, MethodId::Linc];
    let hash = config_hash(config)?;
    std::fs::create_dir_all(output_dir)?;
    let backend = CountingBackend::new(build_backend(config, &templates)?, config.max_backend_calls);
    let constellation = make_constellation(&config.ring_spec)?;
    let seeds = config.seeds.clone();
    let outputs = parallel_map(seeds, effective_workers(config), |&seed| {
        let task = task_for(config, &constellation, shots, seed)?;
        let demos_hash = demos_digest(&task.demos);
        let ctx =
            CellContext { config, shots, seed, config_hash: &hash, demos_hash: &demos_hash };
        let mut records = Vec::new();
        for template in &templates {
            let mut outcome = run_llm_group(&ctx, &backend, template, &methods, &task)?;
            if let Some((_, e)) = outcome.failures.pop() {
                return Err(e);
            }
            for (record, _) in outcome.successes {
                records.push(record);
            }
        }
        Ok::<Vec<RunRecord>, ExperimentError>(records)
    });
    let mut records = Vec::new();
    for out in outputs {
        records.extend(out?);
    }
    records.sort_by(|a, b| {
        (a.template_id.as_str(), a.method, a.seed).cmp(&(
            b.template_id.as_str(),
            b.method,
            b.seed,
        ))
    });
    let mut rows = Vec::new();
    for template in &templates {
        for &method in &methods {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.template_id == template.id && r.method == method)
                .map(|r| r.accuracy)
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = sample_variance(&values).sqrt();
            rows.push(SweepRow {
                template_id: template.id.clone(),
                method,
                accuracy_mean: mean,
                accuracy_std: std,
            });
        }
    }
    let mut boxes = Vec::new();
    for &method in &methods {
        let mut means: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.accuracy_mean)
            .collect();
        means.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
        boxes.push(BoxRow {
            method,
            min: means[0],
            q1: quantile_r7(&means, 0.25),
            median: quantile_r7(&means, 0.5),
            q3: quantile_r7(&means, 0.75),
            max: *means.last().expect("at least two templates"),
            variance: sample_variance(&means),
        });
    }
    persist::write_sweep_outputs(output_dir, &records, &rows, &boxes)?;
    Ok(SweepSummary {
        records,
        rows,
        boxes,
        total_backend_calls: backend.calls(),
    })
}

#[derive(Debug)]
pub struct ReportSummary {
    pub cells: usize,
    pub samples: usize,
}

fn report_mismatch(cell: &str, field: &str, stored: f64, recomputed: f64) -> ExperimentError {
    ExperimentError::ReportMismatch {
        cell: cell.to_string(),
        field: field.to_string(),
        stored: format!("{stored:?}"),
        recomputed: format!("{recomputed:?}"),
    }
}

/// Re-derives every aggregate from the stored per-sample probabilities and
/// verifies the records bit-for-bit, then rewrites the CSV tables. Running
/// it twice changes nothing.
pub fn report(output_dir: &Path) -> Result<ReportSummary, ExperimentError> {
    let (config, stored_hash) = persist::read_config(output_dir)?;
    let computed_hash = config_hash(&config)?;
    if computed_hash != stored_hash {
        return Err(ExperimentError::ReportMismatch {
            cell: "config".to_string(),
            field: "config_hash".to_string(),
            stored: stored_hash,
            recomputed: computed_hash,
        });
    }
    let records = persist::read_records(output_dir)?;
    let samples = persist::read_samples(output_dir)?;
    let mut by_cell: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for s in &samples {
        by_cell.entry(s.cell.as_str()).or_default().push(s);
    }
    let mut parity: BTreeMap<(usize, u64), &str> = BTreeMap::new();
    for record in &records {
        let cell_samples = by_cell
            .get(record.cell.as_str())
            .ok_or_else(|| ExperimentError::MissingSamples(record.cell.clone()))?;
        if cell_samples.len() != record.n_test {
            return Err(report_mismatch(
                &record.cell,
                "n_test",
                record.n_test as f64,
                cell_samples.len() as f64,
            ));
        }
        let owned: Vec<SampleRecord> = cell_samples.iter().map(|s| (*s).clone()).collect();
        let (accuracy, ece, mean_entropy) = summarize_samples(&owned, config.ece_bins)?;
        if accuracy != record.accuracy {
            return Err(report_mismatch(&record.cell, "accuracy", record.accuracy, accuracy));
        }
        if ece != record.ece {
            return Err(report_mismatch(&record.cell, "ece", record.ece, ece));
        }
        if mean_entropy != record.mean_entropy_bits {
            return Err(report_mismatch(
                &record.cell,
                "mean_entropy_bits",
                record.mean_entropy_bits,
                mean_entropy,
            ));
        }
        match parity.entry((record.shots, record.seed)) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(record.demos_hash.as_str());
            }
            std::collections::btree_map::Entry::Occupied(o) => {
                if *o.get() != record.demos_hash {
                    return Err(ExperimentError::ReportMismatch {
                        cell: record.cell.clone(),
                        field: "demos_hash".to_string(),
                        stored: record.demos_hash.clone(),
                        recomputed: o.get().to_string(),
                    });
                }
            }
        }
    }
    persist::write_csvs(output_dir, &records)?;
    if !samples.is_empty() {
        let hists = entropy_histograms(&samples, config.entropy_bins)?;
        persist::write_entropy_hist(output_dir, &hists)?;
    }
    Ok(ReportSummary { cells: records.len(), samples: samples.len() })
}

//! File-based pipeline: generate → discover → train → evaluate → explain.
//!
//! Every command reads a [`RunConfig`], writes its outputs under `out`, and
//! leaves a `<command>.config.toml` snapshot of the resolved configuration
//! next to them. Re-running from a snapshot reproduces the outputs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, MultiSeries, VarKind};
use crate::explain::{self, ExplainError, ModelValue};
use crate::graph::{causal_adjacency, GraphError};
use crate::models::{Model, ModelConfig, ModelError, ModelKind};
use crate::pcmci::{self, CausalGraph, LinkAssumptions, PcmciConfig, PcmciError};
use crate::rng::SeedStreams;
use crate::synth::{self, make_windows, ScmSpec, Sidecar, Split, SynthError, WindowSet, WindowSpec};
use crate::tensor::TensorError;
use crate::train::{self, EvalReport, SeedEval, TrainConfig, TrainError};

/// What went wrong, at the granularity of process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    /// 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ErrorKind::Config => "configuration error",
            ErrorKind::Data => "data error",
            ErrorKind::Numerical => "numerical failure",
        };
        write!(f, "{what}: {}", self.message)
    }
}

impl std::error::Error for PipelineError {}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn classify(kind: ErrorKind, e: impl fmt::Display) -> PipelineError {
    PipelineError::new(kind, e.to_string())
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        classify(ErrorKind::Data, e)
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        classify(ErrorKind::Data, e)
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        let kind = match e {
            SynthError::Spec(_) => ErrorKind::Config,
            SynthError::Unstable(_) | SynthError::Calibration { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        };
        classify(kind, e)
    }
}

impl From<PcmciError> for PipelineError {
    fn from(e: PcmciError) -> Self {
        let kind = match e {
            PcmciError::Config(_) => ErrorKind::Config,
            PcmciError::Stats(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        };
        classify(kind, e)
    }
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        classify(ErrorKind::Data, e)
    }
}

fn tensor_kind(e: &TensorError) -> ErrorKind {
    match e {
        TensorError::NonFinite { .. } | TensorError::Degenerate(_) => ErrorKind::Numerical,
        _ => ErrorKind::Data,
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            ModelError::Config(_) => ErrorKind::Config,
            ModelError::Tensor(t) => tensor_kind(t),
            _ => ErrorKind::Data,
        };
        classify(kind, e)
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) => ErrorKind::Config,
            TrainError::NonFinite { .. } => ErrorKind::Numerical,
            TrainError::Tensor(t) => tensor_kind(t),
            TrainError::Model(ModelError::Tensor(t)) => tensor_kind(t),
            TrainError::Model(ModelError::Config(_)) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        classify(kind, e)
    }
}

impl From<ExplainError> for PipelineError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(m) => m.into(),
            other => classify(ErrorKind::Data, other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub local_len: usize,
    /// Number of climate-index blocks (each `oci_stride` fine steps).
    pub oci_len: usize,
    pub horizon: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            local_len: 39,
            oci_len: 10,
            horizon: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dim: usize,
    pub gnn_hidden: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden_dim: m.hidden_dim,
            gnn_hidden: m.gnn_hidden,
            leaky_slope: m.leaky_slope,
            ln_eps: m.ln_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub n_permutations: usize,
    /// Training samples averaged into the masking reference.
    pub background: usize,
    /// Cap on explained samples; all positive test samples when unset.
    pub max_samples: Option<usize>,
    /// Training seed whose checkpoint is explained; first seed when unset.
    pub seed: Option<u64>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            n_permutations: 200,
            background: 100,
            max_samples: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the data generator and the explanation streams.
    pub seed: u64,
    pub out: PathBuf,
    /// Generator preset; ignored when `scm` is given.
    pub preset: String,
    pub scm: Option<ScmSpec>,
    /// Fine time steps to simulate.
    pub t: usize,
    /// Dataset CSV; defaults to `out/data.csv`. The sidecar sits next to it with a `.json` extension.
    pub dataset: Option<PathBuf>,
    /// Causal graph JSON; defaults to `out/graph.json`.
    pub graph: Option<PathBuf>,
    pub model: ModelKind,
    pub window: WindowConfig,
    pub network: NetworkConfig,
    pub pcmci: PcmciConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            preset: "fig6-default".into(),
            scm: None,
            t: 20_000,
            dataset: None,
            graph: None,
            model: ModelKind::GnnCausal,
            window: WindowConfig::default(),
            network: NetworkConfig::default(),
            pcmci: PcmciConfig::default(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn spec(&self) -> Result<ScmSpec> {
        let spec = match &self.scm {
            Some(s) => s.clone(),
            None => ScmSpec::preset(&self.preset).ok_or_else(|| {
                PipelineError::config(format!(
                    "unknown preset {:?}; expected one of {}",
                    self.preset,
                    synth::PRESETS.join(", ")
                ))
            })?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.pcmci.validate()?;
        self.train.validate()?;
        if self.window.horizon == 0 || self.window.local_len == 0 || self.window.oci_len == 0 {
            return Err(PipelineError::config("window lengths and horizon must be positive"));
        }
        if self.explain.n_permutations == 0 || self.explain.background == 0 {
            return Err(PipelineError::config("explain needs at least one permutation and one background sample"));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("data.csv"))
    }

    pub fn graph_path(&self) -> PathBuf {
        self.graph.clone().unwrap_or_else(|| self.out.join("graph.json"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn checkpoint_stem(&self, seed: u64) -> String {
        format!("{}-seed{seed}", self.model)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        synth::hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn snapshot(&self, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(format!("{command}.config.toml")), self.to_toml())?;
        Ok(())
    }
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
    pub positive_rate: f64,
    pub n_positive: usize,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let generated = synth::generate(&spec, cfg.t, &SeedStreams::new(cfg.seed))?;
    cfg.snapshot("generate")?;
    let csv = cfg.dataset_path();
    if let Some(dir) = csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&csv, generated.series.to_csv())?;
    let sidecar = sidecar_path(&csv);
    let meta = generated.sidecar(Some(cfg.seed));
    std::fs::write(&sidecar, serde_json::to_string_pretty(&meta).expect("sidecar serializes"))?;
    log::info!("wrote {} ({} steps)", csv.display(), generated.series.len());
    Ok(GenerateOutcome {
        csv,
        sidecar,
        positive_rate: generated.labels.realized_rate,
        n_positive: generated.labels.y.iter().sum(),
    })
}

/// A dataset with its sidecar and binary labels.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub series: MultiSeries,
    pub sidecar: Sidecar,
    pub labels: Vec<usize>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<LoadedData> {
    let csv = cfg.dataset_path();
    let meta_path = sidecar_path(&csv);
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| PipelineError::data(format!("{}: {e}", meta_path.display())))?;
    let sidecar: Sidecar =
        serde_json::from_str(&meta_text).map_err(|e| PipelineError::data(format!("{}: {e}", meta_path.display())))?;
    let text = std::fs::read_to_string(&csv).map_err(|e| PipelineError::data(format!("{}: {e}", csv.display())))?;
    let series = MultiSeries::from_csv(&text, sidecar.variables.clone())?;
    let target = series.target_index();
    let labels = series
        .column(target)
        .iter()
        .enumerate()
        .map(|(row, &v)| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(PipelineError::data(format!("target value {v} at row {row} is not 0 or 1"))),
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(LoadedData {
        series,
        sidecar,
        labels,
    })
}

#[derive(Debug, Clone)]
pub struct DiscoverOutcome {
    pub graph: CausalGraph,
    pub link_table: String,
    /// Precision and recall of lagged links between non-target variables,
    /// when the sidecar carries a ground truth.
    pub precision_recall: Option<(f64, f64)>,
}

/// Lagged links between non-target variables, by index into `graph.variables`.
pub fn scored_edges(graph: &CausalGraph) -> BTreeSet<(usize, usize, usize)> {
    graph
        .links
        .iter()
        .filter(|l| {
            l.lag >= 1
                && graph.variables[l.source].kind != VarKind::Target
                && graph.variables[l.target].kind != VarKind::Target
        })
        .map(|l| (l.source, l.lag, l.target))
        .collect()
}

pub fn cmd_discover(cfg: &RunConfig) -> Result<DiscoverOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    cfg.snapshot("discover")?;
    let ts = pcmci::preprocess_causal_stationarity(&data.series, data.sidecar.oci_stride, data.sidecar.period)?;
    let assumptions = LinkAssumptions::mediator(&ts.kinds(), cfg.pcmci.tau_max, cfg.pcmci.contemporaneous);
    let result = pcmci::run_pcmci(&ts, &assumptions, &cfg.pcmci)?;
    let graph = result.graph;
    std::fs::write(cfg.graph_path(), graph.to_json())?;
    std::fs::write(cfg.out.join("graph.dot"), graph.to_dot())?;
    let table = graph.link_table();
    std::fs::write(cfg.out.join("links.csv"), &table)?;
    std::fs::write(cfg.out.join("adjacency.csv"), causal_adjacency(&graph)?.to_csv())?;
    let precision_recall = if data.sidecar.ground_truth.is_empty() {
        None
    } else {
        let index = |name: &str| {
            graph
                .index_of(name)
                .ok_or_else(|| PipelineError::data(format!("ground-truth variable {name:?} missing from dataset")))
        };
        let mut truth = BTreeSet::new();
        for l in &data.sidecar.ground_truth {
            let (s, t) = (index(&l.source)?, index(&l.target)?);
            let kinds = (graph.variables[s].kind, graph.variables[t].kind);
            if l.lag >= 1 && kinds.0 != VarKind::Target && kinds.1 != VarKind::Target {
                truth.insert((s, l.lag, t));
            }
        }
        Some(pcmci::precision_recall(&scored_edges(&graph), &truth))
    };
    Ok(DiscoverOutcome {
        graph,
        link_table: table,
        precision_recall,
    })
}

pub fn window_spec(cfg: &RunConfig, sidecar: &Sidecar) -> WindowSpec {
    WindowSpec {
        local_len: cfg.window.local_len,
        oci_len: cfg.window.oci_len,
        stride: sidecar.oci_stride,
        horizon: cfg.window.horizon,
    }
}

pub fn model_config(cfg: &RunConfig, windows: &WindowSet) -> ModelConfig {
    ModelConfig {
        hidden_dim: cfg.network.hidden_dim,
        gnn_hidden: cfg.network.gnn_hidden,
        leaky_slope: cfg.network.leaky_slope,
        ln_eps: cfg.network.ln_eps,
        n_local: windows.n_local(),
        n_oci: windows.n_oci(),
        local_len: windows.spec.local_len,
        oci_len: windows.spec.oci_len,
        horizon: windows.spec.horizon,
    }
}

fn load_windows(cfg: &RunConfig) -> Result<WindowSet> {
    let data = load_dataset(cfg)?;
    Ok(make_windows(&data.series, &data.labels, window_spec(cfg, &data.sidecar))?)
}

fn node_names(windows: &WindowSet) -> Vec<String> {
    windows.local_names.iter().chain(&windows.oci_names).cloned().collect()
}

/// Builds an untrained model of `cfg.model` for `seed`, reading the causal graph when needed.
pub fn build_model(cfg: &RunConfig, windows: &WindowSet, seed: u64) -> Result<Model<f64>> {
    let adjacency = if cfg.model == ModelKind::GnnCausal {
        let path = cfg.graph_path();
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::data(format!("{}: {e}", path.display())))?;
        let graph = CausalGraph::from_json(&text)?;
        let adj = causal_adjacency(&graph)?;
        if graph.variables.iter().any(|v| v.kind == VarKind::Target && adj.names().contains(&v.name)) {
            return Err(PipelineError::data("adjacency contains the target variable"));
        }
        Some(adj)
    } else {
        None
    };
    let mut rng = SeedStreams::new(seed).rng("model/init");
    Ok(Model::new(
        cfg.model,
        model_config(cfg, windows),
        node_names(windows),
        adjacency.as_ref(),
        &mut rng,
    )?)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let windows = load_windows(cfg)?;
    cfg.snapshot("train")?;
    let dir = cfg.checkpoint_dir();
    let hash = cfg.hash();
    let mut out = Vec::new();
    for &seed in &cfg.train.seeds {
        let model = build_model(cfg, &windows, seed)?;
        let outcome = train::train(model, &windows, &cfg.train, seed)?;
        let stem = cfg.checkpoint_stem(seed);
        outcome.model.save(&dir, &stem, seed, &hash)?;
        let mut history = String::from("epoch,train_loss,val_loss,val_auprc\n");
        for r in &outcome.history {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            history.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                opt(r.val_auprc)
            ));
        }
        std::fs::write(dir.join(format!("{stem}-history.csv")), history)?;
        log::info!("seed {seed}: best epoch {}", outcome.best_epoch);
        out.push(TrainSummary {
            seed,
            checkpoint: dir.join(stem),
            best_epoch: outcome.best_epoch,
            final_train_loss: outcome.history.last().map_or(f64::NAN, |r| r.train_loss),
        });
    }
    Ok(out)
}

fn load_checkpoint(cfg: &RunConfig, windows: &WindowSet, seed: u64) -> Result<Model<f64>> {
    let (model, _) = Model::<f64>::load(&cfg.checkpoint_dir(), &cfg.checkpoint_stem(seed))?;
    if model.nodes != node_names(windows) || model.config != model_config(cfg, windows) {
        return Err(PipelineError::data(format!(
            "checkpoint {} does not match the dataset or configuration",
            cfg.checkpoint_stem(seed)
        )));
    }
    Ok(model)
}

/// Scores every training seed's checkpoint on the untouched test split.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let windows = load_windows(cfg)?;
    cfg.snapshot("evaluate")?;
    let test = windows.indices(Split::Test);
    let labels = windows.labels(&test);
    let mut seeds = Vec::new();
    for &seed in &cfg.train.seeds {
        let model = load_checkpoint(cfg, &windows, seed)?;
        let scores = train::predict(&model, &windows, &test)?;
        seeds.push(SeedEval::from_scores(seed, &scores, &labels)?);
    }
    let report = EvalReport::new(cfg.model.name(), cfg.window.horizon, &labels, seeds)?;
    let dir = cfg.out.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{}.json", cfg.model)), report.to_json())?;
    std::fs::write(dir.join(format!("{}-pr.csv", cfg.model)), report.pr_csv())?;
    std::fs::write(dir.join(format!("{}-roc.csv", cfg.model)), report.roc_csv())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ExplainOutcome {
    pub n_samples: usize,
    pub attributions: PathBuf,
    pub lag_matrix: Option<explain::LagMatrix>,
}

/// Shapley attributions for the positive test samples of one checkpoint.
pub fn cmd_explain(cfg: &RunConfig) -> Result<ExplainOutcome> {
    cfg.validate()?;
    let windows = load_windows(cfg)?;
    cfg.snapshot("explain")?;
    let seed = cfg.explain.seed.unwrap_or(cfg.train.seeds[0]);
    let model = load_checkpoint(cfg, &windows, seed)?;
    let streams = SeedStreams::new(cfg.seed).child("explain");
    let train_idx = windows.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(PipelineError::data("no training samples for the background set"));
    }
    let mut bg_idx: Vec<usize> = train_idx
        .choose_multiple(&mut streams.rng("background"), cfg.explain.background)
        .copied()
        .collect();
    bg_idx.sort_unstable();
    let background: Vec<Vec<f64>> = bg_idx.iter().map(|&i| windows.flat_input(i)).collect();
    let mut positives: Vec<usize> = windows
        .indices(Split::Test)
        .into_iter()
        .filter(|&i| windows.samples[i].label == 1)
        .collect();
    if let Some(cap) = cfg.explain.max_samples {
        positives.truncate(cap);
    }
    let dir = cfg.out.join("explain");
    std::fs::create_dir_all(&dir)?;
    let stem = cfg.checkpoint_stem(seed);
    let attributions_path = dir.join(format!("{stem}-attributions.csv"));
    let groups = explain::default_groups(
        &windows.local_names,
        &windows.oci_names,
        windows.spec.local_len,
        windows.spec.oci_len,
    );
    if positives.is_empty() {
        log::warn!("no positive samples in the test split; writing empty attribution files");
        std::fs::write(&attributions_path, explain::attributions_csv(&[], &[])?)?;
        return Ok(ExplainOutcome {
            n_samples: 0,
            attributions: attributions_path,
            lag_matrix: None,
        });
    }
    let value = ModelValue { model: &model };
    let mut rng = streams.rng("permutations");
    let mut attributions = Vec::with_capacity(positives.len());
    for &i in &positives {
        let x = windows.flat_input(i);
        attributions.push(explain::shapley_estimate(
            &value,
            &x,
            &background,
            &groups,
            cfg.explain.n_permutations,
            &mut rng,
        )?);
    }
    let ids: Vec<String> = positives.iter().map(|&i| format!("t{}", windows.samples[i].t)).collect();
    std::fs::write(&attributions_path, explain::attributions_csv(&attributions, &ids)?)?;
    let matrix = explain::aggregate_abs_by_lag(&attributions)?;
    std::fs::write(dir.join(format!("{stem}-lag.csv")), matrix.to_csv())?;
    std::fs::write(dir.join(format!("{stem}-lag-scaled.csv")), matrix.scaled().to_csv())?;
    Ok(ExplainOutcome {
        n_samples: positives.len(),
        attributions: attributions_path,
        lag_matrix: Some(matrix),
    })
}

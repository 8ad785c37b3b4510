//! End-to-end orchestration: ingest, statistics, semantic scoring, graph
//! construction, GAT training, selection and evaluation, plus reporting
//! across finished runs.
//!
//! Every stage writes its artifacts into the run's output directory, so a
//! later stage can be invoked on its own and an interrupted run can resume
//! from the MI cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, DatasetError, MultiViewDataset, TextCatalog};
use crate::eval::{self, EvalError, EvalReport, Metrics, ProtocolConfig, Ranking};
use crate::gat::{self, Checkpoint, GatError, TrainConfig, TrainReport};
use crate::graph::{self, GraphError, GraphWarning, HeteroGraph, Thresholds};
use crate::select::{self, SelectError, SelectionResult};
use crate::semantic::{self, ChatTransport, LlmAgent, LlmConfig, MockScorer, ScoreCache, ScorerHandle, SemanticError, SemanticScoreSet};
use crate::stats::{self, MIMatrices, MiOptions, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Statistical,
    SemanticMock,
    SemanticLlm,
    AblationHalfdata,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Statistical => "statistical",
            Mode::SemanticMock => "semantic-mock",
            Mode::SemanticLlm => "semantic-llm",
            Mode::AblationHalfdata => "ablation-halfdata",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Mode::Statistical, Mode::SemanticMock, Mode::SemanticLlm, Mode::AblationHalfdata]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticBackend {
    Mock,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub thresholds: Thresholds,
    pub bins: u32,
    /// Keep only each feature's strongest feature-feature pairs.
    pub ff_top_m: Option<usize>,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    /// Evaluate the random and max-MI baselines alongside the method.
    pub baselines: bool,
    /// Semantic scorer used by the ablation variants.
    pub ablation_backend: SemanticBackend,
    pub subsample_fraction: f64,
    pub subsample_seed: u64,
    /// `(term, canonical)` pairs for the mock scorer.
    pub synonyms: Vec<(String, String)>,
    pub llm: LlmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            mode: Mode::Statistical,
            output_dir: PathBuf::from("out"),
            thresholds: Thresholds::default(),
            bins: MiOptions::default().bins,
            ff_top_m: None,
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            baselines: true,
            ablation_backend: SemanticBackend::Mock,
            subsample_fraction: 0.5,
            subsample_seed: 0,
            synonyms: Vec::new(),
            llm: LlmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.bins < 2 {
            return bad(format!("bins = {} must be at least 2", self.bins));
        }
        let t = &self.train;
        if t.hidden == 0 || t.layers == 0 || t.epochs == 0 || t.learning_rate <= 0.0 || t.negatives_per_positive == 0 {
            return bad("train hidden, layers, epochs, learning rate and negative ratio must be positive".into());
        }
        if t.lambda < 0.0 || t.leaky_slope <= 0.0 {
            return bad("lambda must be non-negative and the leaky slope positive".into());
        }
        let p = &self.protocol;
        if p.repeats == 0 || p.ratios.is_empty() || p.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad("protocol needs at least one repeat and ratios in (0, 1]".into());
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return bad(format!("train fraction {} outside (0, 1)", p.train_fraction));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction < 1.0) {
            return bad(format!("subsample fraction {} outside (0, 1)", self.subsample_fraction));
        }
        Ok(())
    }

    fn mi_options(&self) -> MiOptions {
        MiOptions { bins: self.bins, ff_top_m: self.ff_top_m }
    }

    fn random_seed(&self) -> u64 {
        self.protocol.base_seed.wrapping_add(7919)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("[{stage}] {source}")]
    Dataset { stage: &'static str, source: DatasetError },
    #[error("[stats] {0}")]
    Stats(#[from] StatsError),
    #[error("[semantic] {0}")]
    Semantic(#[from] SemanticError),
    #[error("[graph] {0}")]
    Graph(#[from] GraphError),
    #[error("[train] {0}")]
    Gat(#[from] GatError),
    #[error("[select] {0}")]
    Select(#[from] SelectError),
    #[error("[eval] {0}")]
    Eval(#[from] EvalError),
    #[error("[{stage}] {path}: {message}")]
    Artifact { stage: &'static str, path: PathBuf, message: String },
    #[error("missing run: {0}")]
    MissingRun(String),
}

impl PipelineError {
    /// 2 configuration, 3 data, 4 external service, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingRun(_) => 2,
            PipelineError::Graph(GraphError::InvalidThreshold(_)) => 2,
            PipelineError::Semantic(SemanticError::NotConfigured(_)) => 2,
            PipelineError::Dataset { .. } | PipelineError::Gat(GatError::NoSupervisionEdges) => 3,
            PipelineError::Eval(EvalError::Dataset(_)) | PipelineError::Eval(EvalError::TooFewSamples { .. }) => 3,
            PipelineError::Semantic(
                SemanticError::Transport { .. }
                | SemanticError::MalformedResponse(_)
                | SemanticError::MissingPairInResponse(_),
            ) => 4,
            _ => 5,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn artifact_err(stage: &'static str, path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Artifact { stage, path: path.to_path_buf(), message: e.to_string() }
}

fn write_artifact(stage: &'static str, path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| artifact_err(stage, parent, e))?;
    }
    fs::write(path, contents).map_err(|e| artifact_err(stage, path, e))
}

fn read_artifact(stage: &'static str, path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| artifact_err(stage, path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes")
}

pub struct Loaded {
    pub dataset: MultiViewDataset,
    pub catalog: TextCatalog,
    pub digest: String,
}

#[derive(Debug, Serialize)]
struct DatasetSummary<'a> {
    digest: &'a str,
    n_samples: usize,
    n_features: usize,
    n_labels: usize,
    views: Vec<(&'a str, usize)>,
    label_density: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub scores: Vec<f64>,
}

/// Artifact file names inside a run directory.
pub mod files {
    pub const MANIFEST: &str = "run_manifest.json";
    pub const DATASET: &str = "dataset.json";
    pub const MI_CACHE: &str = "mi_cache.json";
    pub const MI_CACHE_HALF: &str = "mi_cache_half.json";
    pub const SEMANTIC: &str = "semantic_scores.json";
    pub const SEMANTIC_CACHE: &str = "semantic_cache.ndjson";
    pub const GRAPH: &str = "graph.json";
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const TRAIN_LOG: &str = "train_log.json";
    pub const SCORES: &str = "feature_scores.csv";
    pub const SELECTIONS: &str = "selections.csv";
    pub const EVAL_DIR: &str = "eval";
    pub const ABLATION: &str = "ablation.csv";
    pub const VARIANTS_DIR: &str = "variants";
}

pub struct Pipeline {
    pub config: RunConfig,
    transport: Option<Arc<dyn ChatTransport>>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, transport: None })
    }

    /// Replaces the HTTP transport used by LLM scoring.
    pub fn with_transport(mut self, transport: Arc<dyn ChatTransport>) -> Self {
        self.transport = Some(transport);
        self
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    pub fn uses_semantics(&self) -> bool {
        matches!(self.config.mode, Mode::SemanticMock | Mode::SemanticLlm | Mode::AblationHalfdata)
    }

    fn backend(&self) -> SemanticBackend {
        match self.config.mode {
            Mode::SemanticLlm => SemanticBackend::Llm,
            Mode::AblationHalfdata => self.config.ablation_backend,
            _ => SemanticBackend::Mock,
        }
    }

    fn method_name(&self) -> String {
        format!("ours-{}", self.config.mode.name())
    }

    pub fn ingest(&self) -> Result<Loaded> {
        let (dataset, catalog) = dataset::load_dataset(&self.config.manifest)
            .map_err(|source| PipelineError::Dataset { stage: "ingest", source })?;
        let digest = dataset.digest();
        let positives = dataset.labels.iter().filter(|&&v| v == 1).count();
        let summary = DatasetSummary {
            digest: &digest,
            n_samples: dataset.n_samples(),
            n_features: dataset.n_features(),
            n_labels: dataset.n_labels(),
            views: dataset.views.iter().map(|v| (v.name.as_str(), v.matrix.ncols())).collect(),
            label_density: positives as f64 / dataset.labels.len().max(1) as f64,
        };
        write_artifact("ingest", &self.out(files::DATASET), &to_json(&summary))?;
        log::info!(
            "loaded {} samples, {} features in {} views, {} labels",
            summary.n_samples,
            summary.n_features,
            dataset.n_views(),
            summary.n_labels
        );
        Ok(Loaded { dataset, catalog, digest })
    }

    /// MI matrices for `dataset`, reused from `cache_name` when the digest
    /// and options match. The flag reports a cache hit.
    fn stats_for(&self, dataset: &MultiViewDataset, cache_name: &str) -> Result<(MIMatrices, bool)> {
        let path = self.out(cache_name);
        let digest = dataset.digest();
        let opts = self.config.mi_options();
        if let Some(mi) = stats::load_cached(&path, &digest, opts) {
            log::info!("MI matrices loaded from {}", path.display());
            return Ok((mi, true));
        }
        let mi = stats::compute_mi_matrices(dataset, opts);
        fs::create_dir_all(&self.config.output_dir).map_err(|e| artifact_err("stats", &self.config.output_dir, e))?;
        stats::store_cached(&path, &digest, opts, &mi)?;
        Ok((mi, false))
    }

    pub fn stats(&self, loaded: &Loaded) -> Result<(MIMatrices, bool)> {
        self.stats_for(&loaded.dataset, files::MI_CACHE)
    }

    /// Statistics from a seeded subsample of the rows.
    pub fn stats_subsample(&self, loaded: &Loaded) -> Result<(MIMatrices, bool)> {
        let n = loaded.dataset.n_samples();
        let rows = dataset::split(n, self.config.subsample_fraction, self.config.subsample_seed)
            .map_err(|source| PipelineError::Dataset { stage: "stats", source })?
            .train_ids;
        let mut rows = rows;
        rows.sort_unstable();
        self.stats_for(&loaded.dataset.subset_rows(&rows), files::MI_CACHE_HALF)
    }

    fn scorer(&self, backend: SemanticBackend) -> Result<ScorerHandle> {
        match backend {
            SemanticBackend::Mock => Ok(ScorerHandle::Mock(MockScorer::with_synonyms(self.config.synonyms.clone()))),
            SemanticBackend::Llm => {
                let transport: Arc<dyn ChatTransport> = match &self.transport {
                    Some(t) => t.clone(),
                    None => Arc::new(self.config.llm.http_transport()?),
                };
                fs::create_dir_all(&self.config.output_dir).map_err(|e| artifact_err("semantic", &self.config.output_dir, e))?;
                let cache = ScoreCache::open(&self.out(files::SEMANTIC_CACHE)).map_err(SemanticError::Cache)?;
                Ok(ScorerHandle::Llm(LlmAgent::new(transport, self.config.llm.clone(), Some(Arc::new(cache)))))
            }
        }
    }

    pub fn semantic(&self, loaded: &Loaded) -> Result<SemanticScoreSet> {
        let scorer = self.scorer(self.backend())?;
        let batch = match self.backend() {
            SemanticBackend::Llm => self.config.llm.batch_size,
            SemanticBackend::Mock => semantic::DEFAULT_BATCH_SIZE,
        };
        let specs = semantic::catalog_specs(&loaded.dataset.index, &loaded.catalog, batch, None);
        log::info!("scoring {} prompt batches with {}", specs.len(), scorer.model());
        let scores = semantic::score_all(&scorer, &specs)?;
        write_artifact("semantic", &self.out(files::SEMANTIC), &to_json(&scores))?;
        Ok(scores)
    }

    /// Previously written semantic scores, if any.
    pub fn load_semantic(&self) -> Result<Option<SemanticScoreSet>> {
        let path = self.out(files::SEMANTIC);
        if !path.exists() {
            return Ok(None);
        }
        let text = read_artifact("semantic", &path)?;
        serde_json::from_str(&text).map(Some).map_err(|e| artifact_err("semantic", &path, e))
    }

    pub fn graph(
        &self,
        loaded: &Loaded,
        mi: &MIMatrices,
        semantic: Option<&SemanticScoreSet>,
    ) -> Result<(HeteroGraph, Vec<GraphWarning>)> {
        let ds = &loaded.dataset;
        let (stat, warnings) = graph::build_statistical_graph(mi, &ds.index, &self.config.thresholds)?;
        let g = match semantic {
            Some(scores) => {
                let sem = graph::build_semantic_graph(scores, &ds.index, ds.n_views(), ds.n_labels(), self.config.thresholds.delta)?;
                graph::merge(&stat, &sem)?
            }
            None => stat,
        };
        Ok((g, warnings))
    }

    pub fn train(&self, graph: &HeteroGraph) -> Result<TrainOutcome> {
        let (params, report) = gat::train(graph, &self.config.train)?;
        log::info!(
            "trained GAT: loss {:.5} -> {:.5} (best epoch {})",
            report.initial_loss(),
            report.best_loss(),
            report.best_epoch
        );
        let scores = gat::feature_scores(&params, graph, self.config.train.leaky_slope)?;
        Ok(TrainOutcome { checkpoint: Checkpoint::new(self.config.train, params), report, scores })
    }

    pub fn write_graph(&self, dir: &Path, graph: &HeteroGraph) -> Result<()> {
        write_artifact("graph", &dir.join(files::GRAPH), &graph.to_json())
    }

    /// Graph, checkpoint, loss log and feature scores under `dir`.
    pub fn write_training(&self, dir: &Path, graph: &HeteroGraph, outcome: &TrainOutcome) -> Result<()> {
        self.write_graph(dir, graph)?;
        fs::create_dir_all(dir).map_err(|e| artifact_err("train", dir, e))?;
        outcome.checkpoint.save(&dir.join(files::CHECKPOINT))?;
        write_artifact("train", &dir.join(files::TRAIN_LOG), &to_json(&outcome.report))?;
        write_artifact("train", &dir.join(files::SCORES), &scores_csv(&outcome.scores))
    }

    /// Selections at every configured ratio, also written as a table.
    pub fn select(&self, loaded: &Loaded, scores: &[f64]) -> Result<Vec<SelectionResult>> {
        let index = &loaded.dataset.index;
        let selections = select::select_ratios(scores, &self.config.protocol.ratios, index)?;
        write_artifact("select", &self.out(files::SELECTIONS), &select::selections_csv(&selections, scores, index))?;
        Ok(selections)
    }

    pub fn evaluate(&self, loaded: &Loaded, method: &str, ranking: &Ranking) -> Result<EvalReport> {
        let report = eval::run_protocol(&loaded.dataset, method, ranking, &self.config.protocol)?;
        let dir = self.out(files::EVAL_DIR);
        write_artifact("eval", &dir.join(format!("{method}.json")), &to_json(&report))?;
        write_artifact("eval", &dir.join(format!("{method}.csv")), &report.to_csv())?;
        log::info!(
            "{method}: over-ratio AP {:.4} AUC {:.4} LRAP {:.4} HL {:.4}",
            report.over_ratio_mean.ap,
            report.over_ratio_mean.auc,
            report.over_ratio_mean.lrap,
            report.over_ratio_mean.hl
        );
        Ok(report)
    }

    pub fn evaluate_method(&self, loaded: &Loaded, scores: Vec<f64>) -> Result<EvalReport> {
        self.evaluate(loaded, &self.method_name(), &Ranking::Scores(scores))
    }

    pub fn evaluate_baselines(&self, loaded: &Loaded, mi: &MIMatrices) -> Result<Vec<EvalReport>> {
        if !self.config.baselines {
            return Ok(Vec::new());
        }
        Ok(vec![
            self.evaluate(loaded, "random", &Ranking::Random { seed: self.config.random_seed() })?,
            self.evaluate(loaded, "max-mi", &Ranking::Scores(eval::max_mi_scores(mi)))?,
        ])
    }

    /// All stages for the configured mode.
    pub fn run(&self) -> Result<RunSummary> {
        let loaded = self.ingest()?;
        let (mi, stats_from_cache) = self.stats(&loaded)?;
        let semantic = if self.uses_semantics() { Some(self.semantic(&loaded)?) } else { None };
        let mut reports = Vec::new();
        let mut warnings = Vec::new();

        if self.config.mode == Mode::AblationHalfdata {
            let (mi_half, _) = self.stats_subsample(&loaded)?;
            let sem = semantic.as_ref();
            let variants: [(&str, &MIMatrices, Option<&SemanticScoreSet>); 3] =
                [("full", &mi, sem), ("statistical", &mi, None), ("small-scale", &mi_half, sem)];
            for (name, m, s) in variants {
                let (g, w) = self.graph(&loaded, m, s)?;
                warnings.extend(w);
                let outcome = self.train(&g)?;
                self.write_training(&self.out(files::VARIANTS_DIR).join(name), &g, &outcome)?;
                reports.push(self.evaluate(&loaded, name, &Ranking::Scores(outcome.scores))?);
            }
            write_artifact("report", &self.out(files::ABLATION), &ablation_table(&reports))?;
        } else {
            let (g, w) = self.graph(&loaded, &mi, semantic.as_ref())?;
            warnings.extend(w);
            let outcome = self.train(&g)?;
            self.write_training(&self.config.output_dir, &g, &outcome)?;
            self.select(&loaded, &outcome.scores)?;
            reports.push(self.evaluate_method(&loaded, outcome.scores)?);
        }
        reports.extend(self.evaluate_baselines(&loaded, &mi)?);

        let manifest = self.manifest(&loaded, stats_from_cache, &warnings)?;
        write_artifact("run", &self.out(files::MANIFEST), &to_json(&manifest))?;
        Ok(RunSummary { reports, stats_from_cache, manifest })
    }

    fn manifest(&self, loaded: &Loaded, stats_from_cache: bool, warnings: &[GraphWarning]) -> Result<RunManifest> {
        let mut artifacts = BTreeMap::new();
        collect_digests(&self.config.output_dir, &self.config.output_dir, &mut artifacts)?;
        let mut seeds = BTreeMap::new();
        seeds.insert("train".to_string(), self.config.train.seed);
        seeds.insert("split_base".to_string(), self.config.protocol.base_seed);
        seeds.insert("random_baseline".to_string(), self.config.random_seed());
        if self.config.mode == Mode::AblationHalfdata {
            seeds.insert("subsample".to_string(), self.config.subsample_seed);
        }
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode: self.config.mode,
            config: self.config.clone(),
            dataset_digest: loaded.digest.clone(),
            seeds,
            stats_from_cache,
            graph_warnings: warnings
                .iter()
                .map(|GraphWarning::EmptyRelation(k)| format!("empty relation {k}"))
                .collect(),
            artifacts,
        })
    }
}

fn collect_digests(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| artifact_err("run", dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_digests(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != files::MANIFEST) {
            let bytes = fs::read(&path).map_err(|e| artifact_err("run", &path, e))?;
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub mode: Mode,
    pub config: RunConfig,
    pub dataset_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub stats_from_cache: bool,
    pub graph_warnings: Vec<String>,
    /// Relative path → SHA-256 of every artifact written by the run.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub reports: Vec<EvalReport>,
    pub stats_from_cache: bool,
    pub manifest: RunManifest,
}

/// `global_feature_id,score`
pub fn scores_csv(scores: &[f64]) -> String {
    let mut out = String::from("global_feature_id,score\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{i},{s}");
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<f64>, String> {
    let mut scores = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line.split_once(',').ok_or_else(|| format!("line {}: expected two fields", n + 1))?;
        let id: usize = id.trim().parse().map_err(|e| format!("line {}: {e}", n + 1))?;
        if id != scores.len() {
            return Err(format!("line {}: expected feature id {}, got {id}", n + 1, scores.len()));
        }
        scores.push(score.trim().parse().map_err(|e| format!("line {}: {e}", n + 1))?);
    }
    Ok(scores)
}

/// Rows are metrics, columns the variants' over-ratio means.
pub fn ablation_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric");
    for r in reports {
        let _ = write!(out, ",{}", r.method);
    }
    out.push('\n');
    for (m, name) in Metrics::NAMES.iter().enumerate() {
        out.push_str(name);
        for r in reports {
            let _ = write!(out, ",{:.4}", r.over_ratio_mean.values()[m]);
        }
        out.push('\n');
    }
    out
}

/// Loads a saved stage artifact by name from a run directory.
pub fn load_graph(dir: &Path) -> Result<HeteroGraph> {
    let path = dir.join(files::GRAPH);
    serde_json::from_str(&read_artifact("train", &path)?).map_err(|e| artifact_err("train", &path, e))
}

pub fn load_scores(dir: &Path) -> Result<Vec<f64>> {
    let path = dir.join(files::SCORES);
    parse_scores_csv(&read_artifact("select", &path)?).map_err(|e| artifact_err("select", &path, e))
}

/// Every evaluation report found under `dir/eval`, ordered by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let eval_dir = dir.join(files::EVAL_DIR);
    let entries = fs::read_dir(&eval_dir).map_err(|_| PipelineError::MissingRun(format!("{} has no evaluation reports", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::MissingRun(format!("{} has no evaluation reports", dir.display())));
    }
    paths
        .iter()
        .map(|p| serde_json::from_str(&read_artifact("report", p)?).map_err(|e| artifact_err("report", p, e)))
        .collect()
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub methods: Vec<String>,
    pub tables: Vec<PathBuf>,
    pub charts: Vec<PathBuf>,
}

/// Per-metric tables (rows = ratios, columns = methods) and line charts
/// across the given runs. Method names repeated across runs are prefixed
/// with their run directory's name.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    if run_dirs.is_empty() {
        return Err(PipelineError::MissingRun("no run directories given".into()));
    }
    let mut series: Vec<(String, EvalReport)> = Vec::new();
    for dir in run_dirs {
        for r in load_reports(dir)? {
            series.push((r.method.clone(), r));
        }
    }
    let mut seen = BTreeMap::<String, usize>::new();
    for (name, _) in &series {
        *seen.entry(name.clone()).or_default() += 1;
    }
    if seen.values().any(|&c| c > 1) {
        let mut i = 0;
        for dir in run_dirs {
            let n = load_reports(dir)?.len();
            let tag = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for (name, _) in &mut series[i..i + n] {
                if seen[name.as_str()] > 1 {
                    *name = format!("{tag}/{name}");
                }
            }
            i += n;
        }
    }

    let ratios: Vec<f64> = {
        let mut set = BTreeSet::new();
        for (_, r) in &series {
            for s in &r.per_ratio {
                set.insert(s.ratio.to_bits());
            }
        }
        let mut v: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        v.sort_by(f64::total_cmp);
        v
    };

    fs::create_dir_all(out_dir).map_err(|e| artifact_err("report", out_dir, e))?;
    let mut tables = Vec::new();
    let mut charts = Vec::new();
    for (m, metric) in Metrics::NAMES.iter().enumerate() {
        let mut csv = String::from("ratio");
        for (name, _) in &series {
            let _ = write!(csv, ",{name}");
        }
        csv.push('\n');
        let mut lines: Vec<(String, Vec<(f64, f64)>)> = series.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
        for &ratio in &ratios {
            let _ = write!(csv, "{ratio}");
            for (i, (_, r)) in series.iter().enumerate() {
                match r.summary(ratio) {
                    Some(s) => {
                        let v = s.mean.values()[m];
                        let _ = write!(csv, ",{v}");
                        lines[i].1.push((ratio, v));
                    }
                    None => csv.push(','),
                }
            }
            csv.push('\n');
        }
        let table = out_dir.join(format!("{}.csv", metric.to_lowercase()));
        write_artifact("report", &table, &csv)?;
        let chart = out_dir.join(format!("{}.svg", metric.to_lowercase()));
        write_artifact("report", &chart, &svg_chart(metric, &ratios, &lines, &csv))?;
        tables.push(table);
        charts.push(chart);
    }
    Ok(ReportOutput { methods: series.into_iter().map(|(n, _)| n).collect(), tables, charts })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of metric vs selection ratio. The source table is embedded
/// as a comment so the file diffs meaningfully.
pub fn svg_chart(metric: &str, ratios: &[f64], lines: &[(String, Vec<(f64, f64)>)], data_csv: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 30.0, 50.0);
    let (x0, x1) = match (ratios.first(), ratios.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.01, a + 0.01),
        _ => (0.0, 1.0),
    };
    let values: Vec<f64> = lines.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if values.is_empty() {
        (0.0, 1.0)
    } else {
        let pad = ((hi - lo) * 0.1).max(0.005);
        (lo - pad, hi + pad)
    };
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<!-- data\n{}-->", data_csv.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{} vs selection ratio</text>"#,
        (left + w - right) / 2.0,
        escape_xml(metric)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    for &r in ratios {
        let x = px(r);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{0}" x2="{x:.1}" y2="{1}" stroke="black"/><text x="{x:.1}" y="{2}" font-family="sans-serif" font-size="11" text-anchor="middle">{3}%</text>"#,
            h - bottom,
            h - bottom + 5.0,
            h - bottom + 18.0,
            (r * 100.0).round()
        );
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><text x="{1}" y="{2:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">selection ratio</text>"#,
        (left + w - right) / 2.0,
        h - 10.0
    );
    for (i, (name, points)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}" font-family="sans-serif" font-size="11">{4}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 35.0,
            ly + 4.0,
            escape_xml(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

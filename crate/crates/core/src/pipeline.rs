//! Experiment orchestration: configuration, pre-training over source
//! datasets, zero-shot inference on targets, and ablation runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{read_checkpoint, write_checkpoint, Adapter, AdapterConfig};
use crate::aggregate::AggregationConfig;
use crate::embed::{embed_dataset, EmbeddingTable, ProviderSpec};
use crate::error::{Error, Result};
use crate::graph::{load_dataset, TextAttributedGraph};
use crate::infer::{evaluate, predict_dataset, DatasetEval, InferenceMode, InferenceOptions};
use crate::loss::{LossOptions, Similarity};
use crate::optim::OptimizerConfig;
use crate::sampler::{build_pretrain_set_with_stats, SampleStats, SamplerConfig};
use crate::train::{pretrain, TrainConfig, TrainLog};

pub const CHECKPOINT_FILE: &str = "adapter.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const REPORT_TABLE_FILE: &str = "eval_report.txt";
pub const PRETRAIN_TIMINGS_FILE: &str = "timings_pretrain.json";
pub const INFER_TIMINGS_FILE: &str = "timings_infer.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_prompt: bool,
    #[serde(default)]
    pub no_aggregation: bool,
    #[serde(default)]
    pub no_normalization: bool,
    #[serde(default)]
    pub dense_adapter: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default)]
    pub mode: InferenceMode,
    /// Prompt text used for every target instead of its own dataset
    /// description. Needs a live provider.
    #[serde(default)]
    pub generic_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub source_datasets: Vec<PathBuf>,
    #[serde(default)]
    pub target_datasets: Vec<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub provider: ProviderSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub inference: InferenceConfig,
}

fn default_epochs() -> usize {
    3
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(provider: ProviderSpec, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            source_datasets: Vec::new(),
            target_datasets: Vec::new(),
            output_dir: output_dir.into(),
            provider,
            sampler: SamplerConfig::default(),
            aggregation: AggregationConfig::default(),
            adapter: AdapterConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: default_epochs(),
            seed: 0,
            similarity: Similarity::Dot,
            ablation: AblationFlags::default(),
            inference: InferenceConfig::default(),
        }
    }

    /// Parses a TOML config. Relative paths resolve against the config
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.source_datasets.iter_mut().for_each(resolve);
        cfg.target_datasets.iter_mut().for_each(resolve);
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.provider.validate()?;
        self.sampler.validate()?;
        self.adapter.validate()?;
        self.optimizer.validate()?;
        for p in self.source_datasets.iter().chain(&self.target_datasets) {
            if !p.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Loss/aggregation settings after applying the ablation flags.
    pub fn loss_options(&self) -> LossOptions {
        if self.ablation.no_aggregation {
            log::info!("ablation no_aggregation: aggregation iterations forced to 0");
        }
        LossOptions {
            iterations: if self.ablation.no_aggregation { 0 } else { self.aggregation.iterations },
            normalize: self.aggregation.normalize && !self.ablation.no_normalization,
            similarity: self.similarity,
        }
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            loss: self.loss_options(),
            prompt: !self.ablation.no_prompt,
            mode: self.inference.mode.clone(),
            k: self.sampler.k,
            max_nodes: self.sampler.max_nodes,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            seed: self.seed,
            optimizer: self.optimizer,
            loss: self.loss_options(),
        }
    }

    /// Fresh adapter for this configuration, seeded from `seed`.
    pub fn init_adapter(&self) -> Adapter {
        if self.ablation.dense_adapter {
            Adapter::dense(self.provider.dim, &self.adapter)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            Adapter::low_rank(self.provider.dim, &self.adapter, &mut rng)
        }
    }
}

/// A dataset together with its embeddings.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub graph: TextAttributedGraph,
    pub table: EmbeddingTable,
}

pub fn load_with_embeddings(dirs: &[PathBuf], provider: &ProviderSpec) -> Result<Vec<LoadedDataset>> {
    dirs.par_iter()
        .map(|dir| {
            let ctx = |e: Error| e.context(format!("dataset {}", dir.display()));
            let graph = load_dataset(dir).map_err(ctx)?;
            let table = embed_dataset(&graph, provider, dir).map_err(ctx)?;
            Ok(LoadedDataset {
                dir: dir.clone(),
                graph,
                table,
            })
        })
        .collect()
}

fn check_disjoint(sources: &[&TextAttributedGraph], target: &TextAttributedGraph) -> Result<()> {
    if sources.iter().any(|s| s.name == target.name) {
        return Err(Error::Config(format!(
            "target dataset {:?} also appears among the sources",
            target.name
        )));
    }
    let source_classes: BTreeSet<&str> = sources.iter().flat_map(|s| s.classes().names()).collect();
    let shared: Vec<&str> = target.classes().names().filter(|n| source_classes.contains(n)).collect();
    if !shared.is_empty() {
        log::warn!("target {:?} shares class names with the sources: {shared:?}", target.name);
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub embed_seconds: f64,
    pub sample_seconds: f64,
    pub train_seconds: f64,
    pub infer_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub adapter: Adapter,
    pub log: TrainLog,
    pub sample_stats: Vec<SampleStats>,
    pub subgraph_count: usize,
    pub trainable_parameters: usize,
    pub timings: Timings,
}

/// Embeds the sources, builds the pre-training set and trains a fresh
/// adapter. Nothing is written to disk.
pub fn pretrain_in_memory(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.source_datasets.is_empty() {
        return Err(Error::Config("no source datasets configured".into()));
    }
    let t0 = Instant::now();
    let sources = load_with_embeddings(&cfg.source_datasets, &cfg.provider)?;
    let mut names = BTreeSet::new();
    for s in &sources {
        if !names.insert(s.graph.name.as_str()) {
            return Err(Error::Config(format!("source dataset name {:?} appears twice", s.graph.name)));
        }
    }
    let embed_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let graphs: Vec<TextAttributedGraph> = sources.iter().map(|d| d.graph.clone()).collect();
    let (subgraphs, sample_stats) = build_pretrain_set_with_stats(&graphs, &cfg.sampler, !cfg.ablation.no_prompt)?;
    let sample_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let tables: Vec<EmbeddingTable> = sources.into_iter().map(|d| d.table).collect();
    let mut adapter = cfg.init_adapter();
    let log = pretrain(&mut adapter, &subgraphs, &tables, &cfg.train_config())?;
    Ok(PretrainOutcome {
        trainable_parameters: adapter.param_count(),
        adapter,
        log,
        sample_stats,
        subgraph_count: subgraphs.len(),
        timings: Timings {
            embed_seconds,
            sample_seconds,
            train_seconds: t2.elapsed().as_secs_f64(),
            infer_seconds: 0.0,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub subgraphs: usize,
    pub steps: usize,
    pub trainable_parameters: usize,
    pub adapted_matrices: usize,
    pub sample_stats: Vec<SampleStats>,
}

#[derive(Serialize)]
struct TrainLogFile<'a> {
    subgraphs: usize,
    trainable_parameters: usize,
    log: &'a TrainLog,
}

/// Pre-trains and writes the checkpoint and JSON training log into
/// `cfg.output_dir`.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    let out = pretrain_in_memory(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&out.adapter, &checkpoint)?;
    let train_log = cfg.output_dir.join(TRAIN_LOG_FILE);
    let body = serde_json::to_string_pretty(&TrainLogFile {
        subgraphs: out.subgraph_count,
        trainable_parameters: out.trainable_parameters,
        log: &out.log,
    })
    .expect("log serializes");
    fs::write(&train_log, body).map_err(|e| Error::io(&train_log, e))?;
    write_timings(cfg, PRETRAIN_TIMINGS_FILE, &out.timings)?;
    Ok(PretrainSummary {
        checkpoint,
        train_log,
        subgraphs: out.subgraph_count,
        steps: out.log.steps.len(),
        trainable_parameters: out.trainable_parameters,
        adapted_matrices: 1,
        sample_stats: out.sample_stats,
    })
}

/// Wall-clock timings live outside the report so reports stay
/// byte-reproducible.
fn write_timings(cfg: &ExperimentConfig, file: &str, t: &Timings) -> Result<()> {
    let path = cfg.output_dir.join(file);
    fs::write(&path, serde_json::to_string_pretty(t).expect("serializes")).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetEval>,
    pub trainable_parameters: usize,
    pub config: ExperimentConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>8} {:>9}\n", "dataset", "labeled", "correct", "accuracy");
        for d in &self.datasets {
            s += &format!("{:<24} {:>8} {:>8} {:>8.2}%\n", d.dataset, d.labeled, d.correct, 100.0 * d.accuracy);
        }
        s
    }
}

/// Zero-shot evaluation of `adapter` on every configured target.
pub fn infer_with(cfg: &ExperimentConfig, adapter: &Adapter) -> Result<EvalReport> {
    cfg.validate()?;
    if cfg.target_datasets.is_empty() {
        return Err(Error::Config("no target datasets configured".into()));
    }
    if adapter.dim() != cfg.provider.dim {
        return Err(Error::Config(format!(
            "checkpoint dim {} does not match provider dim {}",
            adapter.dim(),
            cfg.provider.dim
        )));
    }
    let source_graphs: Vec<TextAttributedGraph> = cfg
        .source_datasets
        .iter()
        .map(|d| load_dataset(d))
        .collect::<Result<_>>()?;
    let source_refs: Vec<&TextAttributedGraph> = source_graphs.iter().collect();
    let mut targets = load_with_embeddings(&cfg.target_datasets, &cfg.provider)?;
    if let Some(text) = &cfg.inference.generic_prompt {
        let provider = cfg
            .provider
            .live_provider()?
            .ok_or_else(|| Error::Config("inference.generic_prompt needs a mock or http provider".into()))?;
        let v = provider.embed(std::slice::from_ref(text))?.remove(0);
        for t in &mut targets {
            t.table = t.table.clone().with_prompt(v.clone().into())?;
        }
    }
    let opts = cfg.inference_options();
    let datasets = targets
        .iter()
        .map(|t| {
            check_disjoint(&source_refs, &t.graph)?;
            let preds = predict_dataset(&t.graph, &t.table, adapter, &opts)?;
            evaluate(&t.graph.name, t.graph.classes(), t.graph.node_labels(), &preds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        datasets,
        trainable_parameters: adapter.param_count(),
        config: cfg.clone(),
    })
}

/// Loads `checkpoint`, evaluates every target and writes the JSON report
/// and text table into `cfg.output_dir`.
pub fn run_inference(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let t0 = Instant::now();
    let adapter = read_checkpoint(checkpoint)?;
    let report = infer_with(cfg, &adapter)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(REPORT_FILE);
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    let path = cfg.output_dir.join(REPORT_TABLE_FILE);
    fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    write_timings(
        cfg,
        INFER_TIMINGS_FILE,
        &Timings {
            infer_seconds: t0.elapsed().as_secs_f64(),
            ..Default::default()
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn accuracy(&self, variant: &str, dataset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)?
            .report
            .datasets
            .iter()
            .find(|d| d.dataset == dataset)
            .map(|d| d.accuracy)
    }

    pub fn table(&self) -> String {
        let datasets: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.report.datasets.iter().map(|d| d.dataset.as_str()).collect())
            .unwrap_or_default();
        let mut s = format!("{:<18}", "variant");
        for d in &datasets {
            s += &format!(" {d:>14}");
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!("{:<18}", r.variant);
            for d in &r.report.datasets {
                s += &format!(" {:>13.2}%", 100.0 * d.accuracy);
            }
            s.push('\n');
        }
        s
    }
}

pub const ABLATION_VARIANTS: [&str; 5] = ["full", "no_prompt", "no_aggregation", "no_normalization", "dense_adapter"];

/// Configuration of one ablation variant: the base config with every flag
/// cleared except the one named.
pub fn ablation_variant(cfg: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut v = cfg.clone();
    v.ablation = AblationFlags::default();
    match variant {
        "full" => {}
        "no_prompt" => v.ablation.no_prompt = true,
        "no_aggregation" => v.ablation.no_aggregation = true,
        "no_normalization" => v.ablation.no_normalization = true,
        "dense_adapter" => v.ablation.dense_adapter = true,
        other => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
    }
    v.output_dir = cfg.output_dir.join("ablation").join(variant);
    Ok(v)
}

/// Pre-trains and evaluates the full model and each single-flag variant
/// under the same seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationTable> {
    let rows = ABLATION_VARIANTS
        .iter()
        .map(|&name| {
            let v = ablation_variant(cfg, name)?;
            let trained = pretrain_in_memory(&v).map_err(|e| e.context(format!("ablation {name}")))?;
            let report = infer_with(&v, &trained.adapter).map_err(|e| e.context(format!("ablation {name}")))?;
            log::info!("ablation {name}: {}", report.table().trim_end());
            Ok(AblationRow {
                variant: name.to_string(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

/// Per-source sampler statistics without training.
pub fn sample_stats(cfg: &ExperimentConfig) -> Result<Vec<SampleStats>> {
    cfg.sampler.validate()?;
    if cfg.source_datasets.is_empty() {
        return Err(Error::Config("no source datasets configured".into()));
    }
    let graphs = cfg
        .source_datasets
        .iter()
        .map(|d| load_dataset(d))
        .collect::<Result<Vec<_>>>()?;
    build_pretrain_set_with_stats(&graphs, &cfg.sampler, !cfg.ablation.no_prompt).map(|(_, s)| s)
}

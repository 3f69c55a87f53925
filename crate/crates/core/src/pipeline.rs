//! End-to-end orchestration driven by a [`RunConfig`]. The CLI calls these
//! functions and nothing else, so every CLI result can be reproduced from code
//! with the same configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{stability_experiment, StabilityConfig, StabilityRow, StabilitySummary};
use crate::clustering::{cluster_layer_activations, ClusterAssignment};
use crate::error::{Error, Result};
use crate::extraction::{extract_layer, Criterion, ExpertSpec, ExtractionConfig};
use crate::finetune::{evaluate, evaluate_traced, finetune, retention, EpochLog, FinetuneConfig};
use crate::io::{idx, synth_split, DataSource, Dataset, RunConfig};
use crate::moe::{assemble, count_costs, CostReport, MoeModel, RouteMetric};
use crate::rng::Rng;
use crate::vit::{capture_dataset, train_base, Capture, CaptureOptions, LayerCapture, ModelWeights, TrainReport};

/// Train and test splits named by the configuration.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synthetic => synth_split(&cfg.data.synth, cfg.data.train_images, cfg.data.test_images, cfg.seed),
        DataSource::Idx => {
            let need = |p: &Option<std::path::PathBuf>, what: &str| {
                p.clone().ok_or_else(|| Error::Config(format!("idx data needs {what}")))
            };
            let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| Error::io(p, e));
            let train = idx::dataset_from_idx(
                &read(need(&cfg.data.train_images_path, "train_images_path")?)?,
                &read(need(&cfg.data.train_labels_path, "train_labels_path")?)?,
                None,
            )?;
            let test = idx::dataset_from_idx(
                &read(need(&cfg.data.test_images_path, "test_images_path")?)?,
                &read(need(&cfg.data.test_labels_path, "test_labels_path")?)?,
                Some((train.norm_mean.clone(), train.norm_std.clone())),
            )?;
            Ok((train, test))
        }
    }
}

pub fn train_stage(cfg: &RunConfig, train: &Dataset) -> Result<(ModelWeights, TrainReport)> {
    train_base(&cfg.model, train, &cfg.train, &mut Rng::derive(cfg.seed, "train"))
}

/// Indices of the training images whose tokens are captured.
pub fn capture_image_ids(cfg: &RunConfig, available: usize) -> Result<Vec<usize>> {
    let want = cfg.capture_images();
    if want > available {
        return Err(Error::Config(format!(
            "capture needs {want} images but only {available} are available"
        )));
    }
    let mut ids = Rng::derive(cfg.seed, "capture").sample_indices(available, want);
    ids.sort_unstable();
    Ok(ids)
}

pub fn capture_stage(cfg: &RunConfig, weights: &ModelWeights, train: &Dataset) -> Result<Capture> {
    let ids = capture_image_ids(cfg, train.len())?;
    capture_dataset(
        &cfg.model,
        weights,
        train,
        &ids,
        &CaptureOptions {
            layers: cfg.layers(),
            include_class_token: cfg.capture.include_class_token,
        },
    )
}

/// HDBSCAN on every captured layer.
pub fn cluster_stage(cfg: &RunConfig, capture: &Capture) -> Result<Vec<(usize, ClusterAssignment)>> {
    capture
        .layers
        .iter()
        .map(|lc| Ok((lc.layer, cluster_layer_activations(lc, &cfg.clustering)?)))
        .collect()
}

/// Experts for every layer that produced at least one cluster.
pub fn extract_stage(
    capture: &Capture,
    clusterings: &[(usize, ClusterAssignment)],
    config: &ExtractionConfig,
) -> Result<Vec<ExpertSpec>> {
    let mut experts = Vec::new();
    for (layer, assignment) in clusterings {
        if assignment.k == 0 {
            continue;
        }
        let lc = layer_capture(capture, *layer)?;
        experts.extend(extract_layer(lc, assignment, config)?);
    }
    Ok(experts)
}

fn layer_capture(capture: &Capture, layer: usize) -> Result<&LayerCapture> {
    capture
        .layer(layer)
        .ok_or_else(|| Error::Validation(format!("capture has no records for layer {layer}")))
}

/// Replaces every clustering by a uniform random partition with the same
/// number of clusters.
pub fn random_clusterings(clusterings: &[(usize, ClusterAssignment)], seed: u64) -> Vec<(usize, ClusterAssignment)> {
    clusterings
        .iter()
        .map(|(layer, a)| {
            let mut rng = Rng::derive(seed, &format!("random-clusters/{layer}"));
            let labels = if a.k == 0 {
                vec![-1; a.len()]
            } else {
                let mut l: Vec<i32> = (0..a.len()).map(|i| (i % a.k) as i32).collect();
                rng.shuffle(&mut l);
                l
            };
            (*layer, ClusterAssignment { labels, k: a.k })
        })
        .collect()
}

/// The machine-readable outcome of one extraction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub preset: String,
    pub dense_top1: f64,
    /// Converted model before fine-tuning.
    pub extracted_top1: f64,
    /// Converted model after fine-tuning.
    pub top1: f64,
    /// `extracted_top1 / dense_top1`
    pub acc_retention: f64,
    /// `top1 / dense_top1`
    pub finetuned_retention: f64,
    pub macs_reduction: f64,
    pub params_reduction: f64,
    pub dense_macs: u64,
    pub moe_macs: f64,
    pub routing_overhead_macs: u64,
    pub dense_params: u64,
    pub moe_params: u64,
    pub experts_per_layer: Vec<usize>,
    pub capture_tokens: usize,
    pub finetune_epochs: usize,
}

/// Everything produced after clustering, for one configuration of the
/// extraction and routing choices.
#[derive(Debug, Clone)]
pub struct ConversionRun {
    pub experts: Vec<ExpertSpec>,
    pub extracted: MoeModel,
    pub finetuned: MoeModel,
    pub logs: Vec<EpochLog>,
    pub costs: CostReport,
    pub report: Report,
}

/// Inputs shared by every conversion of one dense model.
pub struct Stage<'a> {
    pub cfg: &'a RunConfig,
    pub weights: &'a ModelWeights,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub dense_top1: f64,
    pub capture: &'a Capture,
}

/// Evaluates `model` on `test` with routing recorded, prices it under that
/// routing and fills in a [`Report`].
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    cfg: &RunConfig,
    preset: &str,
    dense_top1: f64,
    extracted_top1: f64,
    model: &MoeModel,
    test: &Dataset,
    capture_tokens: usize,
    finetune_epochs: usize,
) -> Result<(Report, CostReport)> {
    let final_eval = evaluate_traced(model, test)?;
    let routing = final_eval
        .trace
        .as_ref()
        .map(|t| t.distribution(&model.experts_per_layer()))
        .unwrap_or_default();
    let costs = count_costs(&model.spec, &model.weights, &routing);
    let report = Report {
        seed: cfg.seed,
        preset: preset.to_string(),
        dense_top1,
        extracted_top1,
        top1: final_eval.top1,
        acc_retention: retention(extracted_top1, dense_top1),
        finetuned_retention: retention(final_eval.top1, dense_top1),
        macs_reduction: costs.macs_reduction(),
        params_reduction: costs.params_reduction(),
        dense_macs: costs.dense_macs,
        moe_macs: costs.moe_macs,
        routing_overhead_macs: costs.routing_overhead_macs,
        dense_params: costs.dense_params,
        moe_params: costs.moe_params,
        experts_per_layer: model.experts_per_layer(),
        capture_tokens,
        finetune_epochs,
    };
    Ok((report, costs))
}

/// Extract, assemble, evaluate, fine-tune and evaluate again.
pub fn convert(
    stage: &Stage<'_>,
    preset: &str,
    clusterings: &[(usize, ClusterAssignment)],
    extraction: &ExtractionConfig,
    metric: RouteMetric,
    tune: &FinetuneConfig,
) -> Result<ConversionRun> {
    let cfg = stage.cfg;
    let experts = extract_stage(stage.capture, clusterings, extraction)?;
    let extracted = assemble(&cfg.model, stage.weights, &experts, metric)?;
    let extracted_top1 = evaluate(&cfg.model, &extracted.weights, stage.test)?.top1;
    let (finetuned, logs) = finetune(&extracted, stage.weights, stage.train, Some(stage.test), tune)?;
    let (report, costs) = build_report(
        cfg,
        preset,
        stage.dense_top1,
        extracted_top1,
        &finetuned,
        stage.test,
        stage.capture.tokens_per_layer(),
        tune.epochs,
    )?;
    Ok(ConversionRun {
        experts,
        extracted,
        finetuned,
        logs,
        costs,
        report,
    })
}

/// The configured fine-tuning settings with the run seed.
pub fn finetune_config(cfg: &RunConfig) -> FinetuneConfig {
    FinetuneConfig {
        seed: cfg.seed,
        ..cfg.finetune.clone()
    }
}

/// The configured extraction settings with the run seed.
pub fn extraction_config(cfg: &RunConfig) -> ExtractionConfig {
    ExtractionConfig {
        seed: cfg.seed,
        ..cfg.extraction.clone()
    }
}

/// All artifacts of a full run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub train: Dataset,
    pub test: Dataset,
    pub weights: ModelWeights,
    pub train_report: TrainReport,
    pub dense_top1: f64,
    pub capture: Capture,
    pub clusterings: Vec<(usize, ClusterAssignment)>,
    pub conversion: ConversionRun,
}

/// Data, training, capture, clustering, then [`convert`] with the configured
/// method.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let (weights, train_report) = train_stage(cfg, &train)?;
    let dense_top1 = evaluate(&cfg.model, &weights, &test)?.top1;
    let capture = capture_stage(cfg, &weights, &train)?;
    let clusterings = cluster_stage(cfg, &capture)?;
    let stage = Stage {
        cfg,
        weights: &weights,
        train: &train,
        test: &test,
        dense_top1,
        capture: &capture,
    };
    let conversion = convert(
        &stage,
        "method",
        &clusterings,
        &extraction_config(cfg),
        cfg.routing.route_metric(),
        &finetune_config(cfg),
    )?;
    Ok(PipelineRun {
        train,
        test,
        weights,
        train_report,
        dense_top1,
        capture,
        clusterings,
        conversion,
    })
}

/// The four cumulative ablation rows: everything random, then density
/// clustering, then variance selection, then similarity routing (the full
/// method).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    RandomEverything,
    Hdbscan,
    Variance,
    Routing,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::RandomEverything, Preset::Hdbscan, Preset::Variance, Preset::Routing];

    pub fn name(self) -> &'static str {
        match self {
            Preset::RandomEverything => "random-everything",
            Preset::Hdbscan => "hdbscan",
            Preset::Variance => "variance",
            Preset::Routing => "routing",
        }
    }

    pub fn random_clusters(self) -> bool {
        self == Preset::RandomEverything
    }

    pub fn criterion(self) -> Criterion {
        match self {
            Preset::RandomEverything | Preset::Hdbscan => Criterion::Random,
            Preset::Variance | Preset::Routing => Criterion::Variance,
        }
    }

    pub fn metric(self, configured: RouteMetric, seed: u64) -> RouteMetric {
        match self {
            Preset::Routing => configured,
            _ => RouteMetric::Random { seed },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset {s:?}")))
    }
}

/// Runs one ablation preset from an existing density clustering.
pub fn run_preset(
    stage: &Stage<'_>,
    clusterings: &[(usize, ClusterAssignment)],
    preset: Preset,
) -> Result<ConversionRun> {
    let cfg = stage.cfg;
    let clusters = if preset.random_clusters() {
        random_clusterings(clusterings, cfg.seed)
    } else {
        clusterings.to_vec()
    };
    let extraction = ExtractionConfig {
        criterion: preset.criterion(),
        ..extraction_config(cfg)
    };
    convert(
        stage,
        preset.name(),
        &clusters,
        &extraction,
        preset.metric(cfg.routing.route_metric(), cfg.seed),
        &finetune_config(cfg),
    )
}

pub fn stability_config(cfg: &RunConfig) -> StabilityConfig {
    StabilityConfig {
        sizes: cfg.analysis.stability_sizes.clone(),
        seeds: cfg.analysis.stability_seeds.clone(),
        layers: cfg.layers(),
        include_class_token: cfg.capture.include_class_token,
        clustering: cfg.clustering.clone(),
        extraction: cfg.extraction.clone(),
        metric: cfg.routing.route_metric(),
    }
}

pub fn run_stability(
    cfg: &RunConfig,
    weights: &ModelWeights,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Vec<StabilityRow>, Vec<StabilitySummary>)> {
    stability_experiment(&cfg.model, weights, train, test, &stability_config(cfg))
}

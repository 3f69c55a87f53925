//! Routing statistics, expert similarity, expert counts, sample-size
//! stability and patch export. Everything here produces plain data and CSV;
//! plotting is left to other tools.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_layer_activations, ClusteringConfig};
use crate::error::{Error, Result};
use crate::extraction::{extract_layer, ExtractionConfig};
use crate::finetune::evaluate;
use crate::io::Dataset;
use crate::moe::{assemble, moe_forward_traced, MoeModel, RouteMetric, RoutingTrace};
use crate::rng::Rng;
use crate::tensor::dot;
use crate::vit::{capture_dataset, CaptureOptions, ModelSpec, ModelWeights};

/// Token counts per expert for one layer, overall and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub layer: usize,
    pub counts: Vec<u64>,
    pub per_class: BTreeMap<usize, Vec<u64>>,
}

fn fractions_of(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

impl RoutingStats {
    pub fn num_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn fractions(&self) -> Vec<f64> {
        fractions_of(&self.counts)
    }

    pub fn class_fractions(&self, class: usize) -> Option<Vec<f64>> {
        self.per_class.get(&class).map(|c| fractions_of(c))
    }
}

/// Tallies a routing trace per layer. `experts_per_layer` sizes the count
/// vectors (experts that got no tokens still appear); `class_filter` keeps
/// only tokens of the listed classes.
pub fn routing_distribution(
    trace: &RoutingTrace,
    experts_per_layer: &[usize],
    num_classes: usize,
    class_filter: Option<&[usize]>,
) -> Result<Vec<RoutingStats>> {
    if trace.is_empty() {
        return Err(Error::Validation("routing trace is empty".into()));
    }
    if let Some(&bad) = class_filter.and_then(|f| f.iter().find(|&&c| c >= num_classes)) {
        return Err(Error::Validation(format!(
            "unknown class {bad} (dataset has {num_classes} classes)"
        )));
    }
    let mut by_layer: BTreeMap<usize, RoutingStats> = BTreeMap::new();
    for r in &trace.entries {
        if r.class_label >= num_classes {
            return Err(Error::Validation(format!(
                "trace row has unknown class {} (dataset has {num_classes} classes)",
                r.class_label
            )));
        }
        if class_filter.is_some_and(|f| !f.contains(&r.class_label)) {
            continue;
        }
        let k = experts_per_layer.get(r.layer).copied().unwrap_or(0).max(r.expert_id + 1);
        let stats = by_layer.entry(r.layer).or_insert_with(|| RoutingStats {
            layer: r.layer,
            counts: vec![0; k],
            per_class: BTreeMap::new(),
        });
        if stats.counts.len() <= r.expert_id {
            stats.counts.resize(r.expert_id + 1, 0);
        }
        stats.counts[r.expert_id] += 1;
        let width = stats.counts.len();
        let per = stats.per_class.entry(r.class_label).or_insert_with(|| vec![0; width]);
        if per.len() <= r.expert_id {
            per.resize(r.expert_id + 1, 0);
        }
        per[r.expert_id] += 1;
    }
    let mut out: Vec<RoutingStats> = by_layer.into_values().collect();
    for s in &mut out {
        let width = s.counts.len();
        s.per_class.values_mut().for_each(|c| c.resize(width, 0));
    }
    Ok(out)
}

/// Expert shares sorted from most to least used.
pub fn load_balance_curve(fractions: &[f64]) -> Vec<f64> {
    let mut v = fractions.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Total-variation distance between two routing distributions, in `[0, 1]`.
pub fn class_overlap(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (get(a, i) - get(b, i)).abs()).sum::<f64>()
}

/// Pairwise cosine similarity of a converted layer's expert means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub layer: usize,
    pub k: usize,
    /// Row-major `k × k`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for i in 0..self.k {
            w.write_record((0..self.k).map(|j| format!("{}", self.get(i, j))))
                .map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io("similarity csv", e))
    }
}

pub fn similarity_matrix(model: &MoeModel, layer: usize) -> Result<SimilarityMatrix> {
    let moe = model
        .layer(layer)
        .ok_or_else(|| Error::Validation(format!("layer {layer} is dense; similarity needs a converted layer")))?;
    let k = moe.num_experts();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            // means are unit length, so the dot product is the cosine
            values[i * k + j] = (dot(moe.means.row(i), moe.means.row(j)) as f64).clamp(-1.0, 1.0);
        }
    }
    Ok(SimilarityMatrix { layer, k, values })
}

/// Number of experts per layer, 0 for layers left dense.
pub fn expert_count_table(model: &MoeModel) -> Vec<usize> {
    model.experts_per_layer()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("csv output", io),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}

/// `layer,class,expert,count,fraction`; the `class` column is `all` for the
/// overall distribution.
pub fn write_routing_stats_csv<W: Write>(stats: &[RoutingStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "class", "expert", "count", "fraction"]).map_err(csv_error)?;
    for s in stats {
        let mut rows: Vec<(String, &Vec<u64>)> = vec![("all".into(), &s.counts)];
        rows.extend(s.per_class.iter().map(|(c, v)| (c.to_string(), v)));
        for (class, counts) in rows {
            for (expert, (&count, frac)) in counts.iter().zip(fractions_of(counts)).enumerate() {
                w.write_record([
                    s.layer.to_string(),
                    class.clone(),
                    expert.to_string(),
                    count.to_string(),
                    format!("{frac}"),
                ])
                .map_err(csv_error)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("routing stats csv", e))
}

/// `layer,k`
pub fn write_expert_counts_csv<W: Write>(counts: &[usize], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "k"]).map_err(csv_error)?;
    for (l, k) in counts.iter().enumerate() {
        w.write_record([l.to_string(), k.to_string()]).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("expert counts csv", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    /// Number of captured images per run.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub layers: Vec<usize>,
    pub include_class_token: bool,
    pub clustering: ClusteringConfig,
    pub extraction: ExtractionConfig,
    pub metric: RouteMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub size: usize,
    pub seed: u64,
    pub top1: f64,
    pub k_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub size: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub k_mean: Vec<f64>,
    pub k_std: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per `(size, seed)`: sample `size` images of `pool`, capture, cluster,
/// extract, assemble and evaluate on `eval` (no fine-tuning). Returns every
/// run and the mean ± σ (population) per size.
pub fn stability_experiment(
    spec: &ModelSpec,
    weights: &ModelWeights,
    pool: &Dataset,
    eval: &Dataset,
    config: &StabilityConfig,
) -> Result<(Vec<StabilityRow>, Vec<StabilitySummary>)> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &size in &config.sizes {
        if size > pool.len() {
            return Err(Error::Config(format!(
                "sample size {size} exceeds the {} available images",
                pool.len()
            )));
        }
        let mut top1s = Vec::new();
        let mut ks: Vec<Vec<f64>> = vec![Vec::new(); spec.num_layers];
        for &seed in &config.seeds {
            let mut rng = Rng::derive(seed, &format!("stability/{size}"));
            let ids = rng.sample_indices(pool.len(), size);
            let capture = capture_dataset(
                spec,
                weights,
                pool,
                &ids,
                &CaptureOptions {
                    layers: config.layers.clone(),
                    include_class_token: config.include_class_token,
                },
            )?;
            let mut experts = Vec::new();
            for lc in &capture.layers {
                let assignment = cluster_layer_activations(lc, &config.clustering)?;
                if assignment.k > 0 {
                    let cfg = ExtractionConfig {
                        seed,
                        ..config.extraction.clone()
                    };
                    experts.extend(extract_layer(lc, &assignment, &cfg)?);
                }
            }
            let model = assemble(spec, weights, &experts, config.metric)?;
            let top1 = evaluate(spec, &model.weights, eval)?.top1;
            let k_per_layer = model.experts_per_layer();
            for (l, &k) in k_per_layer.iter().enumerate() {
                ks[l].push(k as f64);
            }
            top1s.push(top1);
            rows.push(StabilityRow {
                size,
                seed,
                top1,
                k_per_layer,
            });
        }
        let (top1_mean, top1_std) = mean_std(&top1s);
        let (k_mean, k_std) = ks.iter().map(|k| mean_std(k)).unzip();
        summaries.push(StabilitySummary {
            size,
            top1_mean,
            top1_std,
            k_mean,
            k_std,
        });
    }
    Ok((rows, summaries))
}

/// `size,seed,top1,k_layer0,k_layer1,…`
pub fn write_stability_csv<W: Write>(rows: &[StabilityRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let layers = rows.first().map_or(0, |r| r.k_per_layer.len());
    let mut header = vec!["size".to_string(), "seed".into(), "top1".into()];
    header.extend((0..layers).map(|l| format!("k_layer{l}")));
    w.write_record(&header).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![r.size.to_string(), r.seed.to_string(), format!("{}", r.top1)];
        rec.extend(r.k_per_layer.iter().map(|k| k.to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("stability csv", e))
}

/// Writes up to `max_patches` image crops whose tokens went to `expert_id` at
/// `layer`, as binary PGM (one channel) or PPM (three channels) files named
/// `<layer>_<expert>_<image_id>_<token>`. Class-token routings have no patch
/// and are skipped.
pub fn export_expert_patches(
    model: &MoeModel,
    dataset: &Dataset,
    layer: usize,
    expert_id: usize,
    max_patches: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let moe = model
        .layer(layer)
        .ok_or_else(|| Error::Validation(format!("layer {layer} is dense and has no experts")))?;
    if expert_id >= moe.num_experts() {
        return Err(Error::Validation(format!(
            "layer {layer} has {} experts, no expert {expert_id}",
            moe.num_experts()
        )));
    }
    if max_patches == 0 {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ids: Vec<usize> = (0..dataset.len()).collect();
    let (_, trace) = moe_forward_traced(model, &dataset.images, &ids, &dataset.labels)?;
    let spec = &model.spec;
    let (p, g, ch, size) = (spec.patch_size, spec.grid(), spec.channels, spec.image_size);
    let mut written = Vec::new();
    for r in trace
        .entries
        .iter()
        .filter(|r| r.layer == layer && r.expert_id == expert_id && r.token_index > 0)
        .take(max_patches)
    {
        let raw = dataset.raw_image(r.image_id);
        let patch = r.token_index - 1;
        let (py, px) = (patch / g, patch % g);
        let mut pixels = Vec::with_capacity(p * p * ch);
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..ch {
                    let v = raw[c * size * size + (py * p + dy) * size + px * p + dx];
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let (magic, ext) = if ch == 1 { ("P5", "pgm") } else { ("P6", "ppm") };
        let path = out_dir.join(format!("{layer}_{expert_id}_{}_{}.{ext}", r.image_id, r.token_index));
        let mut bytes = format!("{magic}\n{p} {p}\n255\n").into_bytes();
        bytes.extend(pixels);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

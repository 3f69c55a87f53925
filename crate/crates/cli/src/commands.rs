use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use moec::analysis::{
    class_overlap, export_expert_patches, expert_count_table, load_balance_curve, routing_distribution,
    similarity_matrix, write_expert_counts_csv, write_routing_stats_csv, write_stability_csv,
};
use moec::clustering::ClusterAssignment;
use moec::extraction::{concentration_report, ExpertSpec};
use moec::finetune::{evaluate, evaluate_traced, finetune};
use moec::io::{load_capture, load_model, save_capture, save_model, RunConfig};
use moec::moe::{assemble, count_costs, MoeModel, RoutingDistribution};
use moec::pipeline::{
    build_report, capture_stage, cluster_stage, extract_stage, extraction_config, finetune_config, load_data,
    run_preset, run_stability, train_stage, Preset, Stage,
};
use moec::{Error, Result};
use serde_json::{json, Value};

use crate::Command;

const DENSE: &str = "dense.moec";
const CAPTURE: &str = "capture.moec";
const CLUSTERS: &str = "clusters.json";
const EXPERTS: &str = "experts.json";
const MOE: &str = "moe.moec";
const FINETUNED: &str = "finetuned.moec";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        offset: e.column() as u64,
        message: format!("{}: {e}", path.display()),
    })
}

fn summary(out: &Path, name: &str, value: Value) -> Result<()> {
    let path = out.join(format!("{name}_summary.json"));
    write_json(&path, &value)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn or_default(given: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(name))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LayerClusters {
    layer: usize,
    assignment: ClusterAssignment,
}

/// Fine-tuned model if present, else the converted one.
fn latest_model(out: &Path) -> PathBuf {
    let tuned = out.join(FINETUNED);
    if tuned.exists() {
        tuned
    } else {
        out.join(MOE)
    }
}

fn check_spec(cfg: &RunConfig, model: &MoeModel, path: &Path) -> Result<()> {
    if model.spec != cfg.model {
        return Err(Error::Config(format!(
            "{} was built for a different model architecture than the configuration",
            path.display()
        )));
    }
    Ok(())
}

pub fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match command {
        Command::Train => train(cfg, out),
        Command::Capture { model } => capture(cfg, out, &or_default(model, out, DENSE)),
        Command::Extract { capture } => extract(cfg, out, &or_default(capture, out, CAPTURE)),
        Command::Assemble { model, experts } => assemble_cmd(
            cfg,
            out,
            &or_default(model, out, DENSE),
            &or_default(experts, out, EXPERTS),
        ),
        Command::Eval { model } => eval(cfg, out, &model.clone().unwrap_or_else(|| latest_model(out))),
        Command::Finetune { model, teacher, epochs } => finetune_cmd(
            cfg,
            out,
            &or_default(model, out, MOE),
            &or_default(teacher, out, DENSE),
            *epochs,
        ),
        Command::Analyze { model } => analyze(cfg, out, &model.clone().unwrap_or_else(|| latest_model(out))),
        Command::Ablate { presets } => ablate(cfg, out, presets.as_deref()),
        Command::Stability => stability(cfg, out),
        Command::ExportPatches {
            model,
            layer,
            expert,
            max,
        } => export_patches(
            cfg,
            out,
            &model.clone().unwrap_or_else(|| latest_model(out)),
            *layer,
            *expert,
            *max,
        ),
        Command::Report => report(cfg, out),
    }
}

fn load_dense(cfg: &RunConfig, path: &Path) -> Result<MoeModel> {
    let model = load_model(path)?;
    check_spec(cfg, &model, path)?;
    if !model.weights.is_all_dense() {
        return Err(Error::Validation(format!("{} is not a dense model", path.display())));
    }
    Ok(model)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = load_data(cfg)?;
    eprintln!("training on {} images", train.len());
    let (weights, report) = train_stage(cfg, &train)?;
    let top1 = evaluate(&cfg.model, &weights, &test)?.top1;
    save_model(out.join(DENSE), &MoeModel::dense(cfg.model.clone(), weights))?;
    summary(
        out,
        "train",
        json!({
            "seed": cfg.seed,
            "train_images": train.len(),
            "test_images": test.len(),
            "epoch_loss": report.epoch_loss,
            "train_top1": report.train_accuracy,
            "top1": top1,
            "model": out.join(DENSE),
        }),
    )
}

fn capture(cfg: &RunConfig, out: &Path, model_path: &Path) -> Result<()> {
    let dense = load_dense(cfg, model_path)?;
    let (train, _) = load_data(cfg)?;
    let cap = capture_stage(cfg, &dense.weights, &train)?;
    save_capture(out.join(CAPTURE), &cap)?;
    summary(
        out,
        "capture",
        json!({
            "seed": cfg.seed,
            "layers": cap.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
            "tokens_per_layer": cap.tokens_per_layer(),
            "images": cfg.capture_images(),
            "include_class_token": cfg.capture.include_class_token,
        }),
    )
}

fn extract(cfg: &RunConfig, out: &Path, capture_path: &Path) -> Result<()> {
    let cap = load_capture(capture_path)?;
    let tokens = cap.tokens_per_layer();
    let mcs = cfg.clustering.min_cluster_size(tokens)?;
    eprintln!("clustering {} layers of {tokens} tokens (min cluster size {mcs})", cap.layers.len());
    let clusterings = cluster_stage(cfg, &cap)?;
    let experts = extract_stage(&cap, &clusterings, &extraction_config(cfg))?;
    let stored: Vec<LayerClusters> = clusterings
        .iter()
        .map(|(layer, a)| LayerClusters {
            layer: *layer,
            assignment: a.clone(),
        })
        .collect();
    write_json(&out.join(CLUSTERS), &stored)?;
    write_json(&out.join(EXPERTS), &experts)?;
    summary(
        out,
        "extract",
        json!({
            "seed": cfg.seed,
            "tokens": tokens,
            "min_cluster_size": mcs,
            "layers": clusterings.iter().map(|(l, a)| json!({
                "layer": l,
                "k": a.k,
                "noise": a.noise_count(),
                "cluster_sizes": a.sizes(),
            })).collect::<Vec<_>>(),
            "experts": experts.iter().map(|x| json!({
                "layer": x.layer,
                "expert_id": x.expert_id,
                "neurons": x.neuron_indices.len(),
                "members": x.member_count,
            })).collect::<Vec<_>>(),
        }),
    )
}

fn assemble_cmd(cfg: &RunConfig, out: &Path, model_path: &Path, experts_path: &Path) -> Result<()> {
    let dense = load_dense(cfg, model_path)?;
    let experts: Vec<ExpertSpec> = read_json(experts_path)?;
    let model = assemble(&cfg.model, &dense.weights, &experts, cfg.routing.route_metric())?;
    save_model(out.join(MOE), &model)?;
    let costs = count_costs(&cfg.model, &model.weights, &RoutingDistribution::new());
    summary(
        out,
        "assemble",
        json!({
            "experts_per_layer": model.experts_per_layer(),
            "costs_uniform_routing": costs,
            "macs_reduction_uniform": costs.macs_reduction(),
            "params_reduction": costs.params_reduction(),
            "model": out.join(MOE),
        }),
    )
}

fn eval(cfg: &RunConfig, out: &Path, model_path: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    check_spec(cfg, &model, model_path)?;
    let (_, test) = load_data(cfg)?;
    let ev = evaluate_traced(&model, &test)?;
    let trace = ev.trace.expect("traced evaluation");
    trace.write_csv(create(&out.join("trace.csv"))?)?;
    let costs = count_costs(&model.spec, &model.weights, &trace.distribution(&model.experts_per_layer()));
    summary(
        out,
        "eval",
        json!({
            "model": model_path,
            "top1": ev.top1,
            "loss": ev.loss,
            "images": test.len(),
            "macs": costs.moe_macs,
            "macs_reduction": costs.macs_reduction(),
            "params": costs.moe_params,
            "trace": out.join("trace.csv"),
        }),
    )
}

fn finetune_cmd(
    cfg: &RunConfig,
    out: &Path,
    model_path: &Path,
    teacher_path: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let model = load_model(model_path)?;
    check_spec(cfg, &model, model_path)?;
    let teacher = load_dense(cfg, teacher_path)?;
    let (train, test) = load_data(cfg)?;
    let mut tune = finetune_config(cfg);
    if let Some(e) = epochs {
        tune.epochs = e;
    }
    let (tuned, logs) = finetune(&model, &teacher.weights, &train, Some(&test), &tune)?;
    let mut log = create(&out.join("finetune_log.jsonl"))?;
    for entry in &logs {
        entry.write_json_line(&mut log)?;
    }
    save_model(out.join(FINETUNED), &tuned)?;
    summary(
        out,
        "finetune",
        json!({
            "epochs": tune.epochs,
            "final": logs.last(),
            "model": out.join(FINETUNED),
        }),
    )
}

fn analyze(cfg: &RunConfig, out: &Path, model_path: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    check_spec(cfg, &model, model_path)?;
    let (_, test) = load_data(cfg)?;
    let ev = evaluate_traced(&model, &test)?;
    let trace = ev.trace.expect("traced evaluation");
    let experts = model.experts_per_layer();
    let mut groups = Vec::new();
    let mut balance = Vec::new();
    if !trace.is_empty() {
        let stats = routing_distribution(&trace, &experts, test.num_classes(), None)?;
        write_routing_stats_csv(&stats, create(&out.join("routing_stats.csv"))?)?;
        for s in &stats {
            balance.push(json!({ "layer": s.layer, "sorted_fractions": load_balance_curve(&s.fractions()) }));
            for group in &cfg.analysis.class_groups {
                let mut pairs = Vec::new();
                for (i, &a) in group.iter().enumerate() {
                    for &b in &group[i + 1..] {
                        if let (Some(fa), Some(fb)) = (s.class_fractions(a), s.class_fractions(b)) {
                            pairs.push(json!({ "a": a, "b": b, "total_variation": class_overlap(&fa, &fb) }));
                        }
                    }
                }
                groups.push(json!({ "layer": s.layer, "classes": group, "pairs": pairs }));
            }
        }
    }
    for layer in model.converted_layers() {
        let sim = similarity_matrix(&model, layer)?;
        sim.write_csv(create(&out.join(format!("similarity_{layer}.csv")))?)?;
    }
    write_expert_counts_csv(&expert_count_table(&model), create(&out.join("expert_counts.csv"))?)?;
    // variance against magnitude concentration, when the extraction inputs are at hand
    let mut concentration = Vec::new();
    let (cap_path, clusters_path) = (out.join(CAPTURE), out.join(CLUSTERS));
    if cap_path.exists() && clusters_path.exists() {
        let cap = load_capture(&cap_path)?;
        let clusters: Vec<LayerClusters> = read_json(&clusters_path)?;
        for lc in clusters.iter().filter(|c| c.assignment.k > 0) {
            if let Some(layer) = cap.layer(lc.layer) {
                concentration.push(concentration_report(layer, &lc.assignment, cfg.extraction.extraction_percentage)?);
            }
        }
    }
    summary(
        out,
        "analyze",
        json!({
            "model": model_path,
            "top1": ev.top1,
            "experts_per_layer": experts,
            "load_balance": balance,
            "class_groups": groups,
            "concentration": concentration,
        }),
    )
}

fn ablate(cfg: &RunConfig, out: &Path, only: Option<&str>) -> Result<()> {
    let presets: Vec<Preset> = match only {
        Some(list) => list.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?,
        None => Preset::ALL.to_vec(),
    };
    let dense = load_dense(cfg, &out.join(DENSE))?;
    let cap = load_capture(out.join(CAPTURE))?;
    let (train, test) = load_data(cfg)?;
    let dense_top1 = evaluate(&cfg.model, &dense.weights, &test)?.top1;
    let clusters_path = out.join(CLUSTERS);
    let clusterings = if clusters_path.exists() {
        let stored: Vec<LayerClusters> = read_json(&clusters_path)?;
        stored.into_iter().map(|c| (c.layer, c.assignment)).collect()
    } else {
        cluster_stage(cfg, &cap)?
    };
    let stage = Stage {
        cfg,
        weights: &dense.weights,
        train: &train,
        test: &test,
        dense_top1,
        capture: &cap,
    };
    let mut rows = Vec::new();
    for preset in presets {
        eprintln!("ablation preset {preset}");
        let run = run_preset(&stage, &clusterings, preset)?;
        let dir = out.join("ablation").join(preset.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("report.json"), &run.report)?;
        let mut log = create(&dir.join("finetune_log.jsonl"))?;
        for entry in &run.logs {
            entry.write_json_line(&mut log)?;
        }
        rows.push(run.report);
    }
    summary(out, "ablation", json!({ "presets": rows }))
}

fn stability(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dense = load_dense(cfg, &out.join(DENSE))?;
    let (train, test) = load_data(cfg)?;
    let (rows, sums) = run_stability(cfg, &dense.weights, &train, &test)?;
    write_stability_csv(&rows, create(&out.join("stability.csv"))?)?;
    summary(out, "stability", json!({ "runs": rows, "per_size": sums }))
}

fn export_patches(cfg: &RunConfig, out: &Path, model_path: &Path, layer: usize, expert: usize, max: usize) -> Result<()> {
    let model = load_model(model_path)?;
    check_spec(cfg, &model, model_path)?;
    let (_, test) = load_data(cfg)?;
    let dir = out.join("patches");
    let files = export_expert_patches(&model, &test, layer, expert, max, &dir)?;
    summary(
        out,
        "export_patches",
        json!({ "layer": layer, "expert": expert, "files": files }),
    )
}

fn report(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dense = load_dense(cfg, &out.join(DENSE))?;
    let extracted = load_model(out.join(MOE))?;
    check_spec(cfg, &extracted, &out.join(MOE))?;
    let final_path = latest_model(out);
    let last = load_model(&final_path)?;
    let (_, test) = load_data(cfg)?;
    let dense_top1 = evaluate(&cfg.model, &dense.weights, &test)?.top1;
    let extracted_top1 = evaluate(&cfg.model, &extracted.weights, &test)?.top1;
    let epochs = if final_path.ends_with(FINETUNED) { finetune_config(cfg).epochs } else { 0 };
    let tokens = cfg.capture_tokens();
    let (report, costs) = build_report(cfg, "method", dense_top1, extracted_top1, &last, &test, tokens, epochs)?;
    write_json(&out.join("report.json"), &report)?;
    eprintln!("wrote {}", out.join("report.json").display());
    summary(out, "report", json!({ "report": report, "costs": costs }))
}

//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero if any fails. The desk-scale run is shared by the
//! criteria that need it.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use moec::clustering::{hdbscan_with_sizes, mutual_reachability_mst};
use moec::extraction::{select_neurons, ExpertSpec};
use moec::finetune::{distillation_gradients, evaluate, FinetuneConfig};
use moec::io::{model_from_bytes, model_to_bytes, synth_split, RunConfig, SynthConfig};
use moec::moe::{
    assemble, count_dense_costs, moe_forward, moe_forward_traced, moe_mlp_forward,
    routing_overhead_fraction, RouteMetric,
};
use moec::pipeline::{run_pipeline, run_preset, PipelineRun, Preset, Report, Stage};
use moec::tensor::gelu_scalar;
use moec::vit::{backward, forward, LossSpec, ModelSpec};
use moec::{ErrorCategory, Rng, Tensor};
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < budget, format!("{:.1}s of {}s", t.as_secs_f64(), budget.as_secs()))
}

fn desk_config(seed: u64) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = RunConfig::load(&path).expect("bundled desk config");
    cfg.seed = seed;
    cfg
}

/// A small model with enough width for routing to matter.
fn fixture_spec() -> ModelSpec {
    ModelSpec {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 4.0,
        num_classes: 3,
    }
}

// --- 1 -------------------------------------------------------------------

fn masked_dense_equivalence() -> Outcome {
    let start = Instant::now();
    let spec = fixture_spec();
    let (e, h) = (spec.embed_dim, spec.hidden_dim());
    let mut worst = 0.0f32;
    let mut pairs = 0;
    let mut route_mismatch = 0;
    for fixture in 0..20u64 {
        let weights = common::random_weights(&spec, 100 + fixture, 0.3);
        let k = 2 + fixture as usize % 5;
        let moe = common::random_moe(&spec, &weights, &[0, 1], k, 200 + fixture);
        let mut rng = Rng::new(300 + fixture);
        for _ in 0..60 {
            let l = rng.below(spec.num_layers);
            let layer = moe.weights.blocks[l].ffn.as_moe().unwrap();
            let dense = weights.blocks[l].ffn.as_dense().unwrap();
            let x: Vec<f32> = (0..e).map(|_| rng.normal() as f32).collect();
            let got = moe_mlp_forward(layer, l, &Tensor::from_vec(x.clone())).unwrap();

            // independent routing: cosine argmax in f64
            let xn = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let sims: Vec<f64> = (0..k)
                .map(|j| {
                    let m = layer.means.row(j);
                    let mn = m.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    x.iter().zip(m).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (xn * mn)
                })
                .collect();
            let best = (0..k).fold(0, |b, j| if sims[j] > sims[b] { j } else { b });
            let chosen = layer.route_token(l, &x).unwrap();
            if chosen != best && (sims[chosen] - sims[best]).abs() > 1e-6 {
                route_mismatch += 1;
            }

            // dense MLP over every hidden neuron, non-selected activations zeroed
            let selected: Vec<bool> = {
                let mut s = vec![false; h];
                for &c in &layer.experts[chosen] {
                    s[layer.kept_indices[c]] = true;
                }
                s
            };
            let (w1, b1, w2, b2) = (dense.w1.data(), dense.b1.data(), dense.w2.data(), dense.b2.data());
            let mut hid = vec![0.0f32; h];
            for j in 0..h {
                let mut acc = b1[j];
                for t in 0..e {
                    acc += x[t] * w1[t * h + j];
                }
                hid[j] = if selected[j] { gelu_scalar(acc) } else { 0.0 };
            }
            let mut want = b2.to_vec();
            for j in 0..h {
                for t in 0..e {
                    want[t] += hid[j] * w2[j * e + t];
                }
            }
            worst = worst.max(got.max_abs_diff(&Tensor::from_vec(want)));
            pairs += 1;
        }
    }
    let (fast, time) = within(start, Duration::from_secs(60));
    outcome(
        worst < 1e-6 && route_mismatch == 0 && pairs >= 1000 && fast,
        format!("{pairs} pairs over 20 fixtures, max abs error {worst:.2e}, routing mismatches {route_mismatch}, {time}"),
    )
}

// --- 2 -------------------------------------------------------------------

fn full_coverage_identity() -> Outcome {
    let start = Instant::now();
    let spec = fixture_spec();
    let synth = SynthConfig {
        image_size: 8,
        channels: 1,
        num_classes: 3,
        ..SynthConfig::default()
    };
    let (_, test) = synth_split(&synth, 10, 100, 9).unwrap();
    let weights = common::random_weights(&spec, 21, 0.3);
    let experts: Vec<ExpertSpec> = (0..spec.num_layers)
        .map(|layer| ExpertSpec {
            layer,
            expert_id: 0,
            neuron_indices: (0..spec.hidden_dim()).collect(),
            mu: {
                let mut m = vec![0.0; spec.embed_dim];
                m[0] = 1.0;
                m
            },
            raw_mean: vec![0.0; spec.embed_dim],
            member_count: 1,
        })
        .collect();
    let moe = assemble(&spec, &weights, &experts, RouteMetric::Cosine).unwrap();
    let dense_logits = forward(&spec, &weights, &test.images).unwrap();
    let moe_logits = moe_forward(&moe, &test.images).unwrap();
    let diff = dense_logits.max_abs_diff(&moe_logits);
    let dense_top1 = evaluate(&spec, &weights, &test).unwrap().top1;
    let moe_top1 = evaluate(&spec, &moe.weights, &test).unwrap().top1;
    let (fast, time) = within(start, Duration::from_secs(60));
    outcome(
        diff < 1e-5 && dense_top1 == moe_top1 && fast,
        format!("100 images, max logit difference {diff:.2e}, top-1 {dense_top1} vs {moe_top1}, {time}"),
    )
}

// --- 3 -------------------------------------------------------------------

fn deit_base_costs() -> Outcome {
    let start = Instant::now();
    let c = count_dense_costs(&ModelSpec::deit_base());
    let gmacs = c.dense_macs as f64 / 1e9;
    let mparams = c.dense_params as f64 / 1e6;
    let (mac_err, param_err) = ((gmacs - 17.58).abs() / 17.58, (mparams - 86.57).abs() / 86.57);
    let (fast, time) = within(start, Duration::from_secs(1));
    outcome(
        mac_err < 0.02 && param_err < 0.02 && fast,
        format!(
            "{gmacs:.3} GMACs ({:.2}% off), {mparams:.3} M params ({:.3}% off), {time}",
            mac_err * 100.0,
            param_err * 100.0
        ),
    )
}

// --- 4 -------------------------------------------------------------------

fn routing_overhead(desk: &PipelineRun) -> Outcome {
    let mut worst_deit: f64 = 0.0;
    for base in [ModelSpec::deit_tiny(), ModelSpec::deit_small(), ModelSpec::deit_base()] {
        for ratio in [3.0, 4.0, 6.0] {
            let spec = ModelSpec {
                mlp_ratio: ratio,
                ..base.clone()
            };
            for k in 1..=32 {
                worst_deit = worst_deit.max(routing_overhead_fraction(&spec, k));
            }
        }
    }
    // every converted layer of the desk model, from the cost report
    let model = &desk.conversion.finetuned;
    let s = model.spec.seq_len() as f64;
    let mut built = Vec::new();
    let mut counted_ok = true;
    for (l, lc) in desk.conversion.costs.layers.iter().enumerate() {
        if let Some(layer) = model.weights.blocks[l].ffn.as_moe() {
            let k = layer.num_experts();
            let per_token = lc.routing_macs as f64 / s;
            counted_ok &= per_token == (k * model.spec.embed_dim) as f64;
            let frac = per_token / (2 * model.spec.embed_dim * model.spec.hidden_dim()) as f64;
            built.push((l, k, frac));
        }
    }
    let built_ok = built.iter().all(|&(_, k, f)| k > 32 || f < 0.05);
    outcome(
        worst_deit < 0.05 && built_ok && counted_ok,
        format!(
            "DeiT widths, r in {{3,4,6}}, k <= 32: worst {:.2}%; desk layers (layer, k, overhead): {}",
            worst_deit * 100.0,
            built
                .iter()
                .map(|(l, k, f)| format!("({l}, {k}, {:.2}%)", f * 100.0))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

// --- 5 -------------------------------------------------------------------

#[derive(serde::Deserialize)]
struct Fixture {
    name: String,
    dim: usize,
    planted_k: usize,
    min_cluster_size: usize,
    min_samples: usize,
    points: Vec<f32>,
    reference_labels: Vec<i32>,
}

/// Adjusted Rand index; noise counts as one more label.
fn adjusted_rand(a: &[i32], b: &[i32]) -> f64 {
    let mut table: HashMap<(i32, i32), u64> = HashMap::new();
    let mut ra: HashMap<i32, u64> = HashMap::new();
    let mut rb: HashMap<i32, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let expected = sa * sb / c2(a.len() as u64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Every labeled tree on `n` vertices via Prüfer sequences; returns the
/// minimum total weight.
fn exhaustive_mst_weight(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    if n == 2 {
        return w[0][1];
    }
    let mut seq = vec![0usize; n - 2];
    let mut best = f64::INFINITY;
    loop {
        let mut degree = vec![1usize; n];
        for &v in &seq {
            degree[v] += 1;
        }
        let mut total = 0.0;
        for &v in &seq {
            let leaf = (0..n).find(|&u| degree[u] == 1).unwrap();
            total += w[leaf][v];
            degree[leaf] -= 1;
            degree[v] -= 1;
        }
        let rest: Vec<usize> = (0..n).filter(|&u| degree[u] == 1).collect();
        total += w[rest[0]][rest[1]];
        best = best.min(total);
        // next sequence in base n
        let mut i = 0;
        while i < seq.len() {
            seq[i] += 1;
            if seq[i] < n {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
        if i == seq.len() {
            return best;
        }
    }
}

fn hdbscan_reference() -> Outcome {
    let start = Instant::now();
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hdbscan");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut ok = paths.len() == 10;
    let mut notes = Vec::new();
    for path in &paths {
        let f: Fixture = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let n = f.points.len() / f.dim;
        let pts = Tensor::new(vec![n, f.dim], f.points.clone()).unwrap();
        let got = hdbscan_with_sizes(&pts, f.min_cluster_size, f.min_samples).unwrap();
        let ari = adjusted_rand(&got.labels, &f.reference_labels);
        ok &= got.k == f.planted_k && ari >= 0.95;
        notes.push(format!("{} k={}/{} ari={ari:.3}", f.name, got.k, f.planted_k));
    }

    // minimum spanning tree against enumeration of every spanning tree
    let mut rng = Rng::new(5);
    let mut mst_cases = 0;
    for n in 2..=9 {
        for _ in 0..3 {
            let d = 1 + rng.below(3);
            let points: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
            let min_samples = 1 + rng.below(n.min(4));
            let dist = |i: usize, j: usize| {
                (0..d)
                    .map(|t| (points[i * d + t] as f64 - points[j * d + t] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let core: Vec<f64> = (0..n)
                .map(|i| {
                    let mut ds: Vec<f64> = (0..n).map(|j| dist(i, j)).collect();
                    ds.sort_by(f64::total_cmp);
                    ds[min_samples - 1]
                })
                .collect();
            let w: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| dist(i, j).max(core[i]).max(core[j])).collect())
                .collect();
            let (edges, _) = mutual_reachability_mst(&points, d, min_samples);
            let got: f64 = edges.iter().map(|e| e.weight).sum();
            let want = exhaustive_mst_weight(&w);
            if edges.len() != n - 1 || (got - want).abs() > 1e-5 * want.max(1.0) {
                ok = false;
                notes.push(format!("mst n={n}: {got} vs {want}"));
            }
            mst_cases += 1;
        }
    }
    let (fast, time) = within(start, Duration::from_secs(120));
    outcome(
        ok && fast,
        format!("{}; {mst_cases} exhaustive MST cases; {time}", notes.join(", ")),
    )
}

// --- 6 -------------------------------------------------------------------

fn selection_prefix() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(6);
    let mut bad = 0;
    for case in 0..1000 {
        let len = 1 + rng.below(200);
        let stat: Vec<f32> = (0..len)
            .map(|_| match rng.below(5) {
                0 => 0.0,
                1 => (rng.below(4) as f32) * 0.5, // repeated values
                _ => rng.uniform() as f32 * 10.0,
            })
            .collect();
        if stat.iter().all(|&v| v == 0.0) {
            continue;
        }
        let total: f64 = stat.iter().map(|&v| v as f64).sum();
        let mut ps: Vec<f64> = (0..4).map(|_| 0.01 + 0.99 * rng.uniform()).collect();
        ps.push(1.0);
        ps.sort_by(f64::total_cmp);
        let t = Tensor::from_vec(stat.clone());
        let mut previous: Option<Vec<usize>> = None;
        for &p in &ps {
            let sel = select_neurons(&t, p).unwrap();
            let chosen: Vec<bool> = {
                let mut c = vec![false; len];
                sel.iter().for_each(|&i| c[i] = true);
                c
            };
            // descending prefix: nothing left out outranks anything kept
            let min_kept = sel.iter().map(|&i| stat[i]).fold(f32::INFINITY, f32::min);
            let max_left = (0..len).filter(|&i| !chosen[i]).map(|i| stat[i]).fold(f32::NEG_INFINITY, f32::max);
            let prefix = max_left <= min_kept;
            // reaches p, and is the shortest such prefix
            let sum: f64 = sel.iter().map(|&i| stat[i] as f64).sum();
            let reaches = sum >= p * total * (1.0 - 1e-12);
            let minimal = sum - (min_kept as f64) < p * total * (1.0 + 1e-12);
            let monotone = previous
                .as_ref()
                .is_none_or(|prev| prev.iter().all(|i| sel.binary_search(i).is_ok()));
            if !(prefix && reaches && minimal && monotone) {
                bad += 1;
                if bad < 3 {
                    eprintln!("case {case} p={p}: prefix {prefix} reaches {reaches} minimal {minimal} monotone {monotone}");
                }
            }
            previous = Some(sel);
        }
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    outcome(bad == 0 && fast, format!("1000 vectors x 5 values of p, {bad} violations, {time}"))
}

// --- 7 -------------------------------------------------------------------

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let spec = common::tiny_spec();
    let images = common::random_images(&spec, 4, 71);
    let labels = vec![0, 2, 1, 2];
    let (samples, tol) = (500, 1e-2);

    let dense = common::random_weights(&spec, 72, 0.3);
    let ce = LossSpec::cross_entropy();
    let g = backward(&spec, &dense, &images, &labels, &ce, None).unwrap();
    let (dense_frac, dense_fail) = common::gradient_check(&dense, &g.grads, samples, 73, tol, |w| {
        common::loss(&common::batch_logits(&spec, w, &images, None), &labels, None, &ce)
    });

    let moe = common::random_moe(&spec, &dense, &[0, 1], 3, 74);
    let teacher = common::random_weights(&spec, 75, 0.3);
    let tune = FinetuneConfig::default();
    let kd = tune.loss();
    let ids: Vec<usize> = (0..labels.len()).collect();
    let (_, trace) = moe_forward_traced(&moe, &images, &ids, &labels).unwrap();
    let routes = common::routes_from_trace(&trace);
    let teacher_logits = common::batch_logits(&spec, &teacher, &images, None);
    let (_, grads) = distillation_gradients(&moe, &teacher, &images, &labels, &tune).unwrap();
    let (moe_frac, moe_fail) = common::gradient_check(&moe.weights, &grads, samples, 76, tol, |w| {
        common::loss(
            &common::batch_logits(&spec, w, &images, Some(&routes)),
            &labels,
            Some(&teacher_logits),
            &kd,
        )
    });
    for f in dense_fail.iter().chain(&moe_fail).take(5) {
        eprintln!("  gradient mismatch {f}");
    }
    let (fast, time) = within(start, Duration::from_secs(120));
    outcome(
        dense_frac >= 0.99 && moe_frac >= 0.99 && fast,
        format!(
            "dense backward {:.1}% and frozen-route distillation {:.1}% of {samples} coordinates within {tol}, {time}",
            dense_frac * 100.0,
            moe_frac * 100.0
        ),
    )
}

// --- 8 -------------------------------------------------------------------

fn desk_experiment(desk: &PipelineRun, cfg: &RunConfig, elapsed: Duration) -> Outcome {
    let r = &desk.conversion.report;
    let max_k = r.experts_per_layer.iter().copied().max().unwrap_or(0);
    let best_tuned = desk
        .conversion
        .logs
        .iter()
        .filter_map(|l| l.eval_top1)
        .fold(f64::NEG_INFINITY, f64::max);
    let checks = [
        ("dense top-1 >= 0.95", r.dense_top1 >= 0.95),
        ("captured >= 100k tokens", desk.capture.tokens_per_layer() >= 100_000),
        (
            "min_cluster_frac 0.006, p 0.8",
            cfg.clustering.min_cluster_size_fraction == 0.006 && cfg.extraction.extraction_percentage == 0.8,
        ),
        ("a layer has k >= 2", max_k >= 2),
        ("MACs reduction > 5%", r.macs_reduction > 0.05),
        ("fine-tuned top-1 >= 95% of dense", r.top1 >= 0.95 * r.dense_top1),
        ("at most 10 fine-tune epochs", r.finetune_epochs <= 10),
        ("runtime < 30 min", elapsed < Duration::from_secs(30 * 60)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "dense {:.4}, extracted {:.4}, fine-tuned {:.4} (best epoch {best_tuned:.4}), k per layer {:?}, \
             MACs reduction {:.2}%, params reduction {:.2}%, {} tokens, {:.1}s{}",
            r.dense_top1,
            r.extracted_top1,
            r.top1,
            r.experts_per_layer,
            r.macs_reduction * 100.0,
            r.params_reduction * 100.0,
            desk.capture.tokens_per_layer(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

// --- 9 -------------------------------------------------------------------

fn ablation(desk: &PipelineRun, cfg: &RunConfig) -> Outcome {
    let start = Instant::now();
    let stage = Stage {
        cfg,
        weights: &desk.weights,
        train: &desk.train,
        test: &desk.test,
        dense_top1: desk.dense_top1,
        capture: &desk.capture,
    };
    let mut reports: BTreeMap<&str, Report> = BTreeMap::new();
    for preset in Preset::ALL {
        match run_preset(&stage, &desk.clusterings, preset) {
            Ok(run) => {
                reports.insert(preset.name(), run.report);
            }
            Err(e) => return outcome(false, format!("preset {preset} failed: {e}")),
        }
    }
    let keys = |r: &Report| -> Vec<String> {
        match serde_json::to_value(r).unwrap() {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    };
    let first = keys(&reports["random-everything"]);
    let comparable = reports.values().all(|r| keys(r) == first);
    let full = reports["routing"].top1;
    let random = reports["random-everything"].top1;
    let (fast, time) = within(start, Duration::from_secs(90 * 60));
    outcome(
        comparable && full >= random && fast,
        format!(
            "fine-tuned top-1 {}; {time}",
            Preset::ALL
                .iter()
                .map(|p| format!("{p} {:.4}", reports[p.name()].top1))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// --- 10 ------------------------------------------------------------------

fn determinism(desk: &PipelineRun) -> Outcome {
    let start = Instant::now();
    let again = match run_pipeline(&desk_config(0)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("repeat run failed: {e}")),
    };
    let (a, b) = (&desk.conversion.report, &again.conversion.report);
    let json = |r: &Report| serde_json::to_string(r).unwrap();
    let identical = json(a) == json(b) && a == b && bitwise_floats(a) == bitwise_floats(b);
    let mut top1 = vec![a.top1];
    for seed in [1, 2] {
        match run_pipeline(&desk_config(seed)) {
            Ok(r) => top1.push(r.conversion.report.top1),
            Err(e) => return outcome(false, format!("seed {seed} failed: {e}")),
        }
    }
    let mean = top1.iter().sum::<f64>() / 3.0;
    let sigma = (top1.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    outcome(
        identical,
        format!(
            "repeat with seed 0 bitwise identical: {identical}; fine-tuned top-1 over seeds 0,1,2 {top1:?}, \
             mean {mean:.4}, sigma {sigma:.4}; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn bitwise_floats(r: &Report) -> Vec<u64> {
    [
        r.dense_top1,
        r.extracted_top1,
        r.top1,
        r.acc_retention,
        r.finetuned_retention,
        r.macs_reduction,
        r.params_reduction,
        r.moe_macs,
    ]
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

// --- 11 ------------------------------------------------------------------

const PREAMBLE: usize = 16;

fn align64(n: usize) -> usize {
    n.div_ceil(64) * 64
}

/// Re-encodes a file after editing its JSON header, keeping the payloads.
fn with_header(bytes: &[u8], edit: impl FnOnce(&mut Value)) -> Vec<u8> {
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: Value = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + h]).unwrap();
    edit(&mut header);
    let payload = &bytes[align64(PREAMBLE + h)..];
    let text = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.resize(align64(out.len()), 0);
    out.extend_from_slice(payload);
    out
}

fn tensor_entry(header: &mut Value, i: usize) -> &mut serde_json::Map<String, Value> {
    header["tensors"][i].as_object_mut().unwrap()
}

fn format_robustness() -> Outcome {
    let start = Instant::now();
    let spec = common::tiny_spec();
    let dense = common::random_weights(&spec, 111, 0.3);
    let moe = common::random_moe(&spec, &dense, &[1], 3, 112);
    let mut round_trip = true;
    for model in [moec::moe::MoeModel::dense(spec.clone(), dense.clone()), moe.clone()] {
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        round_trip &= back == model && model_to_bytes(&back) == bytes;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        model.weights.visit_all(|_, t| a.extend(t.data().iter().map(|v| v.to_bits())));
        back.weights.visit_all(|_, t| b.extend(t.data().iter().map(|v| v.to_bits())));
        round_trip &= a == b;
    }

    let good = model_to_bytes(&moe);
    let h = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
    let mut cases: Vec<(String, Vec<u8>)> = Vec::new();
    for cut in [0, 3, 10, PREAMBLE + h / 2, PREAMBLE + h, good.len() / 2, good.len() - 1] {
        cases.push((format!("truncated to {cut} bytes"), good[..cut].to_vec()));
    }
    for (i, m) in [b"MOED", b"moec", b"\0\0\0\0"].iter().enumerate() {
        let mut b = good.clone();
        b[..4].copy_from_slice(*m);
        cases.push((format!("bad magic {i}"), b));
    }
    let mut b = good.clone();
    b[4..8].copy_from_slice(&99u32.to_le_bytes());
    cases.push(("unknown version".into(), b));
    let mut b = good.clone();
    b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    cases.push(("header length overflow".into(), b));
    let mut b = good.clone();
    b[PREAMBLE] = b'#';
    cases.push(("header is not JSON".into(), b));
    cases.push((
        "overlapping manifest".into(),
        with_header(&good, |hd| {
            let first = hd["tensors"][0]["offset"].clone();
            let len = hd["tensors"][0]["length"].clone();
            let t = tensor_entry(hd, 1);
            t.insert("offset".into(), first);
            t.insert("length".into(), len.clone());
            let shape = hd["tensors"][0]["shape"].clone();
            tensor_entry(hd, 1).insert("shape".into(), shape);
        }),
    ));
    cases.push((
        "partially overlapping manifest".into(),
        with_header(&good, |hd| {
            // the next tensor starts inside the first one longer than 64 bytes
            let tensors = hd["tensors"].as_array().unwrap();
            let mut spans: Vec<(u64, u64, usize)> = tensors
                .iter()
                .enumerate()
                .map(|(i, t)| (t["offset"].as_u64().unwrap(), t["length"].as_u64().unwrap(), i))
                .collect();
            spans.sort_unstable();
            let w = spans.windows(2).find(|w| w[0].1 > 64).expect("a tensor longer than 64 bytes");
            let (off, next) = (w[0].0, w[1].2);
            tensor_entry(hd, next).insert("offset".into(), Value::from(off + 64));
        }),
    ));
    cases.push((
        "offset past end of file".into(),
        with_header(&good, |hd| {
            tensor_entry(hd, 0).insert("offset".into(), Value::from(1u64 << 40));
        }),
    ));
    cases.push((
        "misaligned offset".into(),
        with_header(&good, |hd| {
            let off = hd["tensors"][1]["offset"].as_u64().unwrap();
            tensor_entry(hd, 1).insert("offset".into(), Value::from(off + 4));
        }),
    ));
    cases.push((
        "length disagrees with shape".into(),
        with_header(&good, |hd| {
            let len = hd["tensors"][0]["length"].as_u64().unwrap();
            tensor_entry(hd, 0).insert("length".into(), Value::from(len + 4));
        }),
    ));
    cases.push((
        "unsupported dtype".into(),
        with_header(&good, |hd| {
            tensor_entry(hd, 0).insert("dtype".into(), Value::from("f16"));
        }),
    ));
    cases.push((
        "missing tensor".into(),
        with_header(&good, |hd| {
            hd["tensors"].as_array_mut().unwrap().remove(0);
        }),
    ));
    let total = cases.len();
    let mut wrong = Vec::new();
    for (name, bytes) in &cases {
        if *bytes == good {
            wrong.push(format!("{name}: corruption left the file unchanged"));
            continue;
        }
        match model_from_bytes(bytes) {
            Err(e) if e.category() == ErrorCategory::Format => {}
            Err(e) => wrong.push(format!("{name}: {:?} ({e})", e.category())),
            Ok(_) => wrong.push(format!("{name}: accepted")),
        }
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    outcome(
        round_trip && total >= 20 && wrong.is_empty() && fast,
        format!(
            "round trip bitwise {round_trip}; {}/{total} corruptions rejected as format errors{}; {time}",
            total - wrong.len(),
            if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join("; ")) }
        ),
    )
}

// -------------------------------------------------------------------------

fn report(results: &mut Vec<(u32, bool)>, n: u32, name: &str, o: Outcome) {
    let mut out = std::io::stdout().lock();
    let status = if o.pass { "PASS" } else { "FAIL" };
    writeln!(out, "criterion {n:>2}: {status}  {name}: {}", o.detail).unwrap();
    out.flush().unwrap();
    results.push((n, o.pass));
}

fn main() {
    // `cargo test -- --list` and filters from the test runner
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let threads = moec::threads::init_from_env().expect("thread pool");
    println!("acceptance suite on {threads} thread(s)");

    let mut results = Vec::new();
    report(&mut results, 1, "masked dense equivalence", masked_dense_equivalence());
    report(&mut results, 2, "full-coverage identity", full_coverage_identity());
    report(&mut results, 3, "DeiT-B cost model", deit_base_costs());
    report(&mut results, 5, "HDBSCAN against reference", hdbscan_reference());
    report(&mut results, 6, "selection prefix oracle", selection_prefix());
    report(&mut results, 7, "gradient checks", gradient_checks());
    report(&mut results, 11, "format robustness", format_robustness());

    let cfg = desk_config(0);
    let start = Instant::now();
    match run_pipeline(&cfg) {
        Ok(desk) => {
            let elapsed = start.elapsed();
            report(&mut results, 8, "desk-scale experiment", desk_experiment(&desk, &cfg, elapsed));
            report(&mut results, 4, "routing overhead", routing_overhead(&desk));
            report(&mut results, 9, "ablation presets", ablation(&desk, &cfg));
            report(&mut results, 10, "determinism", determinism(&desk));
        }
        Err(e) => {
            for (n, name) in [(8, "desk-scale experiment"), (4, "routing overhead"), (9, "ablation presets"), (10, "determinism")] {
                report(&mut results, n, name, outcome(false, format!("desk run failed: {e}")));
            }
        }
    }
    results.sort();
    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

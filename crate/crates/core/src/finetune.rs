//! Distillation fine-tuning of a converted model from its dense original, and
//! accuracy evaluation.
//!
//! Routing is a hard argmax, so gradients reach only the expert each token was
//! sent to; the routing decision itself is treated as a constant.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::moe::{count_costs, moe_forward_traced, MoeModel, RoutingTrace};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::engine::{self, PassOptions};
use crate::vit::{batch_gradients, logits_for, AdamW, CosineSchedule, Ffn, LossSpec, ModelSpec, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Weight of the distillation term; hard-label cross-entropy gets the rest.
    pub kd_weight: f64,
    /// Move routing means toward the inputs they receive (EMA) after each step.
    pub update_router_means: bool,
    pub router_momentum: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1.5e-5,
            min_lr: 1e-7,
            weight_decay: 0.01,
            temperature: 2.0,
            kd_weight: 0.5,
            update_router_means: false,
            router_momentum: 0.99,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::Config(format!("kd_weight must lie in [0, 1], got {}", self.kd_weight)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.router_momentum) {
            return Err(Error::Config("router_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossSpec {
        LossSpec::distillation(self.kd_weight, self.temperature)
    }
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: Option<f64>,
    /// Expected MACs per image under the evaluation routing distribution.
    pub macs: f64,
    pub params: u64,
}

impl EpochLog {
    pub fn write_json_line(&self, mut out: impl Write) -> Result<()> {
        let line = serde_json::to_string(self).expect("log serializes");
        writeln!(out, "{line}").map_err(|e| Error::io("fine-tune log", e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub trace: Option<RoutingTrace>,
}

fn score(logits: &[f32], labels: &[usize], classes: usize) -> (f64, f64, Vec<usize>) {
    let mut correct = 0;
    let mut loss = 0.0f64;
    let mut preds = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let p = crate::vit::argmax(row);
        preds.push(p);
        correct += usize::from(p == l);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[l] as f64;
    }
    let n = labels.len() as f64;
    (correct as f64 / n, loss / n, preds)
}

/// Top-1 accuracy and mean cross-entropy of any model (dense or converted).
pub fn evaluate(spec: &ModelSpec, weights: &ModelWeights, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let logits = logits_for(spec, weights, dataset.images.data(), dataset.len())?;
    let (top1, loss, predictions) = score(&logits, &dataset.labels, spec.num_classes);
    Ok(Evaluation {
        top1,
        loss,
        predictions,
        trace: None,
    })
}

/// Like [`evaluate`], also recording every routing decision.
pub fn evaluate_traced(model: &MoeModel, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let ids: Vec<usize> = (0..dataset.len()).collect();
    let (logits, trace) = moe_forward_traced(model, &dataset.images, &ids, &dataset.labels)?;
    let (top1, loss, predictions) = score(logits.data(), &dataset.labels, model.spec.num_classes);
    Ok(Evaluation {
        top1,
        loss,
        predictions,
        trace: Some(trace),
    })
}

/// Converted top-1 over dense top-1.
pub fn retention(moe_top1: f64, dense_top1: f64) -> f64 {
    if dense_top1 > 0.0 {
        moe_top1 / dense_top1
    } else {
        0.0
    }
}

/// Gradient of the distillation loss for a batch, with the teacher's logits
/// computed on the spot.
pub fn distillation_gradients(
    model: &MoeModel,
    teacher: &ModelWeights,
    images: &Tensor,
    labels: &[usize],
    config: &FinetuneConfig,
) -> Result<(f64, ModelWeights)> {
    let loss = config.loss();
    let n = labels.len();
    let teacher_logits = if loss.kd_weight > 0.0 {
        Some(logits_for(&model.spec, teacher, images.data(), n)?)
    } else {
        None
    };
    batch_gradients(&model.spec, &model.weights, images.data(), labels, teacher_logits.as_deref(), &loss)
}

fn update_means(model: &mut MoeModel, images: &[f32], n: usize, momentum: f64) -> Result<()> {
    let spec = model.spec.clone();
    let out = engine::run(
        &spec,
        &model.weights,
        images,
        n,
        &PassOptions {
            keep_cache: true,
            ..Default::default()
        },
    )?;
    let cache = out.cache.expect("cache requested");
    let e = spec.embed_dim;
    for l in 0..spec.num_layers {
        let routed: Vec<(usize, Vec<f64>, Vec<f64>)> = cache
            .routed_inputs(l)
            .into_iter()
            .map(|(expert, x)| {
                let rows = x.len() / e;
                let mut unit = vec![0.0f64; e];
                let mut raw = vec![0.0f64; e];
                for r in x.chunks_exact(e) {
                    let len = crate::tensor::norm(r).max(1e-12);
                    for t in 0..e {
                        unit[t] += r[t] as f64 / len;
                        raw[t] += r[t] as f64 / rows as f64;
                    }
                }
                (expert, unit, raw)
            })
            .collect();
        let Ffn::Moe(layer) = &mut model.weights.blocks[l].ffn else {
            continue;
        };
        for (expert, unit, raw) in routed {
            let target_len = unit.iter().map(|v| v * v).sum::<f64>().sqrt();
            if target_len < 1e-12 {
                continue;
            }
            let mu = layer.means.row_mut(expert);
            let mut next: Vec<f64> = mu
                .iter()
                .zip(&unit)
                .map(|(&m, &u)| momentum * m as f64 + (1.0 - momentum) * u / target_len)
                .collect();
            let len = next.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len < 1e-12 {
                continue;
            }
            next.iter_mut().for_each(|v| *v /= len);
            for (m, v) in mu.iter_mut().zip(next) {
                *m = v as f32;
            }
            for (m, r) in layer.raw_means.row_mut(expert).iter_mut().zip(raw) {
                *m = (momentum * *m as f64 + (1.0 - momentum) * r) as f32;
            }
        }
    }
    Ok(())
}

/// Fine-tunes `model` against the dense `teacher`. Returns the tuned model and
/// one log entry per epoch; `eval` supplies the accuracy column when given.
pub fn finetune(
    model: &MoeModel,
    teacher: &ModelWeights,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &FinetuneConfig,
) -> Result<(MoeModel, Vec<EpochLog>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("fine-tuning set is empty".into()));
    }
    if !teacher.is_all_dense() {
        return Err(Error::Validation("the teacher must be the dense model".into()));
    }
    teacher.validate(&model.spec)?;
    let mut student = model.clone();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule {
        base_lr: config.lr,
        min_lr: config.min_lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let mut opt = AdamW::new(config.weight_decay);
    let mut rng = Rng::derive(config.seed, "finetune");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let shape = |n: usize| vec![n, train.channels(), train.image_size(), train.image_size()];
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images = Tensor::new(shape(batch.len()), train.gather(batch))?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = distillation_gradients(&student, teacher, &images, &labels, config)?;
            opt.step(&mut student.weights, &grads, schedule.lr_at(step));
            if config.update_router_means {
                update_means(&mut student, images.data(), batch.len(), config.router_momentum)?;
            }
            step += 1;
            epoch_loss += loss * batch.len() as f64;
        }
        let (eval_top1, routing) = match eval {
            Some(ds) => {
                let ev = evaluate_traced(&student, ds)?;
                let dist = ev
                    .trace
                    .as_ref()
                    .map(|t| t.distribution(&student.experts_per_layer()))
                    .unwrap_or_default();
                (Some(ev.top1), dist)
            }
            None => (None, Default::default()),
        };
        let costs = count_costs(&student.spec, &student.weights, &routing);
        logs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss / train.len() as f64,
            eval_top1,
            macs: costs.moe_macs,
            params: costs.moe_params,
        });
    }
    Ok((student, logs))
}

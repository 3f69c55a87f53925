use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::rng::Rng;

use super::{batch_gradients, LossSpec, ModelSpec, ModelWeights};

/// Cosine annealing from `base_lr` down to `min_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies only to tensors the model
/// flags as projection matrices.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelWeights, grads: &ModelWeights, lr: f64) {
        let mut gs: Vec<&[f32]> = Vec::new();
        grads.visit_trainable(|_, t, _| gs.push(t.data()));
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_trainable_mut(|_, p, decay| {
            let g = gs[i];
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                let mut wj = *w as f64;
                if decay {
                    wj -= lr * wd * wj;
                }
                *w = (wj - lr * update) as f32;
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 2e-3,
            min_lr: 1e-5,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains a freshly initialized dense model with cross-entropy.
pub fn train_base(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ModelWeights, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut weights = ModelWeights::init(spec, rng)?;
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule {
        base_lr: config.lr,
        min_lr: config.min_lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let mut opt = AdamW::new(config.weight_decay);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();
    let loss = LossSpec::cross_entropy();
    let mut step = 0;
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images = dataset.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let (l, grads) = batch_gradients(spec, &weights, &images, &labels, None, &loss)?;
            opt.step(&mut weights, &grads, schedule.lr_at(step));
            step += 1;
            epoch_loss += l * batch.len() as f64;
        }
        report.epoch_loss.push(epoch_loss / dataset.len() as f64);
    }
    report.train_accuracy = accuracy(spec, &weights, dataset)?;
    Ok((weights, report))
}

pub(crate) fn accuracy(spec: &ModelSpec, weights: &ModelWeights, dataset: &Dataset) -> Result<f64> {
    let logits = super::logits_for(spec, weights, dataset.images.data(), dataset.len())?;
    let c = spec.num_classes;
    let correct = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits[i * c..(i + 1) * c]) == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base_lr: 1.0,
            min_lr: 0.1,
            total_steps: 10,
        };
        assert_eq!(s.lr_at(0), 1.0);
        assert!((s.lr_at(10) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(5) - 0.55).abs() < 1e-12);
    }
}

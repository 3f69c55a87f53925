use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted sum of hard-label cross-entropy and temperature-scaled distillation
/// KL, averaged over the batch and multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub ce_weight: f64,
    pub kd_weight: f64,
    pub temperature: f64,
    pub scale: f64,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            ce_weight: 1.0,
            kd_weight: 0.0,
            temperature: 1.0,
            scale: 1.0,
        }
    }

    /// `(1 - kd_weight)·CE + kd_weight·T²·KL(teacher ‖ student)`.
    pub fn distillation(kd_weight: f64, temperature: f64) -> Self {
        Self {
            ce_weight: 1.0 - kd_weight,
            kd_weight,
            temperature,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.ce_weight < 0.0 || self.kd_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::distillation(0.5, 2.0)
    }
}

fn log_softmax(row: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}

/// Loss and `dL/dlogits` summed over these samples and divided by
/// `denominator` (the full batch size when a batch is split into chunks).
pub(crate) fn loss_and_grad(
    logits: &[f32],
    classes: usize,
    labels: &[usize],
    teacher: Option<&[f32]>,
    spec: &LossSpec,
    denominator: usize,
) -> Result<(f64, Vec<f32>)> {
    spec.validate()?;
    let batch = labels.len();
    if logits.len() != batch * classes {
        return Err(Error::Dimension(format!(
            "{} logits for {batch} labels × {classes} classes",
            logits.len()
        )));
    }
    if spec.kd_weight > 0.0 && teacher.map(|t| t.len()) != Some(logits.len()) {
        return Err(Error::Config(
            "distillation loss needs teacher logits of the same shape".into(),
        ));
    }
    let t = spec.temperature;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; logits.len()];
    let norm = spec.scale / denominator.max(1) as f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Validation(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let g = &mut grad[b * classes..(b + 1) * classes];
        let mut loss = 0.0;
        if spec.ce_weight > 0.0 {
            let ls = log_softmax(row, 1.0);
            loss += spec.ce_weight * -ls[label];
            for c in 0..classes {
                let onehot = if c == label { 1.0 } else { 0.0 };
                g[c] += (norm * spec.ce_weight * (ls[c].exp() - onehot)) as f32;
            }
        }
        if spec.kd_weight > 0.0 {
            let trow = &teacher.expect("checked above")[b * classes..(b + 1) * classes];
            let ls = log_softmax(row, t);
            let lt = log_softmax(trow, t);
            let kl: f64 = lt.iter().zip(&ls).map(|(a, s)| a.exp() * (a - s)).sum();
            loss += spec.kd_weight * t * t * kl;
            for c in 0..classes {
                g[c] += (norm * spec.kd_weight * t * (ls[c].exp() - lt[c].exp())) as f32;
            }
        }
        total += loss;
    }
    let loss = total * norm;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    Ok((loss, grad))
}

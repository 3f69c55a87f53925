use crate::error::{Error, Result};
use crate::moe::MoeLayer;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::ModelSpec;

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormWeights {
    fn new(e: usize) -> Self {
        Self {
            gamma: Tensor::full(&[e], 1.0),
            beta: Tensor::zeros(&[e]),
        }
    }
}

/// Pre-norm multi-head self-attention. Projection matrices are `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub norm: NormWeights,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Two-layer MLP: `e → hidden → e` with GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpWeights {
    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }
}

/// The feed-forward half of a block: either the original MLP or an extracted MoE.
#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    Dense(MlpWeights),
    Moe(MoeLayer),
}

impl Ffn {
    pub fn as_dense(&self) -> Option<&MlpWeights> {
        match self {
            Ffn::Dense(m) => Some(m),
            Ffn::Moe(_) => None,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeLayer> {
        match self {
            Ffn::Moe(m) => Some(m),
            Ffn::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: AttentionWeights,
    pub norm2: NormWeights,
    pub ffn: Ffn,
}

/// Every tensor of a ViT classifier. Blocks whose `ffn` is [`Ffn::Moe`] belong to
/// an extracted model; a freshly trained model is all-dense.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `patch_dim × e`
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub class_token: Tensor,
    /// `seq_len × e`
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: NormWeights,
    /// `e × num_classes`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelWeights {
    /// Truncation-free DeiT-style init: N(0, 0.02²) matrices and embeddings, zero
    /// biases, identity norms.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let e = spec.embed_dim;
        let h = spec.hidden_dim();
        let mut mat = |r: usize, c: usize| Tensor::randn(&[r, c], INIT_STD, rng);
        let patch_w = mat(spec.patch_dim(), e);
        let mut blocks = Vec::with_capacity(spec.num_layers);
        for _ in 0..spec.num_layers {
            let attn = AttentionWeights {
                norm: NormWeights::new(e),
                wq: mat(e, e),
                bq: Tensor::zeros(&[e]),
                wk: mat(e, e),
                bk: Tensor::zeros(&[e]),
                wv: mat(e, e),
                bv: Tensor::zeros(&[e]),
                wo: mat(e, e),
                bo: Tensor::zeros(&[e]),
            };
            let mlp = MlpWeights {
                w1: mat(e, h),
                b1: Tensor::zeros(&[h]),
                w2: mat(h, e),
                b2: Tensor::zeros(&[e]),
            };
            blocks.push(Block {
                attn,
                norm2: NormWeights::new(e),
                ffn: Ffn::Dense(mlp),
            });
        }
        let head_w = mat(e, spec.num_classes);
        Ok(Self {
            patch_w,
            patch_b: Tensor::zeros(&[e]),
            class_token: Tensor::randn(&[e], INIT_STD, rng),
            pos_embed: Tensor::randn(&[spec.seq_len(), e], INIT_STD, rng),
            blocks,
            final_norm: NormWeights::new(e),
            head_w,
            head_b: Tensor::zeros(&[spec.num_classes]),
        })
    }

    /// A copy with every trainable tensor zeroed and routing state kept; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_trainable_mut(|_, t, _| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn is_all_dense(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b.ffn, Ffn::Dense(_)))
    }

    /// Visits every trainable tensor in a fixed order: `(name, tensor, decay)`
    /// where `decay` marks projection matrices that take weight decay.
    pub fn visit_trainable<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor, bool)) {
        f("patch_w", &self.patch_w, true);
        f("patch_b", &self.patch_b, false);
        f("class_token", &self.class_token, false);
        f("pos_embed", &self.pos_embed, false);
        for (l, b) in self.blocks.iter().enumerate() {
            let a = &b.attn;
            let p = format!("blocks.{l}");
            f(&format!("{p}.attn.norm.gamma"), &a.norm.gamma, false);
            f(&format!("{p}.attn.norm.beta"), &a.norm.beta, false);
            f(&format!("{p}.attn.wq"), &a.wq, true);
            f(&format!("{p}.attn.bq"), &a.bq, false);
            f(&format!("{p}.attn.wk"), &a.wk, true);
            f(&format!("{p}.attn.bk"), &a.bk, false);
            f(&format!("{p}.attn.wv"), &a.wv, true);
            f(&format!("{p}.attn.bv"), &a.bv, false);
            f(&format!("{p}.attn.wo"), &a.wo, true);
            f(&format!("{p}.attn.bo"), &a.bo, false);
            f(&format!("{p}.norm2.gamma"), &b.norm2.gamma, false);
            f(&format!("{p}.norm2.beta"), &b.norm2.beta, false);
            match &b.ffn {
                Ffn::Dense(m) => {
                    f(&format!("{p}.mlp.w1"), &m.w1, true);
                    f(&format!("{p}.mlp.b1"), &m.b1, false);
                    f(&format!("{p}.mlp.w2"), &m.w2, true);
                    f(&format!("{p}.mlp.b2"), &m.b2, false);
                }
                Ffn::Moe(m) => {
                    f(&format!("{p}.moe.w1c"), &m.w1c, true);
                    f(&format!("{p}.moe.b1c"), &m.b1c, false);
                    f(&format!("{p}.moe.w2c"), &m.w2c, true);
                    f(&format!("{p}.moe.b2"), &m.b2, false);
                }
            }
        }
        f("final_norm.gamma", &self.final_norm.gamma, false);
        f("final_norm.beta", &self.final_norm.beta, false);
        f("head_w", &self.head_w, true);
        f("head_b", &self.head_b, false);
    }

    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, bool)) {
        f("patch_w", &mut self.patch_w, true);
        f("patch_b", &mut self.patch_b, false);
        f("class_token", &mut self.class_token, false);
        f("pos_embed", &mut self.pos_embed, false);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let a = &mut b.attn;
            let p = format!("blocks.{l}");
            f(&format!("{p}.attn.norm.gamma"), &mut a.norm.gamma, false);
            f(&format!("{p}.attn.norm.beta"), &mut a.norm.beta, false);
            f(&format!("{p}.attn.wq"), &mut a.wq, true);
            f(&format!("{p}.attn.bq"), &mut a.bq, false);
            f(&format!("{p}.attn.wk"), &mut a.wk, true);
            f(&format!("{p}.attn.bk"), &mut a.bk, false);
            f(&format!("{p}.attn.wv"), &mut a.wv, true);
            f(&format!("{p}.attn.bv"), &mut a.bv, false);
            f(&format!("{p}.attn.wo"), &mut a.wo, true);
            f(&format!("{p}.attn.bo"), &mut a.bo, false);
            f(&format!("{p}.norm2.gamma"), &mut b.norm2.gamma, false);
            f(&format!("{p}.norm2.beta"), &mut b.norm2.beta, false);
            match &mut b.ffn {
                Ffn::Dense(m) => {
                    f(&format!("{p}.mlp.w1"), &mut m.w1, true);
                    f(&format!("{p}.mlp.b1"), &mut m.b1, false);
                    f(&format!("{p}.mlp.w2"), &mut m.w2, true);
                    f(&format!("{p}.mlp.b2"), &mut m.b2, false);
                }
                Ffn::Moe(m) => {
                    f(&format!("{p}.moe.w1c"), &mut m.w1c, true);
                    f(&format!("{p}.moe.b1c"), &mut m.b1c, false);
                    f(&format!("{p}.moe.w2c"), &mut m.w2c, true);
                    f(&format!("{p}.moe.b2"), &mut m.b2, false);
                }
            }
        }
        f("final_norm.gamma", &mut self.final_norm.gamma, false);
        f("final_norm.beta", &mut self.final_norm.beta, false);
        f("head_w", &mut self.head_w, true);
        f("head_b", &mut self.head_b, false);
    }

    /// Every stored tensor: trainable ones plus routing means of MoE layers.
    pub fn visit_all<'a>(&'a self, mut f: impl FnMut(&str, &'a Tensor)) {
        self.visit_trainable(|n, t, _| f(n, t));
        for (l, b) in self.blocks.iter().enumerate() {
            if let Ffn::Moe(m) = &b.ffn {
                f(&format!("blocks.{l}.moe.means"), &m.means);
                f(&format!("blocks.{l}.moe.raw_means"), &m.raw_means);
            }
        }
    }

    pub fn visit_all_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        self.visit_trainable_mut(|n, t, _| f(n, t));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            if let Ffn::Moe(m) = &mut b.ffn {
                f(&format!("blocks.{l}.moe.means"), &mut m.means);
                f(&format!("blocks.{l}.moe.raw_means"), &mut m.raw_means);
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_trainable(|_, t, _| n += t.len());
        n
    }

    /// Checks every tensor against the spec and for finiteness.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let e = spec.embed_dim;
        let h = spec.hidden_dim();
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        if self.blocks.len() != spec.num_layers {
            return Err(Error::Dimension(format!(
                "spec has {} layers, weights have {}",
                spec.num_layers,
                self.blocks.len()
            )));
        }
        expect("patch_w", &self.patch_w, &[spec.patch_dim(), e])?;
        expect("patch_b", &self.patch_b, &[e])?;
        expect("class_token", &self.class_token, &[e])?;
        expect("pos_embed", &self.pos_embed, &[spec.seq_len(), e])?;
        for (l, b) in self.blocks.iter().enumerate() {
            let a = &b.attn;
            for (name, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                expect(&format!("blocks.{l}.attn.{name}"), t, &[e, e])?;
            }
            for t in [
                &a.bq, &a.bk, &a.bv, &a.bo, &a.norm.gamma, &a.norm.beta, &b.norm2.gamma,
                &b.norm2.beta,
            ] {
                expect(&format!("blocks.{l} vector"), t, &[e])?;
            }
            match &b.ffn {
                Ffn::Dense(m) => {
                    expect(&format!("blocks.{l}.mlp.w1"), &m.w1, &[e, h])?;
                    expect(&format!("blocks.{l}.mlp.b1"), &m.b1, &[h])?;
                    expect(&format!("blocks.{l}.mlp.w2"), &m.w2, &[h, e])?;
                    expect(&format!("blocks.{l}.mlp.b2"), &m.b2, &[e])?;
                }
                Ffn::Moe(m) => m.validate(e, h)?,
            }
        }
        expect("head_w", &self.head_w, &[e, spec.num_classes])?;
        expect("head_b", &self.head_b, &[spec.num_classes])?;
        let mut bad = None;
        self.visit_all(|n, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(n.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("tensor {name} has non-finite values")));
        }
        Ok(())
    }
}

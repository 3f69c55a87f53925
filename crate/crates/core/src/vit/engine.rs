//! Batched forward pass with optional activation caching, and the matching
//! hand-derived reverse pass.
//!
//! Rows are tokens: a batch of `B` images becomes a `B·s × e` matrix with image
//! `b`'s class token at row `b·s`.

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, gelu_scalar, gemm, layer_norm_row, softmax_in_place};

use super::weights::{AttentionWeights, Ffn, MlpWeights, ModelWeights, NormWeights};
use super::{ModelSpec, LAYER_NORM_EPS};
use crate::moe::MoeLayer;

#[derive(Default)]
pub(crate) struct PassOptions<'a> {
    pub keep_cache: bool,
    pub capture: &'a [usize],
    pub trace: bool,
}

pub(crate) struct CapturedLayer {
    pub layer: usize,
    /// MLP inputs after the second norm, `T × e`.
    pub x: Vec<f32>,
    /// Post-GELU hidden activations, `T × hidden`.
    pub y: Vec<f32>,
}

pub(crate) struct PassOutput {
    pub logits: Vec<f32>,
    pub cache: Option<Cache>,
    pub captures: Vec<CapturedLayer>,
    /// `(layer, expert per token row)` for every MoE layer when tracing.
    pub routes: Vec<(usize, Vec<u32>)>,
}

struct NormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

pub(crate) struct ExpertGroup {
    pub expert: usize,
    pub rows: Vec<usize>,
    x: Vec<f32>,
    z: Vec<f32>,
    y: Vec<f32>,
}

enum FfnCache {
    Dense { m_in: Vec<f32>, z: Vec<f32>, y: Vec<f32> },
    Moe { groups: Vec<ExpertGroup> },
}

struct LayerCache {
    ln1: NormCache,
    a_in: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    o: Vec<f32>,
    ln2: NormCache,
    ffn: FfnCache,
}

pub(crate) struct Cache {
    batch: usize,
    patches: Vec<f32>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    cls_out: Vec<f32>,
}

impl Cache {
    /// Routed MLP inputs of a converted layer, one `rows × e` block per expert
    /// that received tokens.
    pub(crate) fn routed_inputs(&self, layer: usize) -> Vec<(usize, &[f32])> {
        match &self.layers[layer].ffn {
            FfnCache::Moe { groups } => groups.iter().map(|g| (g.expert, &g.x[..])).collect(),
            FfnCache::Dense { .. } => Vec::new(),
        }
    }
}

fn patchify(spec: &ModelSpec, images: &[f32], batch: usize) -> Vec<f32> {
    let (c, p, size, g) = (spec.channels, spec.patch_size, spec.image_size, spec.grid());
    let pd = spec.patch_dim();
    let np = spec.num_patches();
    let mut out = vec![0.0; batch * np * pd];
    for b in 0..batch {
        let img = &images[b * spec.image_len()..(b + 1) * spec.image_len()];
        for py in 0..g {
            for px in 0..g {
                let row = &mut out[(b * np + py * g + px) * pd..][..pd];
                for ch in 0..c {
                    for dy in 0..p {
                        let src = ch * size * size + (py * p + dy) * size + px * p;
                        row[ch * p * p + dy * p..][..p].copy_from_slice(&img[src..src + p]);
                    }
                }
            }
        }
    }
    out
}

fn norm_rows(x: &[f32], norm: &NormWeights, e: usize, keep: bool) -> (Vec<f32>, Option<NormCache>) {
    let rows = x.len() / e;
    let mut out = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(if keep { rows } else { 0 });
    for r in 0..rows {
        let (_, rs) = layer_norm_row(
            &x[r * e..(r + 1) * e],
            norm.gamma.data(),
            norm.beta.data(),
            LAYER_NORM_EPS,
            &mut out[r * e..(r + 1) * e],
        );
        if keep {
            rstd.push(rs);
        }
    }
    let cache = keep.then(|| {
        // xhat recovered from the affine output is lossy when gamma≈0, so recompute.
        let mut xhat = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * e..(r + 1) * e];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / e as f64;
            for i in 0..e {
                xhat[r * e + i] = ((row[i] as f64 - mean) * rstd[r] as f64) as f32;
            }
        }
        NormCache { xhat, rstd }
    });
    (out, cache)
}

fn linear(x: &[f32], rows: usize, w: &[f32], b: &[f32], inp: usize, out: usize) -> Vec<f32> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(b);
    }
    gemm(rows, inp, out, x, false, w, false, &mut y, 1.0);
    y
}

fn attention(
    spec: &ModelSpec,
    batch: usize,
    q: &[f32],
    k: &[f32],
    v: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let (s, e, heads, dh) = (spec.seq_len(), spec.embed_dim, spec.num_heads, spec.head_dim());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0; batch * heads * s * s];
    let mut o = vec![0.0; batch * s * e];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * s * s..][..s * s];
            for i in 0..s {
                let qi = &q[(b * s + i) * e + h * dh..][..dh];
                let row = &mut p[i * s..(i + 1) * s];
                for j in 0..s {
                    let kj = &k[(b * s + j) * e + h * dh..][..dh];
                    row[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f32>() * scale;
                }
                softmax_in_place(row);
                let oi = &mut o[(b * s + i) * e + h * dh..][..dh];
                for j in 0..s {
                    let vj = &v[(b * s + j) * e + h * dh..][..dh];
                    let pij = row[j];
                    for d in 0..dh {
                        oi[d] += pij * vj[d];
                    }
                }
            }
        }
    }
    (o, probs)
}

fn dense_ffn(m: &MlpWeights, m_in: &[f32], rows: usize, e: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let h = m.hidden_dim();
    let z = linear(m_in, rows, m.w1.data(), m.b1.data(), e, h);
    let y: Vec<f32> = z.iter().map(|&v| gelu_scalar(v)).collect();
    let f = linear(&y, rows, m.w2.data(), m.b2.data(), h, e);
    (z, y, f)
}

/// Gathers an expert's columns of `w1c` (`e × m`), entries of `b1c` and rows of
/// `w2c` (`m × e`).
pub(crate) fn gather_expert(layer: &MoeLayer, idx: &[usize], e: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let kept = layer.kept_indices.len();
    let m = idx.len();
    let w1c = layer.w1c.data();
    let w2c = layer.w2c.data();
    let mut w1 = vec![0.0; e * m];
    for t in 0..e {
        for (c, &j) in idx.iter().enumerate() {
            w1[t * m + c] = w1c[t * kept + j];
        }
    }
    let b1 = idx.iter().map(|&j| layer.b1c.data()[j]).collect();
    let mut w2 = vec![0.0; m * e];
    for (c, &j) in idx.iter().enumerate() {
        w2[c * e..(c + 1) * e].copy_from_slice(&w2c[j * e..(j + 1) * e]);
    }
    (w1, b1, w2)
}

fn moe_ffn(
    layer: &MoeLayer,
    layer_idx: usize,
    m_in: &[f32],
    rows: usize,
    e: usize,
) -> Result<(Vec<u32>, Vec<ExpertGroup>, Vec<f32>)> {
    let mut assign = Vec::with_capacity(rows);
    for r in 0..rows {
        assign.push(layer.route_token(layer_idx, &m_in[r * e..(r + 1) * e])? as u32);
    }
    let mut f = vec![0.0; rows * e];
    let mut groups = Vec::new();
    for (expert, idx) in layer.experts.iter().enumerate() {
        let members: Vec<usize> = (0..rows).filter(|&r| assign[r] as usize == expert).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let m = idx.len();
        let mut x = vec![0.0; n * e];
        for (i, &r) in members.iter().enumerate() {
            x[i * e..(i + 1) * e].copy_from_slice(&m_in[r * e..(r + 1) * e]);
        }
        let (w1, b1, w2) = gather_expert(layer, idx, e);
        let z = linear(&x, n, &w1, &b1, e, m);
        let y: Vec<f32> = z.iter().map(|&v| gelu_scalar(v)).collect();
        let out = linear(&y, n, &w2, layer.b2.data(), m, e);
        for (i, &r) in members.iter().enumerate() {
            f[r * e..(r + 1) * e].copy_from_slice(&out[i * e..(i + 1) * e]);
        }
        groups.push(ExpertGroup {
            expert,
            rows: members,
            x,
            z,
            y,
        });
    }
    Ok((assign, groups, f))
}

pub(crate) fn run(
    spec: &ModelSpec,
    w: &ModelWeights,
    images: &[f32],
    batch: usize,
    opts: &PassOptions<'_>,
) -> Result<PassOutput> {
    if images.len() != batch * spec.image_len() {
        return Err(Error::Dimension(format!(
            "expected {batch} images of {} values, got {} values",
            spec.image_len(),
            images.len()
        )));
    }
    if w.blocks.len() != spec.num_layers {
        return Err(Error::Dimension(format!(
            "spec has {} layers, weights have {}",
            spec.num_layers,
            w.blocks.len()
        )));
    }
    let (e, s, np, pd) = (spec.embed_dim, spec.seq_len(), spec.num_patches(), spec.patch_dim());
    let rows = batch * s;
    let keep = opts.keep_cache;

    let patches = patchify(spec, images, batch);
    let emb = linear(&patches, batch * np, w.patch_w.data(), w.patch_b.data(), pd, e);
    let mut x = vec![0.0; rows * e];
    let pos = w.pos_embed.data();
    for b in 0..batch {
        let dst = &mut x[b * s * e..(b + 1) * s * e];
        for i in 0..e {
            dst[i] = w.class_token.data()[i] + pos[i];
        }
        for t in 0..np {
            for i in 0..e {
                dst[(t + 1) * e + i] = emb[(b * np + t) * e + i] + pos[(t + 1) * e + i];
            }
        }
    }

    let mut layer_caches = Vec::new();
    let mut captures = Vec::new();
    let mut routes = Vec::new();
    for (l, block) in w.blocks.iter().enumerate() {
        let AttentionWeights {
            norm,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        } = &block.attn;
        let (a_in, ln1) = norm_rows(&x, norm, e, keep);
        let q = linear(&a_in, rows, wq.data(), bq.data(), e, e);
        let k = linear(&a_in, rows, wk.data(), bk.data(), e, e);
        let v = linear(&a_in, rows, wv.data(), bv.data(), e, e);
        let (o, probs) = attention(spec, batch, &q, &k, &v);
        let attn_out = linear(&o, rows, wo.data(), bo.data(), e, e);
        for (xi, ai) in x.iter_mut().zip(&attn_out) {
            *xi += ai;
        }
        let (m_in, ln2) = norm_rows(&x, &block.norm2, e, keep);
        let want_capture = opts.capture.contains(&l);
        let (f, ffn_cache) = match &block.ffn {
            Ffn::Dense(m) => {
                let (z, y, f) = dense_ffn(m, &m_in, rows, e);
                if want_capture {
                    captures.push(CapturedLayer {
                        layer: l,
                        x: m_in.clone(),
                        y: y.clone(),
                    });
                }
                (f, FfnCache::Dense { m_in, z, y })
            }
            Ffn::Moe(moe) => {
                if want_capture {
                    return Err(Error::Validation(format!(
                        "layer {l} is already a mixture-of-experts layer; capture needs a dense MLP"
                    )));
                }
                let (assign, groups, f) = moe_ffn(moe, l, &m_in, rows, e)?;
                if opts.trace {
                    routes.push((l, assign));
                }
                (f, FfnCache::Moe { groups })
            }
        };
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
        if keep {
            layer_caches.push(LayerCache {
                ln1: ln1.expect("cache requested"),
                a_in,
                q,
                k,
                v,
                probs,
                o,
                ln2: ln2.expect("cache requested"),
                ffn: ffn_cache,
            });
        }
    }

    let mut cls = vec![0.0; batch * e];
    for b in 0..batch {
        cls[b * e..(b + 1) * e].copy_from_slice(&x[b * s * e..b * s * e + e]);
    }
    let (cls_out, final_norm) = norm_rows(&cls, &w.final_norm, e, keep);
    let logits = linear(
        &cls_out,
        batch,
        w.head_w.data(),
        w.head_b.data(),
        e,
        spec.num_classes,
    );
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("forward pass produced non-finite logits".into()));
    }
    let cache = keep.then(|| Cache {
        batch,
        patches,
        layers: layer_caches,
        final_norm: final_norm.expect("cache requested"),
        cls_out,
    });
    Ok(PassOutput {
        logits,
        cache,
        captures,
        routes,
    })
}

/// Backpropagates one norm row: accumulates into `dgamma`/`dbeta` and returns
/// the input gradient into `dx` (added).
fn norm_row_backward(
    dy: &[f32],
    xhat: &[f32],
    rstd: f32,
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
    dx: &mut [f32],
) {
    let e = dy.len();
    let mut mean_d = 0.0f64;
    let mut mean_dx = 0.0f64;
    for i in 0..e {
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
        let dxh = (dy[i] * gamma[i]) as f64;
        mean_d += dxh;
        mean_dx += dxh * xhat[i] as f64;
    }
    mean_d /= e as f64;
    mean_dx /= e as f64;
    for i in 0..e {
        let dxh = (dy[i] * gamma[i]) as f64;
        dx[i] += (rstd as f64 * (dxh - mean_d - xhat[i] as f64 * mean_dx)) as f32;
    }
}

fn norm_backward(dy: &[f32], cache: &NormCache, norm: &NormWeights, grad: &mut NormWeights, dx: &mut [f32], e: usize) {
    let rows = dy.len() / e;
    for r in 0..rows {
        let span = r * e..(r + 1) * e;
        norm_row_backward(
            &dy[span.clone()],
            &cache.xhat[span.clone()],
            cache.rstd[r],
            norm.gamma.data(),
            grad.gamma.data_mut(),
            grad.beta.data_mut(),
            &mut dx[span],
        );
    }
}

fn add_row_sums(dst: &mut [f32], src: &[f32]) {
    let n = dst.len();
    for chunk in src.chunks_exact(n) {
        for (d, s) in dst.iter_mut().zip(chunk) {
            *d += s;
        }
    }
}

/// Gradients of every trainable tensor given `dL/dlogits` for the cached batch.
pub(crate) fn backward(spec: &ModelSpec, w: &ModelWeights, cache: &Cache, dlogits: &[f32]) -> ModelWeights {
    let (e, s, np, pd, c) = (
        spec.embed_dim,
        spec.seq_len(),
        spec.num_patches(),
        spec.patch_dim(),
        spec.num_classes,
    );
    let batch = cache.batch;
    let rows = batch * s;
    let mut g = w.zeros_like();

    gemm(e, batch, c, &cache.cls_out, true, dlogits, false, g.head_w.data_mut(), 1.0);
    add_row_sums(g.head_b.data_mut(), dlogits);
    let mut dcls_out = vec![0.0; batch * e];
    gemm(batch, c, e, dlogits, false, w.head_w.data(), true, &mut dcls_out, 0.0);
    let mut dcls = vec![0.0; batch * e];
    norm_backward(&dcls_out, &cache.final_norm, &w.final_norm, &mut g.final_norm, &mut dcls, e);
    let mut dx = vec![0.0; rows * e];
    for b in 0..batch {
        dx[b * s * e..b * s * e + e].copy_from_slice(&dcls[b * e..(b + 1) * e]);
    }

    for l in (0..spec.num_layers).rev() {
        let lc = &cache.layers[l];
        let block = &w.blocks[l];
        let gb = &mut g.blocks[l];

        // feed-forward: x_out = h + f(norm2(h))
        let mut dm_in = vec![0.0; rows * e];
        match (&block.ffn, &mut gb.ffn, &lc.ffn) {
            (Ffn::Dense(m), Ffn::Dense(gm), FfnCache::Dense { m_in, z, y }) => {
                let hd = m.hidden_dim();
                gemm(hd, rows, e, y, true, &dx, false, gm.w2.data_mut(), 1.0);
                add_row_sums(gm.b2.data_mut(), &dx);
                let mut dz = vec![0.0; rows * hd];
                gemm(rows, e, hd, &dx, false, m.w2.data(), true, &mut dz, 0.0);
                for (d, &zv) in dz.iter_mut().zip(z) {
                    *d *= gelu_grad_scalar(zv);
                }
                gemm(e, rows, hd, m_in, true, &dz, false, gm.w1.data_mut(), 1.0);
                add_row_sums(gm.b1.data_mut(), &dz);
                gemm(rows, hd, e, &dz, false, m.w1.data(), true, &mut dm_in, 0.0);
            }
            (Ffn::Moe(m), Ffn::Moe(gm), FfnCache::Moe { groups }) => {
                add_row_sums(gm.b2.data_mut(), &dx);
                let kept = m.kept_indices.len();
                for grp in groups {
                    let idx = &m.experts[grp.expert];
                    let (n, mm) = (grp.rows.len(), idx.len());
                    let (w1, _, w2) = gather_expert(m, idx, e);
                    let mut df = vec![0.0; n * e];
                    for (i, &r) in grp.rows.iter().enumerate() {
                        df[i * e..(i + 1) * e].copy_from_slice(&dx[r * e..(r + 1) * e]);
                    }
                    let mut dw2 = vec![0.0; mm * e];
                    gemm(mm, n, e, &grp.y, true, &df, false, &mut dw2, 0.0);
                    let mut dz = vec![0.0; n * mm];
                    gemm(n, e, mm, &df, false, &w2, true, &mut dz, 0.0);
                    for (d, &zv) in dz.iter_mut().zip(&grp.z) {
                        *d *= gelu_grad_scalar(zv);
                    }
                    let mut dw1 = vec![0.0; e * mm];
                    gemm(e, n, mm, &grp.x, true, &dz, false, &mut dw1, 0.0);
                    let mut dxg = vec![0.0; n * e];
                    gemm(n, mm, e, &dz, false, &w1, true, &mut dxg, 0.0);
                    let gw1 = gm.w1c.data_mut();
                    for t in 0..e {
                        for (cc, &j) in idx.iter().enumerate() {
                            gw1[t * kept + j] += dw1[t * mm + cc];
                        }
                    }
                    let gw2 = gm.w2c.data_mut();
                    for (cc, &j) in idx.iter().enumerate() {
                        for t in 0..e {
                            gw2[j * e + t] += dw2[cc * e + t];
                        }
                    }
                    let gb1 = gm.b1c.data_mut();
                    for i in 0..n {
                        for (cc, &j) in idx.iter().enumerate() {
                            gb1[j] += dz[i * mm + cc];
                        }
                    }
                    for (i, &r) in grp.rows.iter().enumerate() {
                        dm_in[r * e..(r + 1) * e].copy_from_slice(&dxg[i * e..(i + 1) * e]);
                    }
                }
            }
            _ => unreachable!("cache and weights disagree on layer {l} kind"),
        }
        // dh = dx + norm2'(dm_in)
        norm_backward(&dm_in, &lc.ln2, &block.norm2, &mut gb.norm2, &mut dx, e);

        // attention: h = x + wo(attn(norm1(x)))
        let a = &block.attn;
        let ga = &mut gb.attn;
        gemm(e, rows, e, &lc.o, true, &dx, false, ga.wo.data_mut(), 1.0);
        add_row_sums(ga.bo.data_mut(), &dx);
        let mut d_o = vec![0.0; rows * e];
        gemm(rows, e, e, &dx, false, a.wo.data(), true, &mut d_o, 0.0);
        let (dq, dk, dv) = attention_backward(spec, batch, lc, &d_o);
        let mut da_in = vec![0.0; rows * e];
        for (wmat, gw, gbias, d) in [
            (&a.wq, &mut ga.wq, &mut ga.bq, &dq),
            (&a.wk, &mut ga.wk, &mut ga.bk, &dk),
            (&a.wv, &mut ga.wv, &mut ga.bv, &dv),
        ] {
            gemm(e, rows, e, &lc.a_in, true, d, false, gw.data_mut(), 1.0);
            add_row_sums(gbias.data_mut(), d);
            gemm(rows, e, e, d, false, wmat.data(), true, &mut da_in, 1.0);
        }
        norm_backward(&da_in, &lc.ln1, &a.norm, &mut ga.norm, &mut dx, e);
    }

    let gpos = g.pos_embed.data_mut();
    let mut demb = vec![0.0; batch * np * e];
    for b in 0..batch {
        let src = &dx[b * s * e..(b + 1) * s * e];
        for (gp, d) in gpos.iter_mut().zip(src) {
            *gp += d;
        }
        for (gc, d) in g.class_token.data_mut().iter_mut().zip(&src[..e]) {
            *gc += d;
        }
        demb[b * np * e..(b + 1) * np * e].copy_from_slice(&src[e..]);
    }
    add_row_sums(g.patch_b.data_mut(), &demb);
    gemm(pd, batch * np, e, &cache.patches, true, &demb, false, g.patch_w.data_mut(), 1.0);
    g
}

fn attention_backward(spec: &ModelSpec, batch: usize, lc: &LayerCache, d_o: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (s, e, heads, dh) = (spec.seq_len(), spec.embed_dim, spec.num_heads, spec.head_dim());
    let scale = 1.0 / (dh as f32).sqrt();
    let rows = batch * s;
    let (mut dq, mut dk, mut dv) = (vec![0.0; rows * e], vec![0.0; rows * e], vec![0.0; rows * e]);
    let mut dp = vec![0.0f32; s];
    for b in 0..batch {
        for h in 0..heads {
            let p = &lc.probs[(b * heads + h) * s * s..][..s * s];
            for i in 0..s {
                let doi = &d_o[(b * s + i) * e + h * dh..][..dh];
                let prow = &p[i * s..(i + 1) * s];
                // dP = dO·Vᵀ, dV += Pᵀ·dO
                for j in 0..s {
                    let vj = &lc.v[(b * s + j) * e + h * dh..][..dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let dvj = &mut dv[(b * s + j) * e + h * dh..][..dh];
                    for d in 0..dh {
                        dvj[d] += prow[j] * doi[d];
                    }
                }
                let inner: f32 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                let qi = &lc.q[(b * s + i) * e + h * dh..][..dh];
                for j in 0..s {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k[(b * s + j) * e + h * dh..][..dh];
                    let dqi = &mut dq[(b * s + i) * e + h * dh..][..dh];
                    for d in 0..dh {
                        dqi[d] += ds * kj[d];
                    }
                    let dkj = &mut dk[(b * s + j) * e + h * dh..][..dh];
                    for d in 0..dh {
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

//! Binary container for models and activation captures.
//!
//! Layout:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `MOEC` |
//! | 4 | format version, little-endian `u32` |
//! | 8 | header length `H`, little-endian `u64` |
//! | H | UTF-8 JSON header |
//! | … | zero padding up to the next multiple of 64 |
//! | … | tensor payloads, little-endian, each starting on a multiple of 64 |
//!
//! Manifest offsets are relative to the start of the payload section. Unknown
//! header keys are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::ExpertSpec;
use crate::moe::{MoeLayer, MoeModel, RouteMetric};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{Capture, Ffn, LayerCapture, ModelSpec, ModelWeights};

pub const MAGIC: &[u8; 4] = b"MOEC";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// `f32` for numeric tensors, `u32` for index columns.
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MoeMeta {
    layer: usize,
    kept_indices: Vec<usize>,
    experts: Vec<Vec<usize>>,
    metric: RouteMetric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaptureMeta {
    layers: Vec<usize>,
    tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    spec: Option<ModelSpec>,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    moe_layers: Vec<MoeMeta>,
    #[serde(default)]
    experts: Vec<ExpertSpec>,
    #[serde(default)]
    capture: Option<CaptureMeta>,
}

enum Payload<'a> {
    F32(&'a [f32]),
    U32(&'a [u32]),
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn encode(mut header: Header, payloads: &[(String, Vec<usize>, Payload<'_>)]) -> Vec<u8> {
    let mut offset = 0usize;
    header.tensors.clear();
    for (name, shape, p) in payloads {
        let (dtype, len) = match p {
            Payload::F32(d) => ("f32", d.len() * 4),
            Payload::U32(d) => ("u32", d.len() * 4),
        };
        header.tensors.push(ManifestEntry {
            name: name.clone(),
            dtype: dtype.into(),
            shape: shape.clone(),
            offset: offset as u64,
            length: len as u64,
        });
        offset = align(offset + len);
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let data_start = align(PREAMBLE + json.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for ((_, _, p), entry) in payloads.iter().zip(&header.tensors) {
        out.resize(data_start + entry.offset as usize, 0);
        match p {
            Payload::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::U32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Decoded<'a> {
    header: Header,
    bytes: &'a [u8],
    data_start: usize,
}

fn decode(bytes: &[u8]) -> Result<Decoded<'_>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "not a MOEC file (bad magic)"));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(bytes.len() as u64, "file ends inside the preamble"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64).checked_add(header_len).filter(|&end| end <= bytes.len() as u64);
    let Some(header_end) = header_end else {
        return Err(Error::format(
            8,
            format!(
                "header length {header_len} overflows the file ({} bytes)",
                bytes.len()
            ),
        ));
    };
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end as usize])
        .map_err(|e| Error::format(PREAMBLE as u64, format!("malformed header: {e}")))?;
    let data_start = align(header_end as usize);
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let elems: usize = t.shape.iter().product();
        if t.dtype != "f32" && t.dtype != "u32" {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("tensor {}: unsupported dtype {:?}", t.name, t.dtype),
            ));
        }
        if t.length != elems as u64 * 4 {
            return Err(Error::format(
                PREAMBLE as u64,
                format!(
                    "tensor {}: {} bytes declared for shape {:?}",
                    t.name, t.length, t.shape
                ),
            ));
        }
        let start = data_start as u64 + t.offset;
        if t.offset % ALIGN as u64 != 0 {
            return Err(Error::format(start, format!("tensor {} is not 64-byte aligned", t.name)));
        }
        let end = start.saturating_add(t.length);
        if end > bytes.len() as u64 {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "truncated payload: tensor {} needs bytes {start}..{end} but the file has {}",
                    t.name,
                    bytes.len()
                ),
            ));
        }
        spans.push((start, end, &t.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::format(
                w[1].0,
                format!("tensors {} and {} overlap", w[0].2, w[1].2),
            ));
        }
    }
    Ok(Decoded {
        header,
        bytes,
        data_start,
    })
}

impl Decoded<'_> {
    fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(PREAMBLE as u64, format!("manifest has no tensor {name}")))
    }

    fn raw(&self, e: &ManifestEntry) -> &[u8] {
        let start = self.data_start + e.offset as usize;
        &self.bytes[start..start + e.length as usize]
    }

    fn f32(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        if e.dtype != "f32" {
            return Err(Error::format(PREAMBLE as u64, format!("tensor {name} must be f32")));
        }
        let data = self
            .raw(e)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(e.shape.clone(), data)
    }

    fn u32(&self, name: &str) -> Result<Vec<u32>> {
        let e = self.entry(name)?;
        if e.dtype != "u32" {
            return Err(Error::format(PREAMBLE as u64, format!("tensor {name} must be u32")));
        }
        Ok(self
            .raw(e)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Serializes a dense or converted model.
pub fn model_to_bytes(model: &MoeModel) -> Vec<u8> {
    let mut payloads = Vec::new();
    model.weights.visit_all(|name, t| {
        payloads.push((name.to_string(), t.shape().to_vec(), Payload::F32(t.data())));
    });
    let moe_layers = model
        .weights
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(l, b)| {
            b.ffn.as_moe().map(|m| MoeMeta {
                layer: l,
                kept_indices: m.kept_indices.clone(),
                experts: m.experts.clone(),
                metric: m.metric,
            })
        })
        .collect();
    let header = Header {
        kind: "model".into(),
        spec: Some(model.spec.clone()),
        tensors: Vec::new(),
        moe_layers,
        experts: model.experts.clone(),
        capture: None,
    };
    encode(header, &payloads)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MoeModel> {
    let d = decode(bytes)?;
    if d.header.kind != "model" {
        return Err(Error::format(PREAMBLE as u64, format!("expected a model file, found {:?}", d.header.kind)));
    }
    let spec = d
        .header
        .spec
        .clone()
        .ok_or_else(|| Error::format(PREAMBLE as u64, "model header lacks a spec"))?;
    spec.validate()
        .map_err(|e| Error::format(PREAMBLE as u64, format!("invalid spec: {e}")))?;
    let mut weights = ModelWeights::init(&spec, &mut Rng::new(0))?;
    for meta in &d.header.moe_layers {
        if meta.layer >= spec.num_layers {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("converted layer {} out of range", meta.layer),
            ));
        }
        weights.blocks[meta.layer].ffn = Ffn::Moe(MoeLayer {
            kept_indices: meta.kept_indices.clone(),
            w1c: Tensor::zeros(&[0]),
            b1c: Tensor::zeros(&[0]),
            w2c: Tensor::zeros(&[0]),
            b2: Tensor::zeros(&[0]),
            experts: meta.experts.clone(),
            means: Tensor::zeros(&[0]),
            raw_means: Tensor::zeros(&[0]),
            metric: meta.metric,
        });
    }
    let mut failure = None;
    weights.visit_all_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        match d.f32(name) {
            Ok(loaded) => *t = loaded,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    weights
        .validate(&spec)
        .map_err(|e| Error::format(PREAMBLE as u64, format!("tensors disagree with the spec: {e}")))?;
    Ok(MoeModel {
        spec,
        weights,
        experts: d.header.experts.clone(),
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &MoeModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MoeModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

pub fn capture_to_bytes(capture: &Capture) -> Vec<u8> {
    let mut payloads = Vec::new();
    for c in &capture.layers {
        payloads.push((format!("layer{}.x", c.layer), c.x.shape().to_vec(), Payload::F32(c.x.data())));
        payloads.push((format!("layer{}.y", c.layer), c.y.shape().to_vec(), Payload::F32(c.y.data())));
    }
    // provenance columns are shared by all layers
    if let Some(first) = capture.layers.first() {
        let n = first.len();
        payloads.push(("image_id".into(), vec![n], Payload::U32(&first.image_id)));
        payloads.push(("token_index".into(), vec![n], Payload::U32(&first.token_index)));
        payloads.push(("class_label".into(), vec![n], Payload::U32(&first.class_label)));
    }
    let header = Header {
        kind: "capture".into(),
        spec: None,
        tensors: Vec::new(),
        moe_layers: Vec::new(),
        experts: Vec::new(),
        capture: Some(CaptureMeta {
            layers: capture.layers.iter().map(|c| c.layer).collect(),
            tokens: capture.tokens_per_layer(),
        }),
    };
    encode(header, &payloads)
}

pub fn capture_from_bytes(bytes: &[u8]) -> Result<Capture> {
    let d = decode(bytes)?;
    let meta = match (&d.header.kind[..], &d.header.capture) {
        ("capture", Some(m)) => m.clone(),
        _ => {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("expected a capture file, found {:?}", d.header.kind),
            ))
        }
    };
    let mut layers = Vec::with_capacity(meta.layers.len());
    let (image_id, token_index, class_label) = if meta.layers.is_empty() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        (d.u32("image_id")?, d.u32("token_index")?, d.u32("class_label")?)
    };
    for &l in &meta.layers {
        let x = d.f32(&format!("layer{l}.x"))?;
        let y = d.f32(&format!("layer{l}.y"))?;
        let rows_ok = x.shape().len() == 2
            && y.shape().len() == 2
            && x.shape()[0] == meta.tokens
            && y.shape()[0] == meta.tokens
            && image_id.len() == meta.tokens
            && token_index.len() == meta.tokens
            && class_label.len() == meta.tokens;
        if !rows_ok {
            return Err(Error::format(
                PREAMBLE as u64,
                format!("layer {l}: capture columns disagree with {} tokens", meta.tokens),
            ));
        }
        layers.push(LayerCapture {
            layer: l,
            x,
            y,
            image_id: image_id.clone(),
            token_index: token_index.clone(),
            class_label: class_label.clone(),
        });
    }
    Ok(Capture { layers })
}

pub fn save_capture(path: impl AsRef<Path>, capture: &Capture) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, capture_to_bytes(capture)).map_err(|e| Error::io(path, e))
}

pub fn load_capture(path: impl AsRef<Path>) -> Result<Capture> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    capture_from_bytes(&bytes)
}

/// Reads only the manifest of a file; handy for inspecting offsets.
pub fn read_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    Ok(decode(bytes)?.header.tensors)
}

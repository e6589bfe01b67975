//! Single-file model archive: magic, manifest length, JSON manifest, then
//! little-endian `f32` blobs.
//!
//! ```text
//! "FDDAARC\0" | u32 manifest_len | manifest (JSON) | f32 LE data ...
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bns::{BnStat, ClassCentroids};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::nn::{BnRunning, Layer, LayerSpec, Network};
use crate::quant::{QuantParams, QuantPolicy, QuantState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FDDAARC\0";
pub const FORMAT_VERSION: u32 = 1;

/// A network plus whatever was computed about it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    /// Free-form role, e.g. `classifier`, `quantized`, `generator`.
    pub kind: String,
    pub model: Network<f32>,
    pub centroids: Option<ClassCentroids<f32>>,
    pub quant: Option<QuantState<f32>>,
    /// Named tensors outside the network, e.g. a generator's label embedding.
    pub extras: BTreeMap<String, Tensor<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelArchive {
    pub fn new(kind: impl Into<String>, model: Network<f32>) -> Self {
        Self {
            kind: kind.into(),
            model,
            centroids: None,
            quant: None,
            extras: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// In floats from the start of the data section.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CentroidManifest {
    k: usize,
    num_layers: usize,
    num_classes: usize,
    classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct QuantManifest {
    policy: QuantPolicy,
    /// Bits per activation point; bounds live in the `quant.activations` tensor.
    bits: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    bn_layer_count: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    centroids: Option<CentroidManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantManifest>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl Writer {
    fn push(&mut self, name: String, t: &Tensor<f32>) {
        self.entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset: self.data.len(), len: t.numel() });
        self.data.extend_from_slice(t.data());
    }
}

pub fn to_bytes(a: &ModelArchive) -> Result<Vec<u8>> {
    let mut w = Writer { entries: Vec::new(), data: Vec::new() };
    for (i, layer) in a.model.layers.iter().enumerate() {
        for (j, p) in layer.params.iter().enumerate() {
            w.push(format!("layers.{i}.param.{j}"), p);
        }
        if let Some(r) = &layer.running {
            w.push(format!("layers.{i}.running_mean"), &r.mean);
            w.push(format!("layers.{i}.running_var"), &r.var);
        }
    }
    let centroids = a.centroids.as_ref().map(|c| {
        for (class, layers) in &c.centroids {
            for (l, s) in layers.iter().enumerate() {
                w.push(format!("centroids.{class}.{l}.mean"), &s.mean);
                w.push(format!("centroids.{class}.{l}.var"), &s.var);
            }
        }
        CentroidManifest {
            k: c.k,
            num_layers: c.num_layers,
            num_classes: c.num_classes,
            classes: c.centroids.keys().copied().collect(),
        }
    });
    let quant = match &a.quant {
        Some(q) => {
            let flat: Vec<f32> = q.activations.iter().flat_map(|p| [p.lower, p.upper, p.scale]).collect();
            w.push("quant.activations".into(), &Tensor::new(vec![q.activations.len(), 3], flat)?);
            Some(QuantManifest { policy: q.policy, bits: q.activations.iter().map(|p| p.bits).collect() })
        }
        None => None,
    };
    for (name, t) in &a.extras {
        w.push(format!("extras.{name}"), t);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: a.kind.clone(),
        input_shape: a.model.input_shape.clone(),
        layers: a.model.layers.iter().map(|l| l.spec.clone()).collect(),
        bn_layer_count: a.model.bn_layer_count(),
        tensors: w.entries,
        centroids,
        quant,
        metadata: a.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Invalid(format!("manifest: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Invalid("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in &w.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptArchive(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelArchive> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing archive header"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| corrupt("manifest is truncated"))?;
    let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("manifest has no format_version"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version.min(u64::from(u32::MAX)) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let body = &bytes[12 + len..];
    if !body.len().is_multiple_of(4) {
        return Err(corrupt("data section is not a whole number of floats"));
    }
    let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for e in &m.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(corrupt(format!("tensor {} has shape {:?} but length {}", e.name, e.shape, e.len)));
        }
        let slice = e
            .offset
            .checked_add(e.len)
            .and_then(|end| data.get(e.offset..end))
            .ok_or_else(|| corrupt(format!("tensor {} lies outside the data section", e.name)))?;
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?);
    }
    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| corrupt(format!("tensor {name} is missing")));

    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, spec) in m.layers.iter().enumerate() {
        let n_params = match spec {
            LayerSpec::Dense { .. } | LayerSpec::BatchNorm { .. } => 2,
            LayerSpec::Conv2d { .. } => 1,
            _ => 0,
        };
        let params = (0..n_params).map(|j| take(format!("layers.{i}.param.{j}"))).collect::<Result<Vec<_>>>()?;
        let running = match spec {
            LayerSpec::BatchNorm { .. } => Some(BnRunning {
                mean: take(format!("layers.{i}.running_mean"))?,
                var: take(format!("layers.{i}.running_var"))?,
            }),
            _ => None,
        };
        layers.push(Layer { spec: spec.clone(), params, running });
    }
    let model = Network { input_shape: m.input_shape, layers };
    model.validate().map_err(|e| corrupt(format!("network: {e}")))?;
    if model.bn_layer_count() != m.bn_layer_count {
        return Err(corrupt("bn_layer_count disagrees with the layer list"));
    }

    let centroids = match m.centroids {
        Some(c) => {
            let mut out = ClassCentroids::empty(c.k, c.num_layers, c.num_classes);
            let depth = (c.num_layers + 1).saturating_sub(c.k);
            for class in c.classes {
                let layers = (0..depth)
                    .map(|l| {
                        Ok(BnStat {
                            mean: take(format!("centroids.{class}.{l}.mean"))?,
                            var: take(format!("centroids.{class}.{l}.var"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.centroids.insert(class, layers);
            }
            Some(out)
        }
        None => None,
    };
    let quant = match m.quant {
        Some(q) => {
            let t = take("quant.activations".into())?;
            if t.shape() != [q.bits.len(), 3] {
                return Err(corrupt("quantization bounds disagree with their bit-widths"));
            }
            let activations = q
                .bits
                .iter()
                .zip(t.data().chunks_exact(3))
                .map(|(&bits, v)| QuantParams { bits, lower: v[0], upper: v[1], scale: v[2] })
                .collect();
            Some(QuantState { policy: q.policy, activations })
        }
        None => None,
    };
    let extras =
        tensors.into_iter().filter_map(|(k, v)| k.strip_prefix("extras.").map(|n| (n.to_string(), v))).collect();
    Ok(ModelArchive { kind: m.kind, model, centroids, quant, extras, metadata: m.metadata })
}

pub fn save_model(a: &ModelArchive, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(a)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    from_bytes(&std::fs::read(path)?)
}

const GENERATOR_CONFIG_KEY: &str = "generator_config";

pub fn generator_to_archive(g: &GeneratorNet<f32>) -> Result<ModelArchive> {
    let mut a = ModelArchive::new("generator", g.body.clone());
    a.extras.insert("embedding".into(), g.embedding.clone());
    let cfg = serde_json::to_string(&g.config).map_err(|e| Error::Invalid(e.to_string()))?;
    a.metadata.insert(GENERATOR_CONFIG_KEY.into(), cfg);
    Ok(a)
}

pub fn generator_from_archive(a: &ModelArchive) -> Result<GeneratorNet<f32>> {
    let cfg = a.metadata.get(GENERATOR_CONFIG_KEY).ok_or_else(|| corrupt("not a generator archive"))?;
    let config: GeneratorConfig = serde_json::from_str(cfg).map_err(|e| corrupt(format!("generator config: {e}")))?;
    let embedding = a.extras.get("embedding").cloned().ok_or_else(|| corrupt("generator embedding is missing"))?;
    if embedding.shape() != [config.num_classes, config.latent_dim] {
        return Err(corrupt("generator embedding shape disagrees with its config"));
    }
    Ok(GeneratorNet { config, embedding, body: a.model.clone() })
}

//! Checkpoint files: one JSON header line, then the raw little-endian
//! tensor payloads in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use draft_lab_core::denoiser::{AdapterSet, DenoiserConfig, DenoiserParams};
use draft_lab_core::rewards::{ConvNet, ConvNetConfig};
use draft_lab_core::{ParamStore, Precision, Real, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const FORMAT: &str = "draft-lab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dtype: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A named-tensor file with free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    dtype: Precision,
    tensors: BTreeMap<String, (Vec<usize>, Payload)>,
}

impl Checkpoint {
    pub fn new<R: Real>(meta: Value, tensors: &BTreeMap<String, Tensor<R>>) -> Self {
        let tensors = tensors
            .iter()
            .map(|(k, t)| {
                let p = match R::PRECISION {
                    Precision::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
                    Precision::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
                };
                (k.clone(), (t.shape().to_vec(), p))
            })
            .collect();
        Checkpoint {
            meta,
            dtype: R::PRECISION,
            tensors,
        }
    }

    pub fn dtype(&self) -> Precision {
        self.dtype
    }

    /// Tensors converted to `R`.
    pub fn tensors<R: Real>(&self) -> Result<BTreeMap<String, Tensor<R>>> {
        let mut out = BTreeMap::new();
        for (k, (shape, p)) in &self.tensors {
            let data: Vec<R> = match p {
                Payload::F32(v) => v.iter().map(|&x| R::lit(x as f64)).collect(),
                Payload::F64(v) => v.iter().map(|&x| R::lit(x)).collect(),
            };
            out.insert(k.clone(), Tensor::from_vec(shape.clone(), data).map_err(|e| anyhow!("{k}: {e}"))?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.into(),
            dtype: self.dtype.name().into(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, (s, _))| TensorEntry {
                    name: k.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, p) in self.tensors.values() {
            match p {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| anyhow!("checkpoint has no header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).context("bad checkpoint header")?;
        ensure!(header.format == FORMAT, "unsupported checkpoint format `{}`", header.format);
        let dtype = Precision::parse(&header.dtype).ok_or_else(|| anyhow!("bad dtype `{}`", header.dtype))?;
        let width = match dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut rest = &bytes[nl + 1..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            ensure!(rest.len() >= n * width, "truncated payload for `{}`", e.name);
            let (chunk, tail) = rest.split_at(n * width);
            rest = tail;
            let p = match dtype {
                Precision::F32 => Payload::F32(
                    chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                Precision::F64 => Payload::F64(
                    chunk
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            if tensors.insert(e.name.clone(), (e.shape, p)).is_some() {
                bail!("duplicate tensor `{}`", e.name);
            }
        }
        ensure!(rest.is_empty(), "trailing bytes after the last tensor");
        Ok(Checkpoint {
            meta: header.meta,
            dtype,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(Value::as_str)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserMeta {
    image_channels: usize,
    height: usize,
    width: usize,
    channels: usize,
    blocks: usize,
    emb_dim: usize,
    num_classes: usize,
    n_train: usize,
}

impl From<&DenoiserConfig> for DenoiserMeta {
    fn from(c: &DenoiserConfig) -> Self {
        DenoiserMeta {
            image_channels: c.image_channels,
            height: c.height,
            width: c.width,
            channels: c.channels,
            blocks: c.blocks,
            emb_dim: c.emb_dim,
            num_classes: c.num_classes,
            n_train: c.n_train,
        }
    }
}

impl From<DenoiserMeta> for DenoiserConfig {
    fn from(m: DenoiserMeta) -> Self {
        DenoiserConfig {
            image_channels: m.image_channels,
            height: m.height,
            width: m.width,
            channels: m.channels,
            blocks: m.blocks,
            emb_dim: m.emb_dim,
            num_classes: m.num_classes,
            n_train: m.n_train,
        }
    }
}

pub fn denoiser_to_checkpoint<R: Real>(p: &DenoiserParams<R>) -> Checkpoint {
    let mut tensors = p.base.to_map();
    if let Some(a) = &p.adapters {
        tensors.extend(a.to_named());
    }
    let meta = serde_json::json!({
        "kind": "denoiser",
        "config": DenoiserMeta::from(&p.config),
        "lora_scale": p.lora_scale,
    });
    Checkpoint::new(meta, &tensors)
}

pub fn denoiser_from_checkpoint<R: Real>(ck: &Checkpoint) -> Result<DenoiserParams<R>> {
    ensure!(ck.kind() == Some("denoiser"), "checkpoint is not a denoiser");
    let meta: DenoiserMeta = serde_json::from_value(ck.meta["config"].clone())?;
    let config = DenoiserConfig::from(meta);
    let all = ck.tensors::<R>()?;
    let (lora, base): (BTreeMap<_, _>, BTreeMap<_, _>) = all.into_iter().partition(|(k, _)| k.starts_with("lora/"));
    let adapters = if lora.is_empty() {
        None
    } else {
        Some(AdapterSet::from_named(&config, &lora)?)
    };
    let n_base = base.len();
    let mut p = DenoiserParams::from_parts(config, ParamStore::from_map(base), adapters)?;
    ensure!(n_base == 2 * p.config.layers().len() + 1, "unexpected tensors in denoiser checkpoint");
    p.lora_scale = ck.meta["lora_scale"].as_f64().unwrap_or(1.0);
    Ok(p)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvNetMeta {
    in_channels: usize,
    height: usize,
    width: usize,
    channels: Vec<usize>,
    outputs: usize,
}

pub fn convnet_to_checkpoint<R: Real>(net: &ConvNet<R>, role: &str) -> Checkpoint {
    let c = &net.config;
    let meta = serde_json::json!({
        "kind": "convnet",
        "role": role,
        "config": ConvNetMeta {
            in_channels: c.in_channels,
            height: c.height,
            width: c.width,
            channels: c.channels.clone(),
            outputs: c.outputs,
        },
    });
    Checkpoint::new(meta, &net.params.to_map())
}

pub fn convnet_from_checkpoint<R: Real>(ck: &Checkpoint) -> Result<ConvNet<R>> {
    ensure!(ck.kind() == Some("convnet"), "checkpoint is not a conv net");
    let m: ConvNetMeta = serde_json::from_value(ck.meta["config"].clone())?;
    let config = ConvNetConfig {
        in_channels: m.in_channels,
        height: m.height,
        width: m.width,
        channels: m.channels,
        outputs: m.outputs,
    };
    Ok(ConvNet::from_params(config, ParamStore::from_map(ck.tensors()?))?)
}

pub fn save_denoiser<R: Real>(p: &DenoiserParams<R>, path: &Path) -> Result<()> {
    denoiser_to_checkpoint(p).save(path)
}

pub fn load_denoiser<R: Real>(path: &Path) -> Result<DenoiserParams<R>> {
    denoiser_from_checkpoint(&Checkpoint::load(path)?).with_context(|| format!("loading {}", path.display()))
}

pub fn load_convnet<R: Real>(path: &Path) -> Result<ConvNet<R>> {
    convnet_from_checkpoint(&Checkpoint::load(path)?).with_context(|| format!("loading {}", path.display()))
}

/// Digest of a file's bytes.
pub fn file_hash(path: &Path) -> Result<u64> {
    let bytes = fs::read(path)?;
    Ok(fnv1a(&bytes))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

//! Model checkpoints.
//!
//! Layout: one ASCII line `sslkit-checkpoint <version> <header bytes>`, a TOML
//! header describing the topology, metadata and blob table, then the blobs as
//! little-endian `f64`. Zero masks are stored as blobs of 0.0 / 1.0.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sslkit_core::compactor::CompactPlan;
use sslkit_core::network::{ConvLayer, FcLayer, Layer, NetworkModel, Shape3, WeightTensor4D};
use sslkit_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &str = "sslkit-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub phase: String,
    pub seed: u64,
    /// Identifies the configuration that produced this checkpoint.
    pub fingerprint: String,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_error: Option<f64>,
}

/// What compaction kept, per weighted layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub name: String,
    pub rows_kept: usize,
    pub cols_kept: usize,
    pub folds: usize,
    pub removed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanProvenance {
    pub removed_blocks: Vec<usize>,
    pub layers: Vec<PlanLayer>,
}

impl PlanProvenance {
    pub fn from_plan(plan: &CompactPlan) -> Self {
        Self {
            removed_blocks: plan.removed_blocks.clone(),
            layers: plan
                .layers
                .iter()
                .map(|l| PlanLayer {
                    name: l.name.clone(),
                    rows_kept: l.rows.len(),
                    cols_kept: l.cols.len(),
                    folds: l.folds.len(),
                    removed: l.removed,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerRecord {
    Conv {
        name: String,
        dims: [usize; 4],
        stride: [usize; 2],
        pad: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        live_fibers: Option<Vec<usize>>,
        #[serde(default)]
        masked: bool,
    },
    Fc {
        name: String,
        dims: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_index: Option<Vec<usize>>,
        #[serde(default)]
        masked: bool,
    },
    Relu,
    MaxPool {
        size: [usize; 2],
        stride: [usize; 2],
    },
    Softmax,
    ResidualBegin {
        id: usize,
    },
    ResidualEnd {
        id: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    layer: String,
    part: String,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_shape: Shape3,
    meta: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan: Option<PlanProvenance>,
    layers: Vec<LayerRecord>,
    blobs: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: NetworkModel,
    pub meta: Metadata,
    pub plan: Option<PlanProvenance>,
}

fn mask_values(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect()
}

impl Checkpoint {
    pub fn new(model: NetworkModel, meta: Metadata) -> Self {
        Self { model, meta, plan: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut layers = Vec::new();
        let mut blobs = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |layer: &str, part: &str, v: &[f64], blobs: &mut Vec<Blob>| {
            blobs.push(Blob {
                layer: layer.into(),
                part: part.into(),
                offset: payload.len(),
                len: v.len(),
            });
            payload.extend_from_slice(v);
        };
        for l in self.model.layers() {
            layers.push(match l {
                Layer::Conv(c) => {
                    push(&c.name, "weights", c.weights.weights(), &mut blobs);
                    push(&c.name, "bias", c.weights.bias(), &mut blobs);
                    if let Some(m) = &c.zero_mask {
                        push(&c.name, "zero_mask", &mask_values(m), &mut blobs);
                    }
                    LayerRecord::Conv {
                        name: c.name.clone(),
                        dims: c.weights.dims(),
                        stride: [c.stride.0, c.stride.1],
                        pad: [c.pad.0, c.pad.1],
                        live_fibers: c.live_fibers.clone(),
                        masked: c.zero_mask.is_some(),
                    }
                }
                Layer::Fc(f) => {
                    push(&f.name, "weights", f.weights.weights(), &mut blobs);
                    push(&f.name, "bias", f.weights.bias(), &mut blobs);
                    if let Some(m) = &f.zero_mask {
                        push(&f.name, "zero_mask", &mask_values(m), &mut blobs);
                    }
                    LayerRecord::Fc {
                        name: f.name.clone(),
                        dims: [f.outputs(), f.inputs()],
                        input_index: f.input_index.clone(),
                        masked: f.zero_mask.is_some(),
                    }
                }
                Layer::Relu => LayerRecord::Relu,
                Layer::MaxPool { size, stride } => LayerRecord::MaxPool {
                    size: [size.0, size.1],
                    stride: [stride.0, stride.1],
                },
                Layer::Softmax => LayerRecord::Softmax,
                Layer::ResidualBegin { id } => LayerRecord::ResidualBegin { id: *id },
                Layer::ResidualEnd { id } => LayerRecord::ResidualEnd { id: *id },
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            input_shape: self.model.input_shape(),
            meta: self.meta.clone(),
            plan: self.plan.clone(),
            layers,
            blobs,
        };
        let text = toml::to_string(&header).expect("checkpoint header serializes");
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.reserve(payload.len() * 8);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CliError::parse(path, 0, "missing checkpoint preamble line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| CliError::parse(path, 0, "preamble is not UTF-8"))?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(CliError::parse(path, 0, format!("expected '{MAGIC} <version> <len>', found {line:?}")));
        }
        let version: u32 = parts[1].parse().map_err(|_| CliError::parse(path, 0, "bad version field"))?;
        if version != FORMAT_VERSION {
            return Err(CliError::parse(
                path,
                0,
                format!("checkpoint version {version} not recognized (expected {FORMAT_VERSION})"),
            ));
        }
        let hlen: usize = parts[2].parse().map_err(|_| CliError::parse(path, 0, "bad header length"))?;
        let start = nl + 1;
        let body = start + hlen;
        if bytes.len() < body {
            return Err(CliError::parse(
                path,
                bytes.len() as u64,
                format!("truncated header: expected {body} bytes, found {}", bytes.len()),
            ));
        }
        let text = std::str::from_utf8(&bytes[start..body])
            .map_err(|_| CliError::parse(path, start as u64, "header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| CliError::parse(path, start as u64, e.to_string()))?;
        if header.version != version {
            return Err(CliError::parse(path, start as u64, "header version disagrees with preamble"));
        }
        let payload = &bytes[body..];
        let total: usize = header.blobs.iter().map(|b| b.len).sum();
        if payload.len() != total * 8 {
            return Err(CliError::parse(
                path,
                body as u64,
                format!("expected {} blob bytes, found {}", total * 8, payload.len()),
            ));
        }
        let mut blobs = header.blobs.iter();
        let mut take = |layer: &str, part: &str, len: usize| -> Result<Vec<f64>> {
            let b = blobs
                .next()
                .ok_or_else(|| CliError::parse(path, body as u64, format!("missing blob {layer}.{part}")))?;
            if b.layer != layer || b.part != part || b.len != len || b.offset + len > total {
                return Err(CliError::parse(
                    path,
                    (body + b.offset * 8) as u64,
                    format!(
                        "blob {}.{} of length {} does not match {layer}.{part} of length {len}",
                        b.layer, b.part, b.len
                    ),
                ));
            }
            Ok(payload[b.offset * 8..(b.offset + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for rec in &header.layers {
            layers.push(match rec {
                LayerRecord::Conv {
                    name,
                    dims,
                    stride,
                    pad,
                    live_fibers,
                    masked,
                } => {
                    let (weights, zero_mask) = read_weights(&mut take, name, dims.to_vec(), *masked, path)?;
                    Layer::Conv(ConvLayer {
                        name: name.clone(),
                        weights,
                        stride: (stride[0], stride[1]),
                        pad: (pad[0], pad[1]),
                        live_fibers: live_fibers.clone(),
                        zero_mask,
                    })
                }
                LayerRecord::Fc {
                    name,
                    dims,
                    input_index,
                    masked,
                } => {
                    let (weights, zero_mask) = read_weights(&mut take, name, vec![dims[0], dims[1], 1, 1], *masked, path)?;
                    Layer::Fc(FcLayer {
                        name: name.clone(),
                        weights,
                        input_index: input_index.clone(),
                        zero_mask,
                    })
                }
                LayerRecord::Relu => Layer::Relu,
                LayerRecord::MaxPool { size, stride } => Layer::MaxPool {
                    size: (size[0], size[1]),
                    stride: (stride[0], stride[1]),
                },
                LayerRecord::Softmax => Layer::Softmax,
                LayerRecord::ResidualBegin { id } => Layer::ResidualBegin { id: *id },
                LayerRecord::ResidualEnd { id } => Layer::ResidualEnd { id: *id },
            });
        }
        if blobs.next().is_some() {
            return Err(CliError::parse(path, body as u64, "blob table lists more blobs than the topology uses"));
        }
        let model = NetworkModel::new(header.input_shape, layers)
            .map_err(|e| CliError::parse(path, start as u64, format!("topology: {e}")))?;
        Ok(Self {
            model,
            meta: header.meta,
            plan: header.plan,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

type Take<'a> = dyn FnMut(&str, &str, usize) -> Result<Vec<f64>> + 'a;

fn read_weights(
    take: &mut Take<'_>,
    name: &str,
    dims: Vec<usize>,
    masked: bool,
    path: &Path,
) -> Result<(WeightTensor4D, Option<Vec<bool>>)> {
    let n = dims[0];
    let len: usize = dims.iter().product();
    let w = take(name, "weights", len)?;
    let b = take(name, "bias", n)?;
    let mask = if masked {
        Some(take(name, "zero_mask", len)?.iter().map(|&v| v != 0.0).collect())
    } else {
        None
    };
    let values = Tensor::new(dims, w).map_err(|e| CliError::parse(path, 0, format!("{name}: {e}")))?;
    let weights = WeightTensor4D::new(values, b).map_err(|e| CliError::parse(path, 0, format!("{name}: {e}")))?;
    Ok((weights, mask))
}

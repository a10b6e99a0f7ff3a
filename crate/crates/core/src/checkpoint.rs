//! Binary parameter container.
//!
//! Layout: the magic `IRRC`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, zero padding to a
//! 64-byte boundary, then the payload. Every tensor is stored as raw
//! little-endian `f32` starting at a 64-byte-aligned offset relative to the
//! payload start; the header's tensor table records name, kind, dtype, shape
//! and offset.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, LabelTask};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{Irrcnn, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IRRC";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    /// Momentum buffer of the parameter with the same name.
    Velocity,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<f32>,
}

/// Everything besides the model needed to reuse a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    /// Root seed. Every random stream of a run is derived from it by label and
    /// epoch, so together with `epoch` it is the complete generator state.
    pub seed: u64,
    pub normalization: ChannelStats,
    pub task: LabelTask,
    pub vocabulary: Vec<String>,
    /// The resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
}

impl Default for RunMeta {
    fn default() -> Self {
        Self {
            seed: 0,
            normalization: ChannelStats::default(),
            task: LabelTask::Class,
            vocabulary: Vec::new(),
            config: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tool_version: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub model: ModelConfig,
    pub meta: RunMeta,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tool_version: String,
    epoch: usize,
    global_step: u64,
    model: ModelConfig,
    meta: RunMeta,
    tensors: Vec<TensorEntry>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    /// Snapshot of `model`, with momentum buffers in parameter order if given.
    pub fn capture(
        model: &Irrcnn<f32>,
        velocities: Option<&[Tensor<f32>]>,
        epoch: usize,
        global_step: u64,
        meta: RunMeta,
    ) -> Self {
        let mut tensors = Vec::new();
        for p in model.store.params() {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                kind: TensorKind::Param,
                tensor: p.value.clone(),
            });
        }
        if let Some(vs) = velocities {
            for (p, v) in model.store.params().iter().zip(vs) {
                tensors.push(NamedTensor {
                    name: p.name.clone(),
                    kind: TensorKind::Velocity,
                    tensor: v.clone(),
                });
            }
        }
        for (name, s) in model.store.stats() {
            tensors.push(NamedTensor {
                name: name.clone(),
                kind: TensorKind::RunningMean,
                tensor: s.mean.clone(),
            });
            tensors.push(NamedTensor {
                name: name.clone(),
                kind: TensorKind::RunningVar,
                tensor: s.var.clone(),
            });
        }
        Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            epoch,
            global_step,
            model: model.config.clone(),
            meta,
            tensors,
        }
    }

    fn find(&self, name: &str, kind: TensorKind) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|t| t.kind == kind && t.name == name)
            .map(|t| &t.tensor)
    }

    /// Rebuilds the model and overwrites every parameter and batch-norm
    /// statistic with the stored values.
    pub fn restore_model(&self) -> Result<Irrcnn<f32>> {
        let mut model = Irrcnn::build(&self.model, self.meta.seed)?;
        let mut expected = HashSet::new();
        for p in model.store.params_mut() {
            expected.insert((p.name.clone(), TensorKind::Param));
            let stored = self
                .find(&p.name, TensorKind::Param)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if stored.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.clone();
        }
        for (name, s) in model.store.stats_mut() {
            for (kind, dst) in [(TensorKind::RunningMean, &mut s.mean), (TensorKind::RunningVar, &mut s.var)] {
                expected.insert((name.clone(), kind));
                let stored = self
                    .find(name, kind)
                    .ok_or_else(|| Error::Checkpoint(format!("missing batch-norm statistics for {name}")))?;
                if stored.shape() != dst.shape() {
                    return Err(Error::Checkpoint(format!("statistics {name} have the wrong shape")));
                }
                *dst = stored.clone();
            }
            s.initialized = true;
        }
        for t in &self.tensors {
            if t.kind != TensorKind::Velocity && !expected.contains(&(t.name.clone(), t.kind)) {
                return Err(Error::Checkpoint(format!("unexpected tensor {} ({:?})", t.name, t.kind)));
            }
        }
        Ok(model)
    }

    /// Momentum buffers in the model's parameter order; zeros when absent.
    pub fn velocities(&self, model: &Irrcnn<f32>) -> Result<Vec<Tensor<f32>>> {
        model
            .store
            .params()
            .iter()
            .map(|p| match self.find(&p.name, TensorKind::Velocity) {
                Some(v) if v.shape() == p.value.shape() => Ok(v.clone()),
                Some(_) => Err(Error::Checkpoint(format!("velocity {} has the wrong shape", p.name))),
                None => Ok(Tensor::zeros(p.value.shape().to_vec())),
            })
            .collect()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert((t.name.as_str(), t.kind)) {
                return Err(Error::Checkpoint(format!("tensor {} ({:?}) stored twice", t.name, t.kind)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_unique()?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                kind: t.kind,
                dtype: "f32".into(),
                shape: t.tensor.shape().to_vec(),
                offset: offset as u64,
            });
            offset = align(offset + 4 * t.tensor.len());
        }
        let header = serde_json::to_vec(&Header {
            tool_version: self.tool_version.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;

        let payload_start = align(16 + header.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(payload_start, 0);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(align(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Checkpoint(why.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[align(header_end).min(bytes.len())..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                kind: e.kind,
                tensor: Tensor::new(e.shape, data).map_err(|err| Error::Checkpoint(err.to_string()))?,
            });
        }
        let ckpt = Self {
            tool_version: header.tool_version,
            epoch: header.epoch,
            global_step: header.global_step,
            model: header.model,
            meta: header.meta,
            tensors,
        };
        ckpt.check_unique()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelConfig, ModelError, ModelParams};
use crate::datamodel::{read_blob, write_blob};
use crate::numerics::Tensor;

const FILE_MAGIC: [u8; 4] = *b"MMDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub seed: u64,
    pub dataset_hash: String,
    /// Caller-defined state such as optimizer step counts and metric history.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named f32 tensors plus a JSON header.
///
/// On disk: `MMDC`, u32 version, u32 header length, the JSON header, then
/// one `MMDG` blob per tensor in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    /// Captures parameters and BatchNorm running statistics.
    pub fn from_params(
        params: &ModelParams<f32>,
        epoch: usize,
        seed: u64,
        dataset_hash: &str,
    ) -> Self {
        let mut ck = Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                model: params.config,
                epoch,
                seed,
                dataset_hash: dataset_hash.to_string(),
                extra: serde_json::Value::Null,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        };
        for (name, t) in params.named_trainable() {
            ck.push(name, t.shape().to_vec(), t.data().to_vec());
        }
        for (name, b) in params.named_buffers() {
            ck.push(name, vec![b.len()], b.to_vec());
        }
        ck
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), data.len());
        self.header.tensors.push(TensorEntry { name, shape });
        self.data.push(data);
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| {
                (
                    self.header.tensors[i].shape.as_slice(),
                    self.data[i].as_slice(),
                )
            })
    }

    /// Rebuilds model parameters; every tensor and buffer must be present
    /// with the shape the stored configuration implies.
    pub fn to_params(&self) -> Result<ModelParams<f32>, ModelError> {
        let mut params = init_params::<f32>(&self.header.model, 0)?;
        let missing = |n: &str| ModelError::Checkpoint {
            path: "<memory>".into(),
            msg: format!("tensor {n} missing or mis-shaped"),
        };
        for (name, t) in params.named_trainable_mut() {
            let (shape, data) = self.get(&name).ok_or_else(|| missing(&name))?;
            if shape != t.shape() {
                return Err(missing(&name));
            }
            *t = Tensor::new(shape.to_vec(), data.to_vec())?;
        }
        for (name, b) in params.named_buffers_mut() {
            let (_, data) = self.get(&name).ok_or_else(|| missing(&name))?;
            if data.len() != b.len() {
                return Err(missing(&name));
            }
            b.copy_from_slice(data);
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| ModelError::Config(format!("cannot encode checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&FILE_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (entry, data) in self.header.tensors.iter().zip(&self.data) {
            let (rows, dim) = blob_shape(&entry.shape);
            write_blob(&mut out, rows, dim, data).expect("writing to memory");
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 || bytes[0..4] != FILE_MAGIC {
            return Err(ck_err(path, "not a checkpoint file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(ck_err(
                path,
                format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let hlen = word(8) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(ck_err(path, "truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| ck_err(path, format!("bad header: {e}")))?;
        let mut rest = &body[hlen..];
        let mut data = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let (rows, dim, values, used) =
                read_blob(path, rest).map_err(|e| ck_err(path, format!("{}: {e}", entry.name)))?;
            if (rows, dim) != blob_shape(&entry.shape) {
                return Err(ck_err(
                    path,
                    format!("{} has shape {rows}x{dim}", entry.name),
                ));
            }
            data.push(values);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(ck_err(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, data })
    }
}

fn blob_shape(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// Writes through a temporary file and renames it into place.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| ck_err(path, e.to_string());
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|e| ck_err(path, e.to_string()))?;
    Checkpoint::from_bytes(path, &bytes)
}

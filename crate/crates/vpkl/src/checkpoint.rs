//! Checkpoints: `"VPKC"`, `u32` version, `u64` header length, the JSON
//! header, then every tensor in VPKF encoding in header order.
//!
//! Parameters come first, followed by the Adam moments as
//! `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vpkl_core::corpus::KeywordId;
use vpkl_core::encoders::{ModelConfig, ParamSet};
use vpkl_core::train::{AdamState, ModelKind, TrainConfig};
use vpkl_core::Tensor;

use crate::experiment::TaggerSource;
use crate::format::{self, FormatError};
use crate::manifest::sha256_hex;

pub const MAGIC: [u8; 4] = *b"VPKC";
pub const VERSION: u32 = 1;
const FORMAT_NAME: &str = "vpkl-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{path}: not a checkpoint (magic {found:?})")]
    Magic { path: PathBuf, found: Vec<u8> },
    #[error("{path}: checkpoint version {found}, this build reads {VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: truncated checkpoint ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: payload hash mismatch (recorded {recorded}, computed {computed})")]
    Hash { path: PathBuf, recorded: String, computed: String },
    #[error("{path}: bad header: {detail}")]
    Header { path: PathBuf, detail: String },
    #[error("{path}: tensor {name}: {cause}")]
    Tensor { path: PathBuf, name: String, cause: FormatError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tagger_source: TaggerSource,
    /// Keywords the sampler drew episodes for.
    pub vocabulary: Vec<KeywordId>,
    pub corpus_id: String,
    /// Dataset directory the model was trained from, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<String>,
    pub metrics: CheckpointMetrics,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
    pub optimizer: AdamState,
}

/// Fields a caller supplies; tensor listing and hashes are derived on save.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tagger_source: TaggerSource,
    pub vocabulary: Vec<KeywordId>,
    pub corpus_id: String,
    pub data_dir: Option<String>,
    pub metrics: CheckpointMetrics,
}

impl Checkpoint {
    pub fn new(info: CheckpointInfo, params: ParamSet, optimizer: AdamState) -> Self {
        let mut tensors = Vec::with_capacity(3 * params.len());
        for prefix in ["", "adam.m.", "adam.v."] {
            for (n, t) in params.names.iter().zip(&params.tensors) {
                tensors.push(TensorEntry { name: format!("{prefix}{n}"), shape: t.shape().to_vec() });
            }
        }
        let header = CheckpointHeader {
            format: FORMAT_NAME.into(),
            version: VERSION,
            model: info.model,
            model_config: info.model_config,
            train_config: info.train_config,
            tagger_source: info.tagger_source,
            vocabulary: info.vocabulary,
            corpus_id: info.corpus_id,
            data_dir: info.data_dir,
            metrics: info.metrics,
            adam_step: optimizer.step,
            tensors,
            payload_bytes: 0,
            payload_sha256: String::new(),
        };
        Self { header, params, optimizer }
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for t in &self.params.tensors {
            format::encode_into(&mut buf, t);
        }
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for (m, t) in moments.iter().zip(&self.params.tensors) {
                let mt = Tensor::new(t.shape().to_vec(), m.clone()).expect("moments mirror parameter shapes");
                format::encode_into(&mut buf, &mt);
            }
        }
        buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut header = self.header.clone();
        header.payload_bytes = payload.len() as u64;
        header.payload_sha256 = sha256_hex(&payload);
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|cause| CheckpointError::Io { path: path.into(), cause })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|cause| CheckpointError::Io { path: path.into(), cause })?;
        Self::from_bytes(path, &bytes)
    }

    /// Decodes a whole checkpoint; nothing is returned unless every check passes.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, CheckpointError> {
        let p = || path.to_path_buf();
        let truncated = |detail: String| CheckpointError::Truncated { path: p(), detail };
        if bytes.len() < 16 {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(CheckpointError::Magic { path: p(), found: bytes[..4].to_vec() });
            }
            return Err(truncated(format!("{} bytes, preamble needs 16", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic { path: p(), found: bytes[..4].to_vec() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { path: p(), found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let rest = &bytes[16..];
        if header_len > rest.len() {
            return Err(truncated(format!("header needs {header_len} bytes, {} present", rest.len())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| CheckpointError::Header { path: p(), detail: e.to_string() })?;
        if header.format != FORMAT_NAME || header.version != VERSION {
            return Err(CheckpointError::Header {
                path: p(),
                detail: format!("format {:?} version {}", header.format, header.version),
            });
        }
        let payload = &rest[header_len..];
        if (payload.len() as u64) < header.payload_bytes {
            return Err(truncated(format!(
                "payload has {} of {} bytes",
                payload.len(),
                header.payload_bytes
            )));
        }
        if payload.len() as u64 != header.payload_bytes {
            return Err(CheckpointError::Header {
                path: p(),
                detail: format!("{} bytes follow a {}-byte payload", payload.len() as u64 - header.payload_bytes, header.payload_bytes),
            });
        }
        let computed = sha256_hex(payload);
        if computed != header.payload_sha256 {
            return Err(CheckpointError::Hash { path: p(), recorded: header.payload_sha256, computed });
        }

        let mut cursor = payload;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let t = format::read_tensor(&mut cursor).map_err(|cause| CheckpointError::Tensor {
                path: p(),
                name: entry.name.clone(),
                cause,
            })?;
            if t.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::Header {
                    path: p(),
                    detail: format!("tensor {} has shape {:?}, header says {:?}", entry.name, t.shape(), entry.shape),
                });
            }
            tensors.push(t);
        }
        if !cursor.is_empty() || tensors.len() % 3 != 0 {
            return Err(CheckpointError::Header { path: p(), detail: "tensor listing does not cover the payload".into() });
        }
        let n = tensors.len() / 3;
        let mut it = tensors.into_iter();
        let params = ParamSet {
            names: header.tensors[..n].iter().map(|e| e.name.clone()).collect(),
            tensors: it.by_ref().take(n).collect(),
        };
        let m = it.by_ref().take(n).map(Tensor::into_data).collect();
        let v = it.map(Tensor::into_data).collect();
        let expected: Vec<String> = ["adam.m.", "adam.v."]
            .iter()
            .flat_map(|pre| params.names.iter().map(move |n| format!("{pre}{n}")))
            .collect();
        let listed: Vec<&String> = header.tensors[n..].iter().map(|e| &e.name).collect();
        if listed.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(CheckpointError::Header { path: p(), detail: "optimizer tensors are misnamed".into() });
        }
        if !params.matches(&header.model_config) {
            return Err(CheckpointError::Header {
                path: p(),
                detail: "parameters do not match the recorded model configuration".into(),
            });
        }
        let optimizer = AdamState { m, v, step: header.adam_step };
        Ok(Self { header, params, optimizer })
    }
}

/// Reads only the header, for inspection.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let mut f = fs::File::open(path).map_err(|cause| CheckpointError::Io { path: path.into(), cause })?;
    let mut pre = [0u8; 16];
    f.read_exact(&mut pre).map_err(|_| CheckpointError::Truncated {
        path: path.into(),
        detail: "preamble".into(),
    })?;
    if pre[..4] != MAGIC {
        return Err(CheckpointError::Magic { path: path.into(), found: pre[..4].to_vec() });
    }
    let len = u64::from_le_bytes(pre[8..16].try_into().expect("eight bytes")) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|_| CheckpointError::Truncated {
        path: path.into(),
        detail: "header".into(),
    })?;
    serde_json::from_slice(&json).map_err(|e| CheckpointError::Header { path: path.into(), detail: e.to_string() })
}

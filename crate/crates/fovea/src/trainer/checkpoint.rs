//! Single-file checkpoint container.
//!
//! Byte layout:
//!
//! ```text
//! offset 0   magic "FOVE"
//! offset 4   header length as u64 little-endian
//! offset 12  header: UTF-8 JSON (CheckpointMeta)
//! then       raw float32 little-endian tensor data, in exactly the
//!            order listed in meta.tensors
//! ```
//!
//! Tensor values are stored as f32; in-memory training state is rounded
//! to f32 precision whenever a checkpoint is written, so a resumed run
//! continues from bit-identical state and save -> load -> save yields a
//! byte-identical file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::projector::ProjectorConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FOVE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: OptimizerConfig,
    pub step_counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngMeta {
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage_id: u8,
    pub epoch: usize,
    pub encoder: EncoderConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub projector: Option<ProjectorConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_classes: Option<usize>,
    pub rng: RngMeta,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub optimizer: Option<OptimizerMeta>,
    /// Free-form resolved-config snapshot for provenance.
    #[serde(default)]
    pub config_snapshot: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Tensor name -> data; values round-trip f32 storage exactly.
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Assemble from named tensors. The tensor list in the header is the
    /// sorted key order, which is also the write order.
    pub fn new(mut meta: CheckpointMeta, tensors: BTreeMap<String, ArrayD<f64>>) -> Self {
        meta.tensors = tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let header = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header.len() as u64).to_le_bytes())?;
        file.write_all(&header)?;
        for tm in &self.meta.tensors {
            let tensor = self.tensors.get(&tm.name).ok_or_else(|| {
                Error::Data(format!("checkpoint lists missing tensor {}", tm.name))
            })?;
            for &v in tensor.iter() {
                file.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::Data(format!("cannot open checkpoint {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len)?;
        let header_len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; header_len];
        file.read_exact(&mut header)?;
        let meta: CheckpointMeta = serde_json::from_slice(&header)
            .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let mut tensors = BTreeMap::new();
        for tm in &meta.tensors {
            let count: usize = tm.shape.iter().product();
            let mut raw = vec![0u8; count * 4];
            file.read_exact(&mut raw).map_err(|e| {
                Error::Data(format!("checkpoint truncated at tensor {}: {e}", tm.name))
            })?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let arr = ArrayD::from_shape_vec(tm.shape.clone(), data)
                .map_err(|e| Error::Data(format!("tensor {}: {e}", tm.name)))?;
            tensors.insert(tm.name.clone(), arr);
        }
        let mut rest = Vec::new();
        file.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Data(format!(
                "checkpoint has {} trailing bytes",
                rest.len()
            )));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
    }
}

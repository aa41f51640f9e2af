//! Binary checkpoint format.
//!
//! Layout: magic `UAGC`, u16 LE version, u32 LE record count, then per
//! record `u32 name_len, name, u32 rank, u32 dims.., f32 LE values..`, and
//! a trailing CRC32 of everything before it. The first record encodes the
//! model configuration; the rest are the parameter bank in creation order
//! (values stored in 32-bit precision).

use std::io::Read;
use std::path::Path;

use super::{Architecture, EmbeddingMode, Forecaster, GraphOperators, ModelConfig, ModelError};
use crate::diffengine::Tensor;
use crate::Real;

const MAGIC: &[u8; 4] = b"UAGC";
const VERSION: u16 = 1;
const CONFIG_RECORD: &str = "__config__";

fn config_values(cfg: &ModelConfig) -> Vec<f32> {
    vec![
        cfg.architecture.code() as f32,
        cfg.embedding.code() as f32,
        cfg.n_sensors as f32,
        cfg.dim as f32,
        cfg.p_steps as f32,
        cfg.q_steps as f32,
        cfg.k_diffusion as f32,
        cfg.n_layers as f32,
        cfg.n_heads as f32,
        cfg.d_key as f32,
        if cfg.use_sensor_embedding { 1.0 } else { 0.0 },
        cfg.n_activity_categories as f32,
        if cfg.center_activity { 1.0 } else { 0.0 },
    ]
}

fn config_from_values(values: &[f32]) -> Result<ModelConfig, ModelError> {
    if values.len() != 13 {
        return Err(ModelError::Checkpoint(format!(
            "config record has {} values, expected 13",
            values.len()
        )));
    }
    let arch = Architecture::from_code(values[0] as u32)
        .ok_or_else(|| ModelError::Checkpoint("bad architecture code".into()))?;
    let embedding = EmbeddingMode::from_code(values[1] as u32)
        .ok_or_else(|| ModelError::Checkpoint("bad embedding code".into()))?;
    Ok(ModelConfig {
        architecture: arch,
        embedding,
        n_sensors: values[2] as usize,
        dim: values[3] as usize,
        p_steps: values[4] as usize,
        q_steps: values[5] as usize,
        k_diffusion: values[6] as usize,
        n_layers: values[7] as usize,
        n_heads: values[8] as usize,
        d_key: values[9] as usize,
        use_sensor_embedding: values[10] != 0.0,
        n_activity_categories: values[11] as usize,
        center_activity: values[12] != 0.0,
    })
}

fn push_record(payload: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
    payload.extend_from_slice(name.as_bytes());
    payload.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        payload.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the model to `path`.
pub fn save_checkpoint(path: &Path, model: &Forecaster) -> Result<(), ModelError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&VERSION.to_le_bytes());
    let n_records = 1 + model.store.len() as u32;
    payload.extend_from_slice(&n_records.to_le_bytes());
    let cfg_values = config_values(&model.cfg);
    push_record(&mut payload, CONFIG_RECORD, &[cfg_values.len()], &cfg_values);
    for p in model.store.params() {
        let values: Tensor<f32> = p.value.cast();
        push_record(&mut payload, &p.name, p.value.shape(), values.data());
    }
    let crc = crc32fast::hash(&payload);
    payload.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, payload)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint back into its configuration and named parameter
/// tensors (32-bit, as stored).
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor<f32>)>), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 14 {
        return Err(ModelError::Checkpoint("file too small".into()));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let want = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let got = crc32fast::hash(payload);
    if want != got {
        return Err(ModelError::Checkpoint(format!(
            "crc mismatch: stored {want:#010x}, computed {got:#010x}"
        )));
    }
    let mut cur = Cursor { bytes: payload, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let n_records = cur.u32()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("non-utf8 name".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::from_vec(&shape, values)));
    }
    if cur.pos != payload.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    let (first_name, cfg_tensor) = records
        .first()
        .ok_or_else(|| ModelError::Checkpoint("no records".into()))?;
    if first_name != CONFIG_RECORD {
        return Err(ModelError::Checkpoint("missing config record".into()));
    }
    let cfg = config_from_values(cfg_tensor.data())?;
    records.remove(0);
    Ok((cfg, records))
}

impl Forecaster {
    /// Rebuilds a model from a checkpoint; `graph` is required for the
    /// graph-convolutional architectures.
    pub fn from_checkpoint(path: &Path, graph: Option<GraphOperators>) -> Result<Self, ModelError> {
        let (cfg, records) = load_checkpoint(path)?;
        let mut model = Forecaster::new(cfg, graph, 0)?;
        if records.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} parameter records, model has {}",
                records.len(),
                model.store.len()
            )));
        }
        for (name, tensor) in records {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.value.shape() != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} in model",
                    tensor.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = tensor.cast::<Real>();
        }
        Ok(model)
    }
}

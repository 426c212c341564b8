//! Binary checkpoint container: magic "BCAF", version, a JSON metadata block,
//! then named f64 tensor records (name, dtype code, rank, dims, little-endian
//! payload, CRC32).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, ParamStore, ParamTag};
use crate::data::NormStats;
use crate::error::{BcafError, Result};
use crate::optim::AdamW;
use crate::util::{atomic_write, crc32, read_file};

pub const MAGIC: &[u8; 4] = b"BCAF";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Checkpoint metadata block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub config_hash: String,
    /// RNG provenance: all training streams derive from (seed, epoch, ...),
    /// so the seed plus the next epoch fully define the RNG state.
    pub rng_seed: u64,
    pub next_epoch: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

/// A loaded checkpoint: metadata plus every named tensor.
#[derive(Debug)]
pub struct CheckpointData {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Arr>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, arr: &Arr) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(DTYPE_F64);
    buf.push(arr.ndim() as u8);
    for &d in arr.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let mut payload = Vec::with_capacity(arr.len() * 8);
    for &v in arr.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&crc32(&payload).to_le_bytes());
    buf.extend_from_slice(&payload);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(BcafError::Checkpoint(format!("truncated at {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Serialize model parameters, buffers and (optionally) optimizer state.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    optim: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let mut tensors: Vec<(String, Arr)> = Vec::new();
    for e in &store.entries {
        tensors.push((e.name.clone(), e.value.as_ref().clone()));
    }
    for b in &store.buffers {
        tensors.push((format!("buffer.{}", b.name), b.value.borrow().clone()));
    }
    if let Some(opt) = optim {
        tensors.extend(opt.state_tensors(store));
    }
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, arr) in &tensors {
        push_tensor(&mut buf, name, arr);
    }
    atomic_write(path, &buf)
}

/// Read a checkpoint container, verifying magic, version and per-record
/// checksums.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(BcafError::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(BcafError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u64("meta length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta")?)?;
    let count = r.u64("tensor count")?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| BcafError::Checkpoint("non-utf8 tensor name".into()))?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(BcafError::Checkpoint(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dim")? as usize);
        }
        let crc_expect = r.u32("crc")?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * 8, "payload")?;
        if crc32(payload) != crc_expect {
            return Err(BcafError::Checksum(format!("tensor {name}")));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
    }
    Ok(CheckpointData { meta, tensors })
}

/// Copy checkpoint tensors into a store with an optional name remapping
/// `src_prefix -> dst_prefix` and a name filter. Returns how many parameters
/// and buffers were filled. Shape mismatches are errors; names absent from
/// the store are skipped.
pub fn apply_tensors(
    store: &mut ParamStore,
    data: &CheckpointData,
    map: impl Fn(&str) -> Option<String>,
) -> Result<usize> {
    let mut loaded = 0usize;
    for (name, arr) in &data.tensors {
        if name.starts_with("optim.") {
            continue;
        }
        let (is_buffer, bare) = match name.strip_prefix("buffer.") {
            Some(b) => (true, b),
            None => (false, name.as_str()),
        };
        let Some(dst) = map(bare) else { continue };
        if is_buffer {
            if let Some(idx) = store.buffers.iter().position(|b| b.name == dst) {
                let mut val = store.buffers[idx].value.borrow_mut();
                if val.shape() != arr.shape() {
                    return Err(BcafError::Checkpoint(format!(
                        "buffer {dst}: shape {:?} vs checkpoint {:?}",
                        val.shape(),
                        arr.shape()
                    )));
                }
                *val = arr.clone();
                loaded += 1;
            }
        } else if let Some(id) = store.id_by_name(&dst) {
            if store.get(id).shape() != arr.shape() {
                return Err(BcafError::Checkpoint(format!(
                    "param {dst}: shape {:?} vs checkpoint {:?}",
                    store.get(id).shape(),
                    arr.shape()
                )));
            }
            store.set(id, arr.clone());
            loaded += 1;
        }
    }
    Ok(loaded)
}

/// Load a full unimodal checkpoint into a same-shape model store (identity
/// name map) and restore the optimizer if given.
pub fn load_into(store: &mut ParamStore, path: &Path, optim: Option<&mut AdamW>) -> Result<CheckpointMeta> {
    let data = load_checkpoint(path)?;
    let loaded = apply_tensors(store, &data, |n| Some(n.to_string()))?;
    let expected = store.entries.len() + store.buffers.len();
    if loaded != expected {
        return Err(BcafError::Checkpoint(format!(
            "checkpoint filled {loaded} of {expected} tensors"
        )));
    }
    if let Some(opt) = optim {
        opt.load_state(store, &data.tensors)?;
    }
    Ok(data.meta)
}

/// Initialize a fusion-model store from unimodal checkpoints: both encoder
/// trunks (retagged as pretrained) and the decoder core from the RGB phase;
/// adapters, cross-attention and fusion parameters keep their fresh random
/// init.
pub fn init_fusion_from_unimodal(
    store: &mut ParamStore,
    rgb_ckpt: &Path,
    hsi_ckpt: &Path,
) -> Result<(CheckpointMeta, CheckpointMeta)> {
    let rgb = load_checkpoint(rgb_ckpt)?;
    let n = apply_tensors(store, &rgb, |name| {
        if name.starts_with("rgb.") || (name.starts_with("decoder.") && !name.contains("decoder.adapt")) {
            Some(name.to_string())
        } else {
            None
        }
    })?;
    if n == 0 {
        return Err(BcafError::Checkpoint("RGB checkpoint matched nothing".into()));
    }
    let hsi = load_checkpoint(hsi_ckpt)?;
    let n = apply_tensors(store, &hsi, |name| {
        name.starts_with("hsi.").then(|| name.to_string())
    })?;
    if n == 0 {
        return Err(BcafError::Checkpoint("HSI checkpoint matched nothing".into()));
    }
    store.retag_prefix("rgb.", ParamTag::BackbonePretrained);
    store.retag_prefix("hsi.", ParamTag::BackbonePretrained);
    Ok((rgb.meta, hsi.meta))
}

/// Initialize a logit-fusion store from unimodal checkpoints: each sub-model
/// is filled wholesale under its prefix and its backbone retagged pretrained;
/// the 1x1 mixing layer stays random.
pub fn init_logit_fusion_from_unimodal(
    store: &mut ParamStore,
    rgb_ckpt: &Path,
    hsi_ckpt: &Path,
) -> Result<(CheckpointMeta, CheckpointMeta)> {
    let rgb = load_checkpoint(rgb_ckpt)?;
    apply_tensors(store, &rgb, |name| Some(format!("rgb_model.{name}")))?;
    let hsi = load_checkpoint(hsi_ckpt)?;
    apply_tensors(store, &hsi, |name| Some(format!("hsi_model.{name}")))?;
    store.retag_prefix("rgb_model.rgb.", ParamTag::BackbonePretrained);
    store.retag_prefix("hsi_model.hsi.", ParamTag::BackbonePretrained);
    Ok((rgb.meta, hsi.meta))
}

//! Checkpoint files: a plain-text metadata section plus named f64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "HDCK"
//! version u32      currently 1
//! meta    u32 count, then per entry: u32 key len, key bytes (UTF-8),
//!                                    u32 value len, value bytes (UTF-8)
//! tensors u32 count, then per tensor: u32 name len, name bytes,
//!          u32 ndim, ndim x u64 dims, prod(dims) x f64 (IEEE-754 bits)
//! ```
//!
//! f64 values are written bit-exactly, so save/load round-trips restore
//! parameters bitwise. Metadata records the model configs so a load into an
//! incompatible config can be rejected up front.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::hash::HashHeadConfig;
use crate::tensor::{Arr, ParamStore};
use crate::vit::EncoderConfig;

const MAGIC: &[u8; 4] = b"HDCK";
const VERSION: u32 = 1;

/// A loaded checkpoint: ordered metadata and a parameter store.
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}

/// Serialize metadata and all parameters of `store` to `path`.
pub fn save_checkpoint(path: &Path, meta: &[(String, String)], store: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (k, v) in meta {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value, _) in store.iter() {
        write_str(&mut w, name)?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let meta_count = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        meta.push((k, v));
    }
    let tensor_count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..tensor_count {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let arr = Arr::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        params.insert(name, arr);
    }
    Ok(Checkpoint { meta, params })
}

/// Metadata block describing an encoder + hash head pair.
pub fn model_meta(role: &str, encoder: &EncoderConfig, hash: &HashHeadConfig) -> Vec<(String, String)> {
    vec![
        ("role".into(), role.to_string()),
        ("encoder.hidden_dim".into(), encoder.hidden_dim.to_string()),
        ("encoder.num_layers".into(), encoder.num_layers.to_string()),
        ("encoder.patch_size".into(), encoder.patch_size.to_string()),
        ("encoder.num_heads".into(), encoder.num_heads.to_string()),
        ("encoder.image_size".into(), encoder.image_size.to_string()),
        ("encoder.ffn_dim".into(), encoder.ffn_dim.to_string()),
        ("encoder.frozen_prefix".into(), encoder.frozen_prefix.to_string()),
        ("hash.input_dim".into(), hash.input_dim.to_string()),
        ("hash.code_bits".into(), hash.code_bits.to_string()),
    ]
}

/// Reject a checkpoint whose recorded config differs from the expected one.
pub fn validate_model_meta(
    ckpt: &Checkpoint,
    role: &str,
    encoder: &EncoderConfig,
    hash: &HashHeadConfig,
) -> Result<()> {
    let expected = model_meta(role, encoder, hash);
    for (key, want) in &expected {
        match ckpt.meta_get(key) {
            Some(got) if got == want => {}
            Some(got) => {
                return Err(Error::Checkpoint(format!(
                    "incompatible checkpoint: {key} is {got}, expected {want}"
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "incompatible checkpoint: missing metadata key {key}"
                )))
            }
        }
    }
    Ok(())
}

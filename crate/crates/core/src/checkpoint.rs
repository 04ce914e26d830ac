//! Binary checkpoint container.
//!
//! Layout: magic "TVGC", version u32, then a sequence of entries until EOF:
//!   name-length u32, UTF-8 name, rank u32, dims u32[rank], f32 payload
//! (all little-endian). A JSON sidecar records epoch, seed and config hash.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TVGC";
pub const VERSION: u32 = 1;

/// Sidecar metadata. `extra` carries architecture fields for compatibility
/// checks; a BTreeMap keeps serialization order stable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub extra: std::collections::BTreeMap<String, serde_json::Value>,
}

pub fn save<T: Scalar>(path: &Path, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file_name = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated {
            file: file_name.clone(),
            context: "magic".into(),
        })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { file: file_name }.into());
    }
    let version = read_u32(&mut r, &file_name, "version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            file: file_name,
            expected: VERSION,
            got: version,
        }
        .into());
    }

    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| truncated(&file_name, "name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| truncated(&file_name, "name (invalid utf-8)"))?;
        let rank = read_u32(&mut r, &file_name, &name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, &file_name, &name)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| truncated(&file_name, &name))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(entries)
}

pub fn load_map(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    Ok(load(path)?.into_iter().collect())
}

/// Copies checkpoint tensors into the model's named parameters/buffers.
/// Every destination must be present with a matching shape.
pub fn restore_into<T: Scalar>(
    saved: &HashMap<String, Tensor<f32>>,
    dests: &mut [(String, &mut Tensor<T>)],
) -> Result<()> {
    for (name, dst) in dests.iter_mut() {
        let src = saved
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: dst.shape().to_vec(),
                got: src.shape().to_vec(),
            }
            .into());
        }
        let data: Vec<T> = src.data().iter().map(|v| T::from_f64(*v as f64)).collect();
        dst.set_data(&data)?;
    }
    Ok(())
}

pub fn save_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn read_u32(r: &mut impl Read, file: &str, context: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| truncated(file, context))?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(file: &str, context: &str) -> Error {
    CheckpointError::Truncated {
        file: file.to_string(),
        context: context.to_string(),
    }
    .into()
}

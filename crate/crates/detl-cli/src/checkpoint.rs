//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DETL"                       magic
//! u32    version (1)
//! u16    preset name length, then utf-8 bytes
//! u32    width_base
//! u32*3  input shape (C, H, W)
//! u32    class count
//! u16    number of class names, then (u16 length + utf-8) each
//! u32    number of parameter entries, then per entry:
//!        u32 layer index, u8 slot, u8 ndim, u32*ndim dims,
//!        f32-le values (product of dims)
//! 32 B   sha-256 over everything above
//! ```
//!
//! Save/load round-trips are byte-exact; any flipped byte fails the
//! checksum; a version bump refuses to load.

use std::path::Path;

use sha2::{Digest, Sha256};

use detl_core::model::{build_preset, ModelGraph, ParamKey, PresetName};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"DETL";
pub const VERSION: u32 = 1;

/// Architecture identity and label space stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub preset: PresetName,
    pub width_base: usize,
    pub input_shape: (usize, usize, usize),
    pub class_names: Vec<String>,
}

/// Serialize a preset-built model plus its label space.
pub fn save_checkpoint(model: &ModelGraph, class_names: &[String], path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, class_names)?;
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// The serialized form without touching the filesystem.
pub fn checkpoint_bytes(model: &ModelGraph, class_names: &[String]) -> Result<Vec<u8>> {
    let meta = model.preset().ok_or_else(|| {
        CliError::Checkpoint("only preset-built models can be checkpointed".into())
    })?;
    if class_names.len() != model.class_count() {
        return Err(CliError::Checkpoint(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.class_count()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_string(&mut out, meta.name.as_str());
    out.extend_from_slice(&(meta.width_base as u32).to_le_bytes());
    let (c, h, w) = model.input_shape();
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.class_count() as u32).to_le_bytes());
    out.extend_from_slice(&(class_names.len() as u16).to_le_bytes());
    for name in class_names {
        write_string(&mut out, name);
    }

    let mut entries: Vec<(ParamKey, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params(|key, tensor, _| {
        entries.push((key, tensor.shape().to_vec(), tensor.data().to_vec()));
    });
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, shape, data) in entries {
        out.extend_from_slice(&(key.layer as u32).to_le_bytes());
        out.push(key.slot);
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Load and verify a checkpoint, rebuilding the model behind it. The loaded
/// model has every layer trainable.
pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelGraph, CheckpointMeta)> {
    if bytes.len() < 32 + 8 {
        return Err(CliError::Checkpoint("truncated checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CliError::Checkpoint(
            "checksum mismatch; the file is corrupted".into(),
        ));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CliError::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let preset: PresetName = r
        .string()?
        .parse()
        .map_err(|e| CliError::Checkpoint(format!("{e}")))?;
    let width_base = r.u32()? as usize;
    let input_shape = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let class_count = r.u32()? as usize;
    let name_count = r.u16()? as usize;
    let mut class_names = Vec::with_capacity(name_count);
    for _ in 0..name_count {
        class_names.push(r.string()?);
    }
    if class_names.len() != class_count {
        return Err(CliError::Checkpoint(
            "class name list does not match class count".into(),
        ));
    }

    let mut model = build_preset(preset, input_shape, class_count, width_base, 0)
        .map_err(CliError::Core)?;

    let mut expected = 0usize;
    model.visit_params(|_, _, _| expected += 1);
    let entry_count = r.u32()? as usize;
    if entry_count != expected {
        return Err(CliError::Checkpoint(format!(
            "parameter entry count {entry_count} does not match architecture ({expected})"
        )));
    }
    for _ in 0..entry_count {
        let layer = r.u32()? as usize;
        let slot = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        let key = ParamKey { layer, slot };
        let tensor = model
            .param_tensor(key)
            .map_err(|_| CliError::Checkpoint(format!("no parameter at {key}")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(CliError::Checkpoint(format!(
                "shape mismatch at {key}: checkpoint has {shape:?}, preset {} expects {:?}",
                preset,
                tensor.shape()
            )));
        }
        model.set_param_data(key, data).map_err(CliError::Core)?;
    }
    if r.pos != body.len() {
        return Err(CliError::Checkpoint("trailing bytes after parameters".into()));
    }

    Ok((
        model,
        CheckpointMeta {
            preset,
            width_base,
            input_shape,
            class_names,
        },
    ))
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CliError::Checkpoint("invalid utf-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

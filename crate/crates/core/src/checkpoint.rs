//! Self-describing checkpoint container shared by both models.
//!
//! Layout: `VADC`, a little-endian u32 version, a u64 header length, a JSON
//! header naming the model kind, its config and every tensor's name and
//! shape, then the tensors as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cae::{CaeConfig, MotionCae};
use crate::error::{Result, VadError};
use crate::vit::{ContextVit, VitConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VADC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Appearance,
    Motion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

type Tensors = Vec<(String, Vec<usize>, Vec<f32>)>;

fn encode(kind: ModelKind, config: serde_json::Value, tensors: &Tensors) -> Result<Vec<u8>> {
    let header = Header {
        kind,
        config,
        tensors: tensors.iter().map(|(n, s, _)| TensorEntry { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| 4 * t.2.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in tensors {
        out.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

fn decode(bytes: &[u8], path: &Path) -> Result<(Header, Tensors)> {
    let corrupt = |reason: String| VadError::Corrupt { path: path.to_path_buf(), reason };
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| corrupt(format!("truncated tensor {}", t.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((t.name.clone(), t.shape.clone(), data));
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((header, tensors))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| VadError::io(path, e))
}

fn read(path: &Path, expect: ModelKind) -> Result<(serde_json::Value, Tensors)> {
    let bytes = fs::read(path).map_err(|e| VadError::io(path, e))?;
    let (header, tensors) = decode(&bytes, path)?;
    if header.kind != expect {
        return Err(VadError::Checkpoint(format!(
            "{} holds a {:?} model, expected {:?}",
            path.display(),
            header.kind,
            expect
        )));
    }
    Ok((header.config, tensors))
}

pub fn save_appearance(model: &ContextVit<f32>, path: &Path) -> Result<()> {
    let bytes = encode(ModelKind::Appearance, serde_json::to_value(&model.config)?, &model.store.export_tensors())?;
    write_bytes(path, &bytes)
}

pub fn load_appearance(path: &Path) -> Result<ContextVit<f32>> {
    let (config, tensors) = read(path, ModelKind::Appearance)?;
    let config: VitConfig = serde_json::from_value(config)?;
    let mut model = ContextVit::new(config, 0)?;
    model
        .store
        .load_tensors(&tensors)
        .map_err(|e| VadError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(model)
}

pub fn save_motion(model: &MotionCae<f32>, path: &Path) -> Result<()> {
    let bytes = encode(ModelKind::Motion, serde_json::to_value(&model.config)?, &model.store.export_tensors())?;
    write_bytes(path, &bytes)
}

pub fn load_motion(path: &Path) -> Result<MotionCae<f32>> {
    let (config, tensors) = read(path, ModelKind::Motion)?;
    let config: CaeConfig = serde_json::from_value(config)?;
    let mut model = MotionCae::new(config, 0)?;
    model
        .store
        .load_tensors(&tensors)
        .map_err(|e| VadError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::Streams;

    fn small_vit(streams: Streams) -> ContextVit<f32> {
        let cfg = VitConfig { dim: 16, enc_depth: 2, dec_depth: 1, heads: 2, streams, ..VitConfig::default() };
        ContextVit::new(cfg, 5).unwrap()
    }

    #[test]
    fn appearance_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let m = small_vit(Streams::ALL);
        save_appearance(&m, &path).unwrap();
        let back = load_appearance(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.store.export_tensors(), m.store.export_tensors());
    }

    #[test]
    fn motion_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = MotionCae::<f32>::new(CaeConfig { channels: [4, 8, 8], latent: 16 }, 1).unwrap();
        save_motion(&m, &path).unwrap();
        assert_eq!(load_motion(&path).unwrap().store.export_tensors(), m.store.export_tensors());
        assert!(matches!(load_appearance(&path), Err(VadError::Checkpoint(_))));
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_appearance(&small_vit(Streams::NONE), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_appearance(&path), Err(VadError::Corrupt { .. })));
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let m = small_vit(Streams::ALL);
        let mut tensors = m.store.export_tensors();
        tensors[0].1 = vec![tensors[0].2.len()];
        let bytes = encode(ModelKind::Appearance, serde_json::to_value(&m.config).unwrap(), &tensors).unwrap();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_appearance(&path), Err(VadError::Checkpoint(_))));
    }
}

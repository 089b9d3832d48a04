//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SWVR1"
//! u64 config_len, config_len bytes of canonical JSON ModelConfig
//! u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank × u64 dims,
//!             product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{FusionModel, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::run::{canonical_json, config_hash};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SWVR1";

pub fn save_checkpoint(model: &FusionModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = canonical_json(model.config())?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint. When `expected` is given, the stored configuration
/// must hash to the same value.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<FusionModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: ModelConfig = serde_json::from_str(cfg_text)?;
    if let Some(expected) = expected {
        let (want, got) = (config_hash(expected)?, config_hash(&config)?);
        if want != got {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {got}, requested {want}"
            )));
        }
    }
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
        names.push(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    FusionModel::from_store(config, ParamStore::from_parts(names, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            vocab_size: 10,
            d_raw: 3,
            max_transcript_len: 6,
            max_visual_len: 4,
            max_summary_len: 5,
            bvla_layers: [1].into(),
            sdm_layers: [1].into(),
            variant: Variant::SwrFromSummary,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swvr");
        let model = FusionModel::new(tiny(), 9).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(&tiny())).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(&std::fs::read(&path).unwrap()[..5], b"SWVR1");
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swvr");
        save_checkpoint(&FusionModel::new(tiny(), 1).unwrap(), &path).unwrap();
        let mut other = tiny();
        other.d_ff = 16;
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.swvr");
        save_checkpoint(&FusionModel::new(tiny(), 1).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}

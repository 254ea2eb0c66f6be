//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DIFD-CKPT-1\n"
//! u64 metadata length, metadata bytes (UTF-8 JSON, opaque to this module)
//! u32 parameter count
//! per parameter:
//!   u32 name length, name bytes
//!   u8  partition (0 = feature_extractor, 1 = domain_classifier)
//!   u8  trainable
//!   u32 frozen row count, u64 rows...
//!   u32 rank, u64 dims...
//!   f64 values...
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParamStore, Partition};
use super::tensor::Tensor;
use crate::error::{DifdError, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"DIFD-CKPT-1\n";

pub fn encode_checkpoint(store: &ParamStore, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.partition {
            Partition::FeatureExtractor => 0,
            Partition::DomainClassifier => 1,
        });
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.frozen_rows.len() as u32).to_le_bytes());
        for &r in &p.frozen_rows {
            out.extend_from_slice(&(r as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DifdError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, String)> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(DifdError::Checkpoint("missing DIFD-CKPT-1 header".into()));
    }
    let mut c = Cursor {
        buf: bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let meta_len = c.u64()? as usize;
    let metadata = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| DifdError::Checkpoint("metadata is not UTF-8".into()))?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| DifdError::Checkpoint("parameter name is not UTF-8".into()))?;
        let partition = match c.u8()? {
            0 => Partition::FeatureExtractor,
            1 => Partition::DomainClassifier,
            other => return Err(DifdError::Checkpoint(format!("bad partition tag {other} for `{name}`"))),
        };
        let trainable = c.u8()? != 0;
        let n_frozen = c.u32()? as usize;
        let frozen = (0..n_frozen).map(|_| c.u64().map(|r| r as usize)).collect::<Result<Vec<_>>>()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| DifdError::Checkpoint(format!("`{name}`: {e}")))?;
        store.register(name.clone(), value, partition)?;
        store.set_trainable(&name, trainable)?;
        store.freeze_rows(&name, &frozen)?;
    }
    if c.pos != bytes.len() {
        return Err(DifdError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((store, metadata))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, metadata: &str) -> Result<()> {
    let bytes = encode_checkpoint(store, metadata);
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| DifdError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| DifdError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DifdError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DifdError::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Versioned binary checkpoint container: parameter id -> shape -> values,
//! with a caller-supplied JSON header (config hash, seed, model config).
//!
//! Layout, little-endian throughout:
//!   magic "RGCP" | version u32 | header_len u32 | header JSON bytes |
//!   n_params u32 | per param: name_len u32, name, requires_grad u8,
//!   rank u32, dims u32*rank, values f64*numel

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumericError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RGCP";
const VERSION: u32 = 1;

/// Write `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so readers never observe a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, header: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| NumericError::Checkpoint(format!("header serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(p.requires_grad as u8);
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(NumericError::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumericError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| NumericError::Checkpoint(format!("header parse: {e}")))?;
    let n_params = r.u32()? as usize;

    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| NumericError::Checkpoint(format!("param name: {e}")))?
            .to_string();
        let requires_grad = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let chunk = r.take(8)?;
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.insert(&name, Tensor::new(shape, data)?)?;
        params.get_mut(&name)?.requires_grad = requires_grad;
    }
    Ok((header, params))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NumericError::Checkpoint("truncated file".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

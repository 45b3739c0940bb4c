//! Binary checkpoint format for [`NamgModel`].
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! ```text
//! magic        8 bytes   b"NAMGCKPT"
//! version      u32       1
//! config_len   u32       length of the JSON config block
//! config       bytes     NamgConfig as JSON (UTF-8)
//! tensor_count u32
//! per tensor:
//!   name_len   u32
//!   name       bytes     UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows*cols f64, row-major
//! ```
//!
//! Tensor shapes depend only on the config, never on the problem size, so
//! one checkpoint applies at every resolution.

use crate::autodiff::Mat;
use crate::error::{NeuralError, Result};
use crate::namg::{NamgConfig, NamgModel};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"NAMGCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &NamgModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    put_len(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_len(&mut out, model.params().len())?;
    for (name, m) in model.named_params() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, m.nrows())?;
        put_len(&mut out, m.ncols())?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| NeuralError::Checkpoint(format!("length {n} overflows u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NeuralError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamgModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic header".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let config: NamgConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NeuralError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let total = rows
            .checked_mul(cols)
            .filter(|&t| t * 8 <= bytes.len())
            .ok_or_else(|| NeuralError::Checkpoint(format!("{name}: implausible shape {rows}x{cols}")))?;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(r.f64()?);
        }
        named.push((name, Mat::from_row_slice(rows, cols, &values)));
    }
    if r.pos != bytes.len() {
        return Err(NeuralError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    NamgModel::from_params(config, named)
}

pub fn save(path: impl AsRef<Path>, model: &NamgModel) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NamgModel> {
    decode(&std::fs::read(path)?)
}

//! `PTPK` checkpoints: little-endian, `"PTPK"`, `u32` version, `u32` count,
//! then per parameter `u32` name length, name bytes, `u8` trainable flag,
//! `u32` rank, `u32` dims, and the `f64` data in row-major order.

use thiserror::Error;

use super::{Parameter, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTPK";
const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic at byte 0: expected \"PTPK\"")]
    BadMagic,
    #[error("unsupported checkpoint version {version} at byte 4")]
    BadVersion { version: u32 },
    #[error("checkpoint truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("parameter name at byte {offset} is not valid UTF-8")]
    BadName { offset: usize },
    #[error("trailing bytes after last parameter at byte {offset}")]
    TrailingBytes { offset: usize },
}

pub fn write_checkpoint<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Vec<u8> {
    let params: Vec<&Parameter> = params.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n - (self.bytes.len() - self.pos) });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Parameter>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { version });
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: name_at })?
            .to_string();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated { offset: r.pos, needed: usize::MAX })?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(shape, data).expect("length matches shape by construction");
        params.push(Parameter { name, tensor, trainable });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes { offset: r.pos });
    }
    Ok(params)
}

/// Canonical bytes of the frozen parameters only, sorted by name, for
/// byte-level comparison of backbones across checkpoints.
pub fn frozen_blob(store: &ParamStore) -> Vec<u8> {
    let mut frozen: Vec<&Parameter> = store.iter().map(|(_, p)| p).filter(|p| !p.trainable).collect();
    frozen.sort_by(|a, b| a.name.cmp(&b.name));
    write_checkpoint(frozen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Parameter> {
        vec![
            Parameter {
                name: "stage1.block1.attn.q.weight".into(),
                tensor: Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, f64::MIN_POSITIVE]).unwrap(),
                trainable: false,
            },
            Parameter { name: "head.bias".into(), tensor: Tensor::new(vec![1], vec![0.125]).unwrap(), trainable: true },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = sample();
        let bytes = write_checkpoint(&params);
        assert_eq!(&bytes[..4], b"PTPK");
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in params.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert!(a.tensor.bit_eq(&b.tensor));
        }
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = write_checkpoint(&sample());
        assert_eq!(read_checkpoint(b"NOPE"), Err(CheckpointError::BadMagic));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(read_checkpoint(&v2), Err(CheckpointError::BadVersion { version: 2 }));
        let err = read_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }));
        assert!(err.to_string().contains("byte"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(read_checkpoint(&extra), Err(CheckpointError::TrailingBytes { offset: bytes.len() }));
    }
}

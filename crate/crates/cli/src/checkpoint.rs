//! Binary checkpoint.
//!
//! `STSNCKPT` | version u32 | payload length u64 | payload | CRC32(payload) u32, where
//! the payload is the JSON model config (u32 length + bytes), a u32 record
//! count and, per tensor, name (u16 length + UTF-8) | rank u16 | dims u32 × rank | f64 × n.
//! Everything is little-endian.

use std::fs;
use std::path::Path;

use stsn_core::{ModelConfig, Scalar, StsnParams, Tensor};

use crate::error::CliError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STSNCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Io("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Snapshot of `params`; values are widened to f64 losslessly.
    pub fn from_params<T: Scalar>(config: &ModelConfig, params: &StsnParams<T>) -> Self {
        Self {
            config: config.clone(),
            tensors: params.named_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect(),
        }
    }

    /// Rebuilds parameters for the stored config; every tensor must be present with matching dims.
    pub fn to_params<T: Scalar>(&self) -> Result<StsnParams<T>, CliError> {
        let mut params = StsnParams::<T>::init(&self.config, 0).map_err(|e| CliError::Compat(e.to_string()))?;
        if params.named_tensors().len() != self.tensors.len() {
            return Err(CliError::Compat(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                self.tensors.len(),
                params.named_tensors().len()
            )));
        }
        params
            .load_named(|name| self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.cast()))
            .map_err(|e| CliError::Compat(e.to_string()))?;
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let config = serde_json::to_vec(&self.config).expect("model config serializes");
        payload.extend_from_slice(&(config.len() as u32).to_le_bytes());
        payload.extend_from_slice(&config);
        payload.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(t.rank() as u16).to_le_bytes());
            for &d in t.dims() {
                payload.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::Compat("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CliError::Compat(format!("unsupported checkpoint version {version}")));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| CliError::Io("checkpoint length overflows".into()))?;
        let payload = r.take(len)?;
        let crc = r.u32()?;
        if r.at != bytes.len() {
            return Err(CliError::Io("trailing bytes after checkpoint".into()));
        }
        if crc32fast::hash(payload) != crc {
            return Err(CliError::Io("checkpoint checksum mismatch".into()));
        }
        let mut p = Reader { bytes: payload, at: 0 };
        let n = p.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(p.take(n)?).map_err(|e| CliError::Compat(format!("checkpoint config: {e}")))?;
        let count = p.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = p.u16()? as usize;
            let name = String::from_utf8(p.take(n)?.to_vec()).map_err(|_| CliError::Io("tensor name is not UTF-8".into()))?;
            let rank = p.u16()? as usize;
            let dims = (0..rank).map(|_| p.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = dims.iter().product();
            let raw = p.take(len.checked_mul(8).ok_or_else(|| CliError::Io("tensor too large".into()))?)?;
            let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(&dims, values).map_err(|e| CliError::Io(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if p.at != payload.len() {
            return Err(CliError::Io("unparsed bytes in checkpoint payload".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_channels: 4,
            image_h: 16,
            image_w: 16,
            embed_channels: [2, 2, 4],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = small();
        let params = StsnParams::<f64>::init(&cfg, 9).unwrap();
        let ck = Checkpoint::from_params(&cfg, &params);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let p2: StsnParams<f64> = back.to_params().unwrap();
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(p2.named_tensors()) {
            assert!(a.bit_eq(b));
        }
        // f32 parameters survive the f64 detour exactly
        let p32 = StsnParams::<f32>::init(&cfg, 9).unwrap();
        let back32: StsnParams<f32> = Checkpoint::from_params(&cfg, &p32).to_params().unwrap();
        for ((_, a), (_, b)) in p32.named_tensors().iter().zip(back32.named_tensors()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn corruption_and_versions_are_detected() {
        let cfg = small();
        let bytes = Checkpoint::from_params(&cfg, &StsnParams::<f64>::init(&cfg, 1).unwrap()).to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CliError::Io(_))));
        let mut future = bytes.clone();
        future[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&future), Err(CliError::Compat(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CliError::Io(_))));
    }

    #[test]
    fn architecture_mismatch_is_incompatible() {
        let cfg = small();
        let mut ck = Checkpoint::from_params(&cfg, &StsnParams::<f64>::init(&cfg, 1).unwrap());
        ck.config.feature_channels = 6;
        assert!(matches!(ck.to_params::<f64>(), Err(CliError::Compat(_))));
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "EMCK"                      4 bytes magic
//! version                     u32 LE
//! config_len                  u64 LE
//! config                      UTF-8 JSON, config_len bytes
//! repeated until end of file, in canonical weight order:
//!   name_len  u64 LE, name UTF-8
//!   rank      u64 LE, dims u64 LE × rank
//!   values    f64 LE × product(dims)
//! ```

use std::path::Path;

use super::{weight_names, weight_shapes, ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serialises");
        let mut out = Vec::with_capacity(16 + config.len() + self.param_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        for (name, tensor) in self.named_tensors() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
            for &dim in tensor.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing EMCK magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        config.validate()?;

        let names = weight_names(config.n_layers);
        let shapes: Vec<Vec<usize>> = weight_shapes(&config).iter().cloned().collect();
        let mut tensors = Vec::with_capacity(names.len());
        while !r.done() {
            let i = tensors.len();
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if names.get(i).map(String::as_str) != Some(name) {
                return Err(Error::Format(format!("unexpected tensor {name:?} at slot {i}")));
            }
            let rank = r.u64()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != shapes[i] {
                return Err(Error::Format(format!("{name}: shape {dims:?}, expected {:?}", shapes[i])));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(dims, data)?);
        }
        if tensors.len() != names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, expected {}",
                tensors.len(),
                names.len()
            )));
        }
        Ok(ModelParams { weights: Weights::from_canonical(tensors, config.n_layers)?, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelParams::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        let c = ModelConfig { d_model: 8, n_heads: 2, n_layers: 1, max_seq_len: 4, ..ModelConfig::default() };
        ModelParams::init(&c, 5).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = tiny().to_bytes();
        assert_eq!(&bytes[..4], b"EMCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(cfg.d_model, 8);
        let name_len = u64::from_le_bytes(bytes[16 + len..24 + len].try_into().unwrap()) as usize;
        assert_eq!(&bytes[24 + len..24 + len + name_len], b"tok_emb");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = tiny();
        let bytes = p.to_bytes();
        let q = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        for (a, b) in p.weights.iter().zip(q.weights.iter()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = tiny().to_bytes();
        assert!(matches!(ModelParams::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format(_))));
    }
}

//! Named parameter storage and its binary file format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ABCDWNET"
//! version    u32      1
//! config_len u32      byte length of the TOML config that follows
//! config     [u8]     UTF-8 TOML
//! count      u32      number of records
//! record*:
//!   path_len u16, path [u8] (UTF-8)
//!   dtype    u8       0 = f32
//!   rank     u8
//!   dims     rank x u32
//!   byte_len u64      = 4 * product(dims)
//!   payload  byte_len bytes of little-endian f32
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ABCDWNET";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "parameter shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Param { shape, data })
    }
}

/// Parameters keyed by canonical path, in model construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    params: IndexMap<String, Param>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, param: Param) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::invalid(format!("duplicate parameter {path}")));
        }
        self.params.insert(path, param);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    /// The stored key and parameter for `path`.
    pub fn entry(&self, path: &str) -> Option<(&str, &Param)> {
        self.params.get_key_value(path).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.get_mut(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Param> {
        self.params.shift_remove(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> u64 {
        self.params.values().map(|p| p.data.len() as u64).sum()
    }

    pub fn to_bytes(&self, config: &ModelConfig) -> Vec<u8> {
        let cfg = config.to_toml();
        let mut out = Vec::with_capacity(self.scalar_count() as usize * 4 + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, p) in &self.params {
            out.extend_from_slice(&(path.len() as u16).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(DTYPE_F32);
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(p.data.len() as u64 * 4).to_le_bytes());
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole file image; any truncation or trailing garbage is an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, WeightStore)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("weights", "bad magic; not a weights file"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("weights", format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::format("weights", "config is not UTF-8"))?;
        let config = ModelConfig::from_toml(cfg_text)?;
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let path_len = r.u16()? as usize;
            let path = std::str::from_utf8(r.take(path_len)?)
                .map_err(|_| Error::format("weights", "parameter path is not UTF-8"))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::format("weights", format!("{path}: unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64()? as usize;
            let expected = shape.iter().product::<usize>() * 4;
            if byte_len != expected {
                return Err(Error::format(
                    "weights",
                    format!("{path}: payload is {byte_len} bytes but shape {shape:?} needs {expected}"),
                ));
            }
            let data = r
                .take(byte_len)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(path, Param { shape, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "weights",
                format!("{} trailing bytes after last record", bytes.len() - r.pos),
            ));
        }
        Ok((config, store))
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(config)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<(ModelConfig, WeightStore)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                "weights",
                format!("truncated: needed {n} bytes at offset {} of {}", self.pos, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", Param::new(vec![2, 3], (0..6).map(|i| i as f32 * 0.1).collect()).unwrap())
            .unwrap();
        s.insert("a.bias", Param::new(vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        s.insert("b.kernels", Param::new(vec![1, 1, 1, 1, 1], vec![7.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let s = sample();
        let cfg = ModelConfig::small().with_seed(3);
        let (c2, s2) = WeightStore::from_bytes(&s.to_bytes(&cfg)).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2.paths().collect::<Vec<_>>(), ["a.weight", "a.bias", "b.kernels"]);
        for ((_, a), (_, b)) in s.iter().zip(s2.iter()) {
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(s.scalar_count(), 9);
    }

    #[test]
    fn every_truncation_fails() {
        let bytes = sample().to_bytes(&ModelConfig::small());
        for cut in [0, 4, 8, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(WeightStore::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn bad_header() {
        let mut bytes = sample().to_bytes(&ModelConfig::small());
        bytes[0] = b'X';
        assert!(WeightStore::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes(&ModelConfig::small());
        bytes[8] = 9;
        assert!(WeightStore::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn duplicate_and_shape_checks() {
        let mut s = sample();
        assert!(s.insert("a.bias", Param::new(vec![1], vec![0.0]).unwrap()).is_err());
        assert!(Param::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}

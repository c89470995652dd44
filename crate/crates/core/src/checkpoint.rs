//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSRR"                          magic
//! u32                             format version
//! u32                             tensor count
//! per tensor:
//!   u32 name length, name bytes   UTF-8
//!   u32 rank, rank × u64 dims
//!   product(dims) × f32 data
//! u64 config length, config bytes UTF-8 echo of the run configuration
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSRR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64, field: &'static str) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", field, format!("implausible size {v}")))
    }
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor<f32>)>, config: impl Into<String>) -> Self {
        Self {
            tensors,
            config: config.into(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("checkpoint", "magic", "not an SSRR checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                "version",
                format!("version {version}, this build reads {VERSION}"),
            ));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.u32("name length")?;
            let n = r.len(u64::from(n), "name length")?;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::format("checkpoint", "name", "not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")?;
            let rank = r.len(u64::from(rank), "rank")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dims")?;
                shape.push(r.len(d, "dims")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format("checkpoint", "dims", "size overflow"))?;
            let data = r
                .take(numel, "data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format("checkpoint", "dims", e.to_string()))?;
            tensors.push((name, t));
        }
        let n = r.u64("config length")?;
        let n = r.len(n, "config length")?;
        let config = std::str::from_utf8(r.take(n, "config")?)
            .map_err(|_| Error::format("checkpoint", "config", "not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailer", "unexpected bytes after the config"));
        }
        Ok(Self { tensors, config })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// never clobbers an existing checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            vec![
                ("w".into(), Tensor::new(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]).unwrap()),
                ("step".into(), Tensor::scalar(4.0)),
            ],
            "method = relational\n",
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SSRR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { field: "version", .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { field: "magic", .. })));
    }
}

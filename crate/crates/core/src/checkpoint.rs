//! Versioned binary container for configuration text plus named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CLIPBCKP" | u32 version | u64 config length | config bytes (UTF-8 TOML)
//! u64 tensor count | per tensor: u32 name length, name bytes, u32 rank,
//!                    rank × u64 dims, numel × f64
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLIPBCKP";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.numel());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let config_len = read_u64(&mut r)? as usize;
        let config = String::from_utf8(read_bytes(&mut r, config_len)?)
            .map_err(|_| CheckpointError::Format("config block is not UTF-8".into()))?;
        let count = read_u64(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > MAX_NAME {
                return Err(CheckpointError::Format(format!("tensor name of {name_len} bytes")));
            }
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > MAX_RANK {
                return Err(CheckpointError::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| CheckpointError::Format(format!("tensor {name} is too large")))?;
            let bytes = read_bytes(&mut r, 8 * numel)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_bytes(r: &mut impl Read, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "[model]\nwidth = 4\n".into(),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap()),
                ("τ".into(), Tensor::scalar(0.07f64.ln())),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.config, sample().config);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&sample().tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice()), Err(CheckpointError::Format(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::read_from(version.as_slice()).is_err());
    }
}

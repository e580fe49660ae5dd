//! `F4DW` checkpoints.
//!
//! ```text
//! bytes 0..4   magic "F4DW"
//! u32 LE       header length H
//! H bytes      UTF-8 JSON (CheckpointHeader)
//! blobs        each tensor as little-endian f32, in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelParameters, NetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"F4DW";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetConfig,
    pub iteration: u64,
    /// Validation relative speed error at `iteration`, if measured.
    pub validation_metric: Option<f64>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters<f32>,
    pub iteration: u64,
    pub validation_metric: Option<f64>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.params.tensors();
        let header = CheckpointHeader {
            config: self.params.config,
            iteration: self.iteration,
            validation_metric: self.validation_metric,
            tensors: tensors
                .iter()
                .map(|(name, shape, _)| TensorInfo {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::new();
        for (_, _, t) in &tensors {
            buf.clear();
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut read = |buf: &mut [u8], what: &str| {
            r.read_exact(buf).map_err(|e| {
                if e.kind() == ErrorKind::UnexpectedEof {
                    Error::Truncated(format!("checkpoint ends inside {what}"))
                } else {
                    Error::io("<checkpoint>", e)
                }
            })
        };
        let mut magic = [0u8; 4];
        read(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        read(&mut len, "header length")?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 16 << 20 {
            return Err(Error::Format(format!("checkpoint header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        read(&mut json, "header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut params = ModelParameters::<f32>::zeros(header.config)?;
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let found: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != found {
            return Err(Error::Format("checkpoint tensors do not match its network config".into()));
        }
        for t in params.tensors_mut() {
            let mut bytes = vec![0u8; 4 * t.len()];
            read(&mut bytes, "tensor data")?;
            for (v, c) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Ok(Checkpoint {
            params,
            iteration: header.iteration,
            validation_metric: header.validation_metric,
        })
    }

    /// Write via a temporary file and rename, so a reader never sees a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = NetConfig {
            base_filters: 4,
            lr_resblocks: 1,
            hr_resblocks: 1,
            ..Default::default()
        };
        Checkpoint {
            params: ModelParameters::init(config, 3).unwrap(),
            iteration: 1500,
            validation_metric: Some(0.25),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"F4DW");
        assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[3] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read_from(buf.as_slice()), Err(Error::Truncated(_))));
    }
}

//! Binary checkpoint container: a JSON manifest followed by every tensor of
//! the model state as little-endian `f64`.
//!
//! Layout: `b"GZCK"`, `u32` format version, `u64` manifest length, manifest
//! bytes, `u32` tensor count, then per tensor `u32` name length, name,
//! `u32` rank, `u64` dims, data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::train::Variant;

const MAGIC: &[u8; 4] = b"GZCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Stage that produced the weights.
    pub stage: u8,
    /// Optimizer steps taken in that stage.
    pub step: usize,
    pub seed: u64,
    pub variant: Variant,
    pub lambda: Option<f64>,
    pub git_describe: String,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub state: ModelState,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let tensors = self.state.tensors();
        let mut out =
            Vec::with_capacity(manifest.len() + 8 * self.state.parameter_count(&crate::model::ParamView::all()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = r.len()?;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
        let mut state = ModelState::init(&manifest.model, 0)?;
        let count = r.u32()? as usize;
        {
            let expected = state.tensors();
            if count != expected.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} tensors, file has {count}",
                    expected.len()
                )));
            }
        }
        let shapes: Vec<Vec<usize>> = state.tensors().iter().map(|t| t.shape.clone()).collect();
        for (t, shape) in state.tensors_mut().into_iter().zip(shapes) {
            let nlen = r.u32()? as usize;
            let name =
                std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != t.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{}`, found `{name}`",
                    t.name
                )));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {dims:?}, expected {shape:?}"
                )));
            }
            let raw = r.take(8 * t.data.len())?;
            for (dst, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Self { manifest, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let config = ModelConfig::toy();
        let mut state = ModelState::init(&config, 3).unwrap();
        state.gaze_head.w.fill(0.25);
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                stage: 1,
                step: 7,
                seed: 3,
                variant: Variant::Shuffled,
                lambda: None,
                git_describe: "test".into(),
                model: config,
            },
            state,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}

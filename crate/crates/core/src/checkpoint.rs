//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"DMFACKPT"
//! version  u32 (= 1)
//! config   u32 byte length, then the key=value text of the run config
//! count    u32 number of parameter tensors
//! per tensor:
//!   name   u16 byte length, then UTF-8 name
//!   rank   u8, then rank × u64 extents
//!   data   product(extents) × f64
//! crc32    u32 over every preceding byte
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DualMfaParameters;

const MAGIC: &[u8; 8] = b"DMFACKPT";
const VERSION: u32 = 1;

pub fn encode(params: &DualMfaParameters, config: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(DualMfaParameters, RunConfig)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = RunConfig::parse(text, RunConfig::default())?;

    let mut params = DualMfaParameters::zeros(&config.model);
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, model has {}",
            expected.len()
        )));
    }
    for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(expected) {
        let len = r.u16()? as usize;
        let stored_name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if stored_name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {stored_name}"
            )));
        }
        let rank = r.u8()? as usize;
        let stored_shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if stored_shape != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {stored_shape:?}, config needs {shape:?}"
            )));
        }
        for v in slot.data_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((params, config))
}

pub fn save(path: &Path, params: &DualMfaParameters, config: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(params, config))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DualMfaParameters, RunConfig)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}

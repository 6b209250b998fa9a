//! File formats: run configuration, checkpoints, and output artifacts.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DgError, Result};

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| DgError::Value(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DgError::Value(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Little-endian cursor that reports the byte offset of every failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| DgError::Parse {
            offset: self.pos as u64,
            msg: format!("need {n} bytes, {} remain", self.bytes.len() - self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn checked_len(&self, n: usize, width: usize) -> Result<usize> {
        n.checked_mul(width)
            .filter(|&b| b <= self.bytes.len() - self.pos)
            .ok_or_else(|| DgError::Parse {
                offset: self.pos as u64,
                msg: format!("{n} elements of {width} bytes exceed the {} remaining", self.bytes.len() - self.pos),
            })
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = self.checked_len(n, 4)?;
        Ok(self.bytes(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = self.checked_len(n, 8)?;
        Ok(self.bytes(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let len = self.checked_len(n, 4)?;
        Ok(self.bytes(len)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(DgError::Parse {
                offset: self.pos as u64,
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

//! Named-tensor container used for checkpoints, classifiers and cached
//! statistics.
//!
//! Layout: magic `FCKP`, u32 LE length + UTF-8 config text, u32 LE entry
//! count, then per entry a u32 LE length-prefixed UTF-8 name followed by one
//! FCT1 tensor block.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_any, AnyTensor, Element, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FCKP";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub config: String,
    pub entries: Vec<(String, AnyTensor)>,
}

fn len_u32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Config(format!("{what} too large for archive ({n} bytes)")))
}

impl Archive {
    pub fn new(config: impl Into<String>) -> Self {
        Archive {
            config: config.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) {
        self.entries.push((name.into(), t.into()));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The entry `name`, which must hold elements of type `T`.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>>
    where
        AnyTensor: TryInto<Tensor<T>, Error = AnyTensor>,
    {
        let any = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("archive has no entry `{name}`")))?;
        any.clone().try_into().map_err(|other: AnyTensor| {
            Error::Config(format!(
                "entry `{name}` holds {} data, expected {}",
                other.dtype(),
                T::DTYPE
            ))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&len_u32(self.config.len(), "config")?);
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&len_u32(self.entries.len(), "entry count")?);
        for (name, t) in &self.entries {
            out.extend_from_slice(&len_u32(name.len(), "name")?);
            out.extend_from_slice(name.as_bytes());
            t.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    Error::parse(
                        *pos,
                        format!(
                            "truncated {what}: expected {n} bytes, found {}",
                            bytes.len() - *pos
                        ),
                    )
                })?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize, what: &str| -> Result<usize> {
            Ok(u32::from_le_bytes(take(pos, 4, what)?.try_into().unwrap()) as usize)
        };
        let read_str = |pos: &mut usize, what: &str| -> Result<String> {
            let start = *pos;
            let n = read_u32(pos, what)?;
            let raw = take(pos, n, what)?;
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::parse(start + 4, format!("{what} is not UTF-8")))
        };

        if take(&mut pos, 4, "magic")? != ARCHIVE_MAGIC {
            return Err(Error::parse(0, "bad magic, expected FCKP"));
        }
        let config = read_str(&mut pos, "config")?;
        let count = read_u32(&mut pos, "entry count")?;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str(&mut pos, "entry name")?;
            let mut rest = &bytes[pos..];
            let before = rest.len();
            let t = read_any(&mut rest).map_err(|e| match e {
                Error::Parse { offset, reason } => Error::Parse {
                    offset: pos + offset,
                    reason: format!("entry `{name}`: {reason}"),
                },
                other => other,
            })?;
            pos += before - rest.len();
            entries.push((name, t));
        }
        if pos != bytes.len() {
            return Err(Error::parse(
                pos,
                format!("{} trailing bytes", bytes.len() - pos),
            ));
        }
        Ok(Archive { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { offset, reason } => Error::Parse {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }
}

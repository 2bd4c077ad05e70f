//! Binary record files and atomic writes.
//!
//! Feature (`FGFT`) and embedding (`FGEM`) files share one layout, all
//! little-endian:
//!
//! ```text
//! magic[4] | u32 version = 1 | u32 count | u32 dim
//! count × ( u16 label_len | label utf-8 | dim × f32 )
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const FEATURE_MAGIC: [u8; 4] = *b"FGFT";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"FGEM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last record")]
    Trailing(usize),
    #[error("record {index} has {actual} values, header says {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("label {0:?} is longer than 65535 bytes")]
    LabelTooLong(String),
    #[error("label is not valid utf-8")]
    Utf8,
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A labelled row of a record file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: String,
    pub values: Vec<f32>,
}

pub fn encode_records(magic: [u8; 4], dim: usize, records: &[Record]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(16 + records.len() * (dim * 4 + 16));
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (index, r) in records.iter().enumerate() {
        if r.values.len() != dim {
            return Err(FormatError::Dimension {
                index,
                expected: dim,
                actual: r.values.len(),
            });
        }
        let len = u16::try_from(r.label.len()).map_err(|_| FormatError::LabelTooLong(r.label.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(r.label.as_bytes());
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(self.pos))?;
        let s = self.bytes.get(self.pos..end).ok_or(FormatError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Returns `(dim, records)`.
pub fn decode_records(magic: [u8; 4], bytes: &[u8]) -> Result<(usize, Vec<Record>), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let label = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Utf8)?
            .to_owned();
        let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        records.push(Record { label, values });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.pos));
    }
    Ok((dim, records))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FormatError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| FormatError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| FormatError::io(path, e))?;
    tmp.persist(path).map_err(|e| FormatError::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|e| FormatError::io(path, e))
}

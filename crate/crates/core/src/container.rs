//! Binary record container for tensors.
//!
//! One format backs both model checkpoints and rendered-corpus files: a
//! four-byte magic `PFRM`, a little-endian `u32` version, then records
//! until end of file. Each record is
//!
//! ```text
//! name_len: u32 LE
//! name:     name_len bytes of UTF-8
//! rank:     u32 LE
//! dims:     rank × u64 LE
//! payload:  prod(dims) × f64 LE
//! ```
//!
//! Readers reject unknown magic or versions and truncated payloads, so a
//! corrupted file fails loudly instead of producing a silently wrong model.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PFRM";
pub const VERSION: u32 = 1;

/// Upper bound accepted for a single dimension or name length; guards
/// against allocating absurd buffers for corrupt headers.
const SANITY_LIMIT: u64 = 1 << 32;

/// A named tensor: shape plus row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Record {
        let record = Record {
            name: name.into(),
            shape,
            data,
        };
        assert_eq!(
            record.shape.iter().product::<usize>(),
            record.data.len(),
            "record {:?}: shape does not match payload length",
            record.name
        );
        record
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} is not a record container (bad magic)")]
    BadMagic { path: String },
    #[error("{path} has unsupported container version {found} (supported: {VERSION})")]
    BadVersion { path: String, found: u32 },
    #[error("{path} is truncated or corrupt: {detail}")]
    Corrupt { path: String, detail: String },
}

/// Writes all records to `path`, replacing any existing file.
pub fn write_records(path: &Path, records: &[Record]) -> io::Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for record in records {
        let name_bytes = record.name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(record.shape.len() as u32).to_le_bytes())?;
        for &dim in &record.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &value in &record.data {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Reads every record in `path`, in file order.
pub fn read_records(path: &Path) -> Result<Vec<Record>, ContainerError> {
    let display = path.display().to_string();
    let io_err = |source| ContainerError::Io {
        path: display.clone(),
        source,
    };
    let corrupt = |detail: &str| ContainerError::Corrupt {
        path: display.clone(),
        detail: detail.to_string(),
    };

    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic { path: display });
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != VERSION {
        return Err(ContainerError::BadVersion {
            path: display,
            found: version,
        });
    }

    let mut records = Vec::new();
    loop {
        // A record boundary is the only place EOF is legal.
        let name_len = match read_u32(&mut r) {
            Ok(n) => n as u64,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(e)),
        };
        if name_len > SANITY_LIMIT {
            return Err(corrupt("record name length out of range"));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)
            .map_err(|_| corrupt("record name cut short"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("record name is not UTF-8"))?;

        let rank = read_u32(&mut r).map_err(|_| corrupt("missing rank"))? as usize;
        if rank > 8 {
            return Err(corrupt("record rank out of range"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let dim = read_u64(&mut r).map_err(|_| corrupt("missing dimension"))?;
            if dim > SANITY_LIMIT {
                return Err(corrupt("dimension out of range"));
            }
            numel = numel
                .checked_mul(dim)
                .filter(|&n| n <= SANITY_LIMIT)
                .ok_or_else(|| corrupt("payload size out of range"))?;
            shape.push(dim as usize);
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| corrupt("payload cut short"))?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<Record> {
        vec![
            Record::new("weights", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f64::MIN_POSITIVE, 9.0]),
            Record::new("bias", vec![3], vec![0.5, 0.25, -0.125]),
            Record::new("scalar", vec![], vec![42.0]),
        ]
    }

    #[test]
    fn round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.bin");
        let records = sample_records();
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_record_list_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        write_records(&path, &[]).unwrap();
        assert_eq!(read_records(&path).unwrap(), Vec::<Record>::new());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_records(&path).unwrap_err(),
            ContainerError::BadMagic { .. }
        ));
    }

    #[test]
    fn rejects_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = MAGIC.to_vec();
        bytes.extend(7u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_records(&path).unwrap_err(),
            ContainerError::BadVersion { found: 7, .. }
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.bin");
        write_records(&path, &sample_records()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_records(&path).unwrap_err(),
            ContainerError::Corrupt { .. }
        ));
    }

    #[test]
    fn file_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        write_records(&path, &[Record::new("w", vec![1], vec![1.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = Vec::new();
        expected.extend(b"PFRM");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes()); // name length
        expected.extend(b"w");
        expected.extend(1u32.to_le_bytes()); // rank
        expected.extend(1u64.to_le_bytes()); // dim
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }
}

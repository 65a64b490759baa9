//! The `OODM` binary matrix container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "OODM"
//!      4     1  version (1)
//!      5     1  dtype: 1 = f32, 2 = u32, 3 = f64
//!      6     2  reserved, must be 0
//!      8     8  rows (u64)
//!     16     8  cols (u64)
//!     24     n  payload, row-major, rows*cols elements
//!   24+n     8  FNV-1a 64 of the payload bytes (u64)
//! ```
//!
//! Every multi-byte field, including payload elements, is little-endian.

use std::fs;
use std::path::Path;

use crate::error::{OodError, Result};
use crate::hash::fnv1a64;

pub const MAGIC: &[u8; 4] = b"OODM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const TRAILER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U32 = 2,
    F64 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U32),
            3 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::U32(_) => DType::U32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoded container: shape plus typed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: u64,
    pub cols: u64,
    pub payload: Payload,
}

/// Serializes a container. Returns the bytes and the payload checksum.
pub fn encode(rows: u64, cols: u64, payload: &Payload) -> Result<(Vec<u8>, u64)> {
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| OodError::Dimension(format!("{rows}x{cols} overflows")))?;
    if expected != payload.len() as u64 {
        return Err(OodError::Dimension(format!(
            "{rows}x{cols} container given {} elements",
            payload.len()
        )));
    }
    let width = payload.dtype().width();
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() * width + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(payload.dtype() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    let checksum = fnv1a64(&out[HEADER_LEN..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok((out, checksum))
}

/// Parses a container, verifying magic, version, length and checksum.
/// `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(RawMatrix, u64)> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(OodError::format(path, "file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(OodError::format(path, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(OodError::format(
            path,
            format!("unsupported container version {}", bytes[4]),
        ));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| OodError::format(path, format!("unknown dtype code {}", bytes[5])))?;
    if u16::from_le_bytes([bytes[6], bytes[7]]) != 0 {
        return Err(OodError::format(path, "reserved field is not zero"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width() as u64))
        .ok_or_else(|| OodError::format(path, "shape overflows"))?;
    if (bytes.len() - HEADER_LEN - TRAILER_LEN) as u64 != payload_len {
        return Err(OodError::format(
            path,
            format!(
                "payload is {} bytes, header implies {payload_len}",
                bytes.len() - HEADER_LEN - TRAILER_LEN
            ),
        ));
    }
    let end = HEADER_LEN + payload_len as usize;
    let body = &bytes[HEADER_LEN..end];
    let stored = u64::from_le_bytes(bytes[end..end + 8].try_into().expect("8 bytes"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(OodError::Checksum {
            path: path.to_path_buf(),
            expected: stored,
            actual,
        });
    }
    let payload = match dtype {
        DType::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::U32 => Payload::U32(
            body.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::F64 => Payload::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    Ok((RawMatrix { rows, cols, payload }, actual))
}

pub fn write_file(path: &Path, rows: u64, cols: u64, payload: &Payload) -> Result<u64> {
    let (bytes, checksum) = encode(rows, cols, payload)?;
    fs::write(path, bytes).map_err(|e| OodError::io(path, e))?;
    Ok(checksum)
}

pub fn read_file(path: &Path) -> Result<(RawMatrix, u64)> {
    let bytes = fs::read(path).map_err(|e| OodError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout_is_fixed() {
        let (bytes, _) = encode(2, 3, &Payload::F32(vec![0.0; 6])).unwrap();
        assert_eq!(&bytes[0..4], b"OODM");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 24 + 8);
    }

    #[test]
    fn known_bytes_for_single_value() {
        let (bytes, checksum) = encode(1, 1, &Payload::F32(vec![1.0])).unwrap();
        assert_eq!(&bytes[24..28], &[0x00, 0x00, 0x80, 0x3f]);
        assert_eq!(checksum, fnv1a64(&[0x00, 0x00, 0x80, 0x3f]));
        assert_eq!(&bytes[28..36], &checksum.to_le_bytes());
    }

    #[test]
    fn zeros_round_trip() {
        let payload = Payload::F32(vec![0.0; 6]);
        let (bytes, sum) = encode(2, 3, &payload).unwrap();
        let (raw, sum2) = decode(&bytes, p()).unwrap();
        assert_eq!(raw.rows, 2);
        assert_eq!(raw.cols, 3);
        assert_eq!(raw.payload, payload);
        assert_eq!(sum, sum2);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let (mut bytes, _) = encode(2, 2, &Payload::U32(vec![1, 2, 3, 4])).unwrap();
        bytes[HEADER_LEN + 5] ^= 0x01;
        assert!(matches!(decode(&bytes, p()), Err(OodError::Checksum { .. })));
    }

    #[test]
    fn truncated_and_bad_magic() {
        let (bytes, _) = encode(1, 2, &Payload::F64(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1], p()),
            Err(OodError::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p()), Err(OodError::Format { .. })));
        let mut bad = bytes;
        bad[5] = 9;
        assert!(matches!(decode(&bad, p()), Err(OodError::Format { .. })));
    }

    #[test]
    fn shape_must_match_payload() {
        assert!(encode(2, 2, &Payload::F32(vec![0.0; 3])).is_err());
    }
}

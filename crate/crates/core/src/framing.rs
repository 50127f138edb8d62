//! Shared container layout for binary artifacts:
//! `magic | u32 LE header length | UTF-8 JSON header | payload | u32 LE CRC32`.
//! The CRC covers every byte before it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_framed(path: &Path, magic: &[u8], header: &[u8], payload: &[u8]) -> Result<()> {
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::InvalidArgument("header larger than 4 GiB".into()))?;
    let mut buf = Vec::with_capacity(magic.len() + 4 + header.len() + payload.len() + 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(header);
    buf.extend_from_slice(payload);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads only the magic and the JSON header.
pub(crate) fn read_header(path: &Path, magic: &[u8]) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut m = vec![0u8; magic.len()];
    f.read_exact(&mut m).map_err(|_| Error::Format {
        path: path.into(),
        reason: "file shorter than magic".into(),
    })?;
    if m != magic {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&m)),
        });
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len).map_err(|_| Error::Format {
        path: path.into(),
        reason: "missing header length".into(),
    })?;
    let len = u32::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    f.read_exact(&mut header).map_err(|_| Error::Format {
        path: path.into(),
        reason: format!("header truncated (declared {len} bytes)"),
    })?;
    Ok(header)
}

pub(crate) struct Framed {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

/// Reads a whole framed file. `payload_len` maps the parsed header bytes to
/// the payload length it declares, so truncation can be reported precisely.
pub(crate) fn read_framed<F>(path: &Path, magic: &[u8], payload_len: F) -> Result<Framed>
where
    F: FnOnce(&[u8]) -> Result<usize>,
{
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
        return Err(Error::Format {
            path: path.into(),
            reason: "bad or missing magic".into(),
        });
    }
    let hl_at = magic.len();
    let header_len = u32::from_le_bytes(bytes[hl_at..hl_at + 4].try_into().unwrap()) as usize;
    let header_start = hl_at + 4;
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header_end as u64,
            actual: bytes.len() as u64,
        });
    }
    let header = bytes[header_start..header_end].to_vec();
    let plen = payload_len(&header)?;
    let expected = header_end + plen + 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    Ok(Framed {
        header,
        payload: bytes[header_end..header_end + plen].to_vec(),
    })
}

pub(crate) fn f64s_to_le(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

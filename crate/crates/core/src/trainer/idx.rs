//! IDX files: big-endian magic `0x0000_08NN` (u8 payload, NN dimensions),
//! NN big-endian u32 extents, then the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const LABELS_MAGIC: u32 = 0x0801;
pub const IMAGES_MAGIC: u32 = 0x0803;
pub const IMAGES_CHW_MAGIC: u32 = 0x0804;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn fmt(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

pub fn parse(bytes: &[u8]) -> Result<IdxArray> {
    let word = |at: usize, what: &str| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fmt(at, format!("truncated {what}")))
    };
    let magic = word(0, "magic")?;
    if magic >> 8 != 0x08 || !matches!(magic, LABELS_MAGIC | IMAGES_MAGIC | IMAGES_CHW_MAGIC) {
        return Err(fmt(0, format!("bad magic 0x{magic:08x}; expected unsigned-byte IDX with 1, 3 or 4 dimensions")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank).map(|i| word(4 + 4 * i, "dimension sizes").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < n {
        return Err(fmt(bytes.len(), format!("truncated payload: {n} bytes expected, {have} present")));
    }
    if have > n {
        return Err(fmt(start + n, "trailing bytes after payload"));
    }
    Ok(IdxArray { dims, data: bytes[start..].to_vec() })
}

pub fn read(path: &Path) -> Result<IdxArray> {
    parse(&crate::io::read(path)?)
}

pub fn encode(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let magic = match dims.len() {
        1 => LABELS_MAGIC,
        3 => IMAGES_MAGIC,
        4 => IMAGES_CHW_MAGIC,
        r => return Err(Error::Input(format!("IDX rank {r} is not supported"))),
    };
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Input("IDX payload does not match dimensions".into()));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn write(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    crate::io::write_atomic(path, &encode(dims, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let data: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 251) as u8).collect();
        let bytes = encode(&[4, 28, 28], &data).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = parse(&bytes).unwrap();
        assert_eq!(back.dims, vec![4, 28, 28]);
        assert_eq!(back.data, data);

        assert!(
            matches!(parse(&bytes[..bytes.len() - 1]), Err(Error::Format { offset, .. }) if offset as usize == bytes.len() - 1)
        );
        assert!(matches!(parse(&[0, 0, 9, 3]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse(&[0, 0, 8, 3, 0, 0]), Err(Error::Format { offset: 4, .. })));
        let mut long = bytes.clone();
        long.push(1);
        assert!(matches!(parse(&long), Err(Error::Format { .. })));
    }
}

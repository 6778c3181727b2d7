//! `VVOL0001` volumes: an 8-byte magic, a dtype byte (0 = f32, 1 = binary
//! u8), three reserved bytes, u32 extents and little-endian data with the
//! first axis varying fastest.

use std::path::Path;

use comma_core::volume::{flat_index, BinaryMask3D, Volume};

use crate::error::{read, write, IoError, Result};

pub const MAGIC: &[u8; 8] = b"VVOL0001";
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Real(Volume),
    Binary(BinaryMask3D),
}

impl VolumeFile {
    pub fn extents(&self) -> [usize; 3] {
        match self {
            VolumeFile::Real(v) => v.extents(),
            VolumeFile::Binary(m) => m.extents(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            VolumeFile::Real(_) => "f32",
            VolumeFile::Binary(_) => "binary",
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self {
            VolumeFile::Real(v) => Ok(v),
            other => Err(IoError::WrongDtype { expected: "f32", found: other.kind() }),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask3D> {
        match self {
            VolumeFile::Binary(m) => Ok(m),
            other => Err(IoError::WrongDtype { expected: "binary", found: other.kind() }),
        }
    }
}

/// File positions in memory order.
fn file_order(ext: [usize; 3]) -> impl Iterator<Item = usize> {
    let [h, w, d] = ext;
    (0..d).flat_map(move |k| (0..w).flat_map(move |j| (0..h).map(move |i| flat_index(ext, i, j, k))))
}

fn header(dtype: u8, ext: [usize; 3], data_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[dtype, 0, 0, 0]);
    for e in ext {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let ext = v.extents();
    let mut out = header(0, ext, 4 * v.data().len());
    for i in file_order(ext) {
        out.extend_from_slice(&v.data()[i].to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &BinaryMask3D) -> Vec<u8> {
    let ext = m.extents();
    let mut out = header(1, ext, m.len());
    out.extend(file_order(ext).map(|i| m.data()[i] as u8));
    out
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Truncated { offset: bytes.len(), expected: HEADER_LEN, actual: bytes.len() });
    }
    if &bytes[..8] != MAGIC {
        return Err(IoError::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let dtype = bytes[8];
    let width = match dtype {
        0 => 4,
        1 => 1,
        value => return Err(IoError::UnknownDtype { offset: 8, value }),
    };
    let ext: [usize; 3] = std::array::from_fn(|a| {
        let o = 12 + 4 * a;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    });
    let expected = ext
        .iter()
        .try_fold(width, |acc: usize, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(IoError::InvalidValue { offset: 12, value: format!("extents {ext:?}") })?;
    if bytes.len() < expected {
        return Err(IoError::Truncated { offset: bytes.len(), expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(IoError::Trailing { offset: expected, extra: bytes.len() - expected });
    }
    let body = &bytes[HEADER_LEN..];
    let n = ext.iter().product::<usize>();
    if dtype == 0 {
        let mut data = vec![0.0f32; n];
        for (f, m) in file_order(ext).enumerate() {
            data[m] = f32::from_le_bytes(body[4 * f..4 * f + 4].try_into().expect("4 bytes"));
        }
        Ok(VolumeFile::Real(Volume::new(ext, data)?))
    } else {
        let mut data = vec![false; n];
        for (f, m) in file_order(ext).enumerate() {
            data[m] = match body[f] {
                0 => false,
                1 => true,
                v => return Err(IoError::InvalidValue { offset: HEADER_LEN + f, value: v.to_string() }),
            };
        }
        Ok(VolumeFile::Binary(BinaryMask3D::new(ext, data)?))
    }
}

pub fn read_file(path: &Path) -> Result<VolumeFile> {
    decode(&read(path)?).map_err(|e| e.in_file(path))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    read_file(path)?.into_volume().map_err(|e| e.in_file(path))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask3D> {
    read_file(path)?.into_mask().map_err(|e| e.in_file(path))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write(path, &encode_volume(v))
}

pub fn write_mask(path: &Path, m: &BinaryMask3D) -> Result<()> {
    write(path, &encode_mask(m))
}

//! MVHF binary matrix container.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `MVHF`                            |
//! | 4      | 4    | `u32` version (1 = matrix, 2 = codes)   |
//! | 8      | 1    | `u8` dtype (1 = f32, 2 = f64, 3 = u8)   |
//! | 9      | 8    | `u64` rows                              |
//! | 17     | 8    | `u64` cols                              |
//! | 25     | 8    | `u64` k (version 2 only)                |
//!
//! The row-major payload follows immediately. Version 2 carries bit-packed
//! hash codes: dtype u8, `cols` is the byte width of one packed row, `k` the
//! number of meaningful bits.

use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"MVHF";
pub const VERSION_MATRIX: u32 = 1;
pub const VERSION_CODES: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl Dtype {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            3 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens any numeric payload to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mvhf {
    pub rows: u64,
    pub cols: u64,
    /// Present only in version-2 (packed code) files.
    pub k: Option<u64>,
    pub payload: Payload,
}

#[derive(Debug, thiserror::Error)]
pub enum MvhfError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unknown dtype tag {0}")]
    Dtype(u8),
    #[error("{rows}x{cols} does not fit in memory")]
    TooLarge { rows: u64, cols: u64 },
    #[error("payload length {got} does not match {rows}x{cols}")]
    Length { got: usize, rows: u64, cols: u64 },
    #[error("truncated payload: {0}")]
    Truncated(std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Mvhf {
    pub fn matrix(rows: usize, cols: usize, payload: Payload) -> Self {
        Self {
            rows: rows as u64,
            cols: cols as u64,
            k: None,
            payload,
        }
    }

    pub fn version(&self) -> u32 {
        if self.k.is_some() {
            VERSION_CODES
        } else {
            VERSION_MATRIX
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), MvhfError> {
        let expected = self.rows.checked_mul(self.cols);
        if expected != Some(self.payload.len() as u64) {
            return Err(MvhfError::Length {
                got: self.payload.len(),
                rows: self.rows,
                cols: self.cols,
            });
        }
        w.write_all(MAGIC)?;
        w.write_all(&self.version().to_le_bytes())?;
        w.write_all(&[self.payload.dtype() as u8])?;
        w.write_all(&self.rows.to_le_bytes())?;
        w.write_all(&self.cols.to_le_bytes())?;
        if let Some(k) = self.k {
            w.write_all(&k.to_le_bytes())?;
        }
        match &self.payload {
            Payload::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.write_all(&buf)?;
            }
            Payload::F64(v) => {
                let mut buf = Vec::with_capacity(v.len() * 8);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.write_all(&buf)?;
            }
            Payload::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, MvhfError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MvhfError::Magic(magic));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION_MATRIX && version != VERSION_CODES {
            return Err(MvhfError::Version(version));
        }
        let [tag] = read_array::<1>(&mut r)?;
        let dtype = Dtype::from_tag(tag).ok_or(MvhfError::Dtype(tag))?;
        let rows = u64::from_le_bytes(read_array(&mut r)?);
        let cols = u64::from_le_bytes(read_array(&mut r)?);
        let k = if version == VERSION_CODES {
            Some(u64::from_le_bytes(read_array(&mut r)?))
        } else {
            None
        };
        let count = rows
            .checked_mul(cols)
            .and_then(|n| usize::try_from(n).ok())
            .filter(|n| n.checked_mul(dtype.width()).is_some())
            .ok_or(MvhfError::TooLarge { rows, cols })?;

        let mut bytes = vec![0u8; count * dtype.width()];
        r.read_exact(&mut bytes).map_err(MvhfError::Truncated)?;
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(bytes),
        };
        Ok(Self {
            rows,
            cols,
            k,
            payload,
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], MvhfError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let m = Mvhf::matrix(1, 2, Payload::U8(vec![7, 9]));
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MVHF");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], 3);
        assert_eq!(&buf[9..17], &1u64.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(&buf[25..], &[7, 9]);
    }

    #[test]
    fn codes_header_carries_k() {
        let m = Mvhf {
            rows: 1,
            cols: 8,
            k: Some(20),
            payload: Payload::U8(vec![0xff, 0xff, 0x0f, 0, 0, 0, 0, 0]),
        };
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[25..33], &20u64.to_le_bytes());
        assert_eq!(Mvhf::read_from(&buf[..]).unwrap(), m);
    }

    #[test]
    fn f32_and_f64_round_trip() {
        for payload in [
            Payload::F32(vec![1.5, -0.25, f32::MIN_POSITIVE]),
            Payload::F64(vec![1e-300, -2.0, std::f64::consts::PI]),
        ] {
            let m = Mvhf::matrix(3, 1, payload);
            let mut buf = Vec::new();
            m.write_to(&mut buf).unwrap();
            assert_eq!(Mvhf::read_from(&buf[..]).unwrap(), m);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Mvhf::read_from(&b"NOPE\x01\0\0\0"[..]),
            Err(MvhfError::Magic(_))
        ));
        let mut buf = Vec::new();
        Mvhf::matrix(2, 2, Payload::F64(vec![0.0; 4]))
            .write_to(&mut buf)
            .unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Mvhf::read_from(&buf[..]),
            Err(MvhfError::Truncated(_))
        ));
        let mut bad_version = Vec::new();
        Mvhf::matrix(0, 0, Payload::U8(vec![]))
            .write_to(&mut bad_version)
            .unwrap();
        bad_version[4] = 9;
        assert!(matches!(
            Mvhf::read_from(&bad_version[..]),
            Err(MvhfError::Version(9))
        ));
    }

    #[test]
    fn write_checks_length() {
        let m = Mvhf::matrix(2, 2, Payload::U8(vec![1]));
        assert!(m.write_to(Vec::new()).is_err());
    }
}

//! Minimal NPY (format 1.0) reader and writer.
//!
//! Only C-order, little-endian (or single-byte) numeric arrays are handled,
//! which is all the dataset format needs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

/// A decoded array: shape plus values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub values: Vec<f64>,
}

fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}':");
    let start = header.find(&pat)? + pat.len();
    Some(header[start..].trim_start())
}

fn parse_header(path: &Path, header: &str) -> Result<(String, bool, Vec<usize>)> {
    let descr = header_field(header, "descr")
        .and_then(|s| s.strip_prefix('\''))
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::format(path, "npy header lacks descr"))?
        .to_string();
    let fortran = header_field(header, "fortran_order")
        .map(|s| s.starts_with("True"))
        .ok_or_else(|| Error::format(path, "npy header lacks fortran_order"))?;
    let shape_src = header_field(header, "shape")
        .and_then(|s| s.strip_prefix('('))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::format(path, "npy header lacks shape"))?;
    let shape = shape_src
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad shape entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((descr, fortran, shape))
}

/// Parses an in-memory NPY document. `path` is only used in error messages.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format(path, "not an npy file"));
    }
    let major = bytes[6];
    let (hlen, hstart) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::format(path, "truncated npy header"));
            }
            (
                u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
                12,
            )
        }
        v => return Err(Error::format(path, format!("unsupported npy version {v}"))),
    };
    let header = bytes
        .get(hstart..hstart + hlen)
        .ok_or_else(|| Error::format(path, "truncated npy header"))?;
    let header = std::str::from_utf8(header).map_err(|_| Error::format(path, "header not utf-8"))?;
    let (descr, fortran, shape) = parse_header(path, header)?;
    if fortran {
        return Err(Error::format(path, "fortran-order arrays are not supported"));
    }
    let count: usize = shape.iter().product();
    let body = &bytes[hstart + hlen..];
    let width = match &descr[1..] {
        "f4" | "i4" | "u4" => 4,
        "f8" | "i8" | "u8" => 8,
        "i2" | "u2" => 2,
        "i1" | "u1" | "b1" => 1,
        other => return Err(Error::format(path, format!("unsupported dtype {other}"))),
    };
    if width > 1 && descr.starts_with('>') {
        return Err(Error::format(path, "big-endian arrays are not supported"));
    }
    if body.len() < count * width {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", count * width, body.len()),
        ));
    }
    let values = body[..count * width]
        .chunks_exact(width)
        .map(|b| match &descr[1..] {
            "f4" => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            "f8" => f64::from_le_bytes(b.try_into().unwrap()),
            "i4" => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            "u4" => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            "i8" => i64::from_le_bytes(b.try_into().unwrap()) as f64,
            "u8" => u64::from_le_bytes(b.try_into().unwrap()) as f64,
            "i2" => i16::from_le_bytes(b.try_into().unwrap()) as f64,
            "u2" => u16::from_le_bytes(b.try_into().unwrap()) as f64,
            "i1" => b[0] as i8 as f64,
            _ => b[0] as f64,
        })
        .collect();
    Ok(NpyArray {
        shape,
        dtype: descr,
        values,
    })
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e))?;
    decode(path, &bytes)
}

fn encode_header(descr: &str, shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [single] => format!("({single},)"),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    // Pad so the data starts on a 64-byte boundary, header ends in '\n'.
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out
}

pub fn encode_f32(shape: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = encode_header("<f4", shape);
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn encode_i32(shape: &[usize], data: &[i32]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = encode_header("<i4", shape);
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_f32(shape, data))?;
    Ok(())
}

pub fn write_i32(path: &Path, shape: &[usize], data: &[i32]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_i32(shape, data))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_aligned() {
        let bytes = encode_f32(&[3, 5], &[0.0; 15]);
        assert_eq!((bytes.len() - 15 * 4) % 64, 0);
        assert_eq!(bytes[bytes.len() - 15 * 4 - 1], b'\n');
    }

    #[test]
    fn reads_u16_raster() {
        // Hand-built header for a '<u2' array of shape (2,).
        let mut bytes = encode_header("<u2", &[2]);
        bytes.extend_from_slice(&4095u16.to_le_bytes());
        bytes.extend_from_slice(&7u16.to_le_bytes());
        let arr = decode(Path::new("mem"), &bytes).unwrap();
        assert_eq!(arr.shape, vec![2]);
        assert_eq!(arr.values, vec![4095.0, 7.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(Path::new("x"), b"hello world").is_err());
    }

    proptest! {
        #[test]
        fn f32_and_i32_roundtrip(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
            let f: Vec<f32> = (0..h * w).map(|i| (i as f32 + seed as f32).sin()).collect();
            let arr = decode(Path::new("m"), &encode_f32(&[h, w], &f)).unwrap();
            prop_assert_eq!(&arr.shape, &vec![h, w]);
            prop_assert!(arr.values.iter().zip(&f).all(|(a, b)| *a == *b as f64));
            let i: Vec<i32> = (0..h * w).map(|i| i as i32 - seed as i32 % 7).collect();
            let arr = decode(Path::new("m"), &encode_i32(&[h, w], &i)).unwrap();
            prop_assert!(arr.values.iter().zip(&i).all(|(a, b)| *a == *b as f64));
        }
    }
}

//! `DAST1` binary tensor files and named tensor tables.
//!
//! Layout of one tensor blob:
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `DAST`                           |
//! | 1     | version, always 1                      |
//! | 1     | dtype: 0 = f32, 1 = f64                |
//! | 1     | rank, always 4                         |
//! | 16    | four `u32` little-endian dims (NCHW)   |
//! | ...   | little-endian element data             |
//!
//! A table is a `u32` entry count followed by `(u32 name length, UTF-8 name,
//! tensor blob)` triples in order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"DAST";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 3 + 16;

pub fn encode<T: Element>(t: &Tensor4<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE_TAG);
    out.push(4);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_into(&mut out);
    }
    out
}

pub fn write_tensor<T: Element>(w: &mut impl Write, t: &Tensor4<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads one tensor blob, converting to `T` if the stored dtype differs.
pub fn read_tensor<T: Element>(r: &mut impl Read) -> Result<Tensor4<T>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected DAST".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported DAST version {}", head[4])));
    }
    let dtype = head[5];
    if head[6] != 4 {
        return Err(Error::Format(format!("unsupported rank {}", head[6])));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let n = shape.numel();
    match dtype {
        0 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(f32::from_le_slice).collect();
            Ok(Tensor4::from_vec(shape, data)?.cast())
        }
        1 => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(f64::from_le_slice).collect();
            Ok(Tensor4::from_vec(shape, data)?.cast())
        }
        other => Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor4<T>> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

pub fn write_table<'a, T: Element>(
    w: &mut impl Write,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor4<T>)>,
) -> Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_table<T: Element>(r: &mut impl Read) -> Result<Vec<(String, Tensor4<T>)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("table entry name is not UTF-8".into()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save<T: Element>(path: impl AsRef<std::path::Path>, t: &Tensor4<T>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Element>(path: impl AsRef<std::path::Path>) -> Result<Tensor4<T>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor4::<f32>::from_vec(Shape4::new(1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"DAST");
        assert_eq!(bytes[4..7], [1, 0, 4]);
        assert_eq!(bytes[7..11], 1u32.to_le_bytes());
        assert_eq!(bytes[11..15], 2u32.to_le_bytes());
        assert_eq!(bytes[23..27], 1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN + 8);
    }

    #[test]
    fn rejects_bad_magic_and_trailing_bytes() {
        let t = Tensor4::<f64>::full(Shape4::new(1, 1, 1, 1), 3.0);
        let mut bytes = encode(&t);
        assert_eq!(bytes[5], 1);
        bytes.push(0);
        assert!(decode::<f64>(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn table_preserves_order_and_names() {
        let a = Tensor4::<f32>::full(Shape4::new(1, 1, 2, 2), 1.5);
        let b = Tensor4::<f32>::full(Shape4::new(3, 1, 1, 1), -4.0);
        let mut buf = Vec::new();
        write_table(&mut buf, [("z.weight", &a), ("a.bias", &b)].into_iter()).unwrap();
        let back: Vec<(String, Tensor4<f32>)> = read_table(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "z.weight");
        assert_eq!(back[1].0, "a.bias");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..4, 1usize..4),
            seed in any::<u64>(),
        ) {
            let shape = Shape4::new(dims.0, dims.1, dims.2, dims.3);
            let mut s = seed;
            let t = Tensor4::<f64>::from_fn(shape, |_, _, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            });
            let back: Tensor4<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

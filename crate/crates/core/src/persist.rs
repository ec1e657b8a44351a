//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LADA" | version: u16 | layer count: u32
//! per layer:
//!     role: u8
//!     weights: ndim: u32, dims: u32 × ndim, values: f64 × prod(dims)
//!     biases:  ndim: u32, dims: u32 × ndim, values: f64 × prod(dims)
//! ```
//!
//! Model files append an architecture section after the weights: a `u32`
//! record count followed by records, each a `u32` byte length and that many
//! bytes of UTF-8 `key=value` text.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LADA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Conv = 1,
    Dense = 2,
    LstmGates = 3,
    Projection = 4,
    Scaler = 5,
}

impl Role {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Role::Conv,
            2 => Role::Dense,
            3 => Role::LstmGates,
            4 => Role::Projection,
            5 => Role::Scaler,
            other => return Err(Error::Format(format!("unknown role tag {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub role: Role,
    pub weights: Tensor,
    pub biases: Tensor,
}

pub fn write_weights<W: Write>(out: &mut W, records: &[WeightRecord]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        out.write_all(&[rec.role as u8])?;
        write_tensor(out, &rec.weights)?;
        write_tensor(out, &rec.biases)?;
    }
    Ok(())
}

fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> Result<()> {
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_weights<R: Read>(input: &mut R) -> Result<Vec<WeightRecord>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_array(input)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(input)?;
    let mut records = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let [role] = read_array::<1, _>(input)?;
        let role = Role::from_u8(role)?;
        let weights = read_tensor(input)?;
        let biases = read_tensor(input)?;
        records.push(WeightRecord {
            role,
            weights,
            biases,
        });
    }
    Ok(records)
}

fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let ndim = read_u32(input)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(input)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_array(input)?));
    }
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_records<W: Write>(out: &mut W, records: &[(String, String)]) -> Result<()> {
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for (k, v) in records {
        let line = format!("{k}={v}");
        out.write_all(&(line.len() as u32).to_le_bytes())?;
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_records<R: Read>(input: &mut R) -> Result<Vec<(String, String)>> {
    let count = read_u32(input)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut buf = vec![0u8; len];
        input.read_exact(&mut buf).map_err(truncated)?;
        let line = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("record without `=`: {line}")))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Looks up and parses a `key=value` record.
pub fn record<T: std::str::FromStr>(records: &[(String, String)], key: &str) -> Result<T> {
    let raw = records
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Format(format!("missing architecture record `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let rec = WeightRecord {
            role: Role::Dense,
            weights: Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap(),
            biases: Tensor::vector(vec![0.125]),
        };
        let mut buf = vec![];
        write_weights(&mut buf, &[rec]).unwrap();
        assert_eq!(&buf[..4], b"LADA");
        assert_eq!(&buf[4..6], &1u16.to_le_bytes());
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(buf[10], 2);
        assert_eq!(&buf[11..15], &2u32.to_le_bytes());
        assert_eq!(&buf[15..19], &1u32.to_le_bytes());
        assert_eq!(&buf[19..23], &2u32.to_le_bytes());
        assert_eq!(&buf[23..31], &1.0f64.to_le_bytes());
        // 4+2+4 + 1 + (4+8+16) + (4+4+8)
        assert_eq!(buf.len(), 10 + 1 + 28 + 16);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_weights(&mut &b"NOPE\x01\x00"[..]).is_err());
        assert!(read_weights(&mut &b"LADA\x01\x00\x01\x00\x00\x00"[..]).is_err());
        assert!(read_weights(&mut &b"LADA\x02\x00\x00\x00\x00\x00"[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 1..4),
            bits in proptest::collection::vec(any::<u64>(), 64),
            bias_len in 1usize..5,
        ) {
            let n: usize = dims.iter().product();
            let weights: Vec<f64> = (0..n).map(|i| f64::from_bits(bits[i % bits.len()])).collect();
            let biases: Vec<f64> = (0..bias_len).map(|i| f64::from_bits(bits[(i * 7) % bits.len()])).collect();
            let recs = vec![WeightRecord {
                role: Role::Conv,
                weights: Tensor::new(&dims, weights).unwrap(),
                biases: Tensor::vector(biases),
            }];
            let mut buf = vec![];
            write_weights(&mut buf, &recs).unwrap();
            let back = read_weights(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 1);
            let a: Vec<u64> = recs[0].weights.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back[0].weights.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back[0].weights.shape(), recs[0].weights.shape());
        }
    }
}

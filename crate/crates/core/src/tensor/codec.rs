//! Flat parameter container used for checkpoints and FL payloads.
//!
//! ```text
//! "FNPS" | version:u16 | count:u32
//! per tensor: name_len:u16 | name | partition:u8 | ndim:u8 | dims:u32*ndim | data:f64*prod(dims)
//! ```
//! All integers and floats are little-endian.

use super::{NamedTensor, ParamSet, Partition, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FNPS";
const VERSION: u16 = 1;

pub fn encode_param_set(set: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_header_len(set) + 8 * set.count_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for e in set {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.partition.code());
        out.push(e.tensor.shape().len() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Bytes of `encode_param_set(set)` that are not parameter values.
pub fn encoded_header_len(set: &ParamSet) -> usize {
    10 + set
        .iter()
        .map(|e| 2 + e.name.len() + 2 + 4 * e.tensor.shape().len())
        .sum::<usize>()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                "parameter container",
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a container; returns the set and the number of bytes consumed.
pub fn decode_param_set(buf: &[u8]) -> Result<(ParamSet, usize)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("parameter container", "bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(
            "parameter container",
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("parameter container", "tensor name is not UTF-8"))?
            .to_string();
        let code = r.u8()?;
        let partition = Partition::from_code(code).ok_or_else(|| {
            Error::format("parameter container", format!("unknown partition code {code}"))
        })?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        set.push(name, partition, tensor)?;
    }
    Ok((set, r.pos))
}

impl NamedTensor {
    pub fn encoded_len(&self) -> usize {
        2 + self.name.len() + 2 + 4 * self.tensor.shape().len() + 8 * self.tensor.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut s = ParamSet::new();
        s.push("a.w", Partition::Base, Tensor::new(vec![2, 2], vec![1.0, -0.0, 3.5, 1e-300]).unwrap())
            .unwrap();
        s.push("emb", Partition::Embedding, Tensor::new(vec![3], vec![f64::MAX, 0.25, -7.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn byte_counts_split_into_header_and_values() {
        let s = sample();
        let bytes = encode_param_set(&s);
        assert_eq!(bytes.len(), encoded_header_len(&s) + 8 * s.count_params());
        let (back, used) = decode_param_set(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.checksum(), s.checksum());
    }

    #[test]
    fn truncated_and_corrupt_input_rejected() {
        let bytes = encode_param_set(&sample());
        assert!(decode_param_set(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_param_set(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 1usize..40) {
            let split = split.min(values.len());
            let mut s = ParamSet::new();
            s.push("x", Partition::Controller, Tensor::new(vec![split], values[..split].to_vec()).unwrap()).unwrap();
            if split < values.len() {
                s.push("y", Partition::Base, Tensor::new(vec![values.len() - split], values[split..].to_vec()).unwrap()).unwrap();
            }
            let bytes = encode_param_set(&s);
            let (back, _) = decode_param_set(&bytes).unwrap();
            prop_assert_eq!(encode_param_set(&back), bytes);
        }
    }
}

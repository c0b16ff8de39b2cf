//! Uplink/downlink frames.
//!
//! ```text
//! "FNFR" | client_id:u32 | round:u32 | n_m:u64 | spec fingerprint:[u8;32] | parameter container
//! ```
//! The container is the tensor codec encoding of the exchanged subset.

use crate::error::{Error, Result};
use crate::tensor::{decode_param_set, encode_param_set, encoded_header_len, ParamSet};

const MAGIC: &[u8; 4] = b"FNFR";

/// Bytes before the parameter container.
pub const FRAME_PREFIX_LEN: usize = 4 + 4 + 4 + 8 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub client_id: u32,
    pub round: u32,
    pub n_m: u64,
    pub fingerprint: [u8; 32],
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub header: FrameHeader,
    pub params: ParamSet,
    /// Total encoded size.
    pub bytes: usize,
    /// Encoded size minus the 8 bytes of every parameter value.
    pub header_bytes: usize,
}

pub fn encode_frame(header: &FrameHeader, params: &ParamSet) -> Vec<u8> {
    let body = encode_param_set(params);
    let mut out = Vec::with_capacity(FRAME_PREFIX_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.client_id.to_le_bytes());
    out.extend_from_slice(&header.round.to_le_bytes());
    out.extend_from_slice(&header.n_m.to_le_bytes());
    out.extend_from_slice(&header.fingerprint);
    out.extend_from_slice(&body);
    out
}

pub fn parse_frame(buf: &[u8]) -> Result<Frame> {
    if buf.len() < FRAME_PREFIX_LEN {
        return Err(Error::format("frame", format!("{} bytes is shorter than the frame prefix", buf.len())));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::format("frame", "bad magic"));
    }
    let header = FrameHeader {
        client_id: u32::from_le_bytes(buf[4..8].try_into().unwrap()),
        round: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
        n_m: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
        fingerprint: buf[20..52].try_into().unwrap(),
    };
    let (params, used) = decode_param_set(&buf[FRAME_PREFIX_LEN..])?;
    if FRAME_PREFIX_LEN + used != buf.len() {
        return Err(Error::format(
            "frame",
            format!("{} trailing bytes", buf.len() - FRAME_PREFIX_LEN - used),
        ));
    }
    Ok(Frame {
        header,
        header_bytes: FRAME_PREFIX_LEN + encoded_header_len(&params),
        bytes: buf.len(),
        params,
    })
}

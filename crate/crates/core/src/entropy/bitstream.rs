use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTAC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

/// Header plus range-coded payload. All header fields are big-endian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub support: u16,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.channels.to_be_bytes());
        out.extend_from_slice(&self.support.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "stream is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let len = u32::from_be_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < len {
            return Err(Error::Decode {
                offset: bytes.len(),
                detail: format!("payload truncated: header declares {len} bytes, found {}", payload.len()),
            });
        }
        if payload.len() > len {
            return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - len)));
        }
        Ok(Self {
            height: u16_at(5),
            width: u16_at(7),
            channels: u16_at(9),
            support: u16_at(11),
            payload: payload.to_vec(),
        })
    }

    /// Total size in bytes, header included.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

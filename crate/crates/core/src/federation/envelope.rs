//! Message envelope, little-endian:
//!
//! ```text
//! round u32 | sender u32 | direction u8 | codec_len u16 | codec utf-8
//! | payload_len u32 | payload
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sender id used by the server.
pub const SERVER_ID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

impl Direction {
    fn to_byte(self) -> u8 {
        match self {
            Direction::Upload => 0,
            Direction::Download => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Direction::Upload),
            1 => Ok(Direction::Download),
            other => Err(Error::Wire(format!("bad direction byte {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub round: u32,
    pub sender: u32,
    pub direction: Direction,
    pub codec: String,
    pub payload: Vec<u8>,
}

/// Length of an envelope carrying `payload_len` bytes under `codec`.
pub fn envelope_len(codec: &str, payload_len: usize) -> usize {
    4 + 4 + 1 + 2 + codec.len() + 4 + payload_len
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(envelope_len(&self.codec, self.payload.len()));
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.push(self.direction.to_byte());
        out.extend_from_slice(&(self.codec.len() as u16).to_le_bytes());
        out.extend_from_slice(self.codec.as_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Wire("truncated envelope".into());
        let fixed = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(short);
        let round = u32::from_le_bytes(fixed(0, 4)?.try_into().unwrap());
        let sender = u32::from_le_bytes(fixed(4, 4)?.try_into().unwrap());
        let direction = Direction::from_byte(fixed(8, 1)?[0])?;
        let codec_len = u16::from_le_bytes(fixed(9, 2)?.try_into().unwrap()) as usize;
        let codec = std::str::from_utf8(fixed(11, codec_len)?)
            .map_err(|e| Error::Wire(format!("codec name: {e}")))?
            .to_string();
        let at = 11 + codec_len;
        let payload_len = u32::from_le_bytes(fixed(at, 4)?.try_into().unwrap()) as usize;
        let payload = fixed(at + 4, payload_len)?.to_vec();
        if at + 4 + payload_len != bytes.len() {
            return Err(Error::Wire("trailing bytes after envelope payload".into()));
        }
        Ok(Self {
            round,
            sender,
            direction,
            codec,
            payload,
        })
    }
}

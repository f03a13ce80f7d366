use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level transform applied to every payload before it leaves a party
/// and undone on receipt.
pub trait Codec: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, bytes: &[u8]) -> Vec<u8>;
    fn decode(&self, bytes: &[u8]) -> Result<Vec<u8>>;
}

/// Pass-through codec.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }

    fn encode(&self, bytes: &[u8]) -> Vec<u8> {
        bytes.to_vec()
    }

    fn decode(&self, bytes: &[u8]) -> Result<Vec<u8>> {
        Ok(bytes.to_vec())
    }
}

/// XOR with a seeded keystream. Not a cipher; exists to exercise a codec that
/// actually changes the bytes.
#[derive(Clone, Copy, Debug)]
pub struct XorCodec {
    key: u64,
}

impl XorCodec {
    pub fn new(key: u64) -> Self {
        Self { key }
    }

    fn apply(&self, bytes: &[u8]) -> Vec<u8> {
        let mut stream = vec![0u8; bytes.len()];
        ChaCha8Rng::seed_from_u64(self.key).fill_bytes(&mut stream);
        bytes.iter().zip(stream).map(|(b, k)| b ^ k).collect()
    }
}

impl Codec for XorCodec {
    fn name(&self) -> &str {
        "xor"
    }

    fn encode(&self, bytes: &[u8]) -> Vec<u8> {
        self.apply(bytes)
    }

    fn decode(&self, bytes: &[u8]) -> Result<Vec<u8>> {
        Ok(self.apply(bytes))
    }
}

pub fn codec_by_name(name: &str, key: u64) -> Result<Box<dyn Codec>> {
    match name {
        "identity" => Ok(Box::new(IdentityCodec)),
        "xor" => Ok(Box::new(XorCodec::new(key))),
        other => Err(Error::Codec(format!("unknown codec {other:?}"))),
    }
}

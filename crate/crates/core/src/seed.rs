//! Stable seed derivation.
//!
//! Every random stream in the pipeline is keyed by a tuple of identifiers and
//! derived from the master seed with SHA-256: the digest of
//! `master_seed (u64 LE) || tag || parts...` is truncated to its first eight
//! bytes, read little-endian. Numbers are fed as 8-byte little-endian words and
//! strings as their UTF-8 bytes followed by a zero byte, so the derivation is
//! stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a seed key.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Int(u64),
    Float(f64),
    Str(&'a str),
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<u32> for SeedPart<'_> {
    fn from(v: u32) -> Self {
        SeedPart::Int(v as u64)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

impl From<f64> for SeedPart<'_> {
    fn from(v: f64) -> Self {
        SeedPart::Float(v)
    }
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(v: &'a str) -> Self {
        SeedPart::Str(v)
    }
}

pub fn derive_seed(master: u64, tag: &str, parts: &[SeedPart<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    for part in parts {
        match *part {
            SeedPart::Int(v) => hasher.update(v.to_le_bytes()),
            SeedPart::Float(v) => hasher.update(v.to_bits().to_le_bytes()),
            SeedPart::Str(s) => {
                hasher.update(s.as_bytes());
                hasher.update([0u8]);
            }
        }
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

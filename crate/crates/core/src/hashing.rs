//! Fixed, platform-independent hashing.
//!
//! Feature hashing, seed derivation and encoder fingerprints all go through
//! these functions so that results are identical across runs, platforms and
//! toolchain versions (`std::hash` makes no such promise).

use std::fs::File;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded 64-bit hash of a namespaced byte string: FNV-1a over
/// `namespace || bytes` starting from `FNV_OFFSET ^ mix64(seed)`, followed by
/// a SplitMix64 finalizer so the low bits are usable for `mod 2^k`.
#[inline]
pub fn hash_bytes(seed: u64, namespace: u8, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ mix64(seed);
    h ^= namespace as u64;
    h = h.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

/// Derive a child seed from a parent seed and a label plus integer path.
pub fn derive_seed(seed: u64, label: &str, path: &[u64]) -> u64 {
    let mut h = hash_bytes(seed, 0xfe, label.as_bytes());
    for &p in path {
        h = mix64(h ^ mix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

/// Streaming word-wise hash used for weight fingerprints.
#[derive(Debug, Clone)]
pub struct Fingerprinter(u64);

impl Default for Fingerprinter {
    fn default() -> Self {
        Fingerprinter(FNV_OFFSET)
    }
}

impl Fingerprinter {
    #[inline]
    pub fn write_u64(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(FNV_PRIME).rotate_left(29);
    }

    #[inline]
    pub fn write_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.write_u64(v.to_bits() as u64);
        }
    }

    pub fn finish(&self) -> u64 {
        mix64(self.0)
    }
}

/// Hex SHA-256 of a byte slice; used for manifest content hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents, streamed.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

//! Secret keys for the block-wise negative/positive transform.
//!
//! A key is a binary vector of length `channels * block_size * block_size`.
//! Bit `k` selects whether intra-block position `k` is inverted, with the
//! canonical flattening
//!
//! ```text
//! k = ch * M * M + row * M + col      (all zero-based)
//! ```
//!
//! i.e. channel-major, then row-major, then column-major inside a block.
//!
//! # Key file format (version 1)
//!
//! ```text
//! "NPKY" | 0x01 | channels:u8 | block_size:u8 | 0x00 | payload | checksum[4]
//! ```
//!
//! The payload packs the bits MSB-first with `k` ascending and is
//! zero-padded to a byte boundary. The checksum is the first four bytes of
//! SHA-256 over every preceding byte.
//!
//! # Seeded generation
//!
//! Seeded keys come from the `chacha20-sha256-v1` bit generator: a ChaCha20
//! stream keyed by `SHA-256(label || channels || block_size || seed)`, read as
//! bytes and consumed MSB-first. Seeds exist for tests and reproducible
//! experiments only; production keys must be generated without a seed, which
//! draws from the operating system's random source.

use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const KEY_MAGIC: &[u8; 4] = b"NPKY";
pub const KEY_FORMAT_VERSION: u8 = 0x01;
pub const KEY_HEADER_LEN: usize = 8;
pub const KEY_CHECKSUM_LEN: usize = 4;

/// Name of the deterministic generator used for seeded keys.
pub const SEEDED_GENERATOR: &str = "chacha20-sha256-v1";

const KEYGEN_LABEL: &[u8] = b"negpos/keygen/chacha20-sha256-v1";
const INCORRECT_LABEL: &[u8] = b"negpos/incorrect-key/chacha20-sha256-v1";
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("invalid key parameter: {0}")]
    Parameter(String),
    #[error("key format error: {0}")]
    Format(String),
    #[error("key length error: {0}")]
    Length(String),
    #[error("key checksum mismatch")]
    Checksum,
    #[error("key shape mismatch: {left_channels}x{left_block}x{left_block} vs {right_channels}x{right_block}x{right_block}")]
    ShapeMismatch {
        left_channels: usize,
        left_block: usize,
        right_channels: usize,
        right_block: usize,
    },
}

/// Secret key: one bit per intra-block sample position.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Key {
    channels: usize,
    block_size: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        f.debug_struct("Key")
            .field("channels", &self.channels)
            .field("block_size", &self.block_size)
            .field("bits", &bits)
            .finish()
    }
}

fn check_shape(channels: usize, block_size: usize) -> Result<usize, KeyError> {
    if channels == 0 || block_size == 0 {
        return Err(KeyError::Parameter(format!(
            "channels and block size must be positive (got channels={channels}, block_size={block_size})"
        )));
    }
    // Both are stored as single bytes in the key file.
    if channels > u8::MAX as usize || block_size > u8::MAX as usize {
        return Err(KeyError::Parameter(format!(
            "channels and block size must be at most 255 (got channels={channels}, block_size={block_size})"
        )));
    }
    Ok(channels * block_size * block_size)
}

impl Key {
    /// Builds a key from explicit bits, enforcing the length law.
    pub fn from_bits(channels: usize, block_size: usize, bits: Vec<bool>) -> Result<Self, KeyError> {
        let len = check_shape(channels, block_size)?;
        if bits.len() != len {
            return Err(KeyError::Length(format!(
                "expected {len} bits for {channels}x{block_size}x{block_size}, got {}",
                bits.len()
            )));
        }
        Ok(Self { channels, block_size, bits })
    }

    /// Parses a string of `'0'`/`'1'` characters.
    pub fn from_bit_str(channels: usize, block_size: usize, s: &str) -> Result<Self, KeyError> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(KeyError::Parameter(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_bits(channels, block_size, bits)
    }

    pub fn zeros(channels: usize, block_size: usize) -> Result<Self, KeyError> {
        let len = check_shape(channels, block_size)?;
        Ok(Self { channels, block_size, bits: vec![false; len] })
    }

    pub fn ones(channels: usize, block_size: usize) -> Result<Self, KeyError> {
        let len = check_shape(channels, block_size)?;
        Ok(Self { channels, block_size, bits: vec![true; len] })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bit(&self, k: usize) -> bool {
        self.bits[k]
    }

    /// Canonical index of a sample position inside a block.
    pub fn index_of(&self, channel: usize, row: usize, col: usize) -> usize {
        debug_assert!(channel < self.channels && row < self.block_size && col < self.block_size);
        (channel * self.block_size + row) * self.block_size + col
    }

    /// Number of set bits.
    pub fn weight(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Key) -> bool {
        self.channels == other.channels && self.block_size == other.block_size
    }

    fn shape_error(&self, other: &Key) -> KeyError {
        KeyError::ShapeMismatch {
            left_channels: self.channels,
            left_block: self.block_size,
            right_channels: other.channels,
            right_block: other.block_size,
        }
    }

    /// Elementwise XOR of two keys of the same shape.
    pub fn xor(&self, other: &Key) -> Result<Key, KeyError> {
        if !self.same_shape(other) {
            return Err(self.shape_error(other));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect();
        Ok(Key { channels: self.channels, block_size: self.block_size, bits })
    }

    pub fn complement(&self) -> Key {
        Key {
            channels: self.channels,
            block_size: self.block_size,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Returns a copy with positions `i` and `j` exchanged.
    pub fn with_swapped(&self, i: usize, j: usize) -> Key {
        let mut out = self.clone();
        out.bits.swap(i, j);
        out
    }

    /// Returns a copy with position `i` inverted.
    pub fn with_flipped(&self, i: usize) -> Key {
        let mut out = self.clone();
        out.bits[i] = !out.bits[i];
        out
    }

    /// Bit payload packed MSB-first, zero-padded to whole bytes.
    pub fn packed_bits(&self) -> Vec<u8> {
        pack_bits(&self.bits)
    }

    /// Rebuilds a key from a packed payload. Padding bits must be zero.
    pub fn from_packed(channels: usize, block_size: usize, payload: &[u8]) -> Result<Self, KeyError> {
        let len = check_shape(channels, block_size)?;
        let expected = len.div_ceil(8);
        if payload.len() != expected {
            return Err(KeyError::Length(format!(
                "payload of {} bytes, expected {expected} for {len} bits",
                payload.len()
            )));
        }
        let bits = unpack_bits(payload, len);
        if pack_bits(&bits) != payload {
            return Err(KeyError::Format("nonzero padding bits".into()));
        }
        Ok(Self { channels, block_size, bits })
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        KeyFingerprint(Sha256::digest(serialize_key(self)).into())
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (k, &b) in bits.iter().enumerate() {
        if b {
            out[k / 8] |= 0x80 >> (k % 8);
        }
    }
    out
}

fn unpack_bits(payload: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|k| payload[k / 8] & (0x80 >> (k % 8)) != 0).collect()
}

/// SHA-256 of a serialized key file. Lets manifests and traces refer to a
/// key without embedding it.
///
/// Small keys can still be recovered from their fingerprint by exhaustive
/// search, so fingerprints should be treated as sensitive for small key
/// spaces.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyFingerprint(pub [u8; 32]);

impl KeyFingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, KeyError> {
        let bytes = hex::decode(s).map_err(|e| KeyError::Format(format!("fingerprint: {e}")))?;
        let digest: [u8; 32] = bytes
            .try_into()
            .map_err(|_| KeyError::Length("fingerprint must be 32 bytes".into()))?;
        Ok(Self(digest))
    }
}

impl fmt::Display for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyFingerprint({})", self.to_hex())
    }
}

fn seeded_rng(label: &[u8], channels: usize, block_size: usize, seed: &[u8]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(label);
    h.update((channels as u32).to_be_bytes());
    h.update((block_size as u32).to_be_bytes());
    h.update(seed);
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn os_rng() -> impl RngCore {
    use rand::TryRngCore;
    rand::rngs::OsRng.unwrap_err()
}

fn draw_bits<R: RngCore + ?Sized>(rng: &mut R, len: usize) -> Vec<bool> {
    let mut bytes = vec![0u8; len.div_ceil(8)];
    rng.fill_bytes(&mut bytes);
    unpack_bits(&bytes, len)
}

/// Generates a key of independent fair bits.
///
/// With `seed = None` the bits come from the OS random source. With a seed,
/// the output is a deterministic function of `(seed, channels, block_size)`.
pub fn generate_key(channels: usize, block_size: usize, seed: Option<&[u8]>) -> Result<Key, KeyError> {
    let len = check_shape(channels, block_size)?;
    let bits = match seed {
        Some(seed) => draw_bits(&mut seeded_rng(KEYGEN_LABEL, channels, block_size, seed), len),
        None => draw_bits(&mut os_rng(), len),
    };
    Ok(Key { channels, block_size, bits })
}

/// Number of distinct keys, `2^(channels * block_size^2)`, as an exact integer.
pub fn key_space(channels: usize, block_size: usize) -> Result<BigUint, KeyError> {
    if channels == 0 || block_size == 0 {
        return Err(KeyError::Parameter(format!(
            "channels and block size must be positive (got channels={channels}, block_size={block_size})"
        )));
    }
    let exponent = channels
        .checked_mul(block_size)
        .and_then(|v| v.checked_mul(block_size))
        .ok_or_else(|| KeyError::Parameter("key length overflows".into()))?;
    Ok(BigUint::from(1u8) << exponent)
}

pub fn serialize_key(key: &Key) -> Vec<u8> {
    let payload = key.packed_bits();
    let mut out = Vec::with_capacity(KEY_HEADER_LEN + payload.len() + KEY_CHECKSUM_LEN);
    out.extend_from_slice(KEY_MAGIC);
    out.push(KEY_FORMAT_VERSION);
    out.push(key.channels as u8);
    out.push(key.block_size as u8);
    out.push(0x00);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..KEY_CHECKSUM_LEN]);
    out
}

pub fn parse_key(data: &[u8]) -> Result<Key, KeyError> {
    if data.len() < KEY_HEADER_LEN {
        return Err(KeyError::Length(format!("{} bytes is shorter than the key header", data.len())));
    }
    if &data[..4] != KEY_MAGIC {
        return Err(KeyError::Format("bad magic".into()));
    }
    if data[4] != KEY_FORMAT_VERSION {
        return Err(KeyError::Format(format!("unsupported version {:#04x}", data[4])));
    }
    let channels = data[5] as usize;
    let block_size = data[6] as usize;
    if channels == 0 || block_size == 0 {
        return Err(KeyError::Format("zero channels or block size in header".into()));
    }
    if data[7] != 0 {
        return Err(KeyError::Format("reserved header byte is not zero".into()));
    }
    let nbits = channels * block_size * block_size;
    let expected = KEY_HEADER_LEN + nbits.div_ceil(8) + KEY_CHECKSUM_LEN;
    if data.len() != expected {
        return Err(KeyError::Length(format!(
            "{} bytes, expected {expected} for {nbits} key bits",
            data.len()
        )));
    }
    let (body, checksum) = data.split_at(expected - KEY_CHECKSUM_LEN);
    if Sha256::digest(body)[..KEY_CHECKSUM_LEN] != *checksum {
        return Err(KeyError::Checksum);
    }
    Key::from_packed(channels, block_size, &body[KEY_HEADER_LEN..])
}

pub fn hamming_distance(a: &Key, b: &Key) -> Result<usize, KeyError> {
    if !a.same_shape(b) {
        return Err(a.shape_error(b));
    }
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count())
}

/// Draws a fresh random key of the reference's shape that differs from it.
///
/// Redraws up to 64 times; if every draw equals the reference, one random
/// bit of the reference is flipped instead.
pub fn random_incorrect_key(reference: &Key, seed: Option<&[u8]>) -> Key {
    let (c, m) = (reference.channels, reference.block_size);
    let mut rng: Box<dyn RngCore> = match seed {
        Some(seed) => Box::new(seeded_rng(INCORRECT_LABEL, c, m, seed)),
        None => Box::new(os_rng()),
    };
    for _ in 0..MAX_REDRAWS {
        let bits = draw_bits(&mut rng, reference.len());
        if bits != reference.bits {
            return Key { channels: c, block_size: m, bits };
        }
    }
    let i = rng.random_range(0..reference.len());
    reference.with_flipped(i)
}

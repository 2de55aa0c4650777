//! Query normalization and qid hashing.
//!
//! Raw queries are lowercased, whitespace-split, and sorted ascending by byte
//! order, then hashed with 32-bit FNV-1a into a query id. Sorting first makes
//! the qid invariant to token order, so `"dress red"` and `"red dress"` map to
//! the same id. A separator byte is fed between tokens so that token-boundary
//! shifts (`["a","b"]` vs `["ab"]`) produce different hashes.
//!
//! Both functions are pure and stateless; they can be called concurrently
//! without restriction.

use crate::error::{Error, Result};

/// Byte fed between tokens while hashing (ASCII unit separator).
pub const TOKEN_SEPARATOR: u8 = 0x1f;

const FNV_OFFSET_BASIS: u32 = 2_166_136_261;
const FNV_PRIME: u32 = 16_777_619;

/// Lowercase, whitespace-split, and sort a raw query.
///
/// Duplicate tokens are preserved. Fails with [`Error::EmptyQuery`] when the
/// input is empty or whitespace-only.
pub fn normalize(raw: &str) -> Result<Vec<String>> {
    let mut tokens: Vec<String> = raw
        .to_lowercase()
        .split_whitespace()
        .map(|t| t.to_string())
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyQuery);
    }
    tokens.sort_unstable();
    Ok(tokens)
}

/// Hash a sorted token list into a 32-bit query id.
///
/// The caller must pass tokens in ascending byte order (the output of
/// [`normalize`]); the contract is re-asserted here and violations surface as
/// [`Error::UnsortedTokens`]. The hash is FNV-1a over the UTF-8 bytes of the
/// tokens joined by [`TOKEN_SEPARATOR`], identical across runs and platforms.
pub fn qid<S: AsRef<str>>(tokens: &[S]) -> Result<u32> {
    for w in tokens.windows(2) {
        if w[0].as_ref() > w[1].as_ref() {
            return Err(Error::UnsortedTokens(
                w[0].as_ref().to_string(),
                w[1].as_ref().to_string(),
            ));
        }
    }
    let mut hash = FNV_OFFSET_BASIS;
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            hash = fnv1a_step(hash, TOKEN_SEPARATOR);
        }
        for &b in tok.as_ref().as_bytes() {
            hash = fnv1a_step(hash, b);
        }
    }
    Ok(hash)
}

/// Normalize then hash in one call.
pub fn qid_of(raw: &str) -> Result<u32> {
    qid(&normalize(raw)?)
}

#[inline]
fn fnv1a_step(hash: u32, byte: u8) -> u32 {
    (hash ^ u32::from(byte)).wrapping_mul(FNV_PRIME)
}

//! Sealed gradient pages.
//!
//! A per-virtual-batch gradient is held outside the trusted context as an
//! opaque blob: the payload is XORed with a ChaCha20 keystream and
//! authenticated with a SHA-256 tag over key, header and ciphertext. This
//! models eviction of trusted memory; it is not a vetted AEAD construction.
//!
//! Layout: `DKPAGE01 | nonce u64 | weight f64 | count u32 | body | tag[32]`,
//! where `body` is the encrypted concatenation of `len u64 | DKTENSOR`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, DType};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DKPAGE01";
const HEADER: usize = 8 + 8 + 8 + 4;
const TAG: usize = 32;

/// Plaintext content of a page.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPage {
    /// Aggregation weight, `k_v / N` for a virtual batch of `k_v` samples.
    pub weight: f64,
    pub grads: Vec<Tensor>,
}

fn keystream_xor(key: &[u8; 32], nonce: u64, data: &mut [u8]) {
    let mut rng = ChaCha20Rng::from_seed(*key);
    rng.set_stream(nonce);
    let mut ks = vec![0u8; data.len()];
    rng.fill_bytes(&mut ks);
    for (d, k) in data.iter_mut().zip(ks) {
        *d ^= k;
    }
}

fn tag(key: &[u8; 32], authenticated: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(key);
    h.update(authenticated);
    h.finalize().into()
}

pub fn seal_page(page: &GradientPage, key: &[u8; 32], nonce: u64) -> Result<Vec<u8>> {
    if !page.weight.is_finite() {
        return Err(Error::param("page weight must be finite"));
    }
    let mut body = Vec::new();
    for g in &page.grads {
        let enc = io::encode(g, DType::F64)?;
        body.extend_from_slice(&(enc.len() as u64).to_le_bytes());
        body.extend_from_slice(&enc);
    }
    keystream_xor(key, nonce, &mut body);
    let mut out = Vec::with_capacity(HEADER + body.len() + TAG);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&nonce.to_le_bytes());
    out.extend_from_slice(&page.weight.to_le_bytes());
    out.extend_from_slice(&(page.grads.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let t = tag(key, &out);
    out.extend_from_slice(&t);
    Ok(out)
}

pub fn unseal_page(blob: &[u8], key: &[u8; 32]) -> Result<GradientPage> {
    if blob.len() < HEADER + TAG || &blob[..8] != MAGIC {
        return Err(Error::Format("not a sealed page".into()));
    }
    let (authenticated, stored) = blob.split_at(blob.len() - TAG);
    if tag(key, authenticated) != stored {
        return Err(Error::Format("sealed page failed authentication".into()));
    }
    let nonce = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes"));
    let weight = f64::from_le_bytes(blob[16..24].try_into().expect("8 bytes"));
    let count = u32::from_le_bytes(blob[24..28].try_into().expect("4 bytes")) as usize;
    let mut body = authenticated[HEADER..].to_vec();
    keystream_xor(key, nonce, &mut body);
    let mut grads = Vec::with_capacity(count);
    let mut rest = body.as_slice();
    for _ in 0..count {
        if rest.len() < 8 {
            return Err(Error::Format("truncated page body".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        rest = &rest[8..];
        if rest.len() < len {
            return Err(Error::Format("truncated page body".into()));
        }
        grads.push(io::decode(&rest[..len])?);
        rest = &rest[len..];
    }
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes in page body".into()));
    }
    Ok(GradientPage { weight, grads })
}

//! ECVRF-EDWARDS25519-SHA512-TAI (suite 0x03).
//!
//! Proofs are 80 bytes: Gamma (32) ‖ c (16) ‖ s (32). The selection output
//! `r` is the first 32 bytes of the 64-byte VRF hash, read big-endian by
//! callers. ECVRF is a unique VRF: for a valid public key and input exactly
//! one output verifies.

use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::scalar::{clamp_integer, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha512};

use super::PublicKey;

const SUITE: u8 = 0x03;
const C_LEN: usize = 16;
pub const PROOF_LEN: usize = 32 + C_LEN + 32;

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VrfOutput {
    pub r: [u8; 32],
    pub proof: Vec<u8>,
}

impl std::fmt::Debug for VrfOutput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VrfOutput(r={})", &hex::encode(self.r)[..12])
    }
}

fn encode_to_curve(pk: &[u8; 32], alpha: &[u8]) -> EdwardsPoint {
    for ctr in 0u8..=255 {
        let h = Sha512::new()
            .chain_update([SUITE, 0x01])
            .chain_update(pk)
            .chain_update(alpha)
            .chain_update([ctr, 0x00])
            .finalize();
        let candidate: [u8; 32] = h[..32].try_into().unwrap();
        if let Some(p) = CompressedEdwardsY(candidate).decompress() {
            return p.mul_by_cofactor();
        }
    }
    // Each try succeeds with probability about 1/2.
    unreachable!("no curve point found in 256 attempts")
}

fn challenge(points: [&EdwardsPoint; 5]) -> [u8; C_LEN] {
    let mut h = Sha512::new();
    h.update([SUITE, 0x02]);
    for p in points {
        h.update(p.compress().as_bytes());
    }
    h.update([0x00]);
    h.finalize()[..C_LEN].try_into().unwrap()
}

fn challenge_scalar(c: &[u8; C_LEN]) -> Scalar {
    let mut b = [0u8; 32];
    b[..C_LEN].copy_from_slice(c);
    Scalar::from_bytes_mod_order(b)
}

fn proof_to_hash(gamma: &EdwardsPoint) -> [u8; 64] {
    Sha512::new()
        .chain_update([SUITE, 0x03])
        .chain_update(gamma.mul_by_cofactor().compress().as_bytes())
        .chain_update([0x00])
        .finalize()
        .into()
}

/// Proves `input` under the key derived from `seed`.
pub fn vrf_prove(seed: &[u8; 32], input: &[u8]) -> VrfOutput {
    let (proof, beta) = prove_full(seed, input);
    VrfOutput {
        r: beta[..32].try_into().unwrap(),
        proof: proof.to_vec(),
    }
}

pub(crate) fn prove_full(seed: &[u8; 32], input: &[u8]) -> ([u8; PROOF_LEN], [u8; 64]) {
    let expanded = Sha512::digest(seed);
    let x = Scalar::from_bytes_mod_order(clamp_integer(expanded[..32].try_into().unwrap()));
    let y = EdwardsPoint::mul_base(&x);
    let pk = y.compress().to_bytes();
    let h = encode_to_curve(&pk, input);
    let gamma = h * x;
    let nonce = Sha512::new()
        .chain_update(&expanded[32..])
        .chain_update(h.compress().as_bytes())
        .finalize();
    let k = Scalar::from_bytes_mod_order_wide(&nonce.into());
    let c = challenge([&y, &h, &gamma, &EdwardsPoint::mul_base(&k), &(h * k)]);
    let s = k + challenge_scalar(&c) * x;

    let mut proof = [0u8; PROOF_LEN];
    proof[..32].copy_from_slice(gamma.compress().as_bytes());
    proof[32..32 + C_LEN].copy_from_slice(&c);
    proof[32 + C_LEN..].copy_from_slice(s.as_bytes());
    (proof, proof_to_hash(&gamma))
}

/// Verifies `proof` and returns the VRF hash on success.
pub(crate) fn verify_full(pk: &PublicKey, input: &[u8], proof: &[u8]) -> Option<[u8; 64]> {
    if proof.len() != PROOF_LEN {
        return None;
    }
    let y = CompressedEdwardsY(pk.0).decompress()?;
    if y.is_small_order() {
        return None;
    }
    let gamma = CompressedEdwardsY(proof[..32].try_into().unwrap()).decompress()?;
    let c: [u8; C_LEN] = proof[32..32 + C_LEN].try_into().unwrap();
    let s = Option::<Scalar>::from(Scalar::from_canonical_bytes(proof[32 + C_LEN..].try_into().unwrap()))?;
    let h = encode_to_curve(&pk.0, input);
    let cs = challenge_scalar(&c);
    let u = EdwardsPoint::mul_base(&s) - y * cs;
    let v = h * s - gamma * cs;
    if challenge([&y, &h, &gamma, &u, &v]) != c {
        return None;
    }
    Some(proof_to_hash(&gamma))
}

/// True iff `proof` is valid for `input` under `pk` and `r` is its output.
/// Malformed inputs verify as false.
pub fn vrf_verify(pk: &PublicKey, input: &[u8], r: &[u8; 32], proof: &[u8]) -> bool {
    match verify_full(pk, input, proof) {
        Some(b) => &b[..32] == r,
        None => false,
    }
}

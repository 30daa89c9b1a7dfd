//! Rateless erasure coding for both layers of the storage scheme.
//!
//! The code is a systematic random-linear fountain over GF(256): stream
//! index `i < k` yields source block `i` verbatim, any larger index yields a
//! pseudo-random combination of all `k` source blocks whose coefficients are a
//! pure function of `(i, k)`. Any `k` symbols with independent coefficient
//! rows reconstruct the source.
//!
//! The outer layer turns an object into `n_chunks` chunks at secret-keyed,
//! non-systematic stream indices; the inner layer turns each chunk into an
//! unbounded stream of fragments at public indices.

pub mod gf256;

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use gf256::{mul_add_slice, Gf256};

/// Stream indices at or above this value are never systematic for any
/// realistic `k`, so outer chunks never expose plaintext.
pub const OUTER_INDEX_BASE: u64 = 1 << 32;

/// Length prefix prepended to objects before outer encoding.
const FRAME_PREFIX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("need more symbols: have rank {rank} of {needed}")]
    NeedMoreSymbols { rank: usize, needed: usize },
    #[error("source blocks have unequal lengths")]
    UnequalBlocks,
    #[error("no symbols or blocks given")]
    Empty,
    #[error("integrity check failed; suspect stream indices {suspects:?}")]
    Integrity { suspects: Vec<u64> },
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("invalid codec parameters: {0}")]
    InvalidParams(&'static str),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Coding parameters shared by both layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecParams {
    pub k_inner: usize,
    pub r_group: usize,
    pub k_outer: usize,
    pub n_chunks: usize,
    /// Measured extra symbols needed beyond `k` to decode; informational.
    pub decode_overhead: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams {
            k_inner: 32,
            r_group: 80,
            k_outer: 8,
            n_chunks: 10,
            decode_overhead: 0.004,
        }
    }
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_inner == 0 || self.r_group == 0 || self.k_outer == 0 || self.n_chunks == 0 {
            return Err(CodecError::InvalidParams("all counts must be at least 1"));
        }
        if self.n_chunks < self.k_outer {
            return Err(CodecError::InvalidParams("n_chunks must be >= k_outer"));
        }
        if self.r_group < self.k_inner {
            return Err(CodecError::InvalidParams("r_group must be >= k_inner"));
        }
        Ok(())
    }

    /// Stored bytes per object byte: `(n_chunks / k_outer) * (r_group / k_inner)`.
    pub fn redundancy(&self) -> f64 {
        (self.n_chunks as f64 / self.k_outer as f64) * (self.r_group as f64 / self.k_inner as f64)
    }
}

/// A SHA-256 digest; also a position on the identifier ring.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest256(pub [u8; 32]);

impl Serialize for Digest256 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        crate::hexser::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Digest256 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        crate::hexser::deserialize(d).map(Digest256)
    }
}

impl Digest256 {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest256> {
        let v = hex::decode(s.trim()).ok()?;
        Some(Digest256(v.try_into().ok()?))
    }
}

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn content_hash(bytes: &[u8]) -> Digest256 {
    Digest256(Sha256::digest(bytes).into())
}

/// One outer-code symbol of an object.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub object_hash: Digest256,
    pub stream_index: u64,
    pub data: Vec<u8>,
}

impl Chunk {
    /// The chunk group identifier.
    pub fn hash(&self) -> Digest256 {
        content_hash(&self.data)
    }
}

impl fmt::Debug for Chunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Chunk")
            .field("object_hash", &self.object_hash)
            .field("stream_index", &self.stream_index)
            .field("len", &self.data.len())
            .finish()
    }
}

/// One inner-code symbol of a chunk.
///
/// `chunk_len` carries the unpadded chunk length so a decoder can strip the
/// inner padding before checking the chunk hash.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub chunk_hash: Digest256,
    pub chunk_len: u64,
    pub stream_index: u64,
    pub data: Vec<u8>,
}

impl fmt::Debug for Fragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fragment")
            .field("chunk_hash", &self.chunk_hash)
            .field("stream_index", &self.stream_index)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Coefficient row for `stream_index` over `k` source blocks.
///
/// Indices below `k` give the unit vector (systematic prefix). Larger indices
/// draw `k` bytes from ChaCha8 seeded with `(stream_index, k)`, redrawing an
/// all-zero row.
pub fn coeff_row(stream_index: u64, k: usize) -> Vec<Gf256> {
    assert!(k >= 1, "k must be at least 1");
    let mut row = vec![Gf256::ZERO; k];
    if stream_index < k as u64 {
        row[stream_index as usize] = Gf256::ONE;
        return row;
    }
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&stream_index.to_le_bytes());
    seed[8..16].copy_from_slice(&(k as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut bytes = vec![0u8; k];
    loop {
        rng.fill_bytes(&mut bytes);
        if bytes.iter().any(|&b| b != 0) {
            break;
        }
    }
    for (c, b) in row.iter_mut().zip(bytes) {
        *c = Gf256(b);
    }
    row
}

/// Encodes the symbol at `stream_index` from `k` equal-length source blocks.
pub fn encode_symbol<B: AsRef<[u8]>>(source_blocks: &[B], stream_index: u64) -> Result<Vec<u8>> {
    let k = source_blocks.len();
    if k == 0 {
        return Err(CodecError::Empty);
    }
    let len = source_blocks[0].as_ref().len();
    if source_blocks.iter().any(|b| b.as_ref().len() != len) {
        return Err(CodecError::UnequalBlocks);
    }
    if stream_index < k as u64 {
        return Ok(source_blocks[stream_index as usize].as_ref().to_vec());
    }
    let row = coeff_row(stream_index, k);
    let mut out = vec![0u8; len];
    for (c, block) in row.iter().zip(source_blocks) {
        mul_add_slice(&mut out, block.as_ref(), *c);
    }
    Ok(out)
}

/// Inverts a square matrix over GF(256) by Gauss-Jordan elimination.
fn invert(mut m: Vec<Vec<Gf256>>) -> Option<Vec<Vec<Gf256>>> {
    let k = m.len();
    let mut inv: Vec<Vec<Gf256>> = (0..k)
        .map(|i| {
            let mut r = vec![Gf256::ZERO; k];
            r[i] = Gf256::ONE;
            r
        })
        .collect();
    for col in 0..k {
        let pivot = (col..k).find(|&r| !m[r][col].is_zero())?;
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let scale = m[col][col].inv()?;
        for j in 0..k {
            m[col][j] *= scale;
            inv[col][j] *= scale;
        }
        for r in 0..k {
            if r != col && !m[r][col].is_zero() {
                let f = m[r][col];
                for j in 0..k {
                    let a = m[col][j];
                    let b = inv[col][j];
                    m[r][j] += f * a;
                    inv[r][j] += f * b;
                }
            }
        }
    }
    Some(inv)
}

/// Picks the first `k` linearly independent rows, in input order.
fn independent_rows(rows: &[Vec<Gf256>], k: usize) -> std::result::Result<Vec<usize>, usize> {
    // Echelon basis: (pivot column, reduced row).
    let mut basis: Vec<(usize, Vec<Gf256>)> = Vec::with_capacity(k);
    let mut chosen = Vec::with_capacity(k);
    for (idx, row) in rows.iter().enumerate() {
        let mut r = row.clone();
        for (pc, b) in &basis {
            let f = r[*pc];
            if !f.is_zero() {
                for j in 0..k {
                    r[j] += f * b[j];
                }
            }
        }
        if let Some(pc) = r.iter().position(|c| !c.is_zero()) {
            let s = r[pc].inv().expect("nonzero pivot");
            for c in r.iter_mut() {
                *c *= s;
            }
            // Keep the basis fully reduced in the new pivot column.
            for (_, b) in basis.iter_mut() {
                let f = b[pc];
                if !f.is_zero() {
                    for j in 0..k {
                        b[j] += f * r[j];
                    }
                }
            }
            basis.push((pc, r));
            chosen.push(idx);
            if chosen.len() == k {
                return Ok(chosen);
            }
        }
    }
    Err(chosen.len())
}

/// Reconstructs `k` source blocks from encoded symbols.
///
/// Symbols beyond the first `k` independent ones are checked for consistency
/// against the solution; a mismatch reports an integrity error. Repeated
/// indices with identical data are collapsed.
pub fn decode_symbols<B: AsRef<[u8]>>(symbols: &[(u64, B)], k: usize) -> Result<Vec<Vec<u8>>> {
    if k == 0 || symbols.is_empty() {
        return Err(CodecError::Empty);
    }
    let len = symbols[0].1.as_ref().len();
    if symbols.iter().any(|(_, b)| b.as_ref().len() != len) {
        return Err(CodecError::UnequalBlocks);
    }
    let mut unique: BTreeMap<u64, &[u8]> = BTreeMap::new();
    let mut order = Vec::with_capacity(symbols.len());
    for (idx, data) in symbols {
        match unique.get(idx) {
            Some(prev) if *prev != data.as_ref() => {
                return Err(CodecError::Integrity { suspects: vec![*idx] })
            }
            Some(_) => {}
            None => {
                unique.insert(*idx, data.as_ref());
                order.push(*idx);
            }
        }
    }
    if order.len() < k {
        let rows: Vec<_> = order.iter().map(|&i| coeff_row(i, k)).collect();
        let rank = independent_rows(&rows, k).err().unwrap_or(k);
        return Err(CodecError::NeedMoreSymbols { rank, needed: k });
    }
    let rows: Vec<_> = order.iter().map(|&i| coeff_row(i, k)).collect();
    let chosen = independent_rows(&rows, k).map_err(|rank| CodecError::NeedMoreSymbols { rank, needed: k })?;
    let square: Vec<Vec<Gf256>> = chosen.iter().map(|&i| rows[i].clone()).collect();
    let inv = invert(square).expect("independent rows form an invertible matrix");

    let mut out = vec![vec![0u8; len]; k];
    for (j, block) in out.iter_mut().enumerate() {
        for (t, &row_idx) in chosen.iter().enumerate() {
            mul_add_slice(block, unique[&order[row_idx]], inv[j][t]);
        }
    }

    let mut suspects = Vec::new();
    let mut check = vec![0u8; len];
    for (row_idx, idx) in order.iter().enumerate() {
        if chosen.contains(&row_idx) {
            continue;
        }
        check.fill(0);
        for (c, block) in rows[row_idx].iter().zip(&out) {
            mul_add_slice(&mut check, block, *c);
        }
        if check.as_slice() != unique[idx] {
            suspects.push(*idx);
        }
    }
    if !suspects.is_empty() {
        suspects.extend(chosen.iter().map(|&r| order[r]));
        suspects.sort_unstable();
        return Err(CodecError::Integrity { suspects });
    }
    Ok(out)
}

/// Splits `data` into `k` zero-padded blocks of `ceil(len / k)` bytes.
fn split_blocks(data: &[u8], k: usize) -> Vec<Vec<u8>> {
    let block = data.len().div_ceil(k).max(1);
    (0..k)
        .map(|i| {
            let start = (i * block).min(data.len());
            let end = ((i + 1) * block).min(data.len());
            let mut b = data[start..end].to_vec();
            b.resize(block, 0);
            b
        })
        .collect()
}

fn outer_blocks(object: &[u8], k_outer: usize) -> Vec<Vec<u8>> {
    let mut framed = Vec::with_capacity(object.len() + FRAME_PREFIX);
    framed.extend_from_slice(&(object.len() as u64).to_le_bytes());
    framed.extend_from_slice(object);
    split_blocks(&framed, k_outer)
}

type HmacSha256 = Hmac<Sha256>;

fn prf_index(secret: &[u8], object_hash: &Digest256, ordinal: u64, retry: u32) -> u64 {
    let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(object_hash.as_bytes());
    mac.update(&ordinal.to_le_bytes());
    if retry > 0 {
        mac.update(&retry.to_le_bytes());
    }
    let tag = mac.finalize().into_bytes();
    let v = u64::from_be_bytes(tag[..8].try_into().unwrap());
    OUTER_INDEX_BASE + v % (u64::MAX - OUTER_INDEX_BASE + 1)
}

/// Secret-keyed outer stream indices for ordinals `0..count`, deduplicated
/// by redrawing with a retry counter.
pub fn outer_indices(secret: &[u8], object_hash: &Digest256, count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(count);
    for ordinal in 0..count as u64 {
        let mut retry = 0;
        let idx = loop {
            let idx = prf_index(secret, object_hash, ordinal, retry);
            if !out.contains(&idx) {
                break idx;
            }
            retry += 1;
        };
        out.push(idx);
    }
    out
}

/// Encodes the outer chunk at a single ordinal. Used to materialize
/// replacement chunks beyond the first `n_chunks`.
pub fn outer_encode_ordinal(object: &[u8], secret: &[u8], params: &CodecParams, ordinal: usize) -> Chunk {
    let object_hash = content_hash(object);
    let idx = outer_indices(secret, &object_hash, ordinal + 1)[ordinal];
    let blocks = outer_blocks(object, params.k_outer);
    Chunk {
        object_hash,
        stream_index: idx,
        data: encode_symbol(&blocks, idx).expect("blocks are equal length"),
    }
}

/// Encodes `object` into `n_chunks` chunks at secret-keyed stream indices.
pub fn outer_encode(object: &[u8], secret: &[u8], params: &CodecParams) -> Result<Vec<Chunk>> {
    if object.is_empty() {
        return Err(CodecError::Empty);
    }
    params.validate()?;
    let object_hash = content_hash(object);
    let blocks = outer_blocks(object, params.k_outer);
    Ok(outer_indices(secret, &object_hash, params.n_chunks)
        .into_iter()
        .map(|idx| Chunk {
            object_hash,
            stream_index: idx,
            data: encode_symbol(&blocks, idx).expect("blocks are equal length"),
        })
        .collect())
}

/// Reassembles an object from at least `k_outer` chunks given as
/// `(stream_index, data)`.
pub fn outer_decode<B: AsRef<[u8]>>(
    chunks: &[(u64, B)],
    params: &CodecParams,
    expected_hash: Option<&Digest256>,
) -> Result<Vec<u8>> {
    let blocks = decode_symbols(chunks, params.k_outer)?;
    let framed: Vec<u8> = blocks.concat();
    if framed.len() < FRAME_PREFIX {
        return Err(CodecError::Malformed("frame shorter than length prefix"));
    }
    let len = u64::from_le_bytes(framed[..FRAME_PREFIX].try_into().unwrap()) as usize;
    if len > framed.len() - FRAME_PREFIX {
        return Err(CodecError::Integrity {
            suspects: chunks.iter().map(|(i, _)| *i).collect(),
        });
    }
    let object = framed[FRAME_PREFIX..FRAME_PREFIX + len].to_vec();
    if let Some(h) = expected_hash {
        if content_hash(&object) != *h {
            return Err(CodecError::Integrity {
                suspects: chunks.iter().map(|(i, _)| *i).collect(),
            });
        }
    }
    Ok(object)
}

/// Inner encoding: the fragment of `chunk` at `stream_index`.
pub fn inner_encode(chunk_data: &[u8], chunk_hash: Digest256, stream_index: u64, k_inner: usize) -> Fragment {
    let blocks = split_blocks(chunk_data, k_inner);
    Fragment {
        chunk_hash,
        chunk_len: chunk_data.len() as u64,
        stream_index,
        data: encode_symbol(&blocks, stream_index).expect("blocks are equal length"),
    }
}

/// Inner decoding with a hash check against the fragments' chunk hash.
pub fn inner_decode(fragments: &[Fragment], k_inner: usize) -> Result<Vec<u8>> {
    let first = fragments.first().ok_or(CodecError::Empty)?;
    let suspects = || fragments.iter().map(|f| f.stream_index).collect::<Vec<_>>();
    if fragments
        .iter()
        .any(|f| f.chunk_hash != first.chunk_hash || f.chunk_len != first.chunk_len)
    {
        return Err(CodecError::Integrity { suspects: suspects() });
    }
    let symbols: Vec<(u64, &[u8])> = fragments.iter().map(|f| (f.stream_index, f.data.as_slice())).collect();
    let blocks = decode_symbols(&symbols, k_inner)?;
    let mut chunk = blocks.concat();
    if (first.chunk_len as usize) > chunk.len() {
        return Err(CodecError::Integrity { suspects: suspects() });
    }
    chunk.truncate(first.chunk_len as usize);
    if content_hash(&chunk) != first.chunk_hash {
        return Err(CodecError::Integrity { suspects: suspects() });
    }
    Ok(chunk)
}

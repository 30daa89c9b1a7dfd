//! Node keys, identities, claim signatures and the verifiable random
//! function used by peer selection.

mod vrf;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};

use crate::codec::{content_hash, Digest256};

pub use vrf::{vrf_prove, vrf_verify, VrfOutput, PROOF_LEN};

/// A node's position on the identifier ring: SHA-256 of its public key.
pub type NodeId = Digest256;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);

impl Serialize for PublicKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        crate::hexser::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        crate::hexser::deserialize(d).map(PublicKey)
    }
}

impl PublicKey {
    pub fn node_id(&self) -> NodeId {
        node_id(self)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<PublicKey> {
        let v = hex::decode(s.trim()).ok()?;
        Some(PublicKey(v.try_into().ok()?))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", &self.to_hex()[..12])
    }
}

pub fn node_id(pk: &PublicKey) -> NodeId {
    content_hash(&pk.0)
}

/// Ed25519 key pair derived from a 32-byte seed.
#[derive(Clone)]
pub struct KeyPair {
    seed: [u8; 32],
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> KeyPair {
        KeyPair {
            seed,
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng>(rng: &mut R) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        KeyPair::from_seed(seed)
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn node_id(&self) -> NodeId {
        node_id(&self.public())
    }

    pub fn sign(&self, payload: &[u8]) -> Vec<u8> {
        self.signing.sign(payload).to_bytes().to_vec()
    }

    pub fn vrf_prove(&self, input: &[u8]) -> VrfOutput {
        vrf_prove(&self.seed, input)
    }

    pub fn load(path: &Path) -> io::Result<KeyPair> {
        let bytes = std::fs::read(path)?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "key file must hold a 32-byte seed"))?;
        Ok(KeyPair::from_seed(seed))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.seed)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

pub fn keygen(seed: [u8; 32]) -> KeyPair {
    KeyPair::from_seed(seed)
}

pub fn sign_claim(keys: &KeyPair, payload: &[u8]) -> Vec<u8> {
    keys.sign(payload)
}

/// Malformed keys or signatures verify as false.
pub fn verify_claim(pk: &PublicKey, payload: &[u8], sig: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
        return false;
    };
    vk.verify(payload, &sig).is_ok()
}

/// Public keys known to every node, keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PkRegistry {
    keys: BTreeMap<NodeId, PublicKey>,
}

impl PkRegistry {
    pub fn insert(&mut self, pk: PublicKey) {
        self.keys.insert(pk.node_id(), pk);
    }

    pub fn get(&self, id: &NodeId) -> Option<&PublicKey> {
        self.keys.get(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn to_json(&self) -> String {
        let m: BTreeMap<String, String> = self.keys.iter().map(|(k, v)| (k.to_hex(), v.to_hex())).collect();
        serde_json::to_string_pretty(&m).expect("string map serializes")
    }

    /// Parses `{node_id_hex: pk_hex}` and rejects entries whose id does not
    /// match the key.
    pub fn from_json(s: &str) -> Result<PkRegistry, String> {
        let m: BTreeMap<String, String> = serde_json::from_str(s).map_err(|e| e.to_string())?;
        let mut reg = PkRegistry::default();
        for (id, pk) in m {
            let pk = PublicKey::from_hex(&pk).ok_or_else(|| format!("bad public key for {id}"))?;
            if pk.node_id().to_hex() != id.to_lowercase() {
                return Err(format!("node id {id} does not match its public key"));
            }
            reg.insert(pk);
        }
        Ok(reg)
    }
}

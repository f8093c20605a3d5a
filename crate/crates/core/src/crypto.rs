//! Hashing and signatures.
//!
//! The suite is fixed at build time: SHA-256 for digests and Ed25519 for
//! signatures. Callers only see [`Hash32`], [`PublicKey`], [`Signature`] and
//! [`KeyPair`], so swapping the scheme touches this file alone.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Mutex, OnceLock};

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use sha2::{Digest, Sha256};

use crate::codec::{CodecError, Decode, Decoder, Encode, Encoder};

/// A 32-byte digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let v = hex::decode(s).ok()?;
        Some(Hash32(v.try_into().ok()?))
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Hash32 {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl Encode for Hash32 {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }
}

impl Decode for Hash32 {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Hash32(dec.raw::<32>()?))
    }
}

pub fn hash(data: &[u8]) -> Hash32 {
    Hash32(Sha256::digest(data).into())
}

/// Digest of the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Hash32 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Hash32(h.finalize().into())
}

/// Digest of a value's canonical encoding.
pub fn digest_of<T: Encode + ?Sized>(value: &T) -> Hash32 {
    hash(&value.to_canonical())
}

/// Verification key bytes. Kept as raw bytes so that malformed keys can be
/// represented and rejected at verification time instead of at decode time.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PublicKey(pub Vec<u8>);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        hex::decode(s).ok().map(PublicKey)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = self.to_hex();
        write!(f, "pk:{}", &hex[..hex.len().min(10)])
    }
}

impl Encode for PublicKey {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
}

impl Decode for PublicKey {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(PublicKey(dec.bytes()?))
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hex = hex::encode(&self.0);
        write!(f, "sig:{}", &hex[..hex.len().min(10)])
    }
}

impl Encode for Signature {
    fn encode_to(&self, enc: &mut Encoder) {
        enc.bytes(&self.0);
    }
}

impl Decode for Signature {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Signature(dec.bytes()?))
    }
}

/// A signing key together with its public half.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&seed);
        let public = PublicKey(signing.verifying_key().to_bytes().to_vec());
        Self { signing, public }
    }

    /// Deterministic key derived from a label, for simulations and tests.
    pub fn from_label(label: &str) -> Self {
        Self::from_seed(hash_parts(&[b"quorate-key\x1f", label.as_bytes()]).0)
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes().to_vec())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish()
    }
}

/// Total verification: malformed keys or signatures yield `false`.
///
/// Results are memoized per (key, message, signature): replicas check the
/// same client and peer signatures many times over.
pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    const CAP: usize = 1 << 16;
    static MEMO: OnceLock<Mutex<HashMap<Hash32, bool>>> = OnceLock::new();
    let memo = MEMO.get_or_init(Default::default);
    let id = hash_parts(&[
        &(public.0.len() as u64).to_be_bytes(),
        &public.0,
        &(msg.len() as u64).to_be_bytes(),
        msg,
        &sig.0,
    ]);
    if let Some(&ok) = memo.lock().expect("memo lock").get(&id) {
        return ok;
    }
    let ok = verify_uncached(public, msg, sig);
    let mut m = memo.lock().expect("memo lock");
    if m.len() >= CAP {
        m.clear();
    }
    m.insert(id, ok);
    ok
}

fn verify_uncached(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(pk_bytes) = <[u8; 32]>::try_from(public.0.as_slice()) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(sig.0.as_slice()) else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(&pk_bytes) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
    vk.verify_strict(msg, &sig).is_ok()
}

/// Signs the digest of a value's canonical encoding.
pub fn sign_value<T: Encode + ?Sized>(key: &KeyPair, value: &T) -> Signature {
    key.sign(digest_of(value).as_bytes())
}

pub fn verify_value<T: Encode + ?Sized>(public: &PublicKey, value: &T, sig: &Signature) -> bool {
    verify(public, digest_of(value).as_bytes(), sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_hash_is_sha256() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn sign_verify_round_trip_on_empty_message() {
        let k = KeyPair::from_label("a");
        let sig = k.sign(b"");
        assert!(verify(k.public_key(), b"", &sig));
    }

    #[test]
    fn key_mismatch_fails() {
        let a = KeyPair::from_label("a");
        let b = KeyPair::from_label("b");
        let sig = a.sign(b"msg");
        assert!(!verify(b.public_key(), b"msg", &sig));
    }

    #[test]
    fn malformed_inputs_are_rejected_without_panicking() {
        let k = KeyPair::from_label("a");
        let sig = k.sign(b"m");
        assert!(!verify(&PublicKey(vec![1, 2, 3]), b"m", &sig));
        assert!(!verify(k.public_key(), b"m", &Signature(vec![0; 63])));
        assert!(!verify(&PublicKey(vec![0xFF; 32]), b"m", &sig));
        assert!(!verify(k.public_key(), b"m", &Signature(vec![0xFF; 64])));
    }

    #[test]
    fn seed_round_trip() {
        let k = KeyPair::from_label("x");
        let k2 = KeyPair::from_seed(k.seed());
        assert_eq!(k.public_key(), k2.public_key());
    }
}

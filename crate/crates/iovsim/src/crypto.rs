//! Pluggable cryptographic provider.
//!
//! Everything above this module talks to cryptography only through the
//! [`CryptoProvider`] trait: hashing, signing, key agreement, authenticated
//! sealing, and key derivation. The default instantiation, [`TestCrypto`],
//! is fully deterministic and inspectable: keys are derived from caller
//! supplied seeds, signatures are Schnorr over a fixed 256-bit safe-prime
//! group, and sealing is a hash-based stream cipher with a hash MAC. It is
//! a *test* provider -- adequate to make protocol-level claims falsifiable,
//! not a production cipher suite.

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

/// 32-byte hash output used throughout the wire formats.
pub type Digest32 = [u8; 32];

/// Authentication tag length appended to every sealed record.
pub const TAG_LEN: usize = 16;
/// Serialized public value / signature component length.
pub const KEY_LEN: usize = 32;
/// Schnorr signature: challenge || response, each 32 bytes.
pub const SIG_LEN: usize = 64;

/// Abstract interface the rest of the stack is written against.
pub trait CryptoProvider {
    fn hash(data: &[u8]) -> Digest32;

    fn signing_key_from_seed(seed: &[u8]) -> SigningKey;
    fn sign(key: &SigningKey, msg: &[u8]) -> Vec<u8>;
    fn verify(verify_key: &[u8], msg: &[u8], sig: &[u8]) -> bool;

    fn agreement_secret_from_seed(seed: &[u8]) -> AgreementSecret;
    fn agree(secret: &AgreementSecret, peer_public: &[u8]) -> Option<Digest32>;

    /// Derive a symmetric key from a label and a list of inputs.
    fn kdf(label: &str, inputs: &[&[u8]]) -> Digest32;

    fn seal(key: &Digest32, nonce: &[u8], aad: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn open(key: &Digest32, nonce: &[u8], aad: &[u8], sealed: &[u8]) -> Option<Vec<u8>>;
}

/// Long-term signing key. `verify_key` is the serialized public half.
#[derive(Clone)]
pub struct SigningKey {
    secret: BigUint,
    verify_key: Vec<u8>,
}

impl SigningKey {
    pub fn verify_key(&self) -> &[u8] {
        &self.verify_key
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKey(vk={})", hex::encode(&self.verify_key))
    }
}

/// Ephemeral key-agreement secret for one handshake.
#[derive(Clone)]
pub struct AgreementSecret {
    secret: BigUint,
    public: Vec<u8>,
}

impl AgreementSecret {
    pub fn public(&self) -> &[u8] {
        &self.public
    }
}

/// The deterministic test instantiation.
pub struct TestCrypto;

/// Default provider used across the crate.
pub type Provider = TestCrypto;

// 256-bit safe prime p = 2q + 1; the subgroup of squares has prime order q
// and is generated by 4.
const GROUP_P_HEX: &str = "d5d347d02cadeb37bc8a8e1d3043f0f5b4cec94f92ee151c6b10481229acaf0f";
const GROUP_Q_HEX: &str = "6ae9a3e81656f59bde45470e9821f87ada6764a7c9770a8e3588240914d65787";
const GROUP_G: u32 = 4;

fn group_p() -> BigUint {
    BigUint::parse_bytes(GROUP_P_HEX.as_bytes(), 16).unwrap()
}

fn group_q() -> BigUint {
    BigUint::parse_bytes(GROUP_Q_HEX.as_bytes(), 16).unwrap()
}

fn to_fixed32(x: &BigUint) -> [u8; 32] {
    let bytes = x.to_bytes_be();
    assert!(bytes.len() <= 32);
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    out
}

fn hash_to_scalar(parts: &[&[u8]]) -> BigUint {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u32).to_le_bytes());
        hasher.update(p);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    BigUint::from_bytes_be(&digest) % group_q()
}

fn decode_group_element(bytes: &[u8]) -> Option<BigUint> {
    if bytes.len() != KEY_LEN {
        return None;
    }
    let x = BigUint::from_bytes_be(bytes);
    let p = group_p();
    if x < BigUint::from(2u32) || x >= p {
        return None;
    }
    // membership in the order-q subgroup
    if x.modpow(&group_q(), &p) != BigUint::from(1u32) {
        return None;
    }
    Some(x)
}

impl CryptoProvider for TestCrypto {
    fn hash(data: &[u8]) -> Digest32 {
        let mut hasher = Sha256::new();
        hasher.update(data);
        hasher.finalize().into()
    }

    fn signing_key_from_seed(seed: &[u8]) -> SigningKey {
        let x = hash_to_scalar(&[b"iov-sign-seed", seed]);
        let p = group_p();
        let public = BigUint::from(GROUP_G).modpow(&x, &p);
        SigningKey {
            secret: x,
            verify_key: to_fixed32(&public).to_vec(),
        }
    }

    fn sign(key: &SigningKey, msg: &[u8]) -> Vec<u8> {
        let p = group_p();
        let q = group_q();
        // deterministic nonce
        let k = hash_to_scalar(&[b"iov-sign-nonce", &to_fixed32(&key.secret), msg]);
        let r = BigUint::from(GROUP_G).modpow(&k, &p);
        let e = hash_to_scalar(&[b"iov-sign-chal", &to_fixed32(&r), &key.verify_key, msg]);
        let s = (&k + &e * &key.secret) % &q;
        let mut sig = Vec::with_capacity(SIG_LEN);
        sig.extend_from_slice(&to_fixed32(&e));
        sig.extend_from_slice(&to_fixed32(&s));
        sig
    }

    fn verify(verify_key: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        if sig.len() != SIG_LEN {
            return false;
        }
        let Some(pk) = decode_group_element(verify_key) else {
            return false;
        };
        let p = group_p();
        let q = group_q();
        let e = BigUint::from_bytes_be(&sig[..32]);
        let s = BigUint::from_bytes_be(&sig[32..]);
        if e >= q || s >= q {
            return false;
        }
        // r' = g^s * pk^(-e) = g^s * pk^(q - e)
        let r = (BigUint::from(GROUP_G).modpow(&s, &p) * pk.modpow(&(&q - &e), &p)) % &p;
        let e2 = hash_to_scalar(&[b"iov-sign-chal", &to_fixed32(&r), verify_key, msg]);
        e2 == e
    }

    fn agreement_secret_from_seed(seed: &[u8]) -> AgreementSecret {
        let a = hash_to_scalar(&[b"iov-agree-seed", seed]);
        let p = group_p();
        let public = BigUint::from(GROUP_G).modpow(&a, &p);
        AgreementSecret {
            secret: a,
            public: to_fixed32(&public).to_vec(),
        }
    }

    fn agree(secret: &AgreementSecret, peer_public: &[u8]) -> Option<Digest32> {
        let peer = decode_group_element(peer_public)?;
        let shared = peer.modpow(&secret.secret, &group_p());
        Some(to_fixed32(&shared))
    }

    fn kdf(label: &str, inputs: &[&[u8]]) -> Digest32 {
        let mut hasher = Sha256::new();
        hasher.update((label.len() as u32).to_le_bytes());
        hasher.update(label.as_bytes());
        for input in inputs {
            hasher.update((input.len() as u32).to_le_bytes());
            hasher.update(input);
        }
        hasher.finalize().into()
    }

    fn seal(key: &Digest32, nonce: &[u8], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut out = keystream_xor(key, nonce, plaintext);
        let tag = mac(key, nonce, aad, &out);
        out.extend_from_slice(&tag);
        out
    }

    fn open(key: &Digest32, nonce: &[u8], aad: &[u8], sealed: &[u8]) -> Option<Vec<u8>> {
        if sealed.len() < TAG_LEN {
            return None;
        }
        let (ct, tag) = sealed.split_at(sealed.len() - TAG_LEN);
        if mac(key, nonce, aad, ct) != tag {
            return None;
        }
        Some(keystream_xor(key, nonce, ct))
    }
}

fn keystream_xor(key: &Digest32, nonce: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len());
    for (block_idx, chunk) in data.chunks(32).enumerate() {
        let block = TestCrypto::kdf(
            "iov-seal-keystream",
            &[key, nonce, &(block_idx as u64).to_le_bytes()],
        );
        out.extend(chunk.iter().zip(block.iter()).map(|(a, b)| a ^ b));
    }
    out
}

fn mac(key: &Digest32, nonce: &[u8], aad: &[u8], ct: &[u8]) -> [u8; TAG_LEN] {
    let full = TestCrypto::kdf("iov-seal-tag", &[key, nonce, aad, ct]);
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&full[..TAG_LEN]);
    tag
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_verify_roundtrip() {
        let key = TestCrypto::signing_key_from_seed(b"node-a");
        let sig = TestCrypto::sign(&key, b"hello");
        assert!(TestCrypto::verify(key.verify_key(), b"hello", &sig));
        assert!(!TestCrypto::verify(key.verify_key(), b"hellp", &sig));
    }

    #[test]
    fn verify_rejects_wrong_key() {
        let a = TestCrypto::signing_key_from_seed(b"a");
        let b = TestCrypto::signing_key_from_seed(b"b");
        let sig = TestCrypto::sign(&a, b"msg");
        assert!(!TestCrypto::verify(b.verify_key(), b"msg", &sig));
    }

    #[test]
    fn verify_rejects_sig_bitflips() {
        let key = TestCrypto::signing_key_from_seed(b"a");
        let sig = TestCrypto::sign(&key, b"msg");
        for byte in 0..sig.len() {
            for bit in 0..8 {
                let mut bad = sig.clone();
                bad[byte] ^= 1 << bit;
                assert!(!TestCrypto::verify(key.verify_key(), b"msg", &bad));
            }
        }
    }

    #[test]
    fn agreement_is_symmetric() {
        let a = TestCrypto::agreement_secret_from_seed(b"eph-a");
        let b = TestCrypto::agreement_secret_from_seed(b"eph-b");
        let sa = TestCrypto::agree(&a, b.public()).unwrap();
        let sb = TestCrypto::agree(&b, a.public()).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn agree_rejects_non_group_element() {
        let a = TestCrypto::agreement_secret_from_seed(b"eph-a");
        assert!(TestCrypto::agree(&a, &[0u8; 32]).is_none());
        assert!(TestCrypto::agree(&a, &[0xffu8; 32]).is_none());
        assert!(TestCrypto::agree(&a, &[1u8; 7]).is_none());
    }

    #[test]
    fn seal_open_roundtrip_and_tamper() {
        let key = TestCrypto::kdf("k", &[b"x"]);
        let sealed = TestCrypto::seal(&key, b"n1", b"aad", b"plaintext bytes");
        assert_eq!(
            TestCrypto::open(&key, b"n1", b"aad", &sealed).as_deref(),
            Some(&b"plaintext bytes"[..])
        );
        assert!(TestCrypto::open(&key, b"n2", b"aad", &sealed).is_none());
        assert!(TestCrypto::open(&key, b"n1", b"aae", &sealed).is_none());
        let mut bad = sealed.clone();
        bad[0] ^= 1;
        assert!(TestCrypto::open(&key, b"n1", b"aad", &bad).is_none());
    }

    #[test]
    fn seal_overhead_is_tag_len() {
        let key = TestCrypto::kdf("k", &[b"x"]);
        for n in [0usize, 1, 31, 32, 33, 64] {
            let sealed = TestCrypto::seal(&key, b"n", b"", &vec![0u8; n]);
            assert_eq!(sealed.len(), n + TAG_LEN);
        }
    }
}

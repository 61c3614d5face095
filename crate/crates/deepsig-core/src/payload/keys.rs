//! Ed25519ph keys and signatures over binarized latents.
//!
//! The latent bitstring is packed MSB-first into bytes (final partial byte
//! zero-padded), prehashed with SHA-512, and signed without a context string.

use std::fs;
use std::path::Path;

use ed25519_dalek::{Signature, SigningKey};
pub use ed25519_dalek::VerifyingKey;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};
use thiserror::Error;

use crate::bits::{pack_bits, unpack_bits};

/// Signature length in payload bits.
pub const SIGNATURE_BITS: usize = 512;

/// Secret key files start with this magic, followed by the 32-byte seed.
const KEY_MAGIC: &[u8; 4] = b"DSK1";

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a secret key file (bad magic or length)")]
    BadSecretFile,
    #[error("public key is not 64 hex chars")]
    BadPublicHex,
    #[error("public key bytes do not form a valid curve point")]
    BadPublicKey,
}

pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn from_seed(seed: &[u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(seed) }
    }

    pub fn public(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn public_hex(&self) -> String {
        hex::encode(self.signing.verifying_key().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), KeyError> {
        let mut buf = Vec::with_capacity(36);
        buf.extend_from_slice(KEY_MAGIC);
        buf.extend_from_slice(&self.signing.to_bytes());
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let buf = fs::read(path)?;
        if buf.len() != 36 || &buf[..4] != KEY_MAGIC {
            return Err(KeyError::BadSecretFile);
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&buf[4..]);
        Ok(Self::from_seed(&seed))
    }
}

pub fn save_public(key: &VerifyingKey, path: &Path) -> Result<(), KeyError> {
    fs::write(path, format!("{}\n", hex::encode(key.as_bytes())))?;
    Ok(())
}

pub fn load_public(path: &Path) -> Result<VerifyingKey, KeyError> {
    let text = fs::read_to_string(path)?;
    parse_public_hex(text.trim())
}

pub fn parse_public_hex(s: &str) -> Result<VerifyingKey, KeyError> {
    let bytes = hex::decode(s).map_err(|_| KeyError::BadPublicHex)?;
    let arr: [u8; 32] = bytes.try_into().map_err(|_| KeyError::BadPublicHex)?;
    VerifyingKey::from_bytes(&arr).map_err(|_| KeyError::BadPublicKey)
}

fn prehash(bits: &[u8]) -> Sha512 {
    let mut h = Sha512::new();
    h.update(pack_bits(bits));
    h
}

/// Signs the latent bitstring; returns the signature as 512 bits.
pub fn sign_latent(key: &KeyPair, latent_bits: &[u8]) -> Vec<u8> {
    assert!(!latent_bits.is_empty(), "cannot sign an empty latent");
    let sig = key
        .signing
        .sign_prehashed(prehash(latent_bits), None)
        .expect("prehashed signing is infallible for a valid key");
    unpack_bits(&sig.to_bytes(), SIGNATURE_BITS)
}

/// True iff `sig_bits` is a valid signature over exactly `latent_bits`.
/// Malformed input is a verification failure, not an error.
pub fn verify_latent(key: &VerifyingKey, latent_bits: &[u8], sig_bits: &[u8]) -> bool {
    if latent_bits.is_empty() || sig_bits.len() != SIGNATURE_BITS {
        return false;
    }
    let sig_bytes: [u8; 64] = pack_bits(sig_bits).try_into().expect("512 bits pack to 64 bytes");
    let sig = Signature::from_bytes(&sig_bytes);
    key.verify_prehashed(prehash(latent_bits), None, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    // RFC 8032 test vector for Ed25519ph, message "abc".
    const RFC_SEED: &str = "833fe62409237b9d62ec77587520911e9a759cec1d19755b7da901b96dca3d42";
    const RFC_PUBLIC: &str = "ec172b93ad5e563bf4932c70e1245034c35467ef2efd4d64ebf819683467e2bf";
    const RFC_SIG: &str = "98a70222f0b8121aa9d30f813d683f809e462b469c7ff87639499bb94e6dae41\
                           31f85042463c2a355a2003d062adf5aaa10b8c61e636062aaad11c2a26083406";

    #[test]
    fn matches_published_prehash_vector() {
        let seed: [u8; 32] = hex::decode(RFC_SEED).unwrap().try_into().unwrap();
        let kp = KeyPair::from_seed(&seed);
        assert_eq!(kp.public_hex(), RFC_PUBLIC);
        let msg_bits = unpack_bits(b"abc", 24);
        let sig_bits = sign_latent(&kp, &msg_bits);
        assert_eq!(hex::encode(pack_bits(&sig_bits)), RFC_SIG.replace(char::is_whitespace, ""));
        assert!(verify_latent(&kp.public(), &msg_bits, &sig_bits));
    }

    #[test]
    fn any_single_flip_breaks_verification() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let kp = KeyPair::generate(&mut rng);
        let latent: Vec<u8> = (0..96).map(|i| (i % 3 == 0) as u8).collect();
        let sig = sign_latent(&kp, &latent);
        assert!(verify_latent(&kp.public(), &latent, &sig));
        for i in 0..latent.len() {
            let mut bad = latent.clone();
            bad[i] ^= 1;
            assert!(!verify_latent(&kp.public(), &bad, &sig), "flip {i} accepted");
        }
        for i in 0..sig.len() {
            let mut bad = sig.clone();
            bad[i] ^= 1;
            assert!(!verify_latent(&kp.public(), &latent, &bad), "sig flip {i} accepted");
        }
    }

    #[test]
    fn wrong_key_and_malformed_inputs_fail_closed() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let kp = KeyPair::generate(&mut rng);
        let other = KeyPair::generate(&mut rng);
        let latent: Vec<u8> = (0..64).map(|i| (i & 1) as u8).collect();
        let sig = sign_latent(&kp, &latent);
        assert!(!verify_latent(&other.public(), &latent, &sig));
        assert!(!verify_latent(&kp.public(), &latent, &sig[..500]));
        assert!(!verify_latent(&kp.public(), &[], &sig));
    }

    #[test]
    fn key_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let kp = KeyPair::generate(&mut rng);
        let sk_path = dir.path().join("test.key");
        let pk_path = dir.path().join("test.pub");
        kp.save(&sk_path).unwrap();
        save_public(&kp.public(), &pk_path).unwrap();

        let loaded = KeyPair::load(&sk_path).unwrap();
        assert_eq!(loaded.public_hex(), kp.public_hex());
        let pk = load_public(&pk_path).unwrap();
        assert_eq!(pk.as_bytes(), kp.public().as_bytes());

        fs::write(&sk_path, b"XXXX0123").unwrap();
        assert!(matches!(KeyPair::load(&sk_path), Err(KeyError::BadSecretFile)));
    }
}

//! Key agreement, epoch key derivation, sample-ID encryption and the mask PRG.
//!
//! Every client generates one X25519 keypair *per peer*; the resulting
//! shared secret is never used directly but fed through HKDF-SHA256 together
//! with the epoch number to obtain a symmetric key for sample-ID encryption
//! and an independent seed for the mask PRG.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key};
use hkdf::Hkdf;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::masking::Ring;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;

const KDF_SALT: &[u8] = b"vfl-secagg/epoch-kdf/v1";
const CTX_ID_ENC: &[u8] = b"id-enc";
const CTX_MASK_PRG: &[u8] = b"mask-prg";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid public key: {0}")]
    InvalidPublicKey(&'static str),

    #[error("authentication failed")]
    AuthenticationFailed,

    #[error("malformed sample-id plaintext")]
    MalformedIds,
}

/// An X25519 keypair generated for one specific peer.
#[derive(Clone)]
pub struct KeyPair {
    secret: StaticSecret,
    public: PublicKey,
}

impl KeyPair {
    /// Deterministic in `entropy`; every 32-byte string is a valid (clamped) scalar.
    pub fn generate(entropy: [u8; KEY_LEN]) -> Self {
        let secret = StaticSecret::from(entropy);
        let public = PublicKey::from(&secret);
        KeyPair { secret, public }
    }

    pub fn from_rng<R: RngCore>(rng: &mut R) -> Self {
        let mut entropy = [0u8; KEY_LEN];
        rng.fill_bytes(&mut entropy);
        Self::generate(entropy)
    }

    pub fn secret_bytes(&self) -> [u8; KEY_LEN] {
        self.secret.to_bytes()
    }

    pub fn public_bytes(&self) -> [u8; KEY_LEN] {
        self.public.to_bytes()
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &hex_short(&self.public_bytes()))
            .finish_non_exhaustive()
    }
}

/// Raw ECDH output for the unordered pair `(lo, hi)`.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret {
    bytes: [u8; KEY_LEN],
    pair: (u16, u16),
}

impl SharedSecret {
    pub fn pair(&self) -> (u16, u16) {
        self.pair
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }
}

impl std::fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedSecret")
            .field("pair", &self.pair)
            .finish_non_exhaustive()
    }
}

/// Decodes a peer public key, rejecting anything that is not exactly 32 bytes.
pub fn parse_public_key(bytes: &[u8]) -> Result<[u8; KEY_LEN], CryptoError> {
    bytes
        .try_into()
        .map_err(|_| CryptoError::InvalidPublicKey("expected 32 bytes"))
}

/// ECDH between `own` (party `own_index`) and the peer's public key.
///
/// Low-order peer points produce an all-zero output and are rejected.
pub fn derive_shared_secret(
    own: &KeyPair,
    own_index: u16,
    peer_pk: &[u8],
    peer_index: u16,
) -> Result<SharedSecret, CryptoError> {
    let peer = PublicKey::from(parse_public_key(peer_pk)?);
    let shared = own.secret.diffie_hellman(&peer);
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidPublicKey("low-order point"));
    }
    let pair = if own_index < peer_index {
        (own_index, peer_index)
    } else {
        (peer_index, own_index)
    };
    Ok(SharedSecret {
        bytes: shared.to_bytes(),
        pair,
    })
}

/// Keys for one pair in one epoch.
#[derive(Clone, PartialEq, Eq)]
pub struct EpochKeys {
    pub epoch: u64,
    pub sym_key: [u8; KEY_LEN],
    pub prg_seed: [u8; KEY_LEN],
}

impl std::fmt::Debug for EpochKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EpochKeys")
            .field("epoch", &self.epoch)
            .finish_non_exhaustive()
    }
}

pub fn derive_epoch_keys(ss: &SharedSecret, epoch: u64) -> EpochKeys {
    let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), &ss.bytes);
    let expand = |ctx: &[u8]| {
        let mut info = Vec::with_capacity(ctx.len() + 9);
        info.extend_from_slice(ctx);
        info.push(b'/');
        info.extend_from_slice(&epoch.to_le_bytes());
        let mut out = [0u8; KEY_LEN];
        hk.expand(&info, &mut out)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        out
    };
    EpochKeys {
        epoch,
        sym_key: expand(CTX_ID_ENC),
        prg_seed: expand(CTX_MASK_PRG),
    }
}

/// Packs a unique AEAD nonce: `round (4) ‖ sender (2) ‖ cluster (2) ‖ slot (4)`,
/// all little-endian. The epoch is not included because every epoch has
/// its own key.
pub fn pack_nonce(round: u32, sender: u16, cluster: u16, slot: u32) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[0..4].copy_from_slice(&round.to_le_bytes());
    n[4..6].copy_from_slice(&sender.to_le_bytes());
    n[6..8].copy_from_slice(&cluster.to_le_bytes());
    n[8..12].copy_from_slice(&slot.to_le_bytes());
    n
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedIdBatch {
    pub cluster_id: u16,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl EncryptedIdBatch {
    /// `cluster_id (2) ‖ nonce (12) ‖ len (4) ‖ ciphertext`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.ciphertext.len());
        out.extend_from_slice(&self.cluster_id.to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    /// Parses one batch from the front of `bytes`, returning it and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Option<(Self, usize)> {
        if bytes.len() < 18 {
            return None;
        }
        let cluster_id = u16::from_le_bytes([bytes[0], bytes[1]]);
        let nonce: [u8; NONCE_LEN] = bytes[2..14].try_into().ok()?;
        let len = u32::from_le_bytes(bytes[14..18].try_into().ok()?) as usize;
        let end = 18usize.checked_add(len)?;
        let ciphertext = bytes.get(18..end)?.to_vec();
        Some((
            EncryptedIdBatch {
                cluster_id,
                nonce,
                ciphertext,
            },
            end,
        ))
    }
}

pub fn serialize_ids(ids: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * ids.len());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn deserialize_ids(bytes: &[u8]) -> Result<Vec<u64>, CryptoError> {
    let head: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or(CryptoError::MalformedIds)?;
    let n = u32::from_le_bytes(head) as usize;
    let body = &bytes[4..];
    if body.len() != n * 8 {
        return Err(CryptoError::MalformedIds);
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encrypt_sample_ids(
    key: &[u8; KEY_LEN],
    cluster_id: u16,
    ids: &[u64],
    nonce: [u8; NONCE_LEN],
) -> EncryptedIdBatch {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let ciphertext = cipher
        .encrypt(&nonce.into(), serialize_ids(ids).as_slice())
        .expect("in-memory encryption cannot fail");
    EncryptedIdBatch {
        cluster_id,
        nonce,
        ciphertext,
    }
}

/// Fails with `AuthenticationFailed` whenever the batch was not sealed under `key`.
pub fn decrypt_sample_ids(
    key: &[u8; KEY_LEN],
    batch: &EncryptedIdBatch,
) -> Result<Vec<u64>, CryptoError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let plain = cipher
        .decrypt(&batch.nonce.into(), batch.ciphertext.as_slice())
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    deserialize_ids(&plain)
}

/// `count` uniform ring elements from stream 0 of the seeded ChaCha20 PRG.
pub fn prg_expand(seed: &[u8; KEY_LEN], count: usize) -> Vec<Ring> {
    prg_expand_stream(seed, 0, count)
}

/// Same as [`prg_expand`] on an independent ChaCha stream. Distinct
/// `stream` values never overlap.
pub fn prg_expand_stream(seed: &[u8; KEY_LEN], stream: u64, count: usize) -> Vec<Ring> {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    rng.set_stream(stream);
    (0..count).map(|_| Ring(rng.next_u64())).collect()
}

fn hex_short(bytes: &[u8]) -> String {
    bytes.iter().take(4).map(|b| format!("{b:02x}")).collect::<String>() + ".."
}

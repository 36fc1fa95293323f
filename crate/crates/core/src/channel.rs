//! Emulated remote attestation, per-client key agreement and the encrypted
//! update record.
//!
//! The enclave proves its identity by signing a fixed measurement together
//! with the client's fresh challenge and both ephemeral X25519 keys. The
//! signing key stands in for the attestation infrastructure and is local to
//! one experiment. Both sides derive the client key `sk_i` from the X25519
//! shared secret with HKDF-SHA256.
//!
//! Updates travel as ChaCha20-Poly1305 ciphertexts whose associated data is
//! the whole record header:
//!
//! ```text
//! "ESMF" | version u8 | client_id u32 | round u32 | payload_format u8
//!        | nonce [u8; 12] | ciphertext_len u64 | ciphertext (incl. 16-byte tag)
//! ```
//!
//! Integers are little-endian. Nonces are `client_id || round || counter`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::codec::WireFormat;
use crate::enclave::TrustedSection;

pub const RECORD_MAGIC: &[u8; 4] = b"ESMF";
pub const RECORD_VERSION: u8 = 1;
pub const RECORD_HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 12 + 8;
pub const TAG_LEN: usize = 16;

/// Measurement the emulated enclave reports; clients pin this value.
pub const ENCLAVE_MEASUREMENT: [u8; 32] = *b"esmfl/emulated-enclave/aggr/v1.0";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("attestation failed for client {client}: {reason}")]
    Attestation { client: u32, reason: &'static str },
    #[error("client {0} is already registered")]
    DuplicateClient(u32),
    #[error("client {0} has no pending handshake")]
    NoPendingHandshake(u32),
    #[error("unknown client {0}")]
    UnknownClient(u32),
    #[error("authentication tag mismatch for client {client} round {round}")]
    TagMismatch { client: u32, round: u32 },
    #[error("replayed record from client {client} round {round}")]
    Replay { client: u32, round: u32 },
    #[error("nonce space exhausted for client {client} round {round}")]
    NonceExhausted { client: u32, round: u32 },
    #[error("malformed record: {0}")]
    Malformed(&'static str),
}

/// Symmetric key shared by one client and the key manager.
#[derive(Clone, PartialEq, Eq)]
pub struct ClientKey {
    pub client_id: u32,
    pub established_at: u32,
    sk: [u8; 32],
}

impl ClientKey {
    pub fn key_bytes(&self) -> &[u8; 32] {
        &self.sk
    }

    fn confirmation(&self) -> [u8; 32] {
        key_confirmation(&self.sk)
    }
}

impl fmt::Debug for ClientKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientKey")
            .field("client_id", &self.client_id)
            .field("established_at", &self.established_at)
            .field("sk", &"<redacted>")
            .finish()
    }
}

fn key_confirmation(sk: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"esmfl key confirmation");
    h.update(sk);
    h.finalize().into()
}

fn derive_key(shared: &[u8; 32], challenge: &[u8; 32], client_id: u32) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(challenge), shared);
    let mut info = b"esmfl client update key".to_vec();
    info.extend_from_slice(&client_id.to_le_bytes());
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("32 bytes is a valid HKDF-SHA256 length");
    okm
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationRequest {
    pub client_id: u32,
    pub challenge: [u8; 32],
    pub client_public: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationResponse {
    pub measurement: [u8; 32],
    pub enclave_public: [u8; 32],
    pub key_confirmation: [u8; 32],
    pub signature: [u8; 64],
}

/// Everything exchanged in one attestation, as recorded for audit.
/// The derived key itself is represented by its confirmation hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationTranscript {
    pub client_id: u32,
    pub challenge: [u8; 32],
    pub measurement: [u8; 32],
    pub client_public: [u8; 32],
    pub enclave_public: [u8; 32],
    pub key_confirmation: [u8; 32],
    pub signature: [u8; 64],
}

impl AttestationTranscript {
    fn signed_message(&self) -> Vec<u8> {
        let mut m = Vec::with_capacity(4 + 32 * 5 + 16);
        m.extend_from_slice(b"esmfl attest v1\0");
        m.extend_from_slice(&self.client_id.to_le_bytes());
        m.extend_from_slice(&self.challenge);
        m.extend_from_slice(&self.measurement);
        m.extend_from_slice(&self.client_public);
        m.extend_from_slice(&self.enclave_public);
        m.extend_from_slice(&self.key_confirmation);
        m
    }

    /// Check the signature against the trusted attestation key and the
    /// measurement against the expected enclave.
    pub fn verify(&self, trusted: &VerifyingKey) -> Result<(), ChannelError> {
        let fail = |reason| ChannelError::Attestation { client: self.client_id, reason };
        if self.measurement != ENCLAVE_MEASUREMENT {
            return Err(fail("unexpected enclave measurement"));
        }
        let sig = Signature::from_bytes(&self.signature);
        trusted.verify(&self.signed_message(), &sig).map_err(|_| fail("bad attestation signature"))
    }

    /// One audit line: `attest client=<id> challenge=<hex> ...`.
    pub fn to_log_line(&self) -> String {
        format!(
            "attest client={} challenge={} measurement={} client_pub={} enclave_pub={} confirm={} signature={}",
            self.client_id,
            hex::encode(self.challenge),
            hex::encode(self.measurement),
            hex::encode(self.client_public),
            hex::encode(self.enclave_public),
            hex::encode(self.key_confirmation),
            hex::encode(self.signature),
        )
    }

    pub fn from_log_line(line: &str) -> Option<Self> {
        let mut fields = HashMap::new();
        let mut parts = line.split_whitespace();
        if parts.next()? != "attest" {
            return None;
        }
        for part in parts {
            let (k, v) = part.split_once('=')?;
            fields.insert(k, v);
        }
        fn arr<const N: usize>(s: &str) -> Option<[u8; N]> {
            hex::decode(s).ok()?.try_into().ok()
        }
        Some(Self {
            client_id: fields.get("client")?.parse().ok()?,
            challenge: arr(fields.get("challenge")?)?,
            measurement: arr(fields.get("measurement")?)?,
            client_public: arr(fields.get("client_pub")?)?,
            enclave_public: arr(fields.get("enclave_pub")?)?,
            key_confirmation: arr(fields.get("confirm")?)?,
            signature: arr(fields.get("signature")?)?,
        })
    }
}

/// Client half of the handshake.
pub struct ClientHandshake {
    request: AttestationRequest,
    secret: StaticSecret,
    trusted: VerifyingKey,
}

impl ClientHandshake {
    pub fn start(
        client_id: u32,
        trusted: VerifyingKey,
        rng: &mut impl RngCore,
    ) -> (Self, AttestationRequest) {
        let mut challenge = [0u8; 32];
        rng.fill_bytes(&mut challenge);
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let secret = StaticSecret::from(seed);
        let request =
            AttestationRequest { client_id, challenge, client_public: PublicKey::from(&secret).to_bytes() };
        (Self { request: request.clone(), secret, trusted }, request)
    }

    /// Verify the enclave's response and derive `sk_i`.
    pub fn finish(
        self,
        response: &AttestationResponse,
        round: u32,
    ) -> Result<(ClientKey, AttestationTranscript), ChannelError> {
        let transcript = AttestationTranscript {
            client_id: self.request.client_id,
            challenge: self.request.challenge,
            measurement: response.measurement,
            client_public: self.request.client_public,
            enclave_public: response.enclave_public,
            key_confirmation: response.key_confirmation,
            signature: response.signature,
        };
        transcript.verify(&self.trusted)?;
        let shared = self.secret.diffie_hellman(&PublicKey::from(response.enclave_public));
        let key = ClientKey {
            client_id: self.request.client_id,
            established_at: round,
            sk: derive_key(shared.as_bytes(), &self.request.challenge, self.request.client_id),
        };
        if key.confirmation() != response.key_confirmation {
            return Err(ChannelError::Attestation {
                client: self.request.client_id,
                reason: "key confirmation mismatch",
            });
        }
        Ok((key, transcript))
    }
}

/// Key registry held inside the enclave: one `sk_i` per client plus the
/// set of records already accepted.
pub struct KeyManager {
    attestation_key: SigningKey,
    pending: HashMap<u32, ClientKey>,
    keys: BTreeMap<u32, ClientKey>,
    seen: HashSet<(u32, u32, [u8; 12])>,
}

impl KeyManager {
    pub fn new(rng: &mut impl RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self {
            attestation_key: SigningKey::from_bytes(&seed),
            pending: HashMap::new(),
            keys: BTreeMap::new(),
            seen: HashSet::new(),
        }
    }

    /// Public half of the attestation key that clients trust.
    pub fn attestation_public_key(&self) -> VerifyingKey {
        self.attestation_key.verifying_key()
    }

    /// Answer an attestation request; the derived key stays pending until
    /// [`KeyManager::confirm`].
    pub fn respond(
        &mut self,
        request: &AttestationRequest,
        round: u32,
        rng: &mut impl RngCore,
    ) -> Result<AttestationResponse, ChannelError> {
        let id = request.client_id;
        if self.keys.contains_key(&id) || self.pending.contains_key(&id) {
            return Err(ChannelError::DuplicateClient(id));
        }
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let secret = StaticSecret::from(seed);
        let enclave_public = PublicKey::from(&secret).to_bytes();
        let shared = secret.diffie_hellman(&PublicKey::from(request.client_public));
        let key = ClientKey {
            client_id: id,
            established_at: round,
            sk: derive_key(shared.as_bytes(), &request.challenge, id),
        };
        let mut transcript = AttestationTranscript {
            client_id: id,
            challenge: request.challenge,
            measurement: ENCLAVE_MEASUREMENT,
            client_public: request.client_public,
            enclave_public,
            key_confirmation: key.confirmation(),
            signature: [0; 64],
        };
        transcript.signature = self.attestation_key.sign(&transcript.signed_message()).to_bytes();
        self.pending.insert(id, key);
        Ok(AttestationResponse {
            measurement: transcript.measurement,
            enclave_public,
            key_confirmation: transcript.key_confirmation,
            signature: transcript.signature,
        })
    }

    pub fn confirm(&mut self, client_id: u32) -> Result<(), ChannelError> {
        let key = self.pending.remove(&client_id).ok_or(ChannelError::NoPendingHandshake(client_id))?;
        self.keys.insert(client_id, key);
        Ok(())
    }

    pub fn abort(&mut self, client_id: u32) {
        self.pending.remove(&client_id);
    }

    pub fn is_registered(&self, client_id: u32) -> bool {
        self.keys.contains_key(&client_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Distinct key values held, for audit.
    pub fn distinct_keys(&self) -> usize {
        self.keys.values().map(|k| k.sk).collect::<HashSet<_>>().len()
    }
}

/// Run the full handshake for one client against the key manager.
pub fn attest_and_exchange(
    client_id: u32,
    round: u32,
    key_manager: &mut KeyManager,
    rng: &mut impl RngCore,
) -> Result<(ClientKey, AttestationTranscript), ChannelError> {
    let (client, request) = ClientHandshake::start(client_id, key_manager.attestation_public_key(), rng);
    let response = key_manager.respond(&request, round, rng)?;
    match client.finish(&response, round) {
        Ok(done) => {
            key_manager.confirm(client_id)?;
            Ok(done)
        }
        Err(e) => {
            key_manager.abort(client_id);
            Err(e)
        }
    }
}

/// Client-side sealing state: its key and per-round nonce counters.
#[derive(Debug, Clone)]
pub struct ClientSealer {
    key: ClientKey,
    counters: BTreeMap<u32, u32>,
}

impl ClientSealer {
    pub fn new(key: ClientKey) -> Self {
        Self { key, counters: BTreeMap::new() }
    }

    pub fn client_id(&self) -> u32 {
        self.key.client_id
    }

    fn next_nonce(&mut self, round: u32) -> Result<[u8; 12], ChannelError> {
        let counter = self.counters.entry(round).or_insert(0);
        let current = *counter;
        *counter = current
            .checked_add(1)
            .ok_or(ChannelError::NonceExhausted { client: self.key.client_id, round })?;
        if current == u32::MAX {
            return Err(ChannelError::NonceExhausted { client: self.key.client_id, round });
        }
        let mut nonce = [0u8; 12];
        nonce[..4].copy_from_slice(&self.key.client_id.to_le_bytes());
        nonce[4..8].copy_from_slice(&round.to_le_bytes());
        nonce[8..].copy_from_slice(&current.to_le_bytes());
        Ok(nonce)
    }

    #[cfg(test)]
    fn set_counter(&mut self, round: u32, value: u32) {
        self.counters.insert(round, value);
    }
}

/// Wire record carrying one encrypted client update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedUpdate {
    pub client_id: u32,
    pub round: u32,
    pub payload_format: WireFormat,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl EncryptedUpdate {
    pub fn header_bytes(&self) -> [u8; RECORD_HEADER_LEN] {
        header(self.client_id, self.round, self.payload_format, &self.nonce, self.ciphertext.len() as u64)
    }

    pub fn wire_len(&self) -> usize {
        RECORD_HEADER_LEN + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChannelError> {
        if bytes.len() < RECORD_HEADER_LEN {
            return Err(ChannelError::Malformed("record shorter than its header"));
        }
        if &bytes[..4] != RECORD_MAGIC {
            return Err(ChannelError::Malformed("bad record magic"));
        }
        if bytes[4] != RECORD_VERSION {
            return Err(ChannelError::Malformed("unsupported record version"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let payload_format =
            WireFormat::from_byte(bytes[13]).ok_or(ChannelError::Malformed("unknown payload format"))?;
        let nonce: [u8; 12] = bytes[14..26].try_into().unwrap();
        let len = u64::from_le_bytes(bytes[26..34].try_into().unwrap());
        if len != (bytes.len() - RECORD_HEADER_LEN) as u64 {
            return Err(ChannelError::Malformed("ciphertext length mismatch"));
        }
        if (len as usize) < TAG_LEN {
            return Err(ChannelError::Malformed("ciphertext shorter than the tag"));
        }
        Ok(Self {
            client_id: u32_at(5),
            round: u32_at(9),
            payload_format,
            nonce,
            ciphertext: bytes[RECORD_HEADER_LEN..].to_vec(),
        })
    }
}

fn header(
    client_id: u32,
    round: u32,
    format: WireFormat,
    nonce: &[u8; 12],
    ciphertext_len: u64,
) -> [u8; RECORD_HEADER_LEN] {
    let mut h = [0u8; RECORD_HEADER_LEN];
    h[..4].copy_from_slice(RECORD_MAGIC);
    h[4] = RECORD_VERSION;
    h[5..9].copy_from_slice(&client_id.to_le_bytes());
    h[9..13].copy_from_slice(&round.to_le_bytes());
    h[13] = format as u8;
    h[14..26].copy_from_slice(nonce);
    h[26..34].copy_from_slice(&ciphertext_len.to_le_bytes());
    h
}

/// Seal serialized update bytes for the enclave.
pub fn encrypt_update(
    update_bytes: &[u8],
    sealer: &mut ClientSealer,
    round: u32,
    payload_format: WireFormat,
) -> Result<EncryptedUpdate, ChannelError> {
    let nonce = sealer.next_nonce(round)?;
    let client_id = sealer.key.client_id;
    let aad = header(client_id, round, payload_format, &nonce, (update_bytes.len() + TAG_LEN) as u64);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&sealer.key.sk));
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: update_bytes, aad: &aad })
        .map_err(|_| ChannelError::Malformed("encryption failed"))?;
    Ok(EncryptedUpdate { client_id, round, payload_format, nonce, ciphertext })
}

/// Decrypted update bytes. Only [`decrypt_update`] creates one, and that
/// requires the enclave's [`TrustedSection`].
pub struct Plaintext(Vec<u8>);

impl Plaintext {
    pub fn bytes(&self, _: &TrustedSection) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Authenticate and decrypt a record with the client's registered key,
/// rejecting any record whose `(client, round, nonce)` was already accepted.
pub fn decrypt_update(
    enc: &EncryptedUpdate,
    key_manager: &mut KeyManager,
    _: &TrustedSection,
) -> Result<Plaintext, ChannelError> {
    let key = key_manager.keys.get(&enc.client_id).ok_or(ChannelError::UnknownClient(enc.client_id))?;
    let tag = (enc.client_id, enc.round, enc.nonce);
    if key_manager.seen.contains(&tag) {
        return Err(ChannelError::Replay { client: enc.client_id, round: enc.round });
    }
    let mismatch = ChannelError::TagMismatch { client: enc.client_id, round: enc.round };
    // The nonce must be the one this client would derive for this round.
    if enc.nonce[..4] != enc.client_id.to_le_bytes() || enc.nonce[4..8] != enc.round.to_le_bytes() {
        return Err(mismatch);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.sk));
    let aad = enc.header_bytes();
    let plain = cipher
        .decrypt(Nonce::from_slice(&enc.nonce), Payload { msg: &enc.ciphertext, aad: &aad })
        .map_err(|_| mismatch)?;
    key_manager.seen.insert(tag);
    Ok(Plaintext(plain))
}

/// Append-only audit log of handshake and record events, one per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranscriptLog {
    lines: Vec<String>,
}

impl TranscriptLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attestation(&mut self, t: &AttestationTranscript) {
        self.lines.push(t.to_log_line());
    }

    pub fn accepted(&mut self, enc: &EncryptedUpdate) {
        self.lines.push(format!(
            "accept client={} round={} format={} nonce={} len={}",
            enc.client_id,
            enc.round,
            enc.payload_format,
            hex::encode(enc.nonce),
            enc.wire_len()
        ));
    }

    pub fn rejected(&mut self, client_id: u32, round: u32, err: &ChannelError) {
        self.lines.push(format!("reject client={client_id} round={round} reason=\"{err}\""));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

//! Key-pair identities, signatures and contribution proofs.

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::codec::{canonical_encode, id_of, Canonical, CodecError, ContentId, Reader, Writer};

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Result<Self, CodecError> {
        let bytes = hex::decode(text).map_err(|_| CodecError::BadHex(text.to_string()))?;
        let arr: [u8; 32] =
            bytes.try_into().map_err(|_| CodecError::Invalid("public key must be 32 bytes"))?;
        Ok(PublicKey(arr))
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }

    /// Id of the creator record that buckets and submits point at.
    pub fn creator_root(&self) -> ContentId {
        id_of(self)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let raw = r.bytes()?;
        let arr: [u8; 32] =
            raw.try_into().map_err(|_| CodecError::Invalid("public key must be 32 bytes"))?;
        Ok(PublicKey(arr))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", self.short())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        PublicKey::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

/// The creator record: a bare public key.
impl Canonical for PublicKey {
    const TAG: u8 = 0x0f;
    fn encode_fields(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        PublicKey::read(r)
    }
}

/// Detached signature bytes. Kept as a byte vector so malformed input can be
/// represented and rejected rather than failing to parse.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{}", hex::encode(&self.0[..self.0.len().min(4)]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map(Signature).map_err(serde::de::Error::custom)
    }
}

/// A signing identity. The secret half never enters a protocol object.
#[derive(Clone)]
pub struct KeyIdentity {
    signing: SigningKey,
}

impl fmt::Debug for KeyIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyIdentity").field("public_key", &self.public_key()).finish()
    }
}

impl KeyIdentity {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyIdentity { signing: SigningKey::from_bytes(&seed) }
    }

    /// Deterministic identity derived from a name; used by scenarios and tests.
    pub fn from_name(name: &str) -> Self {
        let seed: [u8; 32] = Sha256::digest(format!("lakat-identity:{name}").as_bytes()).into();
        Self::from_seed(seed)
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes().to_vec())
    }
}

/// True iff `sig` is a valid signature of `message` under `pk`. Malformed
/// keys or signatures yield `false`.
pub fn verify_signature(pk: &[u8], message: &[u8], sig: &[u8]) -> bool {
    let Ok(pk_bytes) = <[u8; 32]>::try_from(pk) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&pk_bytes) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
        return false;
    };
    key.verify(message, &sig).is_ok()
}

/// Kind of contribution a proof attests to. `Time` exists only as an
/// accepted-proof vocabulary entry in branch configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofKind {
    Content,
    Review,
    Token,
    Storage,
    Time,
}

impl ProofKind {
    pub const CONTRIBUTOR_KINDS: [ProofKind; 4] =
        [ProofKind::Content, ProofKind::Review, ProofKind::Token, ProofKind::Storage];

    pub fn code(self) -> u8 {
        match self {
            ProofKind::Content => 0,
            ProofKind::Review => 1,
            ProofKind::Token => 2,
            ProofKind::Storage => 3,
            ProofKind::Time => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        Ok(match code {
            0 => ProofKind::Content,
            1 => ProofKind::Review,
            2 => ProofKind::Token,
            3 => ProofKind::Storage,
            4 => ProofKind::Time,
            _ => return Err(CodecError::Invalid("unknown proof kind")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ProofKind::Content => "content",
            ProofKind::Review => "review",
            ProofKind::Token => "token",
            ProofKind::Storage => "storage",
            ProofKind::Time => "time",
        }
    }
}

/// Signed attestation that `contributor` made a contribution of `kind` to
/// `branch`, relying on the object named by `evidence`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionProof {
    pub contributor: PublicKey,
    pub branch: ContentId,
    pub kind: ProofKind,
    pub evidence: ContentId,
    pub signature: Signature,
}

struct ProofClaim<'a> {
    contributor: &'a PublicKey,
    branch: &'a ContentId,
    kind: ProofKind,
    evidence: &'a ContentId,
}

impl ProofClaim<'_> {
    fn message(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.str("lakat/contribution-proof");
        w.bytes(&self.contributor.0);
        w.id(self.branch);
        w.u64(self.kind.code().into());
        w.id(self.evidence);
        w.into_bytes()
    }
}

impl ContributionProof {
    pub fn signing_message(&self) -> Vec<u8> {
        ProofClaim {
            contributor: &self.contributor,
            branch: &self.branch,
            kind: self.kind,
            evidence: &self.evidence,
        }
        .message()
    }

    pub fn verify(&self) -> bool {
        verify_signature(&self.contributor.0, &self.signing_message(), &self.signature.0)
    }

    pub fn id(&self) -> ContentId {
        id_of(self)
    }
}

pub fn make_contribution_proof(
    identity: &KeyIdentity,
    branch: ContentId,
    kind: ProofKind,
    evidence: ContentId,
) -> ContributionProof {
    let contributor = identity.public_key();
    let message =
        ProofClaim { contributor: &contributor, branch: &branch, kind, evidence: &evidence }
            .message();
    ContributionProof { contributor, branch, kind, evidence, signature: identity.sign(&message) }
}

impl Canonical for ContributionProof {
    const TAG: u8 = 0x09;
    fn encode_fields(&self, w: &mut Writer) {
        w.bytes(&self.contributor.0);
        w.id(&self.branch);
        w.u64(self.kind.code().into());
        w.id(&self.evidence);
        w.bytes(&self.signature.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ContributionProof {
            contributor: PublicKey::read(r)?,
            branch: r.id()?,
            kind: ProofKind::from_code(r.u8()?)?,
            evidence: r.id()?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

/// Message bytes for a domain-separated signature over a canonical object.
pub(crate) fn signed_message<T: Canonical>(domain: &str, body: &T) -> Vec<u8> {
    let mut w = Writer::default();
    w.str(domain);
    w.bytes(&canonical_encode(body));
    w.into_bytes()
}

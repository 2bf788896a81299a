//! Atomic and molecular data buckets and their mutable interaction info.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    canonical_encode, content_id, id_of, Canonical, CodecError, ContentId, LogicalTimestamp,
    Reader, RefList, Writer,
};
use crate::identity::{signed_message, KeyIdentity, PublicKey, Signature};
use crate::store::{RecordKind, Store, StoreError};

/// In-band marker that precedes a bucket reference inside a payload.
pub const REF_MARKER: &[u8] = b"@lakat:";
const REF_HEX_LEN: usize = 66;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BucketError {
    #[error("arrangement references unknown bucket {0}")]
    DanglingReference(ContentId),
    #[error("bucket_refs_out is immutable once written")]
    RefsOutImmutable,
    #[error("attestation signature does not verify")]
    BadSignature,
    #[error("attestation is for bucket {found}, not {expected}")]
    WrongBucket { expected: ContentId, found: ContentId },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Data format of a bucket. Codes with the high bit set are molecular.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Text,
    Binary,
    ReviewItem,
    Arrangement,
    ReviewContainer,
}

impl Schema {
    pub fn code(self) -> u8 {
        match self {
            Schema::Text => 0x01,
            Schema::Binary => 0x02,
            Schema::ReviewItem => 0x03,
            Schema::Arrangement => 0x81,
            Schema::ReviewContainer => 0x82,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        Ok(match code {
            0x01 => Schema::Text,
            0x02 => Schema::Binary,
            0x03 => Schema::ReviewItem,
            0x81 => Schema::Arrangement,
            0x82 => Schema::ReviewContainer,
            _ => return Err(CodecError::Invalid("unknown schema")),
        })
    }

    pub fn is_molecular(self) -> bool {
        self.code() & 0x80 != 0
    }
}

/// The six immutable entries of a bucket.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bucket {
    pub schema: Schema,
    pub creator_root: ContentId,
    pub parent: ContentId,
    pub data_root: ContentId,
    pub refs_root: ContentId,
    pub timestamp: LogicalTimestamp,
}

impl Bucket {
    pub fn id(&self) -> ContentId {
        id_of(self)
    }

    pub fn is_molecular(&self) -> bool {
        self.schema.is_molecular()
    }
}

impl Canonical for Bucket {
    const TAG: u8 = 0x01;
    fn encode_fields(&self, w: &mut Writer) {
        w.u64(self.schema.code().into());
        w.id(&self.creator_root);
        w.id(&self.parent);
        w.id(&self.data_root);
        w.id(&self.refs_root);
        w.nested(&self.timestamp);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Bucket {
            schema: Schema::from_code(r.u8()?)?,
            creator_root: r.id()?,
            parent: r.id()?,
            data_root: r.id()?,
            refs_root: r.id()?,
            timestamp: r.nested()?,
        })
    }
}

/// Ordered arrangement of bucket ids: the payload of a molecular bucket.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Arrangement(pub Vec<ContentId>);

impl Canonical for Arrangement {
    const TAG: u8 = 0x0d;
    fn encode_fields(&self, w: &mut Writer) {
        w.list(&self.0, |w, id| w.id(id));
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Arrangement(r.list(|r| r.id())?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BucketData {
    Atomic(Vec<u8>),
    Molecular(Vec<ContentId>),
}

impl BucketData {
    /// Bytes stored under the bucket's `data_root`.
    pub fn stored_bytes(&self) -> Vec<u8> {
        match self {
            BucketData::Atomic(payload) => payload.clone(),
            BucketData::Molecular(arr) => canonical_encode(&Arrangement(arr.clone())),
        }
    }

    pub fn arrangement(&self) -> Option<&[ContentId]> {
        match self {
            BucketData::Molecular(arr) => Some(arr),
            BucketData::Atomic(_) => None,
        }
    }
}

pub fn refs_root(refs: &[ContentId]) -> ContentId {
    id_of(&RefList(refs.to_vec()))
}

pub fn create_atomic_bucket(
    schema: Schema,
    creator_root: ContentId,
    parent: ContentId,
    payload: &[u8],
    refs: &[ContentId],
    ts: LogicalTimestamp,
) -> (Bucket, ContentId) {
    debug_assert!(!schema.is_molecular());
    let bucket = Bucket {
        schema,
        creator_root,
        parent,
        data_root: content_id(payload),
        refs_root: refs_root(refs),
        timestamp: ts,
    };
    let id = bucket.id();
    (bucket, id)
}

/// Builds a molecular bucket. Every arranged id must already resolve in
/// `store` or be listed in `pending` (buckets introduced alongside it).
pub fn create_molecular_bucket(
    store: &Store,
    pending: &BTreeSet<ContentId>,
    schema: Schema,
    creator_root: ContentId,
    parent: ContentId,
    arrangement: &[ContentId],
    ts: LogicalTimestamp,
) -> Result<(Bucket, ContentId), BucketError> {
    debug_assert!(schema.is_molecular());
    for id in arrangement {
        if !pending.contains(id) && !store.contains_bucket(id) {
            return Err(BucketError::DanglingReference(*id));
        }
    }
    let bucket = Bucket {
        schema,
        creator_root,
        parent,
        data_root: id_of(&Arrangement(arrangement.to_vec())),
        refs_root: refs_root(arrangement),
        timestamp: ts,
    };
    let id = bucket.id();
    Ok((bucket, id))
}

/// All ids referenced in-band by `@lakat:<hex id>` markers, in order of
/// appearance. Markers not followed by a well-formed id are ignored.
pub fn extract_refs(payload: &[u8]) -> Vec<ContentId> {
    let mut out = Vec::new();
    let mut rest = payload;
    while let Some(at) = find(rest, REF_MARKER) {
        let after = &rest[at + REF_MARKER.len()..];
        let parsed = after
            .get(..REF_HEX_LEN)
            .and_then(|h| std::str::from_utf8(h).ok())
            .and_then(|h| ContentId::from_hex(h).ok());
        match parsed {
            Some(id) => {
                out.push(id);
                rest = &after[REF_HEX_LEN..];
            }
            None => rest = &rest[at + 1..],
        }
    }
    out
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Renders a reference marker for embedding in a payload.
pub fn ref_marker(id: &ContentId) -> String {
    format!("@lakat:{}", id.to_hex())
}

/// True iff the references embedded in `payload` are exactly `refs` (as a
/// set, without duplicates in `refs`) and the bucket commits to both.
pub fn validate_refs(bucket: &Bucket, payload: &[u8], refs: &[ContentId]) -> bool {
    if bucket.data_root != content_id(payload) || bucket.refs_root != refs_root(refs) {
        return false;
    }
    let given: BTreeSet<ContentId> = refs.iter().copied().collect();
    if given.len() != refs.len() {
        return false;
    }
    let found: BTreeSet<ContentId> = extract_refs(payload).into_iter().collect();
    found == given
}

/// A bucket introduced by a submit, together with its data.
#[derive(Debug, Clone)]
pub struct NewBucket {
    pub id: ContentId,
    pub bucket: Bucket,
    pub data: BucketData,
}

/// Every new atomic bucket must appear in the arrangement of a molecular
/// bucket introduced by the same submit or already held by the store.
pub fn check_context_membership(
    new_bucket_ids: &BTreeSet<ContentId>,
    submit_buckets: &[NewBucket],
    store: &Store,
) -> bool {
    let in_submit: BTreeSet<ContentId> = submit_buckets
        .iter()
        .filter_map(|b| b.data.arrangement())
        .flatten()
        .copied()
        .collect();
    new_bucket_ids.iter().all(|id| {
        let molecular = match submit_buckets.iter().find(|b| b.id == *id) {
            Some(b) => b.bucket.is_molecular(),
            None => match store.get_bucket(id) {
                Ok(Some(b)) => b.is_molecular(),
                _ => return false,
            },
        };
        molecular || in_submit.contains(id) || store.has_context(id)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Up,
    Down,
}

/// A signed thumbs-up or thumbs-down on a bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocialRef {
    pub bucket: ContentId,
    pub mark: Mark,
    pub signer: PublicKey,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SocialClaim {
    bucket: ContentId,
    mark: Mark,
    signer: PublicKey,
}

impl Canonical for SocialClaim {
    const TAG: u8 = 0x14;
    fn encode_fields(&self, w: &mut Writer) {
        w.id(&self.bucket);
        w.bool(self.mark == Mark::Up);
        w.bytes(&self.signer.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SocialClaim {
            bucket: r.id()?,
            mark: if r.bool()? { Mark::Up } else { Mark::Down },
            signer: PublicKey::read(r)?,
        })
    }
}

impl SocialRef {
    pub fn new(identity: &KeyIdentity, bucket: ContentId, mark: Mark) -> Self {
        let claim = SocialClaim { bucket, mark, signer: identity.public_key() };
        let signature = identity.sign(&signed_message("lakat/social", &claim));
        SocialRef { bucket, mark, signer: claim.signer, signature }
    }

    pub fn verify(&self) -> bool {
        let claim = SocialClaim { bucket: self.bucket, mark: self.mark, signer: self.signer };
        crate::identity::verify_signature(
            &self.signer.0,
            &signed_message("lakat/social", &claim),
            &self.signature.0,
        )
    }
}

/// Opaque signed token blob. No value semantics are attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAttestation {
    pub signer: PublicKey,
    #[serde(with = "crate::codec::hex_bytes")]
    pub payload: Vec<u8>,
    pub signature: Signature,
}

impl TokenAttestation {
    pub fn new(identity: &KeyIdentity, payload: Vec<u8>) -> Self {
        let signature = identity.sign(&Self::message(&payload));
        TokenAttestation { signer: identity.public_key(), payload, signature }
    }

    fn message(payload: &[u8]) -> Vec<u8> {
        let mut w = Writer::default();
        w.str("lakat/token");
        w.bytes(payload);
        w.into_bytes()
    }

    pub fn verify(&self) -> bool {
        crate::identity::verify_signature(
            &self.signer.0,
            &Self::message(&self.payload),
            &self.signature.0,
        )
    }

    pub fn id(&self) -> ContentId {
        id_of(self)
    }
}

impl Canonical for TokenAttestation {
    const TAG: u8 = 0x04;
    fn encode_fields(&self, w: &mut Writer) {
        w.bytes(&self.signer.0);
        w.bytes(&self.payload);
        w.bytes(&self.signature.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(TokenAttestation {
            signer: PublicKey::read(r)?,
            payload: r.bytes()?.to_vec(),
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

/// Timestamped signed statement that `storer` holds `bucket`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageAttestation {
    pub bucket: ContentId,
    pub storer: PublicKey,
    pub timestamp: LogicalTimestamp,
    pub signature: Signature,
}

impl StorageAttestation {
    pub fn new(identity: &KeyIdentity, bucket: ContentId, timestamp: LogicalTimestamp) -> Self {
        let storer = identity.public_key();
        let signature = identity.sign(&Self::message(&bucket, &storer, &timestamp));
        StorageAttestation { bucket, storer, timestamp, signature }
    }

    fn message(bucket: &ContentId, storer: &PublicKey, ts: &LogicalTimestamp) -> Vec<u8> {
        let mut w = Writer::default();
        w.str("lakat/storage");
        w.id(bucket);
        w.bytes(&storer.0);
        w.nested(ts);
        w.into_bytes()
    }

    pub fn verify(&self) -> bool {
        crate::identity::verify_signature(
            &self.storer.0,
            &Self::message(&self.bucket, &self.storer, &self.timestamp),
            &self.signature.0,
        )
    }

    pub fn id(&self) -> ContentId {
        id_of(self)
    }
}

impl Canonical for StorageAttestation {
    const TAG: u8 = 0x05;
    fn encode_fields(&self, w: &mut Writer) {
        w.id(&self.bucket);
        w.bytes(&self.storer.0);
        w.nested(&self.timestamp);
        w.bytes(&self.signature.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(StorageAttestation {
            bucket: r.id()?,
            storer: PublicKey::read(r)?,
            timestamp: r.nested()?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

impl Canonical for SocialRef {
    const TAG: u8 = 0x03;
    fn encode_fields(&self, w: &mut Writer) {
        w.id(&self.bucket);
        w.bool(self.mark == Mark::Up);
        w.bytes(&self.signer.0);
        w.bytes(&self.signature.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SocialRef {
            bucket: r.id()?,
            mark: if r.bool()? { Mark::Up } else { Mark::Down },
            signer: PublicKey::read(r)?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

/// Mutable interaction info attached to a bucket; the value type of the
/// data trie. All lists are append-only and `bucket_refs_out` is write-once.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BucketInfo {
    pub social_refs: Vec<SocialRef>,
    pub reviews: Vec<ContentId>,
    pub tokens: Vec<TokenAttestation>,
    pub bucket_refs_out: Option<Vec<ContentId>>,
    pub bucket_refs_in: Vec<ContentId>,
    pub storage_proofs: Vec<StorageAttestation>,
}

impl Canonical for BucketInfo {
    const TAG: u8 = 0x02;
    fn encode_fields(&self, w: &mut Writer) {
        w.list(&self.social_refs, |w, s| w.nested(s));
        w.list(&self.reviews, |w, id| w.id(id));
        w.list(&self.tokens, |w, t| w.nested(t));
        w.option(self.bucket_refs_out.as_ref(), |w, refs| w.list(refs, |w, id| w.id(id)));
        w.list(&self.bucket_refs_in, |w, id| w.id(id));
        w.list(&self.storage_proofs, |w, s| w.nested(s));
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(BucketInfo {
            social_refs: r.list(|r| r.nested())?,
            reviews: r.list(|r| r.id())?,
            tokens: r.list(|r| r.nested())?,
            bucket_refs_out: r.option(|r| r.list(|r| r.id()))?,
            bucket_refs_in: r.list(|r| r.id())?,
            storage_proofs: r.list(|r| r.nested())?,
        })
    }
}

impl BucketInfo {
    /// Info for a freshly introduced bucket: only its outgoing refs are set.
    pub fn fresh(refs_out: Vec<ContentId>) -> Self {
        BucketInfo { bucket_refs_out: Some(refs_out), ..Default::default() }
    }

    /// Append-union with another view of the same bucket's info. Entries
    /// already present are kept in place; new ones are appended in order.
    pub fn merged_with(&self, other: &BucketInfo) -> BucketInfo {
        fn union<T: PartialEq + Clone>(a: &[T], b: &[T]) -> Vec<T> {
            let mut out = a.to_vec();
            for x in b {
                if !out.contains(x) {
                    out.push(x.clone());
                }
            }
            out
        }
        BucketInfo {
            social_refs: union(&self.social_refs, &other.social_refs),
            reviews: union(&self.reviews, &other.reviews),
            tokens: union(&self.tokens, &other.tokens),
            bucket_refs_out: self.bucket_refs_out.clone().or_else(|| other.bucket_refs_out.clone()),
            bucket_refs_in: union(&self.bucket_refs_in, &other.bucket_refs_in),
            storage_proofs: union(&self.storage_proofs, &other.storage_proofs),
        }
    }
}

/// A single append to a bucket's info.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InfoDelta {
    Social(SocialRef),
    Review(ContentId),
    Token(TokenAttestation),
    RefsOut(Vec<ContentId>),
    RefIn(ContentId),
    Storage(StorageAttestation),
}

pub fn attach_info(info: &BucketInfo, delta: InfoDelta) -> Result<BucketInfo, BucketError> {
    let mut next = info.clone();
    match delta {
        InfoDelta::Social(s) => {
            if !s.verify() {
                return Err(BucketError::BadSignature);
            }
            next.social_refs.push(s);
        }
        InfoDelta::Review(id) => next.reviews.push(id),
        InfoDelta::Token(t) => {
            if !t.verify() {
                return Err(BucketError::BadSignature);
            }
            next.tokens.push(t);
        }
        InfoDelta::RefsOut(refs) => {
            if next.bucket_refs_out.is_some() {
                return Err(BucketError::RefsOutImmutable);
            }
            next.bucket_refs_out = Some(refs);
        }
        InfoDelta::RefIn(id) => {
            if !next.bucket_refs_in.contains(&id) {
                next.bucket_refs_in.push(id);
            }
        }
        InfoDelta::Storage(s) => {
            if !s.verify() {
                return Err(BucketError::BadSignature);
            }
            next.storage_proofs.push(s);
        }
    }
    Ok(next)
}

/// Attaches `delta` to the info of `bucket`, also checking that signed
/// attestations actually name that bucket.
pub fn attach_info_to(
    bucket: &ContentId,
    info: &BucketInfo,
    delta: InfoDelta,
) -> Result<BucketInfo, BucketError> {
    let named = match &delta {
        InfoDelta::Social(s) => Some(s.bucket),
        InfoDelta::Storage(s) => Some(s.bucket),
        _ => None,
    };
    if let Some(found) = named {
        if found != *bucket {
            return Err(BucketError::WrongBucket { expected: *bucket, found });
        }
    }
    attach_info(info, delta)
}

impl Store {
    /// Stores a bucket header and its data, returning the bucket id.
    pub fn put_bucket(&mut self, bucket: &Bucket, data: &BucketData) -> Result<ContentId, StoreError> {
        self.put_raw(RecordKind::Payload, data.stored_bytes())?;
        if let BucketData::Molecular(arr) = data {
            self.put_object(RecordKind::Payload, &RefList(arr.clone()))?;
        }
        let id = self.put_object(RecordKind::Bucket, bucket)?;
        if let BucketData::Molecular(arr) = data {
            self.register_containment(id, arr);
        }
        Ok(id)
    }

    pub fn get_bucket(&self, id: &ContentId) -> Result<Option<Bucket>, StoreError> {
        self.get_object(id)
    }

    pub fn contains_bucket(&self, id: &ContentId) -> bool {
        matches!(self.kind_of(id), Some(RecordKind::Bucket))
    }

    pub fn get_bucket_data(&self, bucket: &Bucket) -> Result<Option<BucketData>, StoreError> {
        let Some(bytes) = self.get_verified_bytes(&bucket.data_root)? else {
            return Ok(None);
        };
        if bucket.is_molecular() {
            let arr: Arrangement = crate::codec::canonical_decode(&bytes)?;
            Ok(Some(BucketData::Molecular(arr.0)))
        } else {
            Ok(Some(BucketData::Atomic(bytes)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::canonical_decode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn ts(t: u64) -> LogicalTimestamp {
        LogicalTimestamp::at(t)
    }

    fn creator() -> ContentId {
        KeyIdentity::from_name("alice").public_key().creator_root()
    }

    #[test]
    fn empty_info_has_shortest_encoding() {
        let bytes = canonical_encode(&BucketInfo::default());
        assert_eq!(bytes, vec![0x02, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes, canonical_encode(&BucketInfo::default()));
    }

    #[test]
    fn atomic_bucket_basics() {
        let (b, id) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"x", &[], ts(1));
        assert_eq!(b.refs_root, refs_root(&[]));
        assert_eq!(b.data_root, content_id(b"x"));
        let (_, again) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"x", &[], ts(1));
        assert_eq!(id, again);
    }

    #[test]
    fn every_field_changes_the_id() {
        let base = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"x", &[], ts(1)).0;
        let other = content_id(b"other");
        let mut variants = vec![];
        let mut v = base.clone();
        v.schema = Schema::Binary;
        variants.push(v);
        let mut v = base.clone();
        v.creator_root = other;
        variants.push(v);
        let mut v = base.clone();
        v.parent = other;
        variants.push(v);
        let mut v = base.clone();
        v.data_root = other;
        variants.push(v);
        let mut v = base.clone();
        v.refs_root = other;
        variants.push(v);
        let mut v = base.clone();
        v.timestamp = ts(2);
        variants.push(v);
        let mut ids: Vec<ContentId> = variants.iter().map(Bucket::id).collect();
        ids.push(base.id());
        let distinct: BTreeSet<_> = ids.iter().collect();
        assert_eq!(distinct.len(), 7);
    }

    #[test]
    fn molecular_bucket_order_and_dangling() {
        let mut store = Store::memory();
        let a = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"a", &[], ts(1));
        let b = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"b", &[], ts(1));
        store.put_bucket(&a.0, &BucketData::Atomic(b"a".to_vec())).unwrap();
        store.put_bucket(&b.0, &BucketData::Atomic(b"b".to_vec())).unwrap();
        let none = BTreeSet::new();
        let (_, ab) = create_molecular_bucket(&store, &none, Schema::Arrangement, creator(), ContentId::ZERO, &[a.1, b.1], ts(2)).unwrap();
        let (_, ba) = create_molecular_bucket(&store, &none, Schema::Arrangement, creator(), ContentId::ZERO, &[b.1, a.1], ts(2)).unwrap();
        assert_ne!(ab, ba);
        let (empty, _) = create_molecular_bucket(&store, &none, Schema::Arrangement, creator(), ContentId::ZERO, &[], ts(2)).unwrap();
        assert!(empty.is_molecular());
        let ghost = content_id(b"ghost");
        assert_eq!(
            create_molecular_bucket(&store, &none, Schema::Arrangement, creator(), ContentId::ZERO, &[a.1, ghost], ts(2)).unwrap_err(),
            BucketError::DanglingReference(ghost)
        );
    }

    #[test]
    fn validate_refs_examples() {
        let a = content_id(b"a");
        let b = content_id(b"b");
        let payload = format!("see {} and {}", ref_marker(&a), ref_marker(&b));
        let (bucket, _) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, payload.as_bytes(), &[a, b], ts(0));
        assert!(validate_refs(&bucket, payload.as_bytes(), &[a, b]));

        let payload = format!("only {}", ref_marker(&a));
        let (bucket, _) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, payload.as_bytes(), &[], ts(0));
        assert!(!validate_refs(&bucket, payload.as_bytes(), &[]));
    }

    /// Reference oracle: test every offset for the marker followed by a
    /// well-formed lowercase hex id.
    fn naive_scan(payload: &[u8]) -> BTreeSet<ContentId> {
        let mut out = BTreeSet::new();
        let m = REF_MARKER.len();
        let mut i = 0;
        while i + m <= payload.len() {
            if &payload[i..i + m] == REF_MARKER && i + m + 66 <= payload.len() {
                let text = &payload[i + m..i + m + 66];
                if text.iter().all(|c| matches!(c, b'0'..=b'9' | b'a'..=b'f')) {
                    out.insert(ContentId::from_hex(std::str::from_utf8(text).unwrap()).unwrap());
                    i += m + 66;
                    continue;
                }
            }
            i += 1;
        }
        out
    }

    #[test]
    fn validate_refs_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pool: Vec<ContentId> = (0..6u8).map(|i| content_id(&[i])).collect();
        for _ in 0..100 {
            let mut payload = Vec::new();
            let mut embedded = Vec::new();
            for _ in 0..rng.gen_range(0..6) {
                payload.extend((0..rng.gen_range(0..8)).map(|_| rng.gen_range(b' '..=b'~')));
                match rng.gen_range(0..4) {
                    0 => payload.extend_from_slice(b"@lakat:"),
                    1 => payload.extend_from_slice(b"@lakat:0123zz"),
                    _ => {
                        let id = pool[rng.gen_range(0..pool.len())];
                        payload.extend_from_slice(ref_marker(&id).as_bytes());
                        embedded.push(id);
                    }
                }
            }
            let mut refs: Vec<ContentId> = embedded.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            match rng.gen_range(0..4) {
                0 => {
                    refs.pop();
                }
                1 => refs.push(pool[rng.gen_range(0..pool.len())]),
                _ => {}
            }
            let (bucket, _) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, &payload, &refs, ts(0));
            let set: BTreeSet<ContentId> = refs.iter().copied().collect();
            let expected = set.len() == refs.len() && naive_scan(&payload) == set;
            assert_eq!(validate_refs(&bucket, &payload, &refs), expected);
        }
    }

    fn fixture_store() -> (Store, NewBucket, NewBucket) {
        let store = Store::memory();
        let (ab, a) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"a", &[], ts(1));
        let pending: BTreeSet<_> = [a].into();
        let (mb, m) = create_molecular_bucket(&store, &pending, Schema::Arrangement, creator(), ContentId::ZERO, &[a], ts(1)).unwrap();
        (
            store,
            NewBucket { id: a, bucket: ab, data: BucketData::Atomic(b"a".to_vec()) },
            NewBucket { id: m, bucket: mb, data: BucketData::Molecular(vec![a]) },
        )
    }

    #[test]
    fn context_membership_same_submit() {
        let (store, a, m) = fixture_store();
        let ids: BTreeSet<_> = [a.id, m.id].into();
        assert!(check_context_membership(&ids, &[a.clone(), m], &store));
        let lone: BTreeSet<_> = [a.id].into();
        assert!(!check_context_membership(&lone, &[a], &store));
    }

    #[test]
    fn context_membership_across_two_submits() {
        // first submit stores a and its context m; a later submit reuses a
        let (mut store, a, m) = fixture_store();
        store.put_bucket(&a.bucket, &a.data).unwrap();
        store.put_bucket(&m.bucket, &m.data).unwrap();
        let (ab2, a2) = create_atomic_bucket(Schema::Text, creator(), ContentId::ZERO, b"a2", &[], ts(2));
        let second = NewBucket { id: a2, bucket: ab2, data: BucketData::Atomic(b"a2".to_vec()) };
        let ids: BTreeSet<_> = [a.id].into();
        assert!(check_context_membership(&ids, &[], &store));
        let ids: BTreeSet<_> = [a2].into();
        assert!(!check_context_membership(&ids, &[second], &store));
    }

    #[test]
    fn attach_info_rules() {
        let info = BucketInfo::default();
        let r = content_id(b"review");
        let info = attach_info(&info, InfoDelta::Review(r)).unwrap();
        assert_eq!(info.reviews, vec![r]);
        let info = attach_info(&info, InfoDelta::RefsOut(vec![])).unwrap();
        assert_eq!(attach_info(&info, InfoDelta::RefsOut(vec![r])).unwrap_err(), BucketError::RefsOutImmutable);

        let storer = KeyIdentity::from_name("sam");
        let bucket = content_id(b"bucket");
        let good = StorageAttestation::new(&storer, bucket, ts(3));
        let info = attach_info(&info, InfoDelta::Storage(good.clone())).unwrap();
        assert_eq!(info.storage_proofs.len(), 1);
        let mut bad = good.clone();
        bad.timestamp = ts(4);
        assert_eq!(attach_info(&info, InfoDelta::Storage(bad)).unwrap_err(), BucketError::BadSignature);
        assert!(matches!(
            attach_info_to(&content_id(b"elsewhere"), &info, InfoDelta::Storage(good)),
            Err(BucketError::WrongBucket { .. })
        ));
    }

    fn random_info(rng: &mut ChaCha8Rng, signers: &[KeyIdentity]) -> BucketInfo {
        let ids = |rng: &mut ChaCha8Rng, n: usize| -> Vec<ContentId> {
            (0..n).map(|_| content_id(&rng.gen::<[u8; 2]>())).collect()
        };
        let mut info = BucketInfo::default();
        for _ in 0..rng.gen_range(0..2) {
            let s = &signers[rng.gen_range(0..signers.len())];
            let mark = if rng.gen() { Mark::Up } else { Mark::Down };
            info.social_refs.push(SocialRef::new(s, content_id(&[rng.gen::<u8>() % 4]), mark));
        }
        let n = rng.gen_range(0..3);
        info.reviews = ids(rng, n);
        for _ in 0..rng.gen_range(0..2) {
            let s = &signers[rng.gen_range(0..signers.len())];
            info.tokens.push(TokenAttestation::new(s, vec![rng.gen::<u8>() % 3]));
        }
        info.bucket_refs_out = match rng.gen_range(0..3) {
            0 => None,
            1 => Some(vec![]),
            _ => {
                let n = rng.gen_range(1..3);
                Some(ids(rng, n))
            }
        };
        let n = rng.gen_range(0..3);
        info.bucket_refs_in = ids(rng, n);
        for _ in 0..rng.gen_range(0..2) {
            let s = &signers[rng.gen_range(0..signers.len())];
            info.storage_proofs.push(StorageAttestation::new(s, content_id(&[1]), ts(rng.gen_range(0..3))));
        }
        info
    }

    #[test]
    fn encoding_is_injective_over_random_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let signers: Vec<KeyIdentity> = ["a", "b", "c"].iter().map(|n| KeyIdentity::from_name(n)).collect();
        let mut seen: HashMap<Vec<u8>, BucketInfo> = HashMap::new();
        let mut collisions = Vec::new();
        for _ in 0..10_000 {
            let info = random_info(&mut rng, &signers);
            let bytes = canonical_encode(&info);
            if let Some(prev) = seen.get(&bytes) {
                if *prev != info {
                    collisions.push((prev.clone(), info.clone()));
                }
            } else {
                seen.insert(bytes.clone(), info.clone());
            }
            assert_eq!(canonical_decode::<BucketInfo>(&bytes).unwrap(), info);
        }
        assert!(collisions.is_empty(), "collision log: {collisions:?}");
        assert!(seen.len() > 5_000);
    }

    proptest! {
        #[test]
        fn bucket_round_trip(schema in 0usize..5, seed in any::<u64>(), tick in any::<u64>(), parent_zero in any::<bool>()) {
            let schemas = [Schema::Text, Schema::Binary, Schema::ReviewItem, Schema::Arrangement, Schema::ReviewContainer];
            let b = Bucket {
                schema: schemas[schema],
                creator_root: content_id(&seed.to_le_bytes()),
                parent: if parent_zero { ContentId::ZERO } else { content_id(b"p") },
                data_root: content_id(&tick.to_le_bytes()),
                refs_root: refs_root(&[]),
                timestamp: ts(tick),
            };
            prop_assert_eq!(canonical_decode::<Bucket>(&canonical_encode(&b)).unwrap(), b);
        }
    }
}

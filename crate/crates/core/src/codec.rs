//! Canonical binary encoding and content identifiers.
//!
//! Every protocol object is encoded as a one-byte type tag followed by a
//! fixed sequence of fields. Each field is a LEB128 length prefix followed by
//! the field bytes, so an absent or empty field costs exactly one byte. The
//! decoder is strict: non-minimal varints, leading zero bytes in integers and
//! trailing input are all rejected, which keeps the encoding injective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Algorithm tag for SHA-256 digests.
pub const ALGO_SHA256: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("trailing bytes after object")]
    TrailingBytes,
    #[error("unknown object tag {found:#04x}, expected {expected:#04x}")]
    UnknownTag { expected: u8, found: u8 },
    #[error("non-canonical encoding: {0}")]
    NonCanonical(&'static str),
    #[error("invalid value: {0}")]
    Invalid(&'static str),
    #[error("invalid content id text: {0}")]
    BadHex(String),
}

/// Hash-algorithm tag plus a 256-bit digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentId {
    algo: u8,
    digest: [u8; 32],
}

impl ContentId {
    /// The all-zero id used for "no parent" and other empty pointers.
    pub const ZERO: ContentId = ContentId { algo: 0, digest: [0; 32] };

    pub const fn from_parts(algo: u8, digest: [u8; 32]) -> Self {
        ContentId { algo, digest }
    }

    pub fn algo(&self) -> u8 {
        self.algo
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn to_bytes(&self) -> [u8; 33] {
        let mut out = [0u8; 33];
        out[0] = self.algo;
        out[1..].copy_from_slice(&self.digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != 33 {
            return Err(CodecError::Invalid("content id must be 33 bytes"));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&bytes[1..]);
        Ok(ContentId { algo: bytes[0], digest })
    }

    /// Lowercase hex, algorithm tag first (66 characters).
    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(text: &str) -> Result<Self, CodecError> {
        if text.len() != 66 || text.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(CodecError::BadHex(text.to_string()));
        }
        let bytes = hex::decode(text).map_err(|_| CodecError::BadHex(text.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// First eight hex characters of the digest, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.digest[..4])
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl FromStr for ContentId {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for ContentId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ContentId::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 content identifier of raw bytes.
pub fn content_id(bytes: &[u8]) -> ContentId {
    let digest: [u8; 32] = Sha256::digest(bytes).into();
    ContentId { algo: ALGO_SHA256, digest }
}

/// Content identifier of the canonical encoding of `value`.
pub fn id_of<T: Canonical>(value: &T) -> ContentId {
    content_id(&canonical_encode(value))
}

/// A protocol object with a canonical encoding.
pub trait Canonical: Sized {
    const TAG: u8;
    fn encode_fields(&self, w: &mut Writer);
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError>;
}

pub fn canonical_encode<T: Canonical>(value: &T) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.push(T::TAG);
    value.encode_fields(&mut w);
    w.buf
}

pub fn canonical_decode<T: Canonical>(bytes: &[u8]) -> Result<T, CodecError> {
    let (&tag, rest) = bytes.split_first().ok_or(CodecError::Truncated)?;
    if tag != T::TAG {
        return Err(CodecError::UnknownTag { expected: T::TAG, found: tag });
    }
    let mut r = Reader::new(rest);
    let value = T::decode_fields(&mut r)?;
    r.finish()?;
    Ok(value)
}

fn write_varint(buf: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf.push(byte);
            return;
        }
        buf.push(byte | 0x80);
    }
}

#[derive(Default, Debug)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, data: &[u8]) {
        write_varint(&mut self.buf, data.len() as u64);
        self.buf.extend_from_slice(data);
    }

    /// Minimal big-endian; zero is the empty field.
    pub fn u64(&mut self, v: u64) {
        let be = v.to_be_bytes();
        let skip = be.iter().take_while(|b| **b == 0).count();
        self.bytes(&be[skip..]);
    }

    pub fn bool(&mut self, v: bool) {
        self.u64(v as u64);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    /// The zero id is written as an empty field.
    pub fn id(&mut self, id: &ContentId) {
        if id.is_zero() {
            self.bytes(&[]);
        } else {
            self.bytes(&id.to_bytes());
        }
    }

    pub fn nested<T: Canonical>(&mut self, value: &T) {
        self.bytes(&canonical_encode(value));
    }

    pub fn list<T>(&mut self, items: &[T], mut each: impl FnMut(&mut Writer, &T)) {
        let mut inner = Writer::default();
        for item in items {
            each(&mut inner, item);
        }
        self.bytes(&inner.buf);
    }

    pub fn option<T>(&mut self, value: Option<&T>, each: impl FnOnce(&mut Writer, &T)) {
        match value {
            None => self.bytes(&[]),
            Some(v) => {
                let mut inner = Writer::default();
                inner.buf.push(1);
                each(&mut inner, v);
                self.bytes(&inner.buf);
            }
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(CodecError::TrailingBytes)
        }
    }

    fn varint(&mut self) -> Result<u64, CodecError> {
        let mut value: u64 = 0;
        let mut shift = 0u32;
        loop {
            let byte = *self.data.get(self.pos).ok_or(CodecError::Truncated)?;
            self.pos += 1;
            if shift == 63 && byte > 1 {
                return Err(CodecError::Invalid("varint overflow"));
            }
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                if byte == 0 && shift > 0 {
                    return Err(CodecError::NonCanonical("varint has trailing zero group"));
                }
                return Ok(value);
            }
            shift += 7;
            if shift > 63 {
                return Err(CodecError::Invalid("varint overflow"));
            }
        }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.varint()?;
        let len = usize::try_from(len).map_err(|_| CodecError::Truncated)?;
        let end = self.pos.checked_add(len).ok_or(CodecError::Truncated)?;
        if end > self.data.len() {
            return Err(CodecError::Truncated);
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let raw = self.bytes()?;
        if raw.len() > 8 {
            return Err(CodecError::Invalid("integer wider than 64 bits"));
        }
        if raw.first() == Some(&0) {
            return Err(CodecError::NonCanonical("integer has leading zero byte"));
        }
        Ok(raw.iter().fold(0u64, |acc, b| (acc << 8) | u64::from(*b)))
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        u8::try_from(self.u64()?).map_err(|_| CodecError::Invalid("value exceeds u8"))
    }

    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u64()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Invalid("boolean out of range")),
        }
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::Invalid("string is not utf-8"))
    }

    pub fn id(&mut self) -> Result<ContentId, CodecError> {
        let raw = self.bytes()?;
        if raw.is_empty() {
            return Ok(ContentId::ZERO);
        }
        let id = ContentId::from_bytes(raw)?;
        if id.is_zero() {
            return Err(CodecError::NonCanonical("zero id must be written empty"));
        }
        Ok(id)
    }

    pub fn nested<T: Canonical>(&mut self) -> Result<T, CodecError> {
        canonical_decode(self.bytes()?)
    }

    pub fn list<T>(
        &mut self,
        mut each: impl FnMut(&mut Reader<'a>) -> Result<T, CodecError>,
    ) -> Result<Vec<T>, CodecError> {
        let raw = self.bytes()?;
        let mut inner = Reader::new(raw);
        let mut out = Vec::new();
        while !inner.is_empty() {
            out.push(each(&mut inner)?);
        }
        Ok(out)
    }

    pub fn option<T>(
        &mut self,
        each: impl FnOnce(&mut Reader<'a>) -> Result<T, CodecError>,
    ) -> Result<Option<T>, CodecError> {
        let raw = self.bytes()?;
        match raw.split_first() {
            None => Ok(None),
            Some((1, rest)) => {
                let mut inner = Reader::new(rest);
                let value = each(&mut inner)?;
                inner.finish()?;
                Ok(Some(value))
            }
            Some(_) => Err(CodecError::Invalid("bad option marker")),
        }
    }
}

/// Ordered list of references; its id is a bucket's `refs_root`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RefList(pub Vec<ContentId>);

impl Canonical for RefList {
    const TAG: u8 = 0x0e;
    fn encode_fields(&self, w: &mut Writer) {
        w.list(&self.0, |w, id| w.id(id));
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(RefList(r.list(|r| r.id())?))
    }
}

/// Simulator tick plus an optional opaque external anchor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct LogicalTimestamp {
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex")]
    pub anchor: Option<Vec<u8>>,
}

impl LogicalTimestamp {
    pub fn at(tick: u64) -> Self {
        LogicalTimestamp { tick, anchor: None }
    }
}

impl Canonical for LogicalTimestamp {
    const TAG: u8 = 0x0a;
    fn encode_fields(&self, w: &mut Writer) {
        w.u64(self.tick);
        w.option(self.anchor.as_ref(), |w, a| w.bytes(a));
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(LogicalTimestamp {
            tick: r.u64()?,
            anchor: r.option(|r| r.bytes().map(<[u8]>::to_vec))?,
        })
    }
}

pub(crate) mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_some(&hex::encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let text: Option<String> = Option::deserialize(d)?;
        text.map(|t| hex::decode(t).map_err(serde::de::Error::custom)).transpose()
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input_has_fixed_id() {
        let id = content_id(&[]);
        assert_eq!(
            id.to_hex(),
            "01e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(id, content_id(b""));
    }

    #[test]
    fn hex_round_trip_and_rejects() {
        let id = content_id(b"lakat");
        assert_eq!(ContentId::from_hex(&id.to_hex()).unwrap(), id);
        assert!(ContentId::from_hex("01").is_err());
        assert!(ContentId::from_hex(&id.to_hex().to_uppercase()).is_err());
        assert_eq!(ContentId::ZERO.to_hex(), "0".repeat(66));
    }

    #[test]
    fn avalanche_single_bit_flips() {
        let mut seen = std::collections::HashSet::new();
        let base: Vec<u8> = (0..64u8).collect();
        seen.insert(content_id(&base));
        for trial in 0..10_000usize {
            let mut flipped = base.clone();
            flipped.extend_from_slice(&(trial as u64).to_le_bytes());
            let bit = trial % (flipped.len() * 8);
            flipped[bit / 8] ^= 1 << (bit % 8);
            let plain = {
                let mut p = base.clone();
                p.extend_from_slice(&(trial as u64).to_le_bytes());
                p
            };
            assert_ne!(content_id(&plain), content_id(&flipped));
            assert!(seen.insert(content_id(&flipped)), "digest repeated at trial {trial}");
        }
    }

    #[test]
    fn timestamp_encoding_is_compact() {
        let ts = LogicalTimestamp::at(0);
        assert_eq!(canonical_encode(&ts), vec![0x0a, 0, 0]);
        let anchored = LogicalTimestamp { tick: 300, anchor: Some(vec![]) };
        let bytes = canonical_encode(&anchored);
        assert_eq!(bytes, vec![0x0a, 2, 0x01, 0x2c, 2, 1, 0]);
        assert_eq!(canonical_decode::<LogicalTimestamp>(&bytes).unwrap(), anchored);
    }

    #[test]
    fn decoder_rejects_non_canonical_forms() {
        // tick written with a leading zero byte
        assert!(canonical_decode::<LogicalTimestamp>(&[0x0a, 2, 0, 5, 0]).is_err());
        // non-minimal varint length
        assert!(canonical_decode::<LogicalTimestamp>(&[0x0a, 0x81, 0x00, 5, 0]).is_err());
        // trailing bytes
        assert!(canonical_decode::<LogicalTimestamp>(&[0x0a, 0, 0, 0]).is_err());
        // wrong tag
        assert!(matches!(
            canonical_decode::<LogicalTimestamp>(&[0x0b, 0, 0]),
            Err(CodecError::UnknownTag { .. })
        ));
        // explicit zero id
        let mut zero = vec![0x0e, 34, 33];
        zero.extend_from_slice(&[0u8; 33]);
        assert!(canonical_decode::<RefList>(&zero).is_err());
    }

    proptest! {
        #[test]
        fn timestamp_round_trip(tick in any::<u64>(), anchor in proptest::option::of(proptest::collection::vec(any::<u8>(), 0..40))) {
            let ts = LogicalTimestamp { tick, anchor };
            prop_assert_eq!(canonical_decode::<LogicalTimestamp>(&canonical_encode(&ts)).unwrap(), ts);
        }

        #[test]
        fn ref_list_round_trip(seeds in proptest::collection::vec(any::<u32>(), 0..20), zero_at in proptest::option::of(0usize..20)) {
            let mut ids: Vec<ContentId> = seeds.iter().map(|s| content_id(&s.to_le_bytes())).collect();
            if let Some(i) = zero_at { if i < ids.len() { ids[i] = ContentId::ZERO; } }
            let list = RefList(ids);
            prop_assert_eq!(canonical_decode::<RefList>(&canonical_encode(&list)).unwrap(), list);
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
            let _ = canonical_decode::<LogicalTimestamp>(&bytes);
            let _ = canonical_decode::<RefList>(&bytes);
        }
    }
}

//! Persistent Merkle-Patricia trie from truncated bucket ids to bucket info.
//!
//! Keys are the first `key_bytes` bytes of a bucket id's digest, read as
//! nibbles. Leaves carry the full bucket id as a salt, which is prepended to
//! the leaf encoding before hashing so that buckets with identical info still
//! get distinct leaf hashes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bucket::BucketInfo;
use crate::codec::{
    canonical_decode, canonical_encode, content_id, id_of, Canonical, CodecError, ContentId, Reader,
    Writer,
};
use crate::store::{RecordKind, Store, StoreError};

pub const DEFAULT_KEY_BYTES: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrieError {
    #[error("buckets {existing} and {incoming} share a truncated key")]
    KeyCollision { existing: ContentId, incoming: ContentId },
    #[error("trie node {0} is missing from the store")]
    MissingNode(ContentId),
    #[error("bucket info {0} is missing from the store")]
    MissingValue(ContentId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Nibble path for a bucket id.
pub fn trie_key(bucket_id: &ContentId, key_bytes: usize) -> Vec<u8> {
    bucket_id.digest()[..key_bytes].iter().flat_map(|b| [b >> 4, b & 0x0f]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrieNode {
    Null,
    Leaf { suffix: Vec<u8>, value_hash: ContentId, salt: ContentId },
    Extension { shared: Vec<u8>, child: ContentId },
    Branch { children: [ContentId; 16], value: Option<ContentId> },
}

impl TrieNode {
    pub fn hash(&self) -> ContentId {
        match self {
            TrieNode::Null => ContentId::ZERO,
            TrieNode::Leaf { salt, .. } => {
                let mut bytes = salt.to_bytes().to_vec();
                bytes.extend(canonical_encode(self));
                content_id(&bytes)
            }
            _ => id_of(self),
        }
    }
}

fn read_nibbles(r: &mut Reader<'_>) -> Result<Vec<u8>, CodecError> {
    let raw = r.bytes()?;
    if raw.iter().any(|n| *n > 0x0f) {
        return Err(CodecError::Invalid("nibble out of range"));
    }
    Ok(raw.to_vec())
}

impl Canonical for TrieNode {
    const TAG: u8 = 0x06;
    fn encode_fields(&self, w: &mut Writer) {
        match self {
            TrieNode::Null => w.u64(0),
            TrieNode::Leaf { suffix, value_hash, salt } => {
                w.u64(1);
                w.bytes(suffix);
                w.id(value_hash);
                w.id(salt);
            }
            TrieNode::Extension { shared, child } => {
                w.u64(2);
                w.bytes(shared);
                w.id(child);
            }
            TrieNode::Branch { children, value } => {
                w.u64(3);
                w.list(children.as_slice(), |w, c| w.id(c));
                w.option(value.as_ref(), |w, v| w.id(v));
            }
        }
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(match r.u64()? {
            0 => TrieNode::Null,
            1 => TrieNode::Leaf { suffix: read_nibbles(r)?, value_hash: r.id()?, salt: r.id()? },
            2 => {
                let shared = read_nibbles(r)?;
                if shared.is_empty() {
                    return Err(CodecError::NonCanonical("empty extension"));
                }
                TrieNode::Extension { shared, child: r.id()? }
            }
            3 => {
                let list = r.list(|r| r.id())?;
                let children: [ContentId; 16] =
                    list.try_into().map_err(|_| CodecError::Invalid("branch needs 16 children"))?;
                TrieNode::Branch { children, value: r.option(|r| r.id())? }
            }
            _ => return Err(CodecError::Invalid("unknown trie node kind")),
        })
    }
}

/// Hash of a stored node encoding, or `None` if the bytes do not decode.
pub fn stored_node_hash(bytes: &[u8]) -> Option<ContentId> {
    canonical_decode::<TrieNode>(bytes).ok().map(|n| n.hash())
}

/// Root nodes from the root hash down to a leaf, or to the point where the
/// key's path ends.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrieProof {
    pub nodes: Vec<Vec<u8>>,
}

impl TrieProof {
    /// One hex node encoding per line.
    pub fn to_text(&self) -> String {
        self.nodes.iter().map(|n| hex::encode(n) + "\n").collect()
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let nodes = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| hex::decode(l).map_err(|_| CodecError::BadHex(l.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(TrieProof { nodes })
    }
}

/// An immutable trie value: a root hash over nodes held in a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trie {
    pub root: ContentId,
    pub key_bytes: usize,
}

impl Default for Trie {
    fn default() -> Self {
        Trie::empty()
    }
}

impl Trie {
    pub fn empty() -> Self {
        Trie { root: ContentId::ZERO, key_bytes: DEFAULT_KEY_BYTES }
    }

    pub fn at(root: ContentId) -> Self {
        Trie { root, key_bytes: DEFAULT_KEY_BYTES }
    }

    pub fn with_key_bytes(key_bytes: usize) -> Self {
        assert!((1..=32).contains(&key_bytes));
        Trie { root: ContentId::ZERO, key_bytes }
    }

    fn load(store: &Store, hash: &ContentId) -> Result<TrieNode, TrieError> {
        if hash.is_zero() {
            return Ok(TrieNode::Null);
        }
        let bytes = store.get_verified_bytes(hash)?.ok_or(TrieError::MissingNode(*hash))?;
        Ok(canonical_decode(&bytes)?)
    }

    fn save(store: &mut Store, node: TrieNode) -> Result<ContentId, TrieError> {
        let hash = node.hash();
        if !hash.is_zero() {
            store.put_node(hash, canonical_encode(&node))?;
        }
        Ok(hash)
    }

    /// Returns a new trie with `bucket_id` mapped to `info`; `self` stays valid.
    pub fn insert(&self, store: &mut Store, bucket_id: ContentId, info: &BucketInfo) -> Result<Trie, TrieError> {
        let value_hash = store.put_object(RecordKind::Info, info)?;
        let path = trie_key(&bucket_id, self.key_bytes);
        let root = Self::insert_at(store, &self.root, &path, bucket_id, value_hash)?;
        Ok(Trie { root, key_bytes: self.key_bytes })
    }

    fn insert_at(
        store: &mut Store,
        hash: &ContentId,
        path: &[u8],
        salt: ContentId,
        value_hash: ContentId,
    ) -> Result<ContentId, TrieError> {
        let leaf = |suffix: &[u8]| TrieNode::Leaf { suffix: suffix.to_vec(), value_hash, salt };
        match Self::load(store, hash)? {
            TrieNode::Null => Self::save(store, leaf(path)),
            TrieNode::Leaf { suffix, value_hash: old_value, salt: old_salt } => {
                if suffix == path {
                    if old_salt != salt {
                        return Err(TrieError::KeyCollision { existing: old_salt, incoming: salt });
                    }
                    return Self::save(store, leaf(path));
                }
                let c = common_prefix(&suffix, path);
                let old = Self::save(
                    store,
                    TrieNode::Leaf { suffix: suffix[c + 1..].to_vec(), value_hash: old_value, salt: old_salt },
                )?;
                let new = Self::save(store, leaf(&path[c + 1..]))?;
                let mut children = [ContentId::ZERO; 16];
                children[suffix[c] as usize] = old;
                children[path[c] as usize] = new;
                let branch = Self::save(store, TrieNode::Branch { children, value: None })?;
                Self::wrap(store, &path[..c], branch)
            }
            TrieNode::Extension { shared, child } => {
                let c = common_prefix(&shared, path);
                if c == shared.len() {
                    let child = Self::insert_at(store, &child, &path[c..], salt, value_hash)?;
                    return Self::save(store, TrieNode::Extension { shared, child });
                }
                let old = Self::wrap(store, &shared[c + 1..], child)?;
                let new = Self::save(store, leaf(&path[c + 1..]))?;
                let mut children = [ContentId::ZERO; 16];
                children[shared[c] as usize] = old;
                children[path[c] as usize] = new;
                let branch = Self::save(store, TrieNode::Branch { children, value: None })?;
                Self::wrap(store, &path[..c], branch)
            }
            TrieNode::Branch { mut children, value } => {
                let idx = path[0] as usize;
                children[idx] = Self::insert_at(store, &children[idx], &path[1..], salt, value_hash)?;
                Self::save(store, TrieNode::Branch { children, value })
            }
        }
    }

    fn wrap(store: &mut Store, shared: &[u8], child: ContentId) -> Result<ContentId, TrieError> {
        if shared.is_empty() {
            Ok(child)
        } else {
            Self::save(store, TrieNode::Extension { shared: shared.to_vec(), child })
        }
    }

    /// Value hash stored for `bucket_id`, if present.
    pub fn get_hash(&self, store: &Store, bucket_id: &ContentId) -> Result<Option<ContentId>, TrieError> {
        let path = trie_key(bucket_id, self.key_bytes);
        let mut hash = self.root;
        let mut rest: &[u8] = &path;
        loop {
            match Self::load(store, &hash)? {
                TrieNode::Null => return Ok(None),
                TrieNode::Leaf { suffix, value_hash, salt } => {
                    return Ok((suffix == rest && salt == *bucket_id).then_some(value_hash));
                }
                TrieNode::Extension { shared, child } => {
                    if !rest.starts_with(&shared) {
                        return Ok(None);
                    }
                    rest = &rest[shared.len()..];
                    hash = child;
                }
                TrieNode::Branch { children, .. } => {
                    let Some((first, tail)) = rest.split_first() else {
                        return Ok(None);
                    };
                    hash = children[*first as usize];
                    rest = tail;
                }
            }
        }
    }

    pub fn get(&self, store: &Store, bucket_id: &ContentId) -> Result<Option<BucketInfo>, TrieError> {
        match self.get_hash(store, bucket_id)? {
            Some(h) => Ok(Some(store.get_object(&h)?.ok_or(TrieError::MissingValue(h))?)),
            None => Ok(None),
        }
    }

    pub fn contains(&self, store: &Store, bucket_id: &ContentId) -> Result<bool, TrieError> {
        Ok(self.get_hash(store, bucket_id)?.is_some())
    }

    pub fn prove(&self, store: &Store, bucket_id: &ContentId) -> Result<TrieProof, TrieError> {
        let path = trie_key(bucket_id, self.key_bytes);
        let mut nodes = Vec::new();
        let mut hash = self.root;
        let mut rest: &[u8] = &path;
        while !hash.is_zero() {
            let node = Self::load(store, &hash)?;
            nodes.push(canonical_encode(&node));
            match node {
                TrieNode::Null | TrieNode::Leaf { .. } => break,
                TrieNode::Extension { shared, child } => {
                    if !rest.starts_with(&shared) {
                        break;
                    }
                    rest = &rest[shared.len()..];
                    hash = child;
                }
                TrieNode::Branch { children, .. } => {
                    let Some((first, tail)) = rest.split_first() else { break };
                    hash = children[*first as usize];
                    rest = tail;
                }
            }
        }
        Ok(TrieProof { nodes })
    }

    /// All (bucket id, value hash) pairs, ordered by key.
    pub fn entries(&self, store: &Store) -> Result<Vec<(ContentId, ContentId)>, TrieError> {
        let mut out = Vec::new();
        Self::collect(store, &self.root, &mut out)?;
        Ok(out)
    }

    fn collect(store: &Store, hash: &ContentId, out: &mut Vec<(ContentId, ContentId)>) -> Result<(), TrieError> {
        match Self::load(store, hash)? {
            TrieNode::Null => {}
            TrieNode::Leaf { value_hash, salt, .. } => out.push((salt, value_hash)),
            TrieNode::Extension { child, .. } => Self::collect(store, &child, out)?,
            TrieNode::Branch { children, .. } => {
                for c in children.iter().filter(|c| !c.is_zero()) {
                    Self::collect(store, c, out)?;
                }
            }
        }
        Ok(())
    }

    /// Bucket id → value hash map of every entry.
    pub fn entry_map(&self, store: &Store) -> Result<BTreeMap<ContentId, ContentId>, TrieError> {
        Ok(self.entries(store)?.into_iter().collect())
    }
}

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Checks that `proof` shows `bucket_id` maps to `value` (or is absent when
/// `value` is `None`) in the trie with root `root`.
pub fn verify_proof(
    root: &ContentId,
    bucket_id: &ContentId,
    value: Option<&BucketInfo>,
    proof: &TrieProof,
    key_bytes: usize,
) -> bool {
    let path = trie_key(bucket_id, key_bytes);
    let mut rest: &[u8] = &path;
    let mut expected = *root;
    let mut nodes = proof.nodes.iter();
    let found: Option<ContentId> = loop {
        if expected.is_zero() {
            break None;
        }
        let Some(bytes) = nodes.next() else { return false };
        let Ok(node) = canonical_decode::<TrieNode>(bytes) else { return false };
        if node.hash() != expected {
            return false;
        }
        match node {
            TrieNode::Null => return false,
            TrieNode::Leaf { suffix, value_hash, salt } => {
                break (suffix == rest && salt == *bucket_id).then_some(value_hash);
            }
            TrieNode::Extension { shared, child } => {
                if !rest.starts_with(&shared) {
                    break None;
                }
                rest = &rest[shared.len()..];
                expected = child;
            }
            TrieNode::Branch { children, .. } => {
                let Some((first, tail)) = rest.split_first() else { return false };
                expected = children[*first as usize];
                rest = tail;
            }
        }
    };
    if nodes.next().is_some() {
        return false;
    }
    match (found, value) {
        (None, None) => true,
        (Some(h), Some(v)) => h == id_of(v),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn info(n: u8) -> BucketInfo {
        BucketInfo { reviews: vec![content_id(&[n])], ..Default::default() }
    }

    fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<ContentId> {
        (0..n).map(|_| content_id(&rng.gen::<[u8; 16]>())).collect()
    }

    #[test]
    fn key_shape() {
        let id = content_id(b"x");
        let k = trie_key(&id, DEFAULT_KEY_BYTES);
        assert_eq!(k.len(), 32);
        assert_eq!(k, trie_key(&id, DEFAULT_KEY_BYTES));
        assert_eq!(k[0], id.digest()[0] >> 4);
    }

    #[test]
    fn single_leaf_root_is_salted_hash() {
        let mut store = Store::memory();
        let id = content_id(b"bucket");
        let t = Trie::empty().insert(&mut store, id, &BucketInfo::default()).unwrap();
        let leaf = TrieNode::Leaf {
            suffix: trie_key(&id, 16),
            value_hash: id_of(&BucketInfo::default()),
            salt: id,
        };
        let mut salted = id.to_bytes().to_vec();
        salted.extend(canonical_encode(&leaf));
        assert_eq!(t.root, content_id(&salted));
        assert_eq!(t.insert(&mut store, id, &BucketInfo::default()).unwrap(), t);
        assert_eq!(Trie::empty().get(&store, &id).unwrap(), None);
    }

    #[test]
    fn salt_separates_empty_infos() {
        let mut store = Store::memory();
        let a = Trie::empty().insert(&mut store, content_id(b"a"), &BucketInfo::default()).unwrap();
        let b = Trie::empty().insert(&mut store, content_id(b"b"), &BucketInfo::default()).unwrap();
        assert_ne!(a.root, b.root);
    }

    #[test]
    fn prefix_collision_is_rejected() {
        // at two-byte keys a collision turns up quickly by brute force
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen: BTreeMap<Vec<u8>, ContentId> = BTreeMap::new();
        let (first, second) = loop {
            let id = content_id(&rng.gen::<[u8; 16]>());
            let key = trie_key(&id, 2);
            if let Some(prev) = seen.get(&key) {
                break (*prev, id);
            }
            seen.insert(key, id);
        };
        assert_eq!(first.digest()[..2], second.digest()[..2]);
        let mut store = Store::memory();
        let t = Trie::with_key_bytes(2).insert(&mut store, first, &info(1)).unwrap();
        assert_eq!(
            t.insert(&mut store, second, &info(2)).unwrap_err(),
            TrieError::KeyCollision { existing: first, incoming: second }
        );
        assert_eq!(t.get(&store, &second).unwrap(), None);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ids = random_ids(&mut rng, 200);
        let build = |order: &[ContentId], store: &mut Store| {
            order.iter().enumerate().fold(Trie::empty(), |t, (i, id)| {
                let n = ids.iter().position(|x| x == id).unwrap();
                let _ = i;
                t.insert(store, *id, &info(n as u8)).unwrap()
            })
        };
        let mut store = Store::memory();
        let mut sorted = ids.clone();
        sorted.sort();
        let reference = build(&sorted, &mut store);
        for _ in 0..2 {
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(build(&shuffled, &mut store).root, reference.root);
        }
    }

    #[test]
    fn lookups_match_flat_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids = random_ids(&mut rng, 300);
        let mut store = Store::memory();
        let mut oracle = BTreeMap::new();
        let mut t = Trie::empty();
        for id in ids.iter().take(150) {
            let v = info(rng.gen());
            t = t.insert(&mut store, *id, &v).unwrap();
            oracle.insert(*id, v);
        }
        for _ in 0..1000 {
            let id = ids[rng.gen_range(0..ids.len())];
            assert_eq!(t.get(&store, &id).unwrap().as_ref(), oracle.get(&id));
        }
        let mut listed: Vec<ContentId> = t.entries(&store).unwrap().into_iter().map(|(k, _)| k).collect();
        listed.sort();
        assert_eq!(listed, oracle.keys().copied().collect::<Vec<_>>());
    }

    #[test]
    fn old_roots_stay_readable() {
        let mut store = Store::memory();
        let a = content_id(b"a");
        let b = content_id(b"b");
        let t1 = Trie::empty().insert(&mut store, a, &info(1)).unwrap();
        let t2 = t1.insert(&mut store, b, &info(2)).unwrap();
        let t3 = t2.insert(&mut store, a, &info(3)).unwrap();
        assert_eq!(t1.get(&store, &a).unwrap(), Some(info(1)));
        assert_eq!(t1.get(&store, &b).unwrap(), None);
        assert_eq!(t2.get(&store, &a).unwrap(), Some(info(1)));
        assert_eq!(t3.get(&store, &a).unwrap(), Some(info(3)));
        assert_eq!(t3.get(&store, &b).unwrap(), Some(info(2)));
    }

    #[test]
    fn proofs_verify_and_reject() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids = random_ids(&mut rng, 64);
        let mut store = Store::memory();
        let mut t = Trie::empty();
        for (i, id) in ids.iter().take(40).enumerate() {
            t = t.insert(&mut store, *id, &info(i as u8)).unwrap();
        }
        for (i, id) in ids.iter().enumerate() {
            let proof = t.prove(&store, id).unwrap();
            let v = (i < 40).then(|| info(i as u8));
            assert!(verify_proof(&t.root, id, v.as_ref(), &proof, 16));
            let wrong = if v.is_some() { None } else { Some(info(0)) };
            assert!(!verify_proof(&t.root, id, wrong.as_ref(), &proof, 16));
            assert!(!verify_proof(&content_id(b"other root"), id, v.as_ref(), &proof, 16));
            assert_eq!(TrieProof::from_text(&proof.to_text()).unwrap(), proof);
        }
        assert!(verify_proof(&ContentId::ZERO, &ids[0], None, &TrieProof::default(), 16));
    }

    #[test]
    fn tampered_proofs_never_verify() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ids = random_ids(&mut rng, 50);
        let mut store = Store::memory();
        let mut t = Trie::empty();
        for (i, id) in ids.iter().enumerate() {
            t = t.insert(&mut store, *id, &info(i as u8)).unwrap();
        }
        let mut accepted = 0;
        for _ in 0..1000 {
            let i = rng.gen_range(0..ids.len());
            let mut proof = t.prove(&store, &ids[i]).unwrap();
            let n = rng.gen_range(0..proof.nodes.len());
            let node = &mut proof.nodes[n];
            let at = rng.gen_range(0..node.len());
            node[at] ^= rng.gen_range(1..=255u8);
            if verify_proof(&t.root, &ids[i], Some(&info(i as u8)), &proof, 16) {
                accepted += 1;
            }
        }
        assert_eq!(accepted, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn root_is_a_function_of_the_map(seeds in proptest::collection::btree_set(any::<u32>(), 1..40), shuffle_seed in any::<u64>()) {
            let ids: Vec<ContentId> = seeds.iter().map(|s| content_id(&s.to_le_bytes())).collect();
            let mut store = Store::memory();
            let forward = ids.iter().fold(Trie::empty(), |t, id| t.insert(&mut store, *id, &info(id.digest()[0])).unwrap());
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let other = shuffled.iter().fold(Trie::empty(), |t, id| t.insert(&mut store, *id, &info(id.digest()[0])).unwrap());
            prop_assert_eq!(forward.root, other.root);
        }
    }
}

//! Content-addressed object store with in-memory and append-only file backends.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec::{canonical_decode, canonical_encode, content_id, Canonical, CodecError, ContentId};

pub const LOG_FILE: &str = "store.log";
pub const INDEX_FILE: &str = "store.idx";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("stored bytes for {0} do not hash to their id")]
    IdMismatch(ContentId),
    #[error("record {0} is missing")]
    Missing(ContentId),
    #[error("malformed store file: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

/// What a record holds. Trie nodes are keyed by their salted hash; every
/// other kind is keyed by the plain content id of its bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Payload,
    Bucket,
    Info,
    Node,
    Submit,
    Config,
    Creator,
    Other,
}

impl RecordKind {
    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Payload => "payload",
            RecordKind::Bucket => "bucket",
            RecordKind::Info => "info",
            RecordKind::Node => "node",
            RecordKind::Submit => "submit",
            RecordKind::Config => "config",
            RecordKind::Creator => "creator",
            RecordKind::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "payload" => RecordKind::Payload,
            "bucket" => RecordKind::Bucket,
            "info" => RecordKind::Info,
            "node" => RecordKind::Node,
            "submit" => RecordKind::Submit,
            "config" => RecordKind::Config,
            "creator" => RecordKind::Creator,
            "other" => RecordKind::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: RecordKind,
    pub bytes: Vec<u8>,
}

/// Raw key-value backend. Values are immutable once written.
pub trait KvStore {
    fn get(&self, id: &ContentId) -> Option<&Record>;
    fn put(&mut self, id: ContentId, record: Record) -> Result<(), StoreError>;
    fn ids(&self) -> Vec<ContentId>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryKv {
    map: BTreeMap<ContentId, Record>,
}

impl KvStore for MemoryKv {
    fn get(&self, id: &ContentId) -> Option<&Record> {
        self.map.get(id)
    }

    fn put(&mut self, id: ContentId, record: Record) -> Result<(), StoreError> {
        self.map.entry(id).or_insert(record);
        Ok(())
    }

    fn ids(&self) -> Vec<ContentId> {
        self.map.keys().copied().collect()
    }
}

/// Append-only file backend: `store.log` holds `hex-id SPACE hex-bytes`
/// lines and `store.idx` holds `hex-id SPACE kind SPACE line` entries.
/// Records are cached in memory after open.
#[derive(Debug)]
pub struct FileKv {
    dir: PathBuf,
    cache: BTreeMap<ContentId, Record>,
    lines: u64,
    log: File,
    index: File,
}

impl FileKv {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let idx_path = dir.join(INDEX_FILE);

        let mut kinds: BTreeMap<ContentId, RecordKind> = BTreeMap::new();
        if idx_path.exists() {
            for line in BufReader::new(File::open(&idx_path)?).lines() {
                let line = line?;
                let mut parts = line.split(' ');
                let (Some(id), Some(kind)) = (parts.next(), parts.next()) else {
                    return Err(StoreError::Malformed(line));
                };
                let id = ContentId::from_hex(id)?;
                let kind = RecordKind::from_name(kind).ok_or_else(|| StoreError::Malformed(line.clone()))?;
                kinds.insert(id, kind);
            }
        }

        let mut cache = BTreeMap::new();
        let mut lines = 0;
        if log_path.exists() {
            for line in BufReader::new(File::open(&log_path)?).lines() {
                let line = line?;
                lines += 1;
                let (id, bytes) =
                    line.split_once(' ').ok_or_else(|| StoreError::Malformed(line.clone()))?;
                let id = ContentId::from_hex(id)?;
                let bytes = hex::decode(bytes).map_err(|_| StoreError::Malformed(line.clone()))?;
                // without an index entry, plain-hashed records are typed Other and
                // everything else is assumed to be a trie node
                let kind = kinds.get(&id).copied().unwrap_or(if content_id(&bytes) == id {
                    RecordKind::Other
                } else {
                    RecordKind::Node
                });
                cache.insert(id, Record { kind, bytes });
            }
        }

        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let index = OpenOptions::new().create(true).append(true).open(&idx_path)?;
        Ok(FileKv { dir, cache, lines, log, index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl KvStore for FileKv {
    fn get(&self, id: &ContentId) -> Option<&Record> {
        self.cache.get(id)
    }

    fn put(&mut self, id: ContentId, record: Record) -> Result<(), StoreError> {
        if self.cache.contains_key(&id) {
            return Ok(());
        }
        writeln!(self.log, "{} {}", id.to_hex(), hex::encode(&record.bytes))?;
        writeln!(self.index, "{} {} {}", id.to_hex(), record.kind.name(), self.lines)?;
        self.lines += 1;
        self.cache.insert(id, record);
        Ok(())
    }

    fn ids(&self) -> Vec<ContentId> {
        self.cache.keys().copied().collect()
    }
}

/// Typed store over a key-value backend. Also keeps the containment index
/// (atomic bucket → molecular buckets arranging it).
pub struct Store {
    kv: Box<dyn KvStore + Send>,
    contained_in: BTreeMap<ContentId, BTreeSet<ContentId>>,
    // records are immutable, so each one is hashed on first read only
    verified: RefCell<HashSet<ContentId>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("records", &self.kv.ids().len()).finish()
    }
}

impl Store {
    pub fn memory() -> Self {
        Store { kv: Box::new(MemoryKv::default()), contained_in: BTreeMap::new(), verified: RefCell::default() }
    }

    /// Opens a file-backed store, rebuilding the containment index.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut store = Store { kv: Box::new(FileKv::open(dir)?), contained_in: BTreeMap::new(), verified: RefCell::default() };
        for id in store.kv.ids() {
            if store.kind_of(&id) != Some(RecordKind::Bucket) {
                continue;
            }
            if let Some(bucket) = store.get_bucket(&id)? {
                if let Some(crate::bucket::BucketData::Molecular(arr)) = store.get_bucket_data(&bucket)? {
                    store.register_containment(id, &arr);
                }
            }
        }
        Ok(store)
    }

    pub fn put_raw(&mut self, kind: RecordKind, bytes: Vec<u8>) -> Result<ContentId, StoreError> {
        debug_assert!(kind != RecordKind::Node);
        let id = content_id(&bytes);
        self.kv.put(id, Record { kind, bytes })?;
        Ok(id)
    }

    pub fn put_object<T: Canonical>(&mut self, kind: RecordKind, value: &T) -> Result<ContentId, StoreError> {
        self.put_raw(kind, canonical_encode(value))
    }

    /// Trie nodes are stored under their salted hash, computed by the caller.
    pub fn put_node(&mut self, hash: ContentId, bytes: Vec<u8>) -> Result<(), StoreError> {
        self.kv.put(hash, Record { kind: RecordKind::Node, bytes })
    }

    pub fn contains(&self, id: &ContentId) -> bool {
        self.kv.get(id).is_some()
    }

    pub fn kind_of(&self, id: &ContentId) -> Option<RecordKind> {
        self.kv.get(id).map(|r| r.kind)
    }

    pub fn record(&self, id: &ContentId) -> Option<&Record> {
        self.kv.get(id)
    }

    /// Returns the stored bytes after checking they hash back to `id`.
    pub fn get_verified_bytes(&self, id: &ContentId) -> Result<Option<Vec<u8>>, StoreError> {
        let Some(rec) = self.kv.get(id) else {
            return Ok(None);
        };
        if !self.verified.borrow().contains(id) {
            if !record_matches(id, rec) {
                return Err(StoreError::IdMismatch(*id));
            }
            self.verified.borrow_mut().insert(*id);
        }
        Ok(Some(rec.bytes.clone()))
    }

    pub fn get_object<T: Canonical>(&self, id: &ContentId) -> Result<Option<T>, StoreError> {
        match self.get_verified_bytes(id)? {
            Some(bytes) => Ok(Some(canonical_decode(&bytes)?)),
            None => Ok(None),
        }
    }

    pub fn require_object<T: Canonical>(&self, id: &ContentId) -> Result<T, StoreError> {
        self.get_object(id)?.ok_or(StoreError::Missing(*id))
    }

    pub fn register_containment(&mut self, molecular: ContentId, arrangement: &[ContentId]) {
        for id in arrangement {
            self.contained_in.entry(*id).or_default().insert(molecular);
        }
    }

    /// Molecular buckets whose arrangement lists `id`.
    pub fn containers_of(&self, id: &ContentId) -> BTreeSet<ContentId> {
        self.contained_in.get(id).cloned().unwrap_or_default()
    }

    pub fn has_context(&self, id: &ContentId) -> bool {
        self.contained_in.get(id).is_some_and(|s| !s.is_empty())
    }

    pub fn ids(&self) -> Vec<ContentId> {
        self.kv.ids()
    }

    /// Ids whose stored bytes do not hash back to the key.
    pub fn verify_all(&self) -> Vec<ContentId> {
        self.kv
            .ids()
            .into_iter()
            .filter(|id| self.kv.get(id).is_some_and(|r| !record_matches(id, r)))
            .collect()
    }
}

fn record_matches(id: &ContentId, rec: &Record) -> bool {
    match rec.kind {
        RecordKind::Node => crate::trie::stored_node_hash(&rec.bytes).as_ref() == Some(id),
        _ => content_id(&rec.bytes) == *id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::{create_atomic_bucket, create_molecular_bucket, BucketData, Schema};
    use crate::codec::LogicalTimestamp;

    #[test]
    fn memory_put_get_round_trip() {
        let mut store = Store::memory();
        let id = store.put_raw(RecordKind::Payload, b"hello".to_vec()).unwrap();
        assert_eq!(id, content_id(b"hello"));
        assert_eq!(store.get_verified_bytes(&id).unwrap(), Some(b"hello".to_vec()));
        assert_eq!(store.get_verified_bytes(&content_id(b"nope")).unwrap(), None);
        // writing again is a no-op
        assert_eq!(store.put_raw(RecordKind::Payload, b"hello".to_vec()).unwrap(), id);
        assert_eq!(store.ids().len(), 1);
    }

    #[test]
    fn file_backend_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let creator = content_id(b"creator");
        let (a, a_id) = create_atomic_bucket(Schema::Text, creator, ContentId::ZERO, b"a", &[], LogicalTimestamp::at(1));
        let pending = [a_id].into();
        let m_id;
        {
            let mut store = Store::open_dir(dir.path()).unwrap();
            store.put_bucket(&a, &BucketData::Atomic(b"a".to_vec())).unwrap();
            let (m, id) = create_molecular_bucket(&store, &pending, Schema::Arrangement, creator, ContentId::ZERO, &[a_id], LogicalTimestamp::at(1)).unwrap();
            m_id = id;
            store.put_bucket(&m, &BucketData::Molecular(vec![a_id])).unwrap();
        }
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        for line in text.lines() {
            let (id, bytes) = line.split_once(' ').unwrap();
            assert_eq!(id.len(), 66);
            assert!(hex::decode(bytes).is_ok());
        }
        let store = Store::open_dir(dir.path()).unwrap();
        assert_eq!(store.get_bucket(&a_id).unwrap(), Some(a));
        assert!(store.contains_bucket(&m_id));
        assert!(store.has_context(&a_id));
        assert!(store.verify_all().is_empty());
    }

    #[test]
    fn tampered_log_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut store = Store::open_dir(dir.path()).unwrap();
            store.put_raw(RecordKind::Payload, b"payload".to_vec()).unwrap()
        };
        let path = dir.path().join(LOG_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replace(&hex::encode(b"payload"), &hex::encode(b"paylord"));
        fs::write(&path, tampered).unwrap();
        let store = Store::open_dir(dir.path()).unwrap();
        assert_eq!(store.get_verified_bytes(&id), Err(StoreError::IdMismatch(id)));
        assert_eq!(store.verify_all(), vec![id]);
    }
}

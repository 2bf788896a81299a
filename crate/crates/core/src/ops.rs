//! Branch operations: drafting and sealing submits, genesis and rooted
//! creation, merge planning and the merged data trie.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::branch::{
    conflicts_among, first_parent_ids, inclusive_closure, load_submit, Branch, BranchConfig, BranchError, BranchId,
    BranchType, ConflictRecord, Submit, SubmitTrace,
};
use crate::bucket::{
    attach_info, attach_info_to, check_context_membership, create_atomic_bucket, create_molecular_bucket, extract_refs,
    refs_root, validate_refs, Arrangement, BucketData, BucketError, BucketInfo, InfoDelta, NewBucket, Schema,
    TokenAttestation,
};
use crate::codec::{canonical_encode, content_id, id_of, Canonical, ContentId, LogicalTimestamp};
use crate::identity::KeyIdentity;
use crate::por::ReviewItem;
use crate::store::{RecordKind, Store, StoreError};
use crate::trie::{Trie, TrieError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpsError {
    #[error(transparent)]
    Bucket(#[from] BucketError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trie(#[from] TrieError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error("bucket {0} does not hash to its id")]
    BucketIdMismatch(ContentId),
    #[error("bucket {0} does not commit to its data or references")]
    BadData(ContentId),
    #[error("arranged bucket {0} does not resolve")]
    DanglingArrangement(ContentId),
    #[error("trace lists different new buckets than the package")]
    TraceMismatch,
    #[error("bucket {0} is already part of the trie")]
    DuplicateBucket(ContentId),
    #[error("a new atomic bucket lacks a molecular context")]
    NoContext,
    #[error("bucket {0} is not part of the trie")]
    UnknownBucket(ContentId),
    #[error("review item {0} is missing")]
    MissingReviewItem(ContentId),
    #[error("reviewed bucket {0} is not part of the trie")]
    DanglingReviewedBucket(ContentId),
    #[error("branch type {0:?} is not allowed here")]
    InvalidType(BranchType),
    #[error("submit {root} is not in the history of the parent branch")]
    InvalidRoot { root: ContentId },
}

/// A submit plus everything a peer needs to validate and store it.
#[derive(Debug, Clone)]
pub struct SubmitPackage {
    pub submit: Submit,
    pub buckets: Vec<NewBucket>,
    pub info_updates: Vec<(ContentId, InfoDelta)>,
    pub objects: Vec<(RecordKind, Vec<u8>)>,
}

impl SubmitPackage {
    pub fn id(&self) -> ContentId {
        self.submit.id()
    }
}

/// Outgoing references of a bucket: in-band markers, deduplicated in order
/// of first appearance, or the arrangement of a molecular bucket.
pub fn refs_of(data: &BucketData) -> Vec<ContentId> {
    match data {
        BucketData::Atomic(payload) => {
            let mut seen = BTreeSet::new();
            extract_refs(payload).into_iter().filter(|id| seen.insert(*id)).collect()
        }
        BucketData::Molecular(arr) => arr.clone(),
    }
}

fn validate_buckets(store: &Store, pkg: &SubmitPackage) -> Result<(), OpsError> {
    let ids: Vec<ContentId> = pkg.buckets.iter().map(|b| b.id).collect();
    if ids != pkg.submit.submit_trace.new_buckets {
        return Err(OpsError::TraceMismatch);
    }
    let pending: BTreeSet<ContentId> = ids.iter().copied().collect();
    if pending.len() != ids.len() {
        return Err(OpsError::DuplicateBucket(ids[0]));
    }
    for nb in &pkg.buckets {
        if nb.bucket.id() != nb.id {
            return Err(OpsError::BucketIdMismatch(nb.id));
        }
        match &nb.data {
            BucketData::Atomic(payload) => {
                if nb.bucket.is_molecular() || !validate_refs(&nb.bucket, payload, &refs_of(&nb.data)) {
                    return Err(OpsError::BadData(nb.id));
                }
            }
            BucketData::Molecular(arr) => {
                if !nb.bucket.is_molecular()
                    || nb.bucket.data_root != id_of(&Arrangement(arr.clone()))
                    || nb.bucket.refs_root != refs_root(arr)
                {
                    return Err(OpsError::BadData(nb.id));
                }
                if let Some(missing) = arr.iter().find(|id| !pending.contains(id) && !store.contains_bucket(id)) {
                    return Err(OpsError::DanglingArrangement(*missing));
                }
            }
        }
    }
    Ok(())
}

fn upsert(store: &mut Store, trie: Trie, id: ContentId, info: &BucketInfo) -> Result<Trie, OpsError> {
    Ok(trie.insert(store, id, info)?)
}

/// Validates and stores the package contents and returns the trie that
/// results from applying it on top of `base`. Does not look at the
/// submit's own trie root.
pub fn apply_package(store: &mut Store, base: &Trie, pkg: &SubmitPackage) -> Result<Trie, OpsError> {
    validate_buckets(store, pkg)?;
    for (kind, bytes) in &pkg.objects {
        store.put_raw(*kind, bytes.clone())?;
    }
    for nb in &pkg.buckets {
        store.put_bucket(&nb.bucket, &nb.data)?;
    }
    let new_ids: BTreeSet<ContentId> = pkg.buckets.iter().map(|b| b.id).collect();
    if !check_context_membership(&new_ids, &pkg.buckets, store) {
        return Err(OpsError::NoContext);
    }
    let mut trie = base.clone();
    for nb in &pkg.buckets {
        if trie.contains(store, &nb.id)? {
            return Err(OpsError::DuplicateBucket(nb.id));
        }
        trie = upsert(store, trie, nb.id, &BucketInfo::fresh(refs_of(&nb.data)))?;
    }
    for nb in &pkg.buckets {
        for target in refs_of(&nb.data) {
            if let Some(info) = trie.get(store, &target)? {
                let next = attach_info(&info, InfoDelta::RefIn(nb.id))?;
                trie = upsert(store, trie, target, &next)?;
            }
        }
    }
    for (bucket, delta) in &pkg.info_updates {
        let info = trie.get(store, bucket)?.ok_or(OpsError::UnknownBucket(*bucket))?;
        let next = attach_info_to(bucket, &info, delta.clone())?;
        trie = upsert(store, trie, *bucket, &next)?;
    }
    for entry in &pkg.submit.submit_trace.reviews_trace {
        let crate::branch::ReviewTraceEntry::Item(item_id) = entry else { continue };
        let item: ReviewItem = store.get_object(item_id)?.ok_or(OpsError::MissingReviewItem(*item_id))?;
        for reviewed in &item.reviewed_buckets {
            let info = trie.get(store, reviewed)?.ok_or(OpsError::DanglingReviewedBucket(*reviewed))?;
            let next = attach_info(&info, InfoDelta::Review(item.bucket))?;
            trie = upsert(store, trie, *reviewed, &next)?;
        }
    }
    Ok(trie)
}

/// Trie of a submit, or the empty trie for the zero id.
pub fn trie_at(store: &Store, submit: &ContentId) -> Result<Trie, OpsError> {
    if submit.is_zero() {
        return Ok(Trie::empty());
    }
    Ok(load_submit(store, submit)?.trie())
}

pub fn bucket_set(store: &Store, head: &ContentId) -> Result<BTreeSet<ContentId>, OpsError> {
    Ok(trie_at(store, head)?.entry_map(store)?.into_keys().collect())
}

/// Builder for a submit and its package.
#[derive(Debug, Clone)]
pub struct Draft {
    pub parent: ContentId,
    pub message: String,
    pub trace: SubmitTrace,
    buckets: Vec<NewBucket>,
    info_updates: Vec<(ContentId, InfoDelta)>,
    objects: Vec<(RecordKind, Vec<u8>)>,
}

impl Draft {
    pub fn new(parent: ContentId, message: impl Into<String>) -> Self {
        Draft {
            parent,
            message: message.into(),
            trace: SubmitTrace::default(),
            buckets: Vec::new(),
            info_updates: Vec::new(),
            objects: Vec::new(),
        }
    }

    fn pending(&self) -> BTreeSet<ContentId> {
        self.buckets.iter().map(|b| b.id).collect()
    }

    pub fn add_atomic(
        &mut self,
        author: &KeyIdentity,
        schema: Schema,
        parent_bucket: ContentId,
        payload: &[u8],
        tick: u64,
    ) -> ContentId {
        let data = BucketData::Atomic(payload.to_vec());
        let refs = refs_of(&data);
        let creator = author.public_key().creator_root();
        let (bucket, id) = create_atomic_bucket(schema, creator, parent_bucket, payload, &refs, LogicalTimestamp::at(tick));
        self.buckets.push(NewBucket { id, bucket, data });
        id
    }

    pub fn add_molecular(
        &mut self,
        store: &Store,
        author: &KeyIdentity,
        schema: Schema,
        parent_bucket: ContentId,
        arrangement: Vec<ContentId>,
        tick: u64,
    ) -> Result<ContentId, OpsError> {
        let creator = author.public_key().creator_root();
        let (bucket, id) = create_molecular_bucket(
            store,
            &self.pending(),
            schema,
            creator,
            parent_bucket,
            &arrangement,
            LogicalTimestamp::at(tick),
        )?;
        self.buckets.push(NewBucket { id, bucket, data: BucketData::Molecular(arrangement) });
        Ok(id)
    }

    /// A text bucket inside a fresh arrangement bucket. Returns both ids.
    pub fn add_article(&mut self, store: &Store, author: &KeyIdentity, text: &str, tick: u64) -> Result<(ContentId, ContentId), OpsError> {
        let text_id = self.add_atomic(author, Schema::Text, ContentId::ZERO, text.as_bytes(), tick);
        let arr = self.add_molecular(store, author, Schema::Arrangement, ContentId::ZERO, vec![text_id], tick)?;
        Ok((text_id, arr))
    }

    pub fn attach(&mut self, bucket: ContentId, delta: InfoDelta) {
        self.info_updates.push((bucket, delta));
    }

    pub fn add_object<T: Canonical>(&mut self, kind: RecordKind, value: &T) -> ContentId {
        let bytes = canonical_encode(value);
        let id = content_id(&bytes);
        self.objects.push((kind, bytes));
        id
    }

    pub fn new_bucket_ids(&self) -> Vec<ContentId> {
        self.buckets.iter().map(|b| b.id).collect()
    }

    /// Fixes the trace, computes the trie on top of `base` and signs off the
    /// submit as `author` at `tick`.
    pub fn seal(mut self, store: &mut Store, base: &Trie, author: &KeyIdentity, tick: u64) -> Result<SubmitPackage, OpsError> {
        let pk = author.public_key();
        self.add_object(RecordKind::Creator, &pk);
        self.trace.new_buckets = self.new_bucket_ids();
        let mut pkg = SubmitPackage {
            submit: Submit {
                parent: self.parent,
                submit_message: self.message,
                trie_root: ContentId::ZERO,
                submit_trace: self.trace,
                timestamp: LogicalTimestamp::at(tick),
                creator_root: pk.creator_root(),
            },
            buckets: self.buckets,
            info_updates: self.info_updates,
            objects: self.objects,
        };
        let trie = apply_package(store, base, &pkg)?;
        pkg.submit.trie_root = trie.root;
        store.put_object(RecordKind::Submit, &pkg.submit)?;
        Ok(pkg)
    }
}

/// Builds a genesis branch. Only twigs and proper branches can be created
/// this way.
pub fn create_genesis_branch(
    store: &mut Store,
    author: &KeyIdentity,
    config: BranchConfig,
    token: Option<TokenAttestation>,
    draft: Draft,
    tick: u64,
) -> Result<(Branch, SubmitPackage), OpsError> {
    if config.branch_type == BranchType::Sprout {
        return Err(OpsError::InvalidType(BranchType::Sprout));
    }
    let draft = Draft { parent: ContentId::ZERO, ..draft };
    let pkg = draft.seal(store, &Trie::empty(), author, tick)?;
    let mut branch = Branch::new(ContentId::ZERO, LogicalTimestamp::at(tick), pkg.id(), config);
    branch.branch_token.extend(token);
    Ok((branch, pkg))
}

/// Builds a branch whose first submit is a child of `root`, which must lie
/// on the parent branch's history. `config` of `None` inherits the parent's.
pub fn create_rooted_branch(
    store: &mut Store,
    author: &KeyIdentity,
    parent: &Branch,
    root: ContentId,
    config: Option<BranchConfig>,
    draft: Draft,
    tick: u64,
) -> Result<(Branch, SubmitPackage), OpsError> {
    let config = config.unwrap_or_else(|| parent.config.clone());
    if config.branch_type == BranchType::Sprout {
        return Err(OpsError::InvalidType(BranchType::Sprout));
    }
    if !first_parent_ids(store, &parent.stable_head)?.contains(&root) {
        return Err(OpsError::InvalidRoot { root });
    }
    let base = trie_at(store, &root)?;
    let pkg = Draft { parent: root, ..draft }.seal(store, &base, author, tick)?;
    let branch = Branch::new(parent.branch_id, LogicalTimestamp::at(tick), pkg.id(), config);
    Ok((branch, pkg))
}

/// What a merge of `belt` at `belt_tip` into a core head brings along.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    pub core: BranchId,
    pub belt: BranchId,
    pub base_head: ContentId,
    pub belt_tip: ContentId,
    pub bucket_delta: BTreeSet<ContentId>,
    pub shared: BTreeSet<ContentId>,
    /// Conflicts that exist only once the merge is in.
    pub conflicts: BTreeSet<ConflictRecord>,
}

/// Placeholder id for the not yet sealed merge submit.
fn pending_merge_id() -> ContentId {
    content_id(b"lakat/pending-merge")
}

pub fn plan_merge(
    store: &Store,
    core: BranchId,
    base_head: ContentId,
    belt: BranchId,
    belt_tip: ContentId,
) -> Result<MergePlan, OpsError> {
    let core_set = bucket_set(store, &base_head)?;
    let belt_set = bucket_set(store, &belt_tip)?;
    let before_graph = inclusive_closure(store, &base_head)?;
    let before_ids: BTreeSet<ContentId> = before_graph.keys().copied().collect();
    let before = conflicts_among(core, &before_ids, &before_graph);

    let mut graph: BTreeMap<ContentId, Submit> = before_graph;
    graph.extend(inclusive_closure(store, &belt_tip)?);
    let placeholder = Submit {
        parent: base_head,
        submit_message: String::new(),
        trie_root: ContentId::ZERO,
        submit_trace: SubmitTrace { merged_branch: Some(belt), belt_tip: Some(belt_tip), ..Default::default() },
        timestamp: LogicalTimestamp::default(),
        creator_root: ContentId::ZERO,
    };
    graph.insert(pending_merge_id(), placeholder);
    let ids: BTreeSet<ContentId> = graph.keys().copied().collect();
    let after = conflicts_among(core, &ids, &graph);

    Ok(MergePlan {
        core,
        belt,
        base_head,
        belt_tip,
        bucket_delta: belt_set.difference(&core_set).copied().collect(),
        shared: belt_set.intersection(&core_set).copied().collect(),
        conflicts: after.difference(&before).copied().collect(),
    })
}

/// The core trie with the belt's buckets folded in: new buckets keep the
/// belt's info, shared ones get the append-union of both views, and core
/// buckets referenced by newcomers learn the incoming reference.
pub fn merge_trie(store: &mut Store, base: &Trie, belt: &Trie) -> Result<Trie, OpsError> {
    let core_entries = base.entry_map(store)?;
    let mut trie = base.clone();
    let mut added = Vec::new();
    for (id, value_hash) in belt.entries(store)? {
        match core_entries.get(&id) {
            Some(h) if *h == value_hash => {}
            Some(h) => {
                let ours: BucketInfo = store.require_object(h)?;
                let theirs: BucketInfo = store.require_object(&value_hash)?;
                let merged = ours.merged_with(&theirs);
                if merged != ours {
                    trie = upsert(store, trie, id, &merged)?;
                }
            }
            None => {
                let info: BucketInfo = store.require_object(&value_hash)?;
                trie = upsert(store, trie, id, &info)?;
                added.push((id, info));
            }
        }
    }
    for (id, info) in added {
        for target in info.bucket_refs_out.unwrap_or_default() {
            if let Some(t) = trie.get(store, &target)? {
                if !t.bucket_refs_in.contains(&id) {
                    let next = attach_info(&t, InfoDelta::RefIn(id))?;
                    trie = upsert(store, trie, target, &next)?;
                }
            }
        }
    }
    Ok(trie)
}

/// Seals a merge submit of `belt` at `belt_tip` on top of `base_head`.
#[allow(clippy::too_many_arguments)]
pub fn build_merge(
    store: &mut Store,
    author: &KeyIdentity,
    core: BranchId,
    base_head: ContentId,
    belt: BranchId,
    belt_tip: ContentId,
    mut draft: Draft,
    config_change: Option<&BranchConfig>,
    tick: u64,
) -> Result<(MergePlan, SubmitPackage), OpsError> {
    let plan = plan_merge(store, core, base_head, belt, belt_tip)?;
    let base = merge_trie(store, &trie_at(store, &base_head)?, &trie_at(store, &belt_tip)?)?;
    draft.parent = base_head;
    draft.trace.merged_branch = Some(belt);
    draft.trace.belt_tip = Some(belt_tip);
    if let Some(cfg) = config_change {
        draft.trace.config_change = Some(draft.add_object(RecordKind::Config, cfg));
    }
    let pkg = draft.seal(store, &base, author, tick)?;
    Ok((plan, pkg))
}

/// Checks a requested config change against the current config.
pub fn check_config_change(current: &BranchConfig, next: &BranchConfig) -> Result<(), OpsError> {
    if next.branch_type != current.branch_type {
        return Err(OpsError::InvalidType(next.branch_type));
    }
    Ok(())
}

//! Submits, branch headers, history walking, conflicts and contributors.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bucket::{check_context_membership, NewBucket, TokenAttestation};
use crate::codec::{id_of, Canonical, CodecError, ContentId, LogicalTimestamp, Reader, Writer};
use crate::identity::{signed_message, verify_signature, KeyIdentity, ProofKind, PublicKey, Signature};
use crate::por::ReviewCommitment;
use crate::store::{Store, StoreError};
use crate::trie::Trie;

pub type BranchId = ContentId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BranchError {
    #[error("submit {0} is missing")]
    MissingSubmit(ContentId),
    #[error("branch {0} is unknown")]
    MissingBranch(BranchId),
    #[error("creator record {0} is missing")]
    MissingCreator(ContentId),
    #[error("no root submit of branch {0} lies in its parent's history")]
    RootNotFound(BranchId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Pull-request pointers kept in a submit trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrRef {
    pub review_container: ContentId,
    pub target_branch: BranchId,
    pub requesting_branch: BranchId,
}

impl Canonical for PrRef {
    const TAG: u8 = 0x15;
    fn encode_fields(&self, w: &mut Writer) {
        w.id(&self.review_container);
        w.id(&self.target_branch);
        w.id(&self.requesting_branch);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(PrRef { review_container: r.id()?, target_branch: r.id()?, requesting_branch: r.id()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewTraceEntry {
    Commitment(ContentId),
    Item(ContentId),
}

impl Canonical for ReviewTraceEntry {
    const TAG: u8 = 0x16;
    fn encode_fields(&self, w: &mut Writer) {
        let (kind, id) = match self {
            ReviewTraceEntry::Commitment(id) => (0, id),
            ReviewTraceEntry::Item(id) => (1, id),
        };
        w.u64(kind);
        w.id(id);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u64()? {
            0 => Ok(ReviewTraceEntry::Commitment(r.id()?)),
            1 => Ok(ReviewTraceEntry::Item(r.id()?)),
            _ => Err(CodecError::Invalid("unknown review trace entry")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubmitTrace {
    pub pull_requests: Vec<PrRef>,
    pub reviews_trace: Vec<ReviewTraceEntry>,
    pub merged_branch: Option<BranchId>,
    pub belt_tip: Option<ContentId>,
    pub new_buckets: Vec<ContentId>,
    /// Id of a replacement `BranchConfig`, only honoured on merges.
    pub config_change: Option<ContentId>,
}

impl Canonical for SubmitTrace {
    const TAG: u8 = 0x08;
    fn encode_fields(&self, w: &mut Writer) {
        w.list(&self.pull_requests, |w, p| w.nested(p));
        w.list(&self.reviews_trace, |w, e| w.nested(e));
        w.option(self.merged_branch.as_ref(), |w, id| w.id(id));
        w.option(self.belt_tip.as_ref(), |w, id| w.id(id));
        w.list(&self.new_buckets, |w, id| w.id(id));
        w.option(self.config_change.as_ref(), |w, id| w.id(id));
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SubmitTrace {
            pull_requests: r.list(|r| r.nested())?,
            reviews_trace: r.list(|r| r.nested())?,
            merged_branch: r.option(|r| r.id())?,
            belt_tip: r.option(|r| r.id())?,
            new_buckets: r.list(|r| r.id())?,
            config_change: r.option(|r| r.id())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submit {
    pub parent: ContentId,
    pub submit_message: String,
    pub trie_root: ContentId,
    pub submit_trace: SubmitTrace,
    pub timestamp: LogicalTimestamp,
    pub creator_root: ContentId,
}

impl Submit {
    pub fn id(&self) -> ContentId {
        id_of(self)
    }

    pub fn is_singularity(&self) -> bool {
        self.parent.is_zero()
    }

    pub fn is_merge(&self) -> bool {
        self.submit_trace.merged_branch.is_some()
    }

    /// Parent plus belt tip: the edges followed for inclusion.
    pub fn extended_parents(&self) -> Vec<ContentId> {
        let mut out = Vec::with_capacity(2);
        if !self.parent.is_zero() {
            out.push(self.parent);
        }
        if let Some(tip) = self.submit_trace.belt_tip {
            if !tip.is_zero() && tip != self.parent {
                out.push(tip);
            }
        }
        out
    }

    pub fn trie(&self) -> Trie {
        Trie::at(self.trie_root)
    }
}

impl Canonical for Submit {
    const TAG: u8 = 0x07;
    fn encode_fields(&self, w: &mut Writer) {
        w.id(&self.parent);
        w.str(&self.submit_message);
        w.id(&self.trie_root);
        w.nested(&self.submit_trace);
        w.nested(&self.timestamp);
        w.id(&self.creator_root);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Submit {
            parent: r.id()?,
            submit_message: r.str()?,
            trie_root: r.id()?,
            submit_trace: r.nested()?,
            timestamp: r.nested()?,
            creator_root: r.id()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchType {
    Proper,
    Twig,
    Sprout,
}

impl BranchType {
    fn code(self) -> u64 {
        match self {
            BranchType::Proper => 0,
            BranchType::Twig => 1,
            BranchType::Sprout => 2,
        }
    }

    fn from_code(code: u64) -> Result<Self, CodecError> {
        Ok(match code {
            0 => BranchType::Proper,
            1 => BranchType::Twig,
            2 => BranchType::Sprout,
            _ => return Err(CodecError::Invalid("unknown branch type")),
        })
    }
}

/// A fraction in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };
    pub const HALF: Ratio = Ratio { num: 1, den: 2 };

    pub fn is_valid(&self) -> bool {
        self.den > 0 && self.num > 0 && self.num <= self.den
    }

    /// True iff `part / whole >= self`.
    pub fn reached_by(&self, part: u64, whole: u64) -> bool {
        u128::from(part) * u128::from(self.den) >= u128::from(self.num) * u128::from(whole)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    NoRejections,
    Fraction(Ratio),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub branch_type: BranchType,
    pub accept_conflicts: bool,
    pub accepted_proofs: BTreeSet<ProofKind>,
    pub min_reviewers: u64,
    pub acceptance_rule: AcceptanceRule,
    pub min_review_rounds: u64,
    pub twig_merge_fraction: Ratio,
    pub lignification_time: u64,
    pub engagement_time: u64,
    pub broadcasting_buffer: u64,
    pub stale_after_merge: bool,
}

impl BranchConfig {
    pub fn proper() -> Self {
        BranchConfig {
            branch_type: BranchType::Proper,
            accept_conflicts: true,
            accepted_proofs: [
                ProofKind::Content,
                ProofKind::Review,
                ProofKind::Token,
                ProofKind::Storage,
                ProofKind::Time,
            ]
            .into(),
            min_reviewers: 1,
            acceptance_rule: AcceptanceRule::NoRejections,
            min_review_rounds: 1,
            twig_merge_fraction: Ratio::HALF,
            lignification_time: 50,
            engagement_time: 60,
            broadcasting_buffer: 1,
            stale_after_merge: false,
        }
    }

    pub fn twig() -> Self {
        BranchConfig { branch_type: BranchType::Twig, stale_after_merge: true, ..Self::proper() }
    }

    pub fn with_type(&self, branch_type: BranchType) -> Self {
        BranchConfig { branch_type, ..self.clone() }
    }

    pub fn id(&self) -> ContentId {
        id_of(self)
    }
}

fn write_ratio(w: &mut Writer, r: &Ratio) {
    w.u64(r.num);
    w.u64(r.den);
}

fn read_ratio(r: &mut Reader<'_>) -> Result<Ratio, CodecError> {
    Ok(Ratio { num: r.u64()?, den: r.u64()? })
}

impl Canonical for BranchConfig {
    const TAG: u8 = 0x0b;
    fn encode_fields(&self, w: &mut Writer) {
        w.u64(self.branch_type.code());
        w.bool(self.accept_conflicts);
        let kinds: Vec<ProofKind> = self.accepted_proofs.iter().copied().collect();
        w.list(&kinds, |w, k| w.u64(k.code().into()));
        w.u64(self.min_reviewers);
        match &self.acceptance_rule {
            AcceptanceRule::NoRejections => w.option::<Ratio>(None, write_ratio),
            AcceptanceRule::Fraction(f) => w.option(Some(f), write_ratio),
        }
        w.u64(self.min_review_rounds);
        write_ratio(w, &self.twig_merge_fraction);
        w.u64(self.lignification_time);
        w.u64(self.engagement_time);
        w.u64(self.broadcasting_buffer);
        w.bool(self.stale_after_merge);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(BranchConfig {
            branch_type: BranchType::from_code(r.u64()?)?,
            accept_conflicts: r.bool()?,
            accepted_proofs: r.list(|r| ProofKind::from_code(r.u8()?))?.into_iter().collect(),
            min_reviewers: r.u64()?,
            acceptance_rule: match r.option(read_ratio)? {
                None => AcceptanceRule::NoRejections,
                Some(f) => AcceptanceRule::Fraction(f),
            },
            min_review_rounds: r.u64()?,
            twig_merge_fraction: read_ratio(r)?,
            lignification_time: r.u64()?,
            engagement_time: r.u64()?,
            broadcasting_buffer: r.u64()?,
            stale_after_merge: r.bool()?,
        })
    }
}

/// Signed objection to the default successor, registered on a rival sprout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Veto {
    pub sprout: BranchId,
    pub contributor: PublicKey,
    pub tick: u64,
    pub signature: Signature,
}

/// Signed vote for one of the sprouts of a contested selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub sprout: BranchId,
    pub voter: PublicKey,
    pub tick: u64,
    pub signature: Signature,
}

struct Ballot<'a> {
    domain: &'a str,
    branch: BranchId,
    sprout: BranchId,
    signer: PublicKey,
    tick: u64,
}

impl Canonical for Ballot<'_> {
    const TAG: u8 = 0x12;
    fn encode_fields(&self, w: &mut Writer) {
        w.str(self.domain);
        w.id(&self.branch);
        w.id(&self.sprout);
        w.bytes(&self.signer.0);
        w.u64(self.tick);
    }
    fn decode_fields(_: &mut Reader<'_>) -> Result<Self, CodecError> {
        Err(CodecError::Invalid("ballots are never decoded"))
    }
}

fn ballot_message(domain: &str, branch: BranchId, sprout: BranchId, signer: PublicKey, tick: u64) -> Vec<u8> {
    signed_message("lakat/ballot", &Ballot { domain, branch, sprout, signer, tick })
}

impl Veto {
    /// `branch` is the branch whose selection holds `sprout`.
    pub fn new(identity: &KeyIdentity, branch: BranchId, sprout: BranchId, tick: u64) -> Self {
        let contributor = identity.public_key();
        let signature = identity.sign(&ballot_message("veto", branch, sprout, contributor, tick));
        Veto { sprout, contributor, tick, signature }
    }

    pub fn verify(&self, branch: BranchId) -> bool {
        verify_signature(
            &self.contributor.0,
            &ballot_message("veto", branch, self.sprout, self.contributor, self.tick),
            &self.signature.0,
        )
    }
}

impl Vote {
    pub fn new(identity: &KeyIdentity, branch: BranchId, sprout: BranchId, tick: u64) -> Self {
        let voter = identity.public_key();
        let signature = identity.sign(&ballot_message("vote", branch, sprout, voter, tick));
        Vote { sprout, voter, tick, signature }
    }

    pub fn verify(&self, branch: BranchId) -> bool {
        verify_signature(
            &self.voter.0,
            &ballot_message("vote", branch, self.sprout, self.voter, self.tick),
            &self.signature.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub sprout: BranchId,
    pub vetoes: Vec<Veto>,
    pub votes: Vec<Vote>,
}

impl SelectionEntry {
    pub fn new(sprout: BranchId) -> Self {
        SelectionEntry { sprout, vetoes: Vec::new(), votes: Vec::new() }
    }
}

/// Preimage of a branch id: the immutable entries and the initial head.
struct BranchSeed {
    parent_branch: BranchId,
    timestamp: LogicalTimestamp,
    initial_head: ContentId,
}

impl Canonical for BranchSeed {
    const TAG: u8 = 0x0c;
    fn encode_fields(&self, w: &mut Writer) {
        w.id(&self.parent_branch);
        w.nested(&self.timestamp);
        w.id(&self.initial_head);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(BranchSeed { parent_branch: r.id()?, timestamp: r.nested()?, initial_head: r.id()? })
    }
}

pub fn compute_branch_id(parent_branch: BranchId, timestamp: &LogicalTimestamp, initial_head: ContentId) -> BranchId {
    id_of(&BranchSeed { parent_branch, timestamp: timestamp.clone(), initial_head })
}

/// Branch header. `branch_id`, `timestamp`, `initial_head` and
/// `sprout_origin` never change; `parent_branch` is filled once when a
/// sprout converts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub branch_id: BranchId,
    pub parent_branch: BranchId,
    pub timestamp: LogicalTimestamp,
    pub initial_head: ContentId,
    pub stable_head: ContentId,
    pub sprouts: BTreeSet<BranchId>,
    pub sprout_selection: Vec<SelectionEntry>,
    pub branch_token: Vec<TokenAttestation>,
    pub config: BranchConfig,
    pub stale: bool,
    pub sprout_origin: bool,
}

impl Branch {
    pub fn new(parent_branch: BranchId, timestamp: LogicalTimestamp, initial_head: ContentId, config: BranchConfig) -> Self {
        let sprout_origin = config.branch_type == BranchType::Sprout;
        Branch {
            branch_id: compute_branch_id(parent_branch, &timestamp, initial_head),
            parent_branch,
            timestamp,
            initial_head,
            stable_head: initial_head,
            sprouts: BTreeSet::new(),
            sprout_selection: Vec::new(),
            branch_token: Vec::new(),
            config,
            stale: false,
            sprout_origin,
        }
    }

    pub fn branch_type(&self) -> BranchType {
        self.config.branch_type
    }

    pub fn is_sprout(&self) -> bool {
        self.config.branch_type == BranchType::Sprout
    }

    pub fn expected_id(&self) -> BranchId {
        let parent = if self.sprout_origin { ContentId::ZERO } else { self.parent_branch };
        compute_branch_id(parent, &self.timestamp, self.initial_head)
    }

    pub fn selection_entry(&self, sprout: &BranchId) -> Option<&SelectionEntry> {
        self.sprout_selection.iter().find(|e| e.sprout == *sprout)
    }

    pub fn selection_entry_mut(&mut self, sprout: &BranchId) -> Option<&mut SelectionEntry> {
        self.sprout_selection.iter_mut().find(|e| e.sprout == *sprout)
    }
}

/// Read access to branch headers by id.
pub trait BranchLookup {
    fn branch(&self, id: &BranchId) -> Option<&Branch>;
}

impl BranchLookup for im::OrdMap<BranchId, Branch> {
    fn branch(&self, id: &BranchId) -> Option<&Branch> {
        self.get(id)
    }
}

impl BranchLookup for BTreeMap<BranchId, Branch> {
    fn branch(&self, id: &BranchId) -> Option<&Branch> {
        self.get(id)
    }
}

pub fn load_submit(store: &Store, id: &ContentId) -> Result<Submit, BranchError> {
    store.get_object(id)?.ok_or(BranchError::MissingSubmit(*id))
}

pub fn creator_key(store: &Store, creator_root: &ContentId) -> Result<PublicKey, BranchError> {
    store.get_object(creator_root)?.ok_or(BranchError::MissingCreator(*creator_root))
}

/// First-parent chain from `head` back to the singularity, child first.
pub fn first_parent_chain(store: &Store, head: &ContentId) -> Result<Vec<(ContentId, Submit)>, BranchError> {
    let mut out = Vec::new();
    let mut cur = *head;
    while !cur.is_zero() {
        let s = load_submit(store, &cur)?;
        let next = s.parent;
        out.push((cur, s));
        cur = next;
    }
    Ok(out)
}

pub fn first_parent_ids(store: &Store, head: &ContentId) -> Result<BTreeSet<ContentId>, BranchError> {
    Ok(first_parent_chain(store, head)?.into_iter().map(|(id, _)| id).collect())
}

/// Every submit reachable from `head` over parent and belt-tip edges,
/// including `head` itself.
pub fn inclusive_closure(store: &Store, head: &ContentId) -> Result<BTreeMap<ContentId, Submit>, BranchError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![*head];
    while let Some(id) = stack.pop() {
        if id.is_zero() || out.contains_key(&id) {
            continue;
        }
        let s = load_submit(store, &id)?;
        stack.extend(s.extended_parents());
        out.insert(id, s);
    }
    Ok(out)
}

/// The root submit of a branch: the last submit of its history that also
/// lies in the parent branch's history. `None` for seedlings.
pub fn branch_root(store: &Store, lookup: &dyn BranchLookup, branch: &Branch) -> Result<Option<ContentId>, BranchError> {
    branch_root_at(store, lookup, branch, &branch.stable_head)
}

pub fn branch_root_at(
    store: &Store,
    lookup: &dyn BranchLookup,
    branch: &Branch,
    head: &ContentId,
) -> Result<Option<ContentId>, BranchError> {
    if branch.parent_branch.is_zero() {
        if branch.is_sprout() {
            return Ok(Some(load_submit(store, head)?.parent).filter(|p| !p.is_zero()));
        }
        return Ok(None);
    }
    let parent = lookup.branch(&branch.parent_branch).ok_or(BranchError::MissingBranch(branch.parent_branch))?;
    let parent_history = first_parent_ids(store, &parent.stable_head)?;
    for (id, _) in first_parent_chain(store, head)? {
        if parent_history.contains(&id) {
            return Ok(Some(id));
        }
    }
    Err(BranchError::RootNotFound(branch.branch_id))
}

/// Submits of the branch itself, child first: from `head` down to (not
/// including) the root, or to the singularity for a seedling.
pub fn own_range(
    store: &Store,
    lookup: &dyn BranchLookup,
    branch: &Branch,
    head: &ContentId,
) -> Result<Vec<(ContentId, Submit)>, BranchError> {
    let root = branch_root_at(store, lookup, branch, head)?;
    let mut out = Vec::new();
    for (id, s) in first_parent_chain(store, head)? {
        if Some(id) == root {
            break;
        }
        out.push((id, s));
    }
    Ok(out)
}

/// Submit history from the stable head. Without `follow_parent` it stops
/// at the branch root; with it, the walk continues to the singularity.
pub fn submit_history(
    store: &Store,
    lookup: &dyn BranchLookup,
    branch: &Branch,
    follow_parent: bool,
) -> Result<Vec<(ContentId, Submit)>, BranchError> {
    if follow_parent {
        first_parent_chain(store, &branch.stable_head)
    } else {
        own_range(store, lookup, branch, &branch.stable_head)
    }
}

/// A submit conflict (π, s₁, s₂) with respect to a branch, with s₁ < s₂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub branch: BranchId,
    pub parent_submit: ContentId,
    pub left: ContentId,
    pub right: ContentId,
}

/// Minimal submit-graph view used by conflict detection.
pub trait SubmitGraph {
    fn parent(&self, id: &ContentId) -> Option<ContentId>;
    fn extended_parents(&self, id: &ContentId) -> Vec<ContentId>;
}

impl SubmitGraph for BTreeMap<ContentId, Submit> {
    fn parent(&self, id: &ContentId) -> Option<ContentId> {
        self.get(id).map(|s| s.parent).filter(|p| !p.is_zero())
    }
    fn extended_parents(&self, id: &ContentId) -> Vec<ContentId> {
        self.get(id).map(Submit::extended_parents).unwrap_or_default()
    }
}

fn ext_ancestors<G: SubmitGraph>(graph: &G, start: &ContentId) -> BTreeSet<ContentId> {
    let mut seen = BTreeSet::new();
    let mut stack = graph.extended_parents(start);
    while let Some(id) = stack.pop() {
        if seen.insert(id) {
            stack.extend(graph.extended_parents(&id));
        }
    }
    seen
}

/// Conflicts among the `included` submits: pairs of children of a common
/// included parent where neither child reaches the other over parent and
/// belt-tip edges.
pub fn conflicts_among<G: SubmitGraph>(branch: BranchId, included: &BTreeSet<ContentId>, graph: &G) -> BTreeSet<ConflictRecord> {
    let mut children: BTreeMap<ContentId, Vec<ContentId>> = BTreeMap::new();
    for id in included {
        if let Some(p) = graph.parent(id) {
            if included.contains(&p) {
                children.entry(p).or_default().push(*id);
            }
        }
    }
    let mut ancestors: HashMap<ContentId, BTreeSet<ContentId>> = HashMap::new();
    let mut out = BTreeSet::new();
    for (parent, kids) in children {
        for (i, a) in kids.iter().enumerate() {
            for b in &kids[i + 1..] {
                let a_anc = ancestors.entry(*a).or_insert_with(|| ext_ancestors(graph, a)).contains(b);
                let b_anc = ancestors.entry(*b).or_insert_with(|| ext_ancestors(graph, b)).contains(a);
                if !a_anc && !b_anc {
                    let (left, right) = if a < b { (*a, *b) } else { (*b, *a) };
                    out.insert(ConflictRecord { branch, parent_submit: parent, left, right });
                }
            }
        }
    }
    out
}

pub fn detect_conflicts_at(store: &Store, branch: BranchId, head: &ContentId) -> Result<BTreeSet<ConflictRecord>, BranchError> {
    let closure = inclusive_closure(store, head)?;
    let included: BTreeSet<ContentId> = closure.keys().copied().collect();
    Ok(conflicts_among(branch, &included, &closure))
}

pub fn detect_conflicts(store: &Store, branch: &Branch) -> Result<BTreeSet<ConflictRecord>, BranchError> {
    detect_conflicts_at(store, branch.branch_id, &branch.stable_head)
}

/// Contributors by kind, each with the evidence ids that support them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContributorSet {
    pub by_kind: BTreeMap<ProofKind, BTreeMap<PublicKey, BTreeSet<ContentId>>>,
}

impl ContributorSet {
    pub fn add(&mut self, kind: ProofKind, who: PublicKey, evidence: ContentId) {
        self.by_kind.entry(kind).or_default().entry(who).or_default().insert(evidence);
    }

    pub fn contains(&self, kind: ProofKind, who: &PublicKey) -> bool {
        self.by_kind.get(&kind).is_some_and(|m| m.contains_key(who))
    }

    pub fn has_evidence(&self, kind: ProofKind, who: &PublicKey, evidence: &ContentId) -> bool {
        self.by_kind.get(&kind).and_then(|m| m.get(who)).is_some_and(|e| e.contains(evidence))
    }

    pub fn members(&self, kind: ProofKind) -> BTreeSet<PublicKey> {
        self.by_kind.get(&kind).map(|m| m.keys().copied().collect()).unwrap_or_default()
    }

    pub fn all_members(&self) -> BTreeSet<PublicKey> {
        self.by_kind.values().flat_map(|m| m.keys().copied()).collect()
    }

    pub fn is_contributor(&self, who: &PublicKey) -> bool {
        self.by_kind.values().any(|m| m.contains_key(who))
    }

    pub fn union_with(&mut self, other: &ContributorSet) {
        for (kind, members) in &other.by_kind {
            for (who, evidence) in members {
                for e in evidence {
                    self.add(*kind, *who, *e);
                }
            }
        }
    }

    /// Member sets only, without evidence.
    pub fn membership(&self) -> BTreeMap<ProofKind, BTreeSet<PublicKey>> {
        self.by_kind.iter().map(|(k, m)| (*k, m.keys().copied().collect())).collect()
    }
}

/// Union per kind after a merge preceded by a pull request; the core set
/// is kept as is otherwise.
pub fn merge_contributor_union(core: &ContributorSet, belt: &ContributorSet, had_pull_request: bool) -> ContributorSet {
    let mut out = core.clone();
    if had_pull_request {
        out.union_with(belt);
    }
    out
}

/// Derives contributor sets from branch data. Results are memoised per
/// (branch, head, parent head) since the root depends on the parent.
pub struct ContributorScanner<'a> {
    store: &'a Store,
    lookup: &'a dyn BranchLookup,
    cache: ScanCache,
}

pub type ScanCache = HashMap<(BranchId, ContentId, ContentId), ContributorSet>;

impl<'a> ContributorScanner<'a> {
    pub fn new(store: &'a Store, lookup: &'a dyn BranchLookup) -> Self {
        Self::with_cache(store, lookup, ScanCache::new())
    }

    /// Reuses results from an earlier scanner over the same store.
    pub fn with_cache(store: &'a Store, lookup: &'a dyn BranchLookup, cache: ScanCache) -> Self {
        ContributorScanner { store, lookup, cache }
    }

    pub fn into_cache(self) -> ScanCache {
        self.cache
    }

    pub fn current(&mut self, branch_id: &BranchId) -> Result<ContributorSet, BranchError> {
        let branch = self.lookup.branch(branch_id).ok_or(BranchError::MissingBranch(*branch_id))?;
        self.scan(branch, &branch.stable_head.clone())
    }

    pub fn scan(&mut self, branch: &Branch, head: &ContentId) -> Result<ContributorSet, BranchError> {
        let parent_head = self
            .lookup
            .branch(&branch.parent_branch)
            .map(|p| p.stable_head)
            .unwrap_or(ContentId::ZERO);
        let key = (branch.branch_id, *head, parent_head);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let mut set = ContributorSet::default();
        let root = branch_root_at(self.store, self.lookup, branch, head)?;
        let range = own_range(self.store, self.lookup, branch, head)?;
        for (id, submit) in &range {
            let creator = creator_key(self.store, &submit.creator_root)?;
            set.add(ProofKind::Content, creator, *id);
            for entry in &submit.submit_trace.reviews_trace {
                if let ReviewTraceEntry::Commitment(cid) = entry {
                    if let Some(c) = self.store.get_object::<ReviewCommitment>(cid)? {
                        set.add(ProofKind::Review, c.proof.contributor, *cid);
                    }
                }
            }
            if let (Some(belt_id), Some(tip)) = (submit.submit_trace.merged_branch, submit.submit_trace.belt_tip) {
                if let Some(belt) = self.lookup.branch(&belt_id) {
                    if self.range_has_pull_request(belt, &tip, &belt_id, 0)? {
                        let belt_set = self.scan(belt, &tip)?;
                        set = merge_contributor_union(&set, &belt_set, true);
                    }
                }
            }
        }
        if head != &ContentId::ZERO {
            self.scan_attestations(&mut set, root, head)?;
        }
        for token in &branch.branch_token {
            if token.verify() {
                set.add(ProofKind::Token, token.signer, token.id());
            }
        }
        self.cache.insert(key, set.clone());
        Ok(set)
    }

    /// Token and storage attestations added to bucket info between root and head.
    fn scan_attestations(&self, set: &mut ContributorSet, root: Option<ContentId>, head: &ContentId) -> Result<(), BranchError> {
        let head_trie = load_submit(self.store, head)?.trie();
        let root_trie = match root {
            Some(r) => load_submit(self.store, &r)?.trie(),
            None => Trie::empty(),
        };
        let before = root_trie.entry_map(self.store).map_err(trie_err)?;
        for (bucket, value_hash) in head_trie.entries(self.store).map_err(trie_err)? {
            let old_hash = before.get(&bucket);
            if old_hash == Some(&value_hash) {
                continue;
            }
            let info: crate::bucket::BucketInfo = self.store.require_object(&value_hash)?;
            let old: crate::bucket::BucketInfo = match old_hash {
                Some(h) => self.store.require_object(h)?,
                None => Default::default(),
            };
            for t in info.tokens.iter().filter(|t| !old.tokens.contains(t)) {
                set.add(ProofKind::Token, t.signer, t.id());
            }
            for s in info.storage_proofs.iter().filter(|s| !old.storage_proofs.contains(s)) {
                set.add(ProofKind::Storage, s.storer, s.id());
            }
        }
        Ok(())
    }

    /// Whether a pull request naming `requesting` appears in the belt's own
    /// range or, through merges, in the ranges of branches merged into it.
    fn range_has_pull_request(&self, belt: &Branch, tip: &ContentId, requesting: &BranchId, depth: usize) -> Result<bool, BranchError> {
        if depth > 32 {
            return Ok(false);
        }
        for (_, s) in own_range(self.store, self.lookup, belt, tip)? {
            if s.submit_trace.pull_requests.iter().any(|p| p.requesting_branch == *requesting) {
                return Ok(true);
            }
            if let (Some(inner), Some(inner_tip)) = (s.submit_trace.merged_branch, s.submit_trace.belt_tip) {
                if let Some(b) = self.lookup.branch(&inner) {
                    if self.range_has_pull_request(b, &inner_tip, requesting, depth + 1)? {
                        return Ok(true);
                    }
                }
            }
        }
        Ok(false)
    }
}

fn trie_err(e: crate::trie::TrieError) -> BranchError {
    match e {
        crate::trie::TrieError::Store(s) => BranchError::Store(s),
        crate::trie::TrieError::Codec(c) => BranchError::Codec(c),
        crate::trie::TrieError::MissingNode(id) | crate::trie::TrieError::MissingValue(id) => {
            BranchError::Store(StoreError::Missing(id))
        }
        crate::trie::TrieError::KeyCollision { existing, .. } => BranchError::Store(StoreError::Missing(existing)),
    }
}

/// Contributors that back their membership with a valid proof whose
/// evidence lies within the branch's root-to-head range.
pub fn derive_contributors(
    scanner: &mut ContributorScanner<'_>,
    branch: &Branch,
    proofs: &[crate::identity::ContributionProof],
) -> Result<ContributorSet, BranchError> {
    let scanned = scanner.scan(branch, &branch.stable_head)?;
    let mut out = ContributorSet::default();
    for p in proofs {
        if p.branch == branch.branch_id
            && branch.config.accepted_proofs.contains(&p.kind)
            && p.verify()
            && scanned.has_evidence(p.kind, &p.contributor, &p.evidence)
        {
            out.add(p.kind, p.contributor, p.evidence);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum BranchVerdict {
    Ok,
    BranchIdMismatch { expected: BranchId },
    MissingObject { id: ContentId },
    IdMismatch { id: ContentId },
    TimestampRegression { submit: ContentId },
    ContextMembership { submit: ContentId },
    ConflictPolicy { conflicts: usize },
}

impl BranchVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, BranchVerdict::Ok)
    }

    pub fn code(&self) -> &'static str {
        match self {
            BranchVerdict::Ok => "ok",
            BranchVerdict::BranchIdMismatch { .. } => "branch-id-mismatch",
            BranchVerdict::MissingObject { .. } => "missing-object",
            BranchVerdict::IdMismatch { .. } => "id-mismatch",
            BranchVerdict::TimestampRegression { .. } => "timestamp-regression",
            BranchVerdict::ContextMembership { .. } => "context-membership",
            BranchVerdict::ConflictPolicy { .. } => "conflict-policy",
        }
    }
}

/// Re-checks the branch id, every included submit's integrity, timestamp
/// monotonicity, context membership and the conflict policy.
pub fn verify_branch(store: &Store, branch: &Branch) -> BranchVerdict {
    let expected = branch.expected_id();
    if expected != branch.branch_id {
        return BranchVerdict::BranchIdMismatch { expected };
    }
    let mut stack = vec![branch.stable_head];
    let mut seen: BTreeMap<ContentId, Submit> = BTreeMap::new();
    while let Some(id) = stack.pop() {
        if id.is_zero() || seen.contains_key(&id) {
            continue;
        }
        let submit: Submit = match store.get_object(&id) {
            Ok(Some(s)) => s,
            Ok(None) => return BranchVerdict::MissingObject { id },
            Err(StoreError::IdMismatch(bad)) => return BranchVerdict::IdMismatch { id: bad },
            Err(_) => return BranchVerdict::IdMismatch { id },
        };
        stack.extend(submit.extended_parents());
        seen.insert(id, submit);
    }
    for (id, submit) in &seen {
        for p in submit.extended_parents() {
            if let Some(ps) = seen.get(&p) {
                if ps.timestamp.tick > submit.timestamp.tick {
                    return BranchVerdict::TimestampRegression { submit: *id };
                }
            }
        }
        let mut buckets = Vec::new();
        for bid in &submit.submit_trace.new_buckets {
            let bucket = match store.get_bucket(bid) {
                Ok(Some(b)) => b,
                Ok(None) => return BranchVerdict::MissingObject { id: *bid },
                Err(_) => return BranchVerdict::IdMismatch { id: *bid },
            };
            let data = match store.get_bucket_data(&bucket) {
                Ok(Some(d)) => d,
                Ok(None) => return BranchVerdict::MissingObject { id: bucket.data_root },
                Err(_) => return BranchVerdict::IdMismatch { id: bucket.data_root },
            };
            buckets.push(NewBucket { id: *bid, bucket, data });
        }
        let ids: BTreeSet<ContentId> = submit.submit_trace.new_buckets.iter().copied().collect();
        if !check_context_membership(&ids, &buckets, store) {
            return BranchVerdict::ContextMembership { submit: *id };
        }
    }
    if !branch.config.accept_conflicts {
        let included: BTreeSet<ContentId> = seen.keys().copied().collect();
        let conflicts = conflicts_among(branch.branch_id, &included, &seen);
        if !conflicts.is_empty() {
            return BranchVerdict::ConflictPolicy { conflicts: conflicts.len() };
        }
    }
    BranchVerdict::Ok
}

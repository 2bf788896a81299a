//! Branch ledger: validates transactions and applies them to branch state.
//!
//! Application is atomic. Each transaction runs against a copy of the
//! state, which replaces the live state only on success. The store is
//! append-only and content addressed, so objects written by a rejected
//! transaction are harmless.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branch::{
    creator_key, first_parent_ids, inclusive_closure, load_submit, verify_branch, Branch, BranchConfig, BranchError,
    BranchId, BranchType, ContributorScanner, ScanCache, ContributorSet, ReviewTraceEntry, Veto, Vote,
};
use crate::bucket::{Schema, TokenAttestation};
use crate::codec::{content_id, ContentId, LogicalTimestamp, Writer};
use crate::identity::{ProofKind, PublicKey};
use crate::lignification::{
    cast_vote, core_of, default_successor, finalize_ousted_sprout, lignify, register_veto, resolve, wrap_merge_in_sprout,
    Action, Branches, Decision,
    LignificationError, Params, SproutStatus, Wraps,
};
use crate::ops::{apply_package, check_config_change, merge_trie, plan_merge, trie_at, OpsError, SubmitPackage};
use crate::por::{twig_merge_approved, Approval, PorError, PrStatus, PullRequest, ReviewCommitment, ReviewItem, ReviewState};
use crate::store::{RecordKind, Store, StoreError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Lignification(#[from] LignificationError),
    #[error(transparent)]
    Por(#[from] PorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("branch {0} is unknown")]
    UnknownBranch(BranchId),
    #[error("branch {0} exists already")]
    DuplicateBranch(BranchId),
    #[error("branch {0} is stale")]
    Stale(BranchId),
    #[error("branch type {0:?} does not accept this transaction")]
    WrongType(BranchType),
    #[error("author is not an eligible contributor")]
    NotContributor,
    #[error("submit parent {found} is not {expected}")]
    ParentMismatch { expected: ContentId, found: ContentId },
    #[error("submit creator does not match the author")]
    CreatorMismatch,
    #[error("submit timestamp regresses or lies in the future")]
    BadTimestamp,
    #[error("submit trie root does not match its contents")]
    TrieMismatch,
    #[error("trace entry not allowed in this transaction")]
    UnexpectedTrace,
    #[error("config changes need a merge")]
    ConfigChangeOutsideMerge,
    #[error("object {0} is missing")]
    MissingObject(ContentId),
    #[error("invalid pull request")]
    InvalidPullRequest,
    #[error("no pull request from {0} is ready to merge")]
    NoReadyPullRequest(BranchId),
    #[error("review entry names the wrong branch or pull request")]
    ReviewMismatch,
    #[error("belt tip is not in the belt history")]
    BeltTipNotInHistory,
    #[error("belt fails verification: {0}")]
    BeltInvalid(String),
    #[error("merge introduces {0} conflicts")]
    Conflicts(usize),
    #[error("invalid approval")]
    BadApproval,
    #[error("submit is not a merge")]
    NotAMerge,
}

#[derive(Debug, Clone)]
pub enum TxKind {
    Genesis { config: BranchConfig, token: Option<TokenAttestation>, package: SubmitPackage },
    Rooted { parent_branch: BranchId, config: Option<BranchConfig>, package: SubmitPackage },
    Push { branch: BranchId, package: SubmitPackage },
    /// A submit for a proper branch, wrapped in a sprout rooted at `rooted_at`.
    Wrap { rooted_at: BranchId, package: SubmitPackage },
    TwigMerge { twig: BranchId, package: SubmitPackage, approvals: Vec<Approval> },
    Veto { owner: BranchId, veto: Veto },
    Vote { owner: BranchId, vote: Vote },
}

#[derive(Debug, Clone)]
pub struct Tx {
    pub tick: u64,
    pub author: PublicKey,
    pub kind: TxKind,
}

impl Tx {
    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            TxKind::Genesis { .. } => "genesis",
            TxKind::Rooted { .. } => "rooted",
            TxKind::Push { .. } => "push",
            TxKind::Wrap { .. } => "wrap",
            TxKind::TwigMerge { .. } => "twig-merge",
            TxKind::Veto { .. } => "veto",
            TxKind::Vote { .. } => "vote",
        }
    }

    pub fn package(&self) -> Option<&SubmitPackage> {
        match &self.kind {
            TxKind::Genesis { package, .. }
            | TxKind::Rooted { package, .. }
            | TxKind::Push { package, .. }
            | TxKind::Wrap { package, .. }
            | TxKind::TwigMerge { package, .. } => Some(package),
            _ => None,
        }
    }

    /// Hash over the tick, author, kind and the ids of the components.
    pub fn id(&self) -> ContentId {
        let mut w = Writer::default();
        w.str("lakat/tx");
        w.u64(self.tick);
        w.bytes(&self.author.0);
        w.str(self.kind_name());
        match &self.kind {
            TxKind::Genesis { config, token, package } => {
                w.id(&config.id());
                w.option(token.as_ref(), |w, t| w.id(&t.id()));
                w.id(&package.id());
            }
            TxKind::Rooted { parent_branch, config, package } => {
                w.id(parent_branch);
                w.option(config.as_ref(), |w, c| w.id(&c.id()));
                w.id(&package.id());
            }
            TxKind::Push { branch, package } => {
                w.id(branch);
                w.id(&package.id());
            }
            TxKind::Wrap { rooted_at, package } => {
                w.id(rooted_at);
                w.id(&package.id());
            }
            TxKind::TwigMerge { twig, package, approvals } => {
                w.id(twig);
                w.id(&package.id());
                w.list(approvals, |w, a| w.bytes(&a.signature.0));
            }
            TxKind::Veto { owner, veto } => {
                w.id(owner);
                w.id(&veto.sprout);
                w.bytes(&veto.signature.0);
            }
            TxKind::Vote { owner, vote } => {
                w.id(owner);
                w.id(&vote.sprout);
                w.bytes(&vote.signature.0);
            }
        }
        content_id(&w.into_bytes())
    }

    /// Short human-readable description for logs.
    pub fn summary(&self) -> String {
        let target = match &self.kind {
            TxKind::Genesis { package, .. } | TxKind::Rooted { package, .. } => package.id().short(),
            TxKind::Push { branch, .. } => branch.short(),
            TxKind::Wrap { rooted_at, .. } => rooted_at.short(),
            TxKind::TwigMerge { twig, .. } => twig.short(),
            TxKind::Veto { veto, .. } => veto.sprout.short(),
            TxKind::Vote { vote, .. } => vote.sprout.short(),
        };
        format!("{}:{}@{}", self.kind_name(), self.id().short(), target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub tx: ContentId,
    pub tick: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerState {
    pub branches: Branches,
    pub wraps: Wraps,
    /// Review progress keyed by review container.
    pub reviews: im::OrdMap<ContentId, ReviewState>,
    pub decisions: im::Vector<Decision>,
    pub rejected: im::Vector<Rejection>,
    pub applied: im::Vector<ContentId>,
}

/// What an accepted transaction produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    Branch(BranchId),
    Submit(ContentId),
    Sprout { sprout: BranchId, core: BranchId },
    Ballot,
}

pub struct Ledger {
    pub store: Store,
    pub state: LedgerState,
    // scan results keyed by (branch, head, parent head) survive across
    // transactions and replays since the store only grows
    scans: RefCell<ScanCache>,
}

fn contributors(store: &Store, scans: &RefCell<ScanCache>, branches: &Branches, id: &BranchId) -> Result<ContributorSet, LedgerError> {
    let mut scanner = ContributorScanner::with_cache(store, branches, scans.take());
    let result = scanner.current(id);
    scans.replace(scanner.into_cache());
    Ok(result?)
}

fn branch<'a>(st: &'a LedgerState, id: &BranchId) -> Result<&'a Branch, LedgerError> {
    st.branches.get(id).ok_or(LedgerError::UnknownBranch(*id))
}

/// Checks shared by every submit-carrying transaction and returns the
/// resulting trie after comparing it against the submit.
fn check_package(
    store: &mut Store,
    tx: &Tx,
    pkg: &SubmitPackage,
    expected_parent: ContentId,
    base: &crate::trie::Trie,
) -> Result<(), LedgerError> {
    let s = &pkg.submit;
    if s.parent != expected_parent {
        return Err(LedgerError::ParentMismatch { expected: expected_parent, found: s.parent });
    }
    if s.creator_root != tx.author.creator_root() {
        return Err(LedgerError::CreatorMismatch);
    }
    if s.timestamp.tick > tx.tick {
        return Err(LedgerError::BadTimestamp);
    }
    for p in s.extended_parents() {
        if load_submit(store, &p)?.timestamp.tick > s.timestamp.tick {
            return Err(LedgerError::BadTimestamp);
        }
    }
    let trie = apply_package(store, base, pkg)?;
    if trie.root != s.trie_root {
        return Err(LedgerError::TrieMismatch);
    }
    if creator_key(store, &s.creator_root)? != tx.author {
        return Err(LedgerError::CreatorMismatch);
    }
    store.put_object(RecordKind::Submit, s)?;
    Ok(())
}

fn new_bucket_schema(pkg: &SubmitPackage, id: &ContentId) -> Option<Schema> {
    pkg.buckets.iter().find(|b| b.id == *id).map(|b| b.bucket.schema)
}

/// Registers the pull requests carried by a submit on `issuing`.
fn register_pull_requests(
    st: &mut LedgerState,
    pkg: &SubmitPackage,
    issuing: BranchId,
    author_is_content: bool,
) -> Result<(), LedgerError> {
    for p in &pkg.submit.submit_trace.pull_requests {
        if !author_is_content {
            return Err(LedgerError::NotContributor);
        }
        if new_bucket_schema(pkg, &p.review_container) != Some(Schema::ReviewContainer) {
            return Err(LedgerError::InvalidPullRequest);
        }
        let target = branch(st, &p.target_branch)?;
        let requesting = branch(st, &p.requesting_branch)?;
        if target.is_sprout() || p.target_branch == p.requesting_branch {
            return Err(LedgerError::InvalidPullRequest);
        }
        let issuing_branch = branch(st, &issuing)?;
        let direct = p.requesting_branch == issuing;
        let proxy = requesting.branch_type() == BranchType::Proper && issuing_branch.parent_branch == p.requesting_branch;
        if !(direct || proxy) || st.reviews.contains_key(&p.review_container) {
            return Err(LedgerError::InvalidPullRequest);
        }
        let pr = PullRequest {
            issuing_branch: issuing,
            requesting_branch: p.requesting_branch,
            target_branch: p.target_branch,
            review_container: p.review_container,
            carrier_submit: pkg.id(),
            status: PrStatus::Created,
        };
        st.reviews.insert(p.review_container, ReviewState::new(pr));
    }
    Ok(())
}

/// Validates and records commitments and review items carried by a submit
/// bound for `requesting`. `before` are the requesting branch's
/// contributors prior to the submit.
fn process_reviews(
    store: &Store, scans: &RefCell<ScanCache>,
    st: &mut LedgerState,
    pkg: &SubmitPackage,
    author: PublicKey,
    requesting: BranchId,
    before: &ContributorSet,
) -> Result<(), LedgerError> {
    for entry in &pkg.submit.submit_trace.reviews_trace {
        match entry {
            ReviewTraceEntry::Commitment(cid) => {
                let c: ReviewCommitment = store.get_object(cid)?.ok_or(LedgerError::MissingObject(*cid))?;
                if !c.verify() || c.committer() != author {
                    return Err(PorError::InvalidProof.into());
                }
                let state = st.reviews.get(&c.pull_request).ok_or(LedgerError::ReviewMismatch)?;
                if state.pr.requesting_branch != requesting || c.requesting_branch != requesting {
                    return Err(LedgerError::ReviewMismatch);
                }
                if state.pr.status == PrStatus::Created {
                    return Err(PorError::NotMature.into());
                }
                let target = state.pr.target_branch;
                if c.proof.kind != ProofKind::Content || c.proof.branch != target {
                    return Err(PorError::InvalidProof.into());
                }
                let target_set = contributors(store, scans, &st.branches, &target)?;
                if !target_set.has_evidence(ProofKind::Content, &c.committer(), &c.proof.evidence) {
                    return Err(PorError::NotTargetContributor.into());
                }
                let interested = [ProofKind::Content, ProofKind::Token, ProofKind::Storage]
                    .iter()
                    .any(|k| before.contains(*k, &c.committer()));
                if interested {
                    return Err(PorError::ConflictOfInterest.into());
                }
                st.reviews.get_mut(&c.pull_request).expect("checked").record_commitment(c.committer(), *cid);
            }
            ReviewTraceEntry::Item(iid) => {
                let item: ReviewItem = store.get_object(iid)?.ok_or(LedgerError::MissingObject(*iid))?;
                if !item.verify() || item.reviewer != author {
                    return Err(LedgerError::ReviewMismatch);
                }
                if new_bucket_schema(pkg, &item.bucket) != Some(Schema::ReviewItem) {
                    return Err(LedgerError::ReviewMismatch);
                }
                let target_config = {
                    let state = st.reviews.get(&item.pull_request).ok_or(LedgerError::ReviewMismatch)?;
                    if state.pr.requesting_branch != requesting {
                        return Err(LedgerError::ReviewMismatch);
                    }
                    branch(st, &state.pr.target_branch)?.config.clone()
                };
                let state = st.reviews.get_mut(&item.pull_request).expect("checked");
                state.record_item(&item, *iid)?;
                state.container_items.push(item.bucket);
                for nb in &pkg.buckets {
                    if nb.bucket.schema == Schema::ReviewContainer && nb.bucket.parent == state.container_head {
                        state.container_head = nb.id;
                    }
                }
                state.refresh_status(&target_config);
            }
        }
    }
    Ok(())
}

fn has_commitment_by(store: &Store, pkg: &SubmitPackage, author: &PublicKey) -> bool {
    pkg.submit.submit_trace.reviews_trace.iter().any(|e| match e {
        ReviewTraceEntry::Commitment(cid) => store
            .get_object::<ReviewCommitment>(cid)
            .ok()
            .flatten()
            .is_some_and(|c| c.committer() == *author),
        ReviewTraceEntry::Item(_) => false,
    })
}

fn commitment_in_package(pkg: &SubmitPackage, author: &PublicKey) -> bool {
    pkg.objects.iter().any(|(kind, bytes)| {
        *kind == RecordKind::Other
            && crate::codec::canonical_decode::<ReviewCommitment>(bytes).is_ok_and(|c| {
                c.committer() == *author
                    && pkg.submit.submit_trace.reviews_trace.contains(&ReviewTraceEntry::Commitment(c.id()))
            })
    })
}

/// Promotes pull requests whose carrier submit is now included in the
/// requesting branch.
fn refresh_maturity(store: &Store, st: &mut LedgerState) -> Result<(), LedgerError> {
    let mut closures: BTreeMap<BranchId, BTreeSet<ContentId>> = BTreeMap::new();
    let created: Vec<ContentId> =
        st.reviews.iter().filter(|(_, r)| r.pr.status == PrStatus::Created).map(|(k, _)| *k).collect();
    for key in created {
        let state = st.reviews.get_mut(&key).expect("listed");
        let req = state.pr.requesting_branch;
        if !closures.contains_key(&req) {
            let head = st.branches.get(&req).map(|b| b.stable_head).unwrap_or(ContentId::ZERO);
            let ids = if head.is_zero() { BTreeSet::new() } else { inclusive_closure(store, &head)?.into_keys().collect() };
            closures.insert(req, ids);
        }
        if closures[&req].contains(&state.pr.carrier_submit) {
            state.pr.status = PrStatus::Mature;
        }
    }
    Ok(())
}

fn is_branch_ancestor(branches: &Branches, ancestor: &BranchId, of: &BranchId) -> bool {
    let mut cur = *of;
    let mut guard = 0;
    while let Some(b) = branches.get(&cur) {
        if cur == *ancestor {
            return true;
        }
        if b.parent_branch.is_zero() || guard > 1024 {
            return false;
        }
        cur = b.parent_branch;
        guard += 1;
    }
    false
}

struct MergeCheck {
    belt: BranchId,
    config_change: Option<BranchConfig>,
}

/// Belt-side checks for a merge submit into `core` on top of `base_head`,
/// plus the trie comparison.
fn check_merge(
    store: &mut Store,
    st: &LedgerState,
    tx: &Tx,
    pkg: &SubmitPackage,
    core: &Branch,
    base_head: ContentId,
) -> Result<MergeCheck, LedgerError> {
    let trace = &pkg.submit.submit_trace;
    let (Some(belt_id), Some(tip)) = (trace.merged_branch, trace.belt_tip) else {
        return Err(LedgerError::NotAMerge);
    };
    let belt = branch(st, &belt_id)?;
    if belt.is_sprout() || belt_id == core.branch_id {
        return Err(LedgerError::WrongType(belt.branch_type()));
    }
    if !first_parent_ids(store, &belt.stable_head)?.contains(&tip) {
        return Err(LedgerError::BeltTipNotInHistory);
    }
    let verdict = verify_branch(store, belt);
    if !verdict.is_ok() {
        return Err(LedgerError::BeltInvalid(verdict.code().to_string()));
    }
    let base = merge_trie(store, &trie_at(store, &base_head)?, &trie_at(store, &tip)?)?;
    check_package(store, tx, pkg, base_head, &base)?;
    let plan = plan_merge(store, core.branch_id, base_head, belt_id, tip)?;
    if !core.config.accept_conflicts && !plan.conflicts.is_empty() {
        return Err(LedgerError::Conflicts(plan.conflicts.len()));
    }
    let config_change = match trace.config_change {
        Some(cid) => {
            let next: BranchConfig = store.get_object(&cid)?.ok_or(LedgerError::MissingObject(cid))?;
            check_config_change(&core.config, &next)?;
            Some(next)
        }
        None => None,
    };
    Ok(MergeCheck { belt: belt_id, config_change })
}

impl Ledger {
    pub fn new(store: Store) -> Self {
        Ledger { store, state: LedgerState::default(), scans: RefCell::default() }
    }

    pub fn branch(&self, id: &BranchId) -> Option<&Branch> {
        self.state.branches.get(id)
    }

    pub fn contributors(&self, id: &BranchId) -> Result<ContributorSet, LedgerError> {
        contributors(&self.store, &self.scans, &self.state.branches, id)
    }

    /// Current head of whatever now stands in for `id`.
    pub fn head_of(&self, id: &BranchId) -> Option<ContentId> {
        self.state.branches.get(&resolve(&self.state.wraps, *id)).map(|b| b.stable_head)
    }

    pub fn core_of(&self, id: &BranchId) -> BranchId {
        core_of(&self.state.wraps, *id)
    }

    /// Follows default successors from `core` down the pending sprouts.
    pub fn default_tip(&self, core: &BranchId) -> BranchId {
        let mut cur = resolve(&self.state.wraps, *core);
        loop {
            let Some(b) = self.state.branches.get(&cur) else { return cur };
            let pending: Vec<_> = b
                .sprout_selection
                .iter()
                .filter(|e| self.state.wraps.get(&e.sprout).is_some_and(|w| w.status == SproutStatus::Pending))
                .cloned()
                .collect();
            match default_successor(&self.state.branches, &pending) {
                Some(next) => cur = next,
                None => return cur,
            }
        }
    }

    /// Ready pull request from `belt` into `core` or into a branch that
    /// `core` descends from.
    pub fn ready_pull_request(&self, core: &BranchId, belt: &BranchId) -> Option<&ReviewState> {
        ready_pull_request(&self.state, core, belt)
    }

    /// Applies `tx` atomically. Rejections are recorded in the state.
    pub fn apply(&mut self, tx: &Tx) -> Result<Applied, LedgerError> {
        let mut work = self.state.clone();
        let result = apply_tx(&mut self.store, &self.scans, &mut work, tx);
        match &result {
            Ok(_) => {
                work.applied.push_back(tx.id());
                self.state = work;
            }
            Err(e) => self.state.rejected.push_back(Rejection { tx: tx.id(), tick: tx.tick, reason: e.to_string() }),
        }
        result
    }
}

fn ready_pull_request<'a>(st: &'a LedgerState, core: &BranchId, belt: &BranchId) -> Option<&'a ReviewState> {
    st.reviews.values().find(|r| {
        r.pr.requesting_branch == *belt
            && matches!(r.pr.status, PrStatus::UnderReview | PrStatus::Complete)
            && is_branch_ancestor(&st.branches, &r.pr.target_branch, core)
            && st.branches.get(&r.pr.target_branch).is_some_and(|t| r.merge_ready(&t.config))
    })
}

fn apply_tx(store: &mut Store, scans: &RefCell<ScanCache>, st: &mut LedgerState, tx: &Tx) -> Result<Applied, LedgerError> {
    if let Some(pkg) = tx.package() {
        let trace = &pkg.submit.submit_trace;
        let merging = matches!(tx.kind, TxKind::Wrap { .. } | TxKind::TwigMerge { .. });
        if !merging && (trace.merged_branch.is_some() || trace.belt_tip.is_some()) {
            return Err(LedgerError::UnexpectedTrace);
        }
        if !merging && trace.config_change.is_some() {
            return Err(LedgerError::ConfigChangeOutsideMerge);
        }
    }
    let out = match &tx.kind {
        TxKind::Genesis { config, token, package } => apply_genesis(store, st, tx, config, token, package)?,
        TxKind::Rooted { parent_branch, config, package } => apply_rooted(store, st, tx, parent_branch, config, package)?,
        TxKind::Push { branch, package } => apply_push(store, scans, st, tx, branch, package)?,
        TxKind::Wrap { rooted_at, package } => apply_wrap(store, scans, st, tx, rooted_at, package)?,
        TxKind::TwigMerge { twig, package, approvals } => apply_twig_merge(store, scans, st, tx, twig, package, approvals)?,
        TxKind::Veto { owner, veto } => {
            if veto.contributor != tx.author {
                return Err(LedgerError::NotContributor);
            }
            let owner = *owner;
            let core = core_of(&st.wraps, owner);
            let params = Params::of(&branch(st, &core)?.config);
            let ok = contributors(store, scans, &st.branches, &core)?.is_contributor(&tx.author);
            register_veto(&mut st.branches, owner, veto.clone(), tx.tick, &params, ok)?;
            Applied::Ballot
        }
        TxKind::Vote { owner, vote } => {
            if vote.voter != tx.author {
                return Err(LedgerError::NotContributor);
            }
            let owner = *owner;
            let core = core_of(&st.wraps, owner);
            let params = Params::of(&branch(st, &core)?.config);
            let ok = contributors(store, scans, &st.branches, &core)?.contains(ProofKind::Content, &tx.author);
            cast_vote(&mut st.branches, owner, vote.clone(), tx.tick, &params, ok)?;
            Applied::Ballot
        }
    };
    refresh_maturity(store, st)?;
    Ok(out)
}

fn insert_branch(st: &mut LedgerState, b: Branch) -> Result<BranchId, LedgerError> {
    let id = b.branch_id;
    if st.branches.contains_key(&id) {
        return Err(LedgerError::DuplicateBranch(id));
    }
    st.branches.insert(id, b);
    Ok(id)
}

fn plain_trace(pkg: &SubmitPackage) -> Result<(), LedgerError> {
    let t = &pkg.submit.submit_trace;
    if !t.pull_requests.is_empty() || !t.reviews_trace.is_empty() {
        return Err(LedgerError::UnexpectedTrace);
    }
    Ok(())
}

fn apply_genesis(
    store: &mut Store,
    st: &mut LedgerState,
    tx: &Tx,
    config: &BranchConfig,
    token: &Option<TokenAttestation>,
    pkg: &SubmitPackage,
) -> Result<Applied, LedgerError> {
    if config.branch_type == BranchType::Sprout {
        return Err(LedgerError::WrongType(BranchType::Sprout));
    }
    plain_trace(pkg)?;
    if let Some(t) = token {
        if !t.verify() {
            return Err(LedgerError::BadApproval);
        }
    }
    check_package(store, tx, pkg, ContentId::ZERO, &crate::trie::Trie::empty())?;
    let mut b = Branch::new(ContentId::ZERO, LogicalTimestamp::at(tx.tick), pkg.id(), config.clone());
    b.branch_token.extend(token.clone());
    Ok(Applied::Branch(insert_branch(st, b)?))
}

fn apply_rooted(
    store: &mut Store,
    st: &mut LedgerState,
    tx: &Tx,
    parent_id: &BranchId,
    config: &Option<BranchConfig>,
    pkg: &SubmitPackage,
) -> Result<Applied, LedgerError> {
    plain_trace(pkg)?;
    let parent = branch(st, parent_id)?;
    if parent.is_sprout() {
        return Err(LedgerError::WrongType(BranchType::Sprout));
    }
    let config = config.clone().unwrap_or_else(|| parent.config.clone());
    if config.branch_type == BranchType::Sprout {
        return Err(LedgerError::WrongType(BranchType::Sprout));
    }
    let root = pkg.submit.parent;
    if !first_parent_ids(store, &parent.stable_head)?.contains(&root) {
        return Err(OpsError::InvalidRoot { root }.into());
    }
    let base = trie_at(store, &root)?;
    check_package(store, tx, pkg, root, &base)?;
    let b = Branch::new(*parent_id, LogicalTimestamp::at(tx.tick), pkg.id(), config);
    Ok(Applied::Branch(insert_branch(st, b)?))
}

fn apply_push(
    store: &mut Store, scans: &RefCell<ScanCache>,
    st: &mut LedgerState,
    tx: &Tx,
    twig_id: &BranchId,
    pkg: &SubmitPackage,
) -> Result<Applied, LedgerError> {
    let twig = branch(st, twig_id)?;
    if twig.branch_type() != BranchType::Twig {
        return Err(LedgerError::WrongType(twig.branch_type()));
    }
    if twig.stale {
        return Err(LedgerError::Stale(*twig_id));
    }
    let head = twig.stable_head;
    let before = contributors(store, scans, &st.branches, twig_id)?;
    let is_content = before.contains(ProofKind::Content, &tx.author);
    let eligible = is_content || before.contains(ProofKind::Review, &tx.author) || commitment_in_package(pkg, &tx.author);
    if !eligible {
        return Err(LedgerError::NotContributor);
    }
    let base = trie_at(store, &head)?;
    check_package(store, tx, pkg, head, &base)?;
    if !is_content && !before.contains(ProofKind::Review, &tx.author) && !has_commitment_by(store, pkg, &tx.author) {
        return Err(LedgerError::NotContributor);
    }
    process_reviews(store, scans, st, pkg, tx.author, *twig_id, &before)?;
    st.branches.get_mut(twig_id).expect("checked").stable_head = pkg.id();
    register_pull_requests(st, pkg, *twig_id, is_content)?;
    Ok(Applied::Submit(pkg.id()))
}

fn apply_wrap(
    store: &mut Store, scans: &RefCell<ScanCache>,
    st: &mut LedgerState,
    tx: &Tx,
    rooted_at: &BranchId,
    pkg: &SubmitPackage,
) -> Result<Applied, LedgerError> {
    let owner = resolve(&st.wraps, *rooted_at);
    let mut decisions = Vec::new();
    if matches!(st.wraps.get(&owner).map(|w| w.status), Some(SproutStatus::Ousted { .. })) {
        // rooting on an ousted sprout turns it into a proper branch first
        finalize_ousted_sprout(&mut st.branches, &mut st.wraps, owner)?;
        decisions.push(Decision { tick: tx.tick, step: 0, branch: owner, action: Action::Finalize });
    }
    let owner_branch = branch(st, &owner)?;
    if owner_branch.branch_type() == BranchType::Twig {
        return Err(LedgerError::WrongType(BranchType::Twig));
    }
    let base_head = owner_branch.stable_head;
    let core_id = core_of(&st.wraps, owner);
    let core = branch(st, &core_id)?.clone();
    if core.stale {
        return Err(LedgerError::Stale(core_id));
    }
    let core_set = contributors(store, scans, &st.branches, &core_id)?;
    let is_merge = pkg.submit.submit_trace.merged_branch.is_some();
    let mut requesting = None;
    let mut merge = None;
    if is_merge {
        if !core_set.contains(ProofKind::Content, &tx.author) {
            return Err(LedgerError::NotContributor);
        }
        if !pkg.submit.submit_trace.pull_requests.is_empty() || !pkg.submit.submit_trace.reviews_trace.is_empty() {
            return Err(LedgerError::UnexpectedTrace);
        }
        let belt = pkg.submit.submit_trace.merged_branch.expect("merge");
        if ready_pull_request(st, &core_id, &belt).is_none() {
            return Err(LedgerError::NoReadyPullRequest(belt));
        }
        let check = check_merge(store, st, tx, pkg, &core, base_head)?;
        requesting = Some(check.belt);
        merge = Some(check);
    } else {
        // review traffic for a pull request requested by this proper branch
        let t = &pkg.submit.submit_trace;
        if t.reviews_trace.is_empty() || !t.pull_requests.is_empty() {
            return Err(LedgerError::UnexpectedTrace);
        }
        let eligible = core_set.contains(ProofKind::Review, &tx.author) || commitment_in_package(pkg, &tx.author);
        if !eligible {
            return Err(LedgerError::NotContributor);
        }
        let base = trie_at(store, &base_head)?;
        check_package(store, tx, pkg, base_head, &base)?;
        process_reviews(store, scans, st, pkg, tx.author, core_id, &core_set)?;
    }
    let sprout = wrap_merge_in_sprout(
        &mut st.branches,
        &mut st.wraps,
        pkg.id(),
        pkg.submit.parent,
        tx.author,
        requesting,
        owner,
        tx.tick,
    )?;
    let outcome = lignify(&mut st.branches, &mut st.wraps, sprout, tx.tick, &mut decisions)?;
    st.decisions.extend(decisions);
    for (reference, head) in &outcome.donations {
        let submit = load_submit(store, head)?;
        if let Some(cid) = submit.submit_trace.config_change {
            let next: BranchConfig = store.get_object(&cid)?.ok_or(LedgerError::MissingObject(cid))?;
            let b = st.branches.get_mut(reference).expect("reference exists");
            if check_config_change(&b.config, &next).is_ok() {
                b.config = next;
            }
        }
    }
    if let Some(check) = merge {
        let belt = st.branches.get_mut(&check.belt).expect("checked");
        if belt.config.stale_after_merge {
            belt.stale = true;
        }
    }
    Ok(Applied::Sprout { sprout, core: outcome.core })
}

fn apply_twig_merge(
    store: &mut Store, scans: &RefCell<ScanCache>,
    st: &mut LedgerState,
    tx: &Tx,
    twig_id: &BranchId,
    pkg: &SubmitPackage,
    approvals: &[Approval],
) -> Result<Applied, LedgerError> {
    let twig = branch(st, twig_id)?.clone();
    if twig.branch_type() != BranchType::Twig {
        return Err(LedgerError::WrongType(twig.branch_type()));
    }
    if twig.stale {
        return Err(LedgerError::Stale(*twig_id));
    }
    let set = contributors(store, scans, &st.branches, twig_id)?;
    if !set.contains(ProofKind::Content, &tx.author) {
        return Err(LedgerError::NotContributor);
    }
    let submit_id = pkg.id();
    let mut approvers = BTreeSet::new();
    for a in approvals {
        if !a.verify(twig_id, &submit_id) {
            return Err(LedgerError::BadApproval);
        }
        approvers.insert(a.approver);
    }
    twig_merge_approved(&approvers, &set.members(ProofKind::Content), twig.config.twig_merge_fraction)?;
    let t = &pkg.submit.submit_trace;
    if !t.pull_requests.is_empty() || !t.reviews_trace.is_empty() {
        return Err(LedgerError::UnexpectedTrace);
    }
    let check = check_merge(store, st, tx, pkg, &twig, twig.stable_head)?;
    let b = st.branches.get_mut(twig_id).expect("checked");
    b.stable_head = submit_id;
    if let Some(next) = check.config_change {
        b.config = next;
    }
    let belt = st.branches.get_mut(&check.belt).expect("checked");
    if belt.config.stale_after_merge {
        belt.stale = true;
    }
    Ok(Applied::Submit(submit_id))
}

/// Id of a transaction's submit, if any; handy for callers.
pub fn submit_of(tx: &Tx) -> Option<ContentId> {
    tx.package().map(SubmitPackage::id)
}

/// A commitment is stored as an opaque object next to the submit.
pub fn commitment_record(c: &ReviewCommitment) -> (RecordKind, Vec<u8>) {
    (RecordKind::Other, crate::codec::canonical_encode(c))
}

//! Builds transactions from a participant's local view of the ledger.
//!
//! Nothing here mutates branch state. Building a package writes its
//! objects into the local store, which is harmless: the store is content
//! addressed and the ledger checks everything again on apply.

use thiserror::Error;

use crate::branch::{BranchConfig, BranchId, BranchType, PrRef, ReviewTraceEntry, Veto, Vote};
use crate::bucket::{Schema, TokenAttestation};
use crate::codec::{ContentId, LogicalTimestamp};
use crate::identity::{make_contribution_proof, KeyIdentity, ProofKind};
use crate::ledger::{Ledger, LedgerError, Tx, TxKind};
use crate::ops::{build_merge, trie_at, Draft, OpsError};
use crate::por::{Approval, ReviewCommitment, ReviewItem, Verdict};
use crate::store::RecordKind;
use crate::trie::Trie;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error("branch {0} is unknown")]
    UnknownBranch(BranchId),
    #[error("pull request {0} is unknown")]
    UnknownPullRequest(ContentId),
    #[error("no content evidence on the target branch")]
    NoEvidence,
}

type Result<T> = std::result::Result<T, ClientError>;

fn head(ledger: &Ledger, id: &BranchId) -> Result<ContentId> {
    ledger.branch(id).map(|b| b.stable_head).ok_or(ClientError::UnknownBranch(*id))
}

pub fn genesis(ledger: &mut Ledger, who: &KeyIdentity, config: BranchConfig, text: &str, tick: u64) -> Result<(Tx, BranchId)> {
    genesis_with_token(ledger, who, config, None, text, tick)
}

pub fn genesis_with_token(
    ledger: &mut Ledger,
    who: &KeyIdentity,
    config: BranchConfig,
    token: Option<TokenAttestation>,
    text: &str,
    tick: u64,
) -> Result<(Tx, BranchId)> {
    let mut draft = Draft::new(ContentId::ZERO, "genesis");
    draft.add_article(&ledger.store, who, text, tick)?;
    let package = draft.seal(&mut ledger.store, &Trie::empty(), who, tick)?;
    let id = crate::branch::compute_branch_id(ContentId::ZERO, &LogicalTimestamp::at(tick), package.id());
    let tx = Tx { tick, author: who.public_key(), kind: TxKind::Genesis { config, token, package } };
    Ok((tx, id))
}

/// A branch rooted at the parent's current head.
pub fn rooted(
    ledger: &mut Ledger,
    who: &KeyIdentity,
    parent: &BranchId,
    config: Option<BranchConfig>,
    text: &str,
    tick: u64,
) -> Result<(Tx, BranchId)> {
    let root = head(ledger, parent)?;
    let mut draft = Draft::new(root, "branch");
    draft.add_article(&ledger.store, who, text, tick)?;
    let base = trie_at(&ledger.store, &root)?;
    let package = draft.seal(&mut ledger.store, &base, who, tick)?;
    let id = crate::branch::compute_branch_id(*parent, &LogicalTimestamp::at(tick), package.id());
    let tx = Tx { tick, author: who.public_key(), kind: TxKind::Rooted { parent_branch: *parent, config, package } };
    Ok((tx, id))
}

/// Wraps `draft` for `branch`: a push for twigs, a sprout for proper
/// branches rooted at the default tip.
fn deliver(ledger: &mut Ledger, who: &KeyIdentity, branch: &BranchId, mut draft: Draft, tick: u64) -> Result<Tx> {
    let b = ledger.branch(branch).ok_or(ClientError::UnknownBranch(*branch))?;
    let (target, kind_is_twig) = match b.branch_type() {
        BranchType::Twig => (*branch, true),
        _ => (ledger.default_tip(&ledger.core_of(branch)), false),
    };
    let parent = head(ledger, &target)?;
    draft.parent = parent;
    let base = trie_at(&ledger.store, &parent)?;
    let package = draft.seal(&mut ledger.store, &base, who, tick)?;
    let kind = if kind_is_twig {
        TxKind::Push { branch: target, package }
    } else {
        TxKind::Wrap { rooted_at: target, package }
    };
    Ok(Tx { tick, author: who.public_key(), kind })
}

pub fn push_text(ledger: &mut Ledger, who: &KeyIdentity, twig: &BranchId, text: &str, tick: u64) -> Result<Tx> {
    let mut draft = Draft::new(ContentId::ZERO, "edit");
    draft.add_article(&ledger.store, who, text, tick)?;
    deliver(ledger, who, twig, draft, tick)
}

/// Opens a pull request from `issuing`, asking `target` to review
/// `requesting`. Returns the review container id, which names the request.
pub fn pull_request(
    ledger: &mut Ledger,
    who: &KeyIdentity,
    issuing: &BranchId,
    requesting: &BranchId,
    target: &BranchId,
    text: &str,
    tick: u64,
) -> Result<(Tx, ContentId)> {
    let mut draft = Draft::new(ContentId::ZERO, "pull request");
    let about = draft.add_atomic(who, Schema::Text, ContentId::ZERO, text.as_bytes(), tick);
    let container =
        draft.add_molecular(&ledger.store, who, Schema::ReviewContainer, ContentId::ZERO, vec![about], tick)?;
    draft.trace.pull_requests.push(PrRef { review_container: container, target_branch: *target, requesting_branch: *requesting });
    Ok((deliver(ledger, who, issuing, draft, tick)?, container))
}

pub fn commit_review(ledger: &mut Ledger, who: &KeyIdentity, pr: &ContentId, tick: u64) -> Result<Tx> {
    let state = ledger.state.reviews.get(pr).ok_or(ClientError::UnknownPullRequest(*pr))?.clone();
    let target = state.pr.target_branch;
    let evidence = ledger
        .contributors(&target)?
        .by_kind
        .get(&ProofKind::Content)
        .and_then(|m| m.get(&who.public_key()))
        .and_then(|e| e.iter().next().copied())
        .ok_or(ClientError::NoEvidence)?;
    let proof = make_contribution_proof(who, target, ProofKind::Content, evidence);
    let c = ReviewCommitment::new(who, proof, state.pr.requesting_branch, *pr, LogicalTimestamp::at(tick));
    let mut draft = Draft::new(ContentId::ZERO, "review commitment");
    let id = draft.add_object(RecordKind::Other, &c);
    draft.trace.reviews_trace.push(ReviewTraceEntry::Commitment(id));
    deliver(ledger, who, &state.pr.requesting_branch, draft, tick)
}

pub fn review(
    ledger: &mut Ledger,
    who: &KeyIdentity,
    pr: &ContentId,
    verdict: Verdict,
    reviewed: Vec<ContentId>,
    tick: u64,
) -> Result<Tx> {
    let state = ledger.state.reviews.get(pr).ok_or(ClientError::UnknownPullRequest(*pr))?.clone();
    let mut draft = Draft::new(ContentId::ZERO, "review");
    let text = format!("{verdict:?}");
    let bucket = draft.add_atomic(who, Schema::ReviewItem, state.container_head, text.as_bytes(), tick);
    draft.add_molecular(&ledger.store, who, Schema::ReviewContainer, state.container_head, vec![bucket], tick)?;
    let item = ReviewItem::new(who, *pr, bucket, reviewed, verdict, state.rounds_completed + 1);
    let id = draft.add_object(RecordKind::Other, &item);
    draft.trace.reviews_trace.push(ReviewTraceEntry::Item(id));
    deliver(ledger, who, &state.pr.requesting_branch, draft, tick)
}

/// A merge of `belt`'s head into `core`, wrapped in a sprout rooted at
/// `rooted_at` (the default tip when `None`).
pub fn merge(
    ledger: &mut Ledger,
    who: &KeyIdentity,
    core: &BranchId,
    belt: &BranchId,
    rooted_at: Option<BranchId>,
    config_change: Option<&BranchConfig>,
    tick: u64,
) -> Result<Tx> {
    let rooted_at = rooted_at.unwrap_or_else(|| ledger.default_tip(core));
    let owner = crate::lignification::resolve(&ledger.state.wraps, rooted_at);
    let base_head = head(ledger, &owner)?;
    let belt_tip = head(ledger, belt)?;
    let core_id = ledger.core_of(&owner);
    let draft = Draft::new(base_head, "merge");
    let (_, package) = build_merge(&mut ledger.store, who, core_id, base_head, *belt, belt_tip, draft, config_change, tick)?;
    Ok(Tx { tick, author: who.public_key(), kind: TxKind::Wrap { rooted_at, package } })
}

pub fn twig_merge(
    ledger: &mut Ledger,
    who: &KeyIdentity,
    twig: &BranchId,
    belt: &BranchId,
    approvers: &[&KeyIdentity],
    config_change: Option<&BranchConfig>,
    tick: u64,
) -> Result<Tx> {
    let base_head = head(ledger, twig)?;
    let belt_tip = head(ledger, belt)?;
    let draft = Draft::new(base_head, "merge");
    let (_, package) = build_merge(&mut ledger.store, who, *twig, base_head, *belt, belt_tip, draft, config_change, tick)?;
    let approvals = approvers.iter().map(|a| Approval::new(a, twig, &package.id())).collect();
    Ok(Tx { tick, author: who.public_key(), kind: TxKind::TwigMerge { twig: *twig, package, approvals } })
}

pub fn veto(who: &KeyIdentity, owner: &BranchId, sprout: &BranchId, tick: u64) -> Tx {
    let veto = Veto::new(who, *owner, *sprout, tick);
    Tx { tick, author: who.public_key(), kind: TxKind::Veto { owner: *owner, veto } }
}

pub fn vote(who: &KeyIdentity, owner: &BranchId, sprout: &BranchId, tick: u64) -> Tx {
    let vote = Vote::new(who, *owner, *sprout, tick);
    Tx { tick, author: who.public_key(), kind: TxKind::Vote { owner: *owner, vote } }
}

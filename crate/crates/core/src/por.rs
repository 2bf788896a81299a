//! Proof of review: pull requests, commitments, review items and the merge
//! readiness rule, plus twig merge approval.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branch::{AcceptanceRule, BranchConfig, BranchId, Ratio};
use crate::codec::{id_of, Canonical, CodecError, ContentId, LogicalTimestamp, Reader, Writer};
use crate::identity::{signed_message, verify_signature, ContributionProof, KeyIdentity, PublicKey, Signature};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PorError {
    #[error("pull request {0} is unknown")]
    UnknownPullRequest(ContentId),
    #[error("pull request is not yet included in the requesting branch")]
    NotMature,
    #[error("commitment proof does not verify for the target branch")]
    InvalidProof,
    #[error("committer is not a content contributor of the target branch")]
    NotTargetContributor,
    #[error("committer already contributes to the requesting branch")]
    ConflictOfInterest,
    #[error("reviewer has no prior commitment")]
    NoCommitment,
    #[error("reviewed bucket {0} is not part of the requesting branch")]
    DanglingReviewedBucket(ContentId),
    #[error("approver is not a content contributor")]
    ApproverNotContributor,
    #[error("approvals fall short of the merge fraction")]
    InsufficientApprovals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Comment,
}

impl Verdict {
    fn code(self) -> u64 {
        match self {
            Verdict::Accept => 0,
            Verdict::Reject => 1,
            Verdict::Comment => 2,
        }
    }

    fn from_code(code: u64) -> Result<Self, CodecError> {
        Ok(match code {
            0 => Verdict::Accept,
            1 => Verdict::Reject,
            2 => Verdict::Comment,
            _ => return Err(CodecError::Invalid("unknown verdict")),
        })
    }
}

/// A target contributor's promise to review a requesting branch. The proof
/// shows content contributorship on the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewCommitment {
    pub proof: ContributionProof,
    pub requesting_branch: BranchId,
    pub pull_request: ContentId,
    pub timestamp: LogicalTimestamp,
    pub signature: Signature,
}

struct CommitmentClaim<'a> {
    proof: &'a ContributionProof,
    requesting_branch: BranchId,
    pull_request: ContentId,
    timestamp: &'a LogicalTimestamp,
}

impl Canonical for CommitmentClaim<'_> {
    const TAG: u8 = 0x10;
    fn encode_fields(&self, w: &mut Writer) {
        w.nested(self.proof);
        w.id(&self.requesting_branch);
        w.id(&self.pull_request);
        w.nested(self.timestamp);
    }
    fn decode_fields(_: &mut Reader<'_>) -> Result<Self, CodecError> {
        Err(CodecError::Invalid("claims are never decoded"))
    }
}

impl ReviewCommitment {
    pub fn new(
        identity: &KeyIdentity,
        proof: ContributionProof,
        requesting_branch: BranchId,
        pull_request: ContentId,
        timestamp: LogicalTimestamp,
    ) -> Self {
        let claim = CommitmentClaim { proof: &proof, requesting_branch, pull_request, timestamp: &timestamp };
        let signature = identity.sign(&signed_message("lakat/commitment", &claim));
        ReviewCommitment { proof, requesting_branch, pull_request, timestamp, signature }
    }

    pub fn committer(&self) -> PublicKey {
        self.proof.contributor
    }

    pub fn verify(&self) -> bool {
        let claim = CommitmentClaim {
            proof: &self.proof,
            requesting_branch: self.requesting_branch,
            pull_request: self.pull_request,
            timestamp: &self.timestamp,
        };
        self.proof.verify()
            && verify_signature(
                &self.proof.contributor.0,
                &signed_message("lakat/commitment", &claim),
                &self.signature.0,
            )
    }

    pub fn id(&self) -> ContentId {
        id_of(self)
    }
}

impl Canonical for ReviewCommitment {
    const TAG: u8 = 0x10;
    fn encode_fields(&self, w: &mut Writer) {
        w.nested(&self.proof);
        w.id(&self.requesting_branch);
        w.id(&self.pull_request);
        w.nested(&self.timestamp);
        w.bytes(&self.signature.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ReviewCommitment {
            proof: r.nested()?,
            requesting_branch: r.id()?,
            pull_request: r.id()?,
            timestamp: r.nested()?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

/// Signed record tying a review-item bucket to a pull request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewItem {
    pub reviewer: PublicKey,
    pub pull_request: ContentId,
    pub bucket: ContentId,
    pub reviewed_buckets: Vec<ContentId>,
    pub verdict: Verdict,
    pub round: u64,
    pub signature: Signature,
}

impl ReviewItem {
    fn body(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.str("lakat/review-item");
        w.bytes(&self.reviewer.0);
        w.id(&self.pull_request);
        w.id(&self.bucket);
        w.list(&self.reviewed_buckets, |w, id| w.id(id));
        w.u64(self.verdict.code());
        w.u64(self.round);
        w.into_bytes()
    }

    pub fn new(
        identity: &KeyIdentity,
        pull_request: ContentId,
        bucket: ContentId,
        reviewed_buckets: Vec<ContentId>,
        verdict: Verdict,
        round: u64,
    ) -> Self {
        let mut item = ReviewItem {
            reviewer: identity.public_key(),
            pull_request,
            bucket,
            reviewed_buckets,
            verdict,
            round,
            signature: Signature::default(),
        };
        item.signature = identity.sign(&item.body());
        item
    }

    pub fn verify(&self) -> bool {
        verify_signature(&self.reviewer.0, &self.body(), &self.signature.0)
    }

    pub fn id(&self) -> ContentId {
        id_of(self)
    }
}

impl Canonical for ReviewItem {
    const TAG: u8 = 0x11;
    fn encode_fields(&self, w: &mut Writer) {
        w.bytes(&self.reviewer.0);
        w.id(&self.pull_request);
        w.id(&self.bucket);
        w.list(&self.reviewed_buckets, |w, id| w.id(id));
        w.u64(self.verdict.code());
        w.u64(self.round);
        w.bytes(&self.signature.0);
    }
    fn decode_fields(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ReviewItem {
            reviewer: PublicKey::read(r)?,
            pull_request: r.id()?,
            bucket: r.id()?,
            reviewed_buckets: r.list(|r| r.id())?,
            verdict: Verdict::from_code(r.u64()?)?,
            round: r.u64()?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrStatus {
    Created,
    Mature,
    UnderReview,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequest {
    pub issuing_branch: BranchId,
    pub requesting_branch: BranchId,
    pub target_branch: BranchId,
    pub review_container: ContentId,
    pub carrier_submit: ContentId,
    pub status: PrStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub reviewer: PublicKey,
    pub item: ContentId,
    pub bucket: ContentId,
    pub verdict: Verdict,
}

/// Review progress of one pull request. Keyed by the pull request's first
/// review container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewState {
    pub pr: PullRequest,
    pub container_head: ContentId,
    pub container_items: Vec<ContentId>,
    pub commitments: BTreeMap<PublicKey, ContentId>,
    pub items: Vec<ItemRecord>,
    pub rounds_completed: u64,
    pub round_reviewers: BTreeSet<PublicKey>,
}

impl ReviewState {
    pub fn new(pr: PullRequest) -> Self {
        let container_head = pr.review_container;
        ReviewState {
            pr,
            container_head,
            container_items: Vec::new(),
            commitments: BTreeMap::new(),
            items: Vec::new(),
            rounds_completed: 0,
            round_reviewers: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> ContentId {
        self.pr.review_container
    }

    pub fn record_commitment(&mut self, committer: PublicKey, commitment: ContentId) {
        self.commitments.entry(committer).or_insert(commitment);
        if self.pr.status == PrStatus::Mature {
            self.pr.status = PrStatus::UnderReview;
        }
    }

    /// Records a review item. A round completes once every committed
    /// reviewer has supplied an item since the round opened.
    pub fn record_item(&mut self, item: &ReviewItem, item_id: ContentId) -> Result<(), PorError> {
        if !self.commitments.contains_key(&item.reviewer) {
            return Err(PorError::NoCommitment);
        }
        self.items.push(ItemRecord { reviewer: item.reviewer, item: item_id, bucket: item.bucket, verdict: item.verdict });
        self.round_reviewers.insert(item.reviewer);
        if self.commitments.keys().all(|k| self.round_reviewers.contains(k)) {
            self.rounds_completed += 1;
            self.round_reviewers.clear();
        }
        Ok(())
    }

    /// Each reviewer's most recent verdict.
    pub fn latest_verdicts(&self) -> BTreeMap<PublicKey, Verdict> {
        let mut out = BTreeMap::new();
        for rec in &self.items {
            out.insert(rec.reviewer, rec.verdict);
        }
        out
    }

    pub fn merge_ready(&self, target: &BranchConfig) -> bool {
        let latest = self.latest_verdicts();
        let rejects = latest.values().filter(|v| **v == Verdict::Reject).count() as u64;
        merge_ready_counts(latest.len() as u64, rejects, self.rounds_completed, target)
    }

    pub fn refresh_status(&mut self, target: &BranchConfig) {
        if matches!(self.pr.status, PrStatus::UnderReview | PrStatus::Complete) {
            self.pr.status = if self.merge_ready(target) { PrStatus::Complete } else { PrStatus::UnderReview };
        }
    }
}

/// Readiness from counts: `reviewers` with at least one item, of which
/// `rejects` currently reject, after `rounds` completed rounds.
pub fn merge_ready_counts(reviewers: u64, rejects: u64, rounds: u64, target: &BranchConfig) -> bool {
    if reviewers < target.min_reviewers || rounds < target.min_review_rounds {
        return false;
    }
    match target.acceptance_rule {
        AcceptanceRule::NoRejections => rejects == 0,
        AcceptanceRule::Fraction(f) => {
            // rejects / reviewers <= 1 - f
            u128::from(rejects) * u128::from(f.den) <= u128::from(f.den - f.num) * u128::from(reviewers)
        }
    }
}

/// Checks approvals for a twig merge against the content contributors.
pub fn twig_merge_approved(
    approvals: &BTreeSet<PublicKey>,
    content_contributors: &BTreeSet<PublicKey>,
    fraction: Ratio,
) -> Result<(), PorError> {
    if !approvals.is_subset(content_contributors) {
        return Err(PorError::ApproverNotContributor);
    }
    if fraction.reached_by(approvals.len() as u64, content_contributors.len() as u64) {
        Ok(())
    } else {
        Err(PorError::InsufficientApprovals)
    }
}

/// A content contributor's signed approval of a twig merge submit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    pub approver: PublicKey,
    pub signature: Signature,
}

impl Approval {
    fn message(twig: &BranchId, merge_submit: &ContentId) -> Vec<u8> {
        let mut w = Writer::default();
        w.str("lakat/twig-merge-approval");
        w.id(twig);
        w.id(merge_submit);
        w.into_bytes()
    }

    pub fn new(identity: &KeyIdentity, twig: &BranchId, merge_submit: &ContentId) -> Self {
        Approval { approver: identity.public_key(), signature: identity.sign(&Self::message(twig, merge_submit)) }
    }

    pub fn verify(&self, twig: &BranchId, merge_submit: &ContentId) -> bool {
        verify_signature(&self.approver.0, &Self::message(twig, merge_submit), &self.signature.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{canonical_decode, canonical_encode, content_id};
    use crate::identity::{make_contribution_proof, ProofKind};
    use proptest::prelude::*;

    fn config(min_reviewers: u64, rounds: u64, rule: AcceptanceRule) -> BranchConfig {
        BranchConfig { min_reviewers, min_review_rounds: rounds, acceptance_rule: rule, ..BranchConfig::proper() }
    }

    fn state_with(reviewers: &[&KeyIdentity]) -> ReviewState {
        let pr = PullRequest {
            issuing_branch: content_id(b"twig"),
            requesting_branch: content_id(b"twig"),
            target_branch: content_id(b"core"),
            review_container: content_id(b"container"),
            carrier_submit: content_id(b"carrier"),
            status: PrStatus::Mature,
        };
        let mut s = ReviewState::new(pr);
        for r in reviewers {
            s.record_commitment(r.public_key(), content_id(&r.public_key().0));
        }
        s
    }

    fn item(who: &KeyIdentity, verdict: Verdict, n: u8) -> ReviewItem {
        ReviewItem::new(who, content_id(b"container"), content_id(&[n]), vec![], verdict, 0)
    }

    #[test]
    fn two_reviewers_every_verdict_pair() {
        let a = KeyIdentity::from_name("a");
        let b = KeyIdentity::from_name("b");
        let verdicts = [Verdict::Accept, Verdict::Reject, Verdict::Comment];
        let rules = [
            AcceptanceRule::NoRejections,
            AcceptanceRule::Fraction(Ratio::HALF),
            AcceptanceRule::Fraction(Ratio::ONE),
        ];
        for rule in rules {
            let cfg = config(2, 1, rule);
            for va in verdicts {
                for vb in verdicts {
                    let mut s = state_with(&[&a, &b]);
                    s.record_item(&item(&a, va, 1), content_id(b"i1")).unwrap();
                    s.record_item(&item(&b, vb, 2), content_id(b"i2")).unwrap();
                    let rejects = [va, vb].iter().filter(|v| **v == Verdict::Reject).count();
                    let expected = match rule {
                        AcceptanceRule::NoRejections => rejects == 0,
                        AcceptanceRule::Fraction(f) => (rejects as f64) / 2.0 <= 1.0 - f.num as f64 / f.den as f64,
                    };
                    assert_eq!(s.merge_ready(&cfg), expected, "{rule:?} {va:?} {vb:?}");
                }
            }
        }
    }

    #[test]
    fn one_reviewer_is_not_enough_for_two() {
        let a = KeyIdentity::from_name("a");
        let mut s = state_with(&[&a]);
        s.record_item(&item(&a, Verdict::Accept, 1), content_id(b"i")).unwrap();
        assert!(!s.merge_ready(&config(2, 1, AcceptanceRule::NoRejections)));
        assert!(s.merge_ready(&config(1, 1, AcceptanceRule::NoRejections)));
    }

    #[test]
    fn review_requires_commitment() {
        let a = KeyIdentity::from_name("a");
        let b = KeyIdentity::from_name("b");
        let mut s = state_with(&[&a]);
        assert_eq!(s.record_item(&item(&b, Verdict::Accept, 1), content_id(b"i")), Err(PorError::NoCommitment));
        assert!(s.items.is_empty());
    }

    #[test]
    fn rounds_need_every_committed_reviewer() {
        let a = KeyIdentity::from_name("a");
        let b = KeyIdentity::from_name("b");
        let mut s = state_with(&[&a, &b]);
        s.record_item(&item(&a, Verdict::Accept, 1), content_id(b"1")).unwrap();
        s.record_item(&item(&a, Verdict::Accept, 2), content_id(b"2")).unwrap();
        assert_eq!(s.rounds_completed, 0);
        s.record_item(&item(&b, Verdict::Accept, 3), content_id(b"3")).unwrap();
        assert_eq!(s.rounds_completed, 1);
        s.record_item(&item(&b, Verdict::Comment, 4), content_id(b"4")).unwrap();
        s.record_item(&item(&a, Verdict::Accept, 5), content_id(b"5")).unwrap();
        assert_eq!(s.rounds_completed, 2);
        let cfg = config(2, 3, AcceptanceRule::NoRejections);
        assert!(!s.merge_ready(&cfg));
    }

    #[test]
    fn latest_verdict_counts() {
        let a = KeyIdentity::from_name("a");
        let mut s = state_with(&[&a]);
        s.record_item(&item(&a, Verdict::Reject, 1), content_id(b"1")).unwrap();
        let cfg = config(1, 1, AcceptanceRule::NoRejections);
        assert!(!s.merge_ready(&cfg));
        s.record_item(&item(&a, Verdict::Accept, 2), content_id(b"2")).unwrap();
        assert!(s.merge_ready(&cfg));
    }

    #[test]
    fn twig_fraction_boundaries() {
        let keys: Vec<PublicKey> = ["a", "b"].iter().map(|n| KeyIdentity::from_name(n).public_key()).collect();
        let content: BTreeSet<PublicKey> = keys.iter().copied().collect();
        let one: BTreeSet<PublicKey> = [keys[0]].into();
        assert_eq!(twig_merge_approved(&one, &content, Ratio::HALF), Ok(()));
        assert_eq!(twig_merge_approved(&BTreeSet::new(), &content, Ratio::HALF), Err(PorError::InsufficientApprovals));
        let outsider: BTreeSet<PublicKey> = [KeyIdentity::from_name("z").public_key()].into();
        assert_eq!(twig_merge_approved(&outsider, &content, Ratio::HALF), Err(PorError::ApproverNotContributor));
        let single: BTreeSet<PublicKey> = [keys[0]].into();
        assert_eq!(twig_merge_approved(&single, &single, Ratio::ONE), Ok(()));
    }

    #[test]
    fn commitment_and_item_sign_and_encode() {
        let bob = KeyIdentity::from_name("bob");
        let proof = make_contribution_proof(&bob, content_id(b"core"), ProofKind::Content, content_id(b"s"));
        let c = ReviewCommitment::new(&bob, proof, content_id(b"twig"), content_id(b"pr"), LogicalTimestamp::at(3));
        assert!(c.verify());
        assert_eq!(canonical_decode::<ReviewCommitment>(&canonical_encode(&c)).unwrap(), c);
        let mut forged = c.clone();
        forged.requesting_branch = content_id(b"other");
        assert!(!forged.verify());

        let i = ReviewItem::new(&bob, content_id(b"pr"), content_id(b"bucket"), vec![content_id(b"x")], Verdict::Reject, 2);
        assert!(i.verify());
        assert_eq!(canonical_decode::<ReviewItem>(&canonical_encode(&i)).unwrap(), i);
        let mut forged = i;
        forged.verdict = Verdict::Accept;
        assert!(!forged.verify());
    }

    proptest! {
        #[test]
        fn accepting_never_flips_ready_to_not_ready(seq in proptest::collection::vec((0usize..3, 0usize..3), 1..20)) {
            let ids: Vec<KeyIdentity> = ["a", "b", "c"].iter().map(|n| KeyIdentity::from_name(n)).collect();
            let refs: Vec<&KeyIdentity> = ids.iter().collect();
            let cfg = config(1, 0, AcceptanceRule::NoRejections);
            let mut s = state_with(&refs);
            // every reviewer opens with an accept, then only accepts or comments follow
            for (i, r) in ids.iter().enumerate() {
                s.record_item(&item(r, Verdict::Accept, i as u8), content_id(&[i as u8])).unwrap();
            }
            let mut was_ready = s.merge_ready(&cfg);
            for (n, (who, v)) in seq.into_iter().enumerate() {
                let verdict = if v == 0 { Verdict::Comment } else { Verdict::Accept };
                s.record_item(&item(&ids[who], verdict, n as u8), content_id(&[100 + n as u8])).unwrap();
                let now = s.merge_ready(&cfg);
                prop_assert!(!was_ready || now);
                was_ready = now;
            }
        }
    }
}

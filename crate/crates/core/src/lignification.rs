//! Sprout wrapping, vetoes and votes, and the lignification walk that
//! advances stable heads.
//!
//! Everything here operates on branch headers and sprout records only; no
//! store access is needed because heads are plain submit ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branch::{Branch, BranchConfig, BranchId, BranchType, SelectionEntry, Veto, Vote};
use crate::codec::{ContentId, LogicalTimestamp};
use crate::identity::PublicKey;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LignificationError {
    #[error("branch {0} is unknown")]
    UnknownBranch(BranchId),
    #[error("branch {0} is not a wrapped sprout")]
    NotWrapped(BranchId),
    #[error("sprout {sprout} is not in the selection of {owner}")]
    NotInSelection { owner: BranchId, sprout: BranchId },
    #[error("merge parent {found} is not the head {expected} of the rooting branch")]
    InvalidRooting { expected: ContentId, found: ContentId },
    #[error("sprout {0} already exists")]
    AlreadyWrapped(BranchId),
    #[error("no contest in this selection")]
    NoContest,
    #[error("the default successor cannot be vetoed")]
    VetoOnDefault,
    #[error("sprout is not a contestant")]
    NotContestant,
    #[error("outside the window")]
    OutOfWindow,
    #[error("signer is not a contributor")]
    NotContributor,
    #[error("no standing veto")]
    VoteWithoutVeto,
    #[error("sprout is not a candidate")]
    NotCandidate,
    #[error("bad signature")]
    BadSignature,
    #[error("sprout {0} has not been ousted")]
    PrematureConversion(BranchId),
    #[error("sprout {0} was already converted")]
    AlreadyConverted(BranchId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    pub lignification_time: u64,
    pub engagement_time: u64,
    pub broadcasting_buffer: u64,
}

impl Params {
    pub fn of(config: &BranchConfig) -> Self {
        Params {
            lignification_time: config.lignification_time,
            engagement_time: config.engagement_time,
            broadcasting_buffer: config.broadcasting_buffer,
        }
    }

    pub fn veto_deadline(&self, origin: u64) -> u64 {
        origin + self.lignification_time
    }

    pub fn vote_deadline(&self, origin: u64) -> u64 {
        origin + self.lignification_time + self.engagement_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SproutStatus {
    Pending,
    /// Donated its head and selection to `into`.
    Absorbed { into: BranchId },
    /// Lost a contest; converts into a branch rooted in `reference` once targeted.
    Ousted { reference: BranchId },
    Converted,
}

/// Bookkeeping for a sprout: where it is rooted and what became of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SproutWrap {
    pub sprout: BranchId,
    pub merge_submit: ContentId,
    pub rooted_at: BranchId,
    pub requesting: Option<BranchId>,
    pub creator: PublicKey,
    pub created_tick: u64,
    pub status: SproutStatus,
}

// persistent maps: ledger states are cloned per transaction and per
// snapshot, which is O(1) here
pub type Branches = im::OrdMap<BranchId, Branch>;
pub type Wraps = im::OrdMap<BranchId, SproutWrap>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Wait,
    AwaitVotes,
    Donate(BranchId),
    SideBranch(BranchId),
    Finalize,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub tick: u64,
    pub step: usize,
    pub branch: BranchId,
    pub action: Action,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let action = match &self.action {
            Action::Wait => "wait".to_string(),
            Action::AwaitVotes => "await-votes".to_string(),
            Action::Donate(c) => format!("donate:{}", c.short()),
            Action::SideBranch(c) => format!("side-branch:{}", c.short()),
            Action::Finalize => "finalize".to_string(),
        };
        write!(f, "{} {} {} {}", self.tick, self.step, self.branch.short(), action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LignifyOutcome {
    pub core: BranchId,
    pub path: Vec<BranchId>,
    /// (reference branch, newly adopted head), in order.
    pub donations: Vec<(BranchId, ContentId)>,
    pub converted: Vec<BranchId>,
}

/// Follows absorption links to the branch that now holds a sprout's place.
pub fn resolve(wraps: &Wraps, id: BranchId) -> BranchId {
    let mut cur = id;
    while let Some(SproutWrap { status: SproutStatus::Absorbed { into }, .. }) = wraps.get(&cur) {
        cur = *into;
    }
    cur
}

fn status(wraps: &Wraps, id: &BranchId) -> Option<SproutStatus> {
    wraps.get(id).map(|w| w.status)
}

/// The proper branch at the top of the sprout chain above `owner`.
pub fn core_of(wraps: &Wraps, owner: BranchId) -> BranchId {
    let mut cur = resolve(wraps, owner);
    while let Some(w) = wraps.get(&cur) {
        if w.status != SproutStatus::Pending {
            break;
        }
        cur = resolve(wraps, w.rooted_at);
    }
    cur
}

fn tick_of(branches: &Branches, id: &BranchId) -> u64 {
    branches.get(id).map_or(u64::MAX, |b| b.timestamp.tick)
}

/// Selection entries ordered by sprout creation tick, then id.
fn ordered(branches: &Branches, selection: &[SelectionEntry]) -> Vec<(u64, BranchId)> {
    let mut out: Vec<(u64, BranchId)> = selection.iter().map(|e| (tick_of(branches, &e.sprout), e.sprout)).collect();
    out.sort();
    out
}

pub fn default_successor(branches: &Branches, selection: &[SelectionEntry]) -> Option<BranchId> {
    ordered(branches, selection).first().map(|(_, id)| *id)
}

/// The window over a selection. The clock opens when a second sprout joins
/// within the first one's lignification time, otherwise at the first sprout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contest {
    pub default: BranchId,
    pub origin: u64,
    pub contestants: Vec<BranchId>,
}

pub fn contest(branches: &Branches, selection: &[SelectionEntry], params: &Params) -> Option<Contest> {
    let order = ordered(branches, selection);
    let (first_tick, default) = *order.first()?;
    let origin = match order.get(1) {
        Some((t, _)) if *t <= first_tick + params.lignification_time => *t,
        _ => first_tick,
    };
    let contestants = order
        .iter()
        .filter(|(t, _)| *t <= origin + params.lignification_time)
        .map(|(_, id)| *id)
        .collect();
    Some(Contest { default, origin, contestants })
}

fn vetoed(selection: &[SelectionEntry], c: &Contest) -> Vec<BranchId> {
    c.contestants
        .iter()
        .filter(|id| **id != c.default)
        .filter(|id| selection.iter().any(|e| e.sprout == **id && !e.vetoes.is_empty()))
        .copied()
        .collect()
}

/// Plurality over the default and the vetoed sprouts, counting each voter's
/// latest vote. A tie goes to the default if it is tied, else the earliest.
pub fn tally(branches: &Branches, selection: &[SelectionEntry], c: &Contest) -> BranchId {
    let mut candidates = vec![c.default];
    candidates.extend(vetoed(selection, c));
    let mut latest: BTreeMap<PublicKey, (u64, BranchId)> = BTreeMap::new();
    for e in selection {
        for v in &e.votes {
            let slot = latest.entry(v.voter).or_insert((v.tick, e.sprout));
            if v.tick > slot.0 {
                *slot = (v.tick, e.sprout);
            }
        }
    }
    let mut counts: BTreeMap<BranchId, usize> = candidates.iter().map(|c| (*c, 0)).collect();
    for (_, sprout) in latest.values() {
        if let Some(n) = counts.get_mut(sprout) {
            *n += 1;
        }
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let tied: Vec<BranchId> = candidates.iter().filter(|c| counts[*c] == best).copied().collect();
    if tied.contains(&c.default) {
        return c.default;
    }
    tied.into_iter().min_by_key(|id| (tick_of(branches, id), *id)).unwrap_or(c.default)
}

fn transitive_sprouts(branches: &Branches, wraps: &Wraps, owner: &BranchId) -> BTreeSet<BranchId> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<BranchId> = branches
        .get(owner)
        .map(|b| b.sprout_selection.iter().map(|e| e.sprout).collect())
        .unwrap_or_default();
    while let Some(id) = stack.pop() {
        if status(wraps, &id) != Some(SproutStatus::Pending) || !out.insert(id) {
            continue;
        }
        if let Some(b) = branches.get(&id) {
            stack.extend(b.sprout_selection.iter().map(|e| e.sprout));
        }
    }
    out
}

fn refresh_sprouts(branches: &mut Branches, wraps: &Wraps, owner: &BranchId) {
    let sprouts = transitive_sprouts(branches, wraps, owner);
    if let Some(b) = branches.get_mut(owner) {
        b.sprouts = sprouts;
    }
}

fn convert(branches: &mut Branches, wraps: &mut Wraps, sprout: BranchId, parent: BranchId) -> Result<(), LignificationError> {
    let b = branches.get_mut(&sprout).ok_or(LignificationError::UnknownBranch(sprout))?;
    if !b.parent_branch.is_zero() {
        return Err(LignificationError::AlreadyConverted(sprout));
    }
    b.parent_branch = parent;
    b.config = b.config.with_type(BranchType::Proper);
    b.branch_token.clear();
    let w = wraps.get_mut(&sprout).ok_or(LignificationError::NotWrapped(sprout))?;
    w.status = SproutStatus::Converted;
    Ok(())
}

/// Creates the sprout for a merge submit and registers it in the
/// selection of the rooting branch and the sprouts of the core.
#[allow(clippy::too_many_arguments)]
pub fn wrap_merge_in_sprout(
    branches: &mut Branches,
    wraps: &mut Wraps,
    merge_submit: ContentId,
    merge_parent: ContentId,
    creator: PublicKey,
    requesting: Option<BranchId>,
    rooted_at: BranchId,
    now: u64,
) -> Result<BranchId, LignificationError> {
    let owner = resolve(wraps, rooted_at);
    let owner_branch = branches.get(&owner).ok_or(LignificationError::UnknownBranch(owner))?;
    if owner_branch.stable_head != merge_parent {
        return Err(LignificationError::InvalidRooting { expected: owner_branch.stable_head, found: merge_parent });
    }
    let core = core_of(wraps, owner);
    let config = branches.get(&core).ok_or(LignificationError::UnknownBranch(core))?.config.with_type(BranchType::Sprout);
    let sprout = Branch::new(ContentId::ZERO, LogicalTimestamp::at(now), merge_submit, config);
    let id = sprout.branch_id;
    if branches.contains_key(&id) {
        return Err(LignificationError::AlreadyWrapped(id));
    }
    branches.insert(id, sprout);
    wraps.insert(
        id,
        SproutWrap { sprout: id, merge_submit, rooted_at: owner, requesting, creator, created_tick: now, status: SproutStatus::Pending },
    );
    if let Some(b) = branches.get_mut(&owner) {
        b.sprout_selection.push(SelectionEntry::new(id));
    }
    refresh_sprouts(branches, wraps, &core);
    Ok(id)
}

/// Turns an ousted sprout into a proper branch rooted in the branch that
/// ousted it. The token is not inherited.
pub fn finalize_ousted_sprout(branches: &mut Branches, wraps: &mut Wraps, sprout: BranchId) -> Result<BranchId, LignificationError> {
    match status(wraps, &sprout) {
        Some(SproutStatus::Ousted { reference }) => {
            convert(branches, wraps, sprout, reference)?;
            refresh_sprouts(branches, wraps, &sprout);
            Ok(reference)
        }
        Some(SproutStatus::Converted) => Err(LignificationError::AlreadyConverted(sprout)),
        Some(_) => Err(LignificationError::PrematureConversion(sprout)),
        None => Err(LignificationError::NotWrapped(sprout)),
    }
}

/// Runs the walk from the core down to `new_sprout`. Each step looks at the
/// reference branch's selection: it is either the current branch itself or
/// has just taken over the current branch's selection.
pub fn lignify(
    branches: &mut Branches,
    wraps: &mut Wraps,
    new_sprout: BranchId,
    now: u64,
    log: &mut Vec<Decision>,
) -> Result<LignifyOutcome, LignificationError> {
    let mut path = vec![new_sprout];
    let mut cur = new_sprout;
    loop {
        let w = wraps.get(&cur).ok_or(LignificationError::NotWrapped(cur))?;
        let up = resolve(wraps, w.rooted_at);
        match status(wraps, &up) {
            Some(SproutStatus::Pending) => {
                path.push(up);
                cur = up;
            }
            Some(SproutStatus::Ousted { .. }) => {
                finalize_ousted_sprout(branches, wraps, up)?;
                log.push(Decision { tick: now, step: 0, branch: up, action: Action::Finalize });
                path.push(up);
                break;
            }
            _ => {
                if !branches.contains_key(&up) {
                    return Err(LignificationError::UnknownBranch(up));
                }
                path.push(up);
                break;
            }
        }
    }
    path.reverse();
    let core = path[0];
    let params = Params::of(&branches[&core].config);
    let mut outcome = LignifyOutcome { core, path: path.clone(), donations: Vec::new(), converted: Vec::new() };
    let mut reference = core;
    let mut touched = vec![core];

    for (step, child) in path.iter().enumerate().skip(1) {
        let child = *child;
        let selection = branches[&reference].sprout_selection.clone();
        if !selection.iter().any(|e| e.sprout == child) {
            return Err(LignificationError::NotInSelection { owner: reference, sprout: child });
        }
        let c = contest(branches, &selection, &params).ok_or(LignificationError::NoContest)?;
        if now <= c.origin + params.lignification_time + params.broadcasting_buffer {
            log.push(Decision { tick: now, step, branch: reference, action: Action::Wait });
            break;
        }
        let contested = !vetoed(&selection, &c).is_empty();
        let child_wins = if contested {
            if now <= params.vote_deadline(c.origin) + params.broadcasting_buffer {
                log.push(Decision { tick: now, step, branch: reference, action: Action::AwaitVotes });
                break;
            }
            tally(branches, &selection, &c) == child
        } else {
            child == c.default
        };
        if child_wins {
            let donor = branches[&child].clone();
            let r = branches.get_mut(&reference).expect("reference exists");
            r.stable_head = donor.stable_head;
            r.sprout_selection = donor.sprout_selection.clone();
            for e in &selection {
                if e.sprout == child {
                    continue;
                }
                if let Some(w) = wraps.get_mut(&e.sprout) {
                    if w.status == SproutStatus::Pending {
                        w.status = SproutStatus::Ousted { reference };
                    }
                }
            }
            wraps.get_mut(&child).ok_or(LignificationError::NotWrapped(child))?.status =
                SproutStatus::Absorbed { into: reference };
            log.push(Decision { tick: now, step, branch: reference, action: Action::Donate(child) });
            outcome.donations.push((reference, donor.stable_head));
        } else {
            convert(branches, wraps, child, reference)?;
            let r = branches.get_mut(&reference).expect("reference exists");
            r.sprout_selection.retain(|e| e.sprout != child);
            log.push(Decision { tick: now, step, branch: reference, action: Action::SideBranch(child) });
            outcome.converted.push(child);
            reference = child;
            touched.push(child);
        }
    }
    for id in touched {
        refresh_sprouts(branches, wraps, &id);
    }
    Ok(outcome)
}

/// Records a veto in the selection owned by `owner`. `arrival` is the tick
/// at which the veto reached the ledger.
pub fn register_veto(
    branches: &mut Branches,
    owner: BranchId,
    veto: Veto,
    arrival: u64,
    params: &Params,
    signer_is_contributor: bool,
) -> Result<(), LignificationError> {
    if !veto.verify(owner) {
        return Err(LignificationError::BadSignature);
    }
    if !signer_is_contributor {
        return Err(LignificationError::NotContributor);
    }
    let b = branches.get(&owner).ok_or(LignificationError::UnknownBranch(owner))?;
    let c = contest(branches, &b.sprout_selection, params).ok_or(LignificationError::NoContest)?;
    if c.contestants.len() < 2 {
        return Err(LignificationError::NoContest);
    }
    if veto.sprout == c.default {
        return Err(LignificationError::VetoOnDefault);
    }
    if !c.contestants.contains(&veto.sprout) {
        return Err(LignificationError::NotContestant);
    }
    let deadline = params.veto_deadline(c.origin);
    if veto.tick > deadline || arrival > deadline + params.broadcasting_buffer || veto.tick > arrival {
        return Err(LignificationError::OutOfWindow);
    }
    let entry = branches.get_mut(&owner).and_then(|b| b.selection_entry_mut(&veto.sprout)).expect("contestant entry");
    if !entry.vetoes.iter().any(|v| v.contributor == veto.contributor) {
        entry.vetoes.push(veto);
    }
    Ok(())
}

/// Records a vote; any earlier vote of the same voter in this selection is
/// replaced.
pub fn cast_vote(
    branches: &mut Branches,
    owner: BranchId,
    vote: Vote,
    arrival: u64,
    params: &Params,
    signer_is_content_contributor: bool,
) -> Result<(), LignificationError> {
    if !vote.verify(owner) {
        return Err(LignificationError::BadSignature);
    }
    if !signer_is_content_contributor {
        return Err(LignificationError::NotContributor);
    }
    let b = branches.get(&owner).ok_or(LignificationError::UnknownBranch(owner))?;
    let c = contest(branches, &b.sprout_selection, params).ok_or(LignificationError::NoContest)?;
    let vetoed = vetoed(&b.sprout_selection, &c);
    if vetoed.is_empty() {
        return Err(LignificationError::VoteWithoutVeto);
    }
    if vote.sprout != c.default && !vetoed.contains(&vote.sprout) {
        return Err(LignificationError::NotCandidate);
    }
    let deadline = params.vote_deadline(c.origin);
    if vote.tick > deadline || arrival > deadline + params.broadcasting_buffer || vote.tick > arrival {
        return Err(LignificationError::OutOfWindow);
    }
    let b = branches.get_mut(&owner).expect("owner exists");
    for e in &mut b.sprout_selection {
        e.votes.retain(|v| v.voter != vote.voter);
    }
    b.selection_entry_mut(&vote.sprout).expect("candidate entry").votes.push(vote);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::content_id;
    use crate::identity::KeyIdentity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct World {
        branches: Branches,
        wraps: Wraps,
        core: BranchId,
        log: Vec<Decision>,
    }

    fn submit(tag: &str) -> ContentId {
        content_id(tag.as_bytes())
    }

    fn world() -> World {
        let core = Branch::new(ContentId::ZERO, LogicalTimestamp::at(0), submit("genesis"), BranchConfig::proper());
        let id = core.branch_id;
        World { branches: Branches::unit(id, core), wraps: Wraps::new(), core: id, log: Vec::new() }
    }

    impl World {
        fn head(&self, id: BranchId) -> ContentId {
            self.branches[&resolve(&self.wraps, id)].stable_head
        }

        /// Wraps a fresh merge submit on `rooted_at` at `now` and lignifies.
        fn wrap(&mut self, tag: &str, rooted_at: BranchId, now: u64) -> BranchId {
            let parent = self.head(rooted_at);
            let creator = KeyIdentity::from_name("alice").public_key();
            let id = wrap_merge_in_sprout(&mut self.branches, &mut self.wraps, submit(tag), parent, creator, None, rooted_at, now)
                .unwrap();
            lignify(&mut self.branches, &mut self.wraps, id, now, &mut self.log).unwrap();
            id
        }

        fn params(&self) -> Params {
            Params::of(&self.branches[&self.core].config)
        }
    }

    #[test]
    fn single_sprout_advances_after_window() {
        let mut w = world();
        let core = w.core;
        let s1 = w.wrap("m1", core, 10);
        assert_eq!(w.branches[&core].sprouts, [s1].into());
        assert_eq!(w.head(core), submit("genesis"));
        // 10 + 50 + 1 is still inside the window
        let s2 = w.wrap("m2", s1, 61);
        assert_eq!(w.head(core), submit("genesis"));
        let _s3 = w.wrap("m3", s2, 62);
        assert_eq!(w.branches[&core].stable_head, submit("m1"));
        assert_eq!(w.wraps[&s1].status, SproutStatus::Absorbed { into: core });
        assert!(w.branches.values().all(|b| b.parent_branch.is_zero() || b.branch_id == core));
    }

    #[test]
    fn chained_sprouts_donate_in_one_walk() {
        let mut w = world();
        let core = w.core;
        let s1 = w.wrap("m1", core, 0);
        let s2 = w.wrap("m2", s1, 1);
        let s3 = w.wrap("m3", s2, 2);
        assert_eq!(w.branches[&core].sprouts, [s1, s2, s3].into());
        w.wrap("m4", s3, 100);
        assert_eq!(w.head(core), submit("m3"));
        assert_eq!(w.branches[&core].sprouts.len(), 1);
    }

    #[test]
    fn default_successor_is_earliest_then_smallest() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut w = world();
            let n = rng.gen_range(1..6);
            let mut entries = Vec::new();
            for i in 0..n {
                let tick = rng.gen_range(0..4);
                let b = Branch::new(ContentId::ZERO, LogicalTimestamp::at(tick), submit(&format!("s{i}")), BranchConfig::proper());
                entries.push(SelectionEntry::new(b.branch_id));
                w.branches.insert(b.branch_id, b);
            }
            let mut best: Option<(u64, BranchId)> = None;
            for e in &entries {
                let key = (w.branches[&e.sprout].timestamp.tick, e.sprout);
                if best.map_or(true, |b| key < b) {
                    best = Some(key);
                }
            }
            assert_eq!(default_successor(&w.branches, &entries), best.map(|b| b.1));
        }
        assert_eq!(default_successor(&world().branches, &[]), None);
    }

    fn contested() -> (World, BranchId, BranchId) {
        let mut w = world();
        let core = w.core;
        let a = w.wrap("a", core, 0);
        let b = w.wrap("b", core, 0);
        let (first, second) = if a < b { (a, b) } else { (b, a) };
        (w, first, second)
    }

    #[test]
    fn veto_window_edges() {
        let alice = KeyIdentity::from_name("alice");
        let (mut w, _default, rival) = contested();
        let core = w.core;
        let p = w.params();
        let late = Veto::new(&alice, core, rival, 52);
        assert_eq!(register_veto(&mut w.branches, core, late, 52, &p, true), Err(LignificationError::OutOfWindow));
        let ok = Veto::new(&alice, core, rival, 49);
        assert_eq!(register_veto(&mut w.branches, core, ok, 49, &p, true), Ok(()));
        // arrival inside the buffer
        let bob = KeyIdentity::from_name("bob");
        let buffered = Veto::new(&bob, core, rival, 50);
        assert_eq!(register_veto(&mut w.branches, core, buffered, 51, &p, true), Ok(()));
        let carol = KeyIdentity::from_name("carol");
        let v = Veto::new(&carol, core, rival, 50);
        assert_eq!(register_veto(&mut w.branches, core, v, 52, &p, true), Err(LignificationError::OutOfWindow));
    }

    #[test]
    fn veto_rules() {
        let alice = KeyIdentity::from_name("alice");
        let (mut w, default, rival) = contested();
        let core = w.core;
        let p = w.params();
        let on_default = Veto::new(&alice, core, default, 5);
        assert_eq!(register_veto(&mut w.branches, core, on_default, 5, &p, true), Err(LignificationError::VetoOnDefault));
        let v = Veto::new(&alice, core, rival, 5);
        assert_eq!(register_veto(&mut w.branches, core, v.clone(), 5, &p, false), Err(LignificationError::NotContributor));
        let mut forged = v.clone();
        forged.tick = 6;
        assert_eq!(register_veto(&mut w.branches, core, forged, 6, &p, true), Err(LignificationError::BadSignature));

        let mut solo = world();
        let sc = solo.core;
        let only = solo.wrap("x", sc, 0);
        let v = Veto::new(&alice, sc, only, 1);
        let sp = solo.params();
        assert_eq!(register_veto(&mut solo.branches, sc, v, 1, &sp, true), Err(LignificationError::NoContest));
    }

    #[test]
    fn vote_requires_veto_and_window() {
        let alice = KeyIdentity::from_name("alice");
        let (mut w, default, rival) = contested();
        let core = w.core;
        let p = w.params();
        let early = Vote::new(&alice, core, rival, 3);
        assert_eq!(cast_vote(&mut w.branches, core, early, 3, &p, true), Err(LignificationError::VoteWithoutVeto));
        register_veto(&mut w.branches, core, Veto::new(&alice, core, rival, 4), 4, &p, true).unwrap();
        let v = Vote::new(&alice, core, rival, 110);
        assert_eq!(cast_vote(&mut w.branches, core, v, 110, &p, true), Ok(()));
        let v = Vote::new(&alice, core, default, 111);
        assert_eq!(cast_vote(&mut w.branches, core, v, 111, &p, true), Err(LignificationError::OutOfWindow));
        let v = Vote::new(&alice, core, default, 100);
        assert_eq!(cast_vote(&mut w.branches, core, v, 100, &p, false), Err(LignificationError::NotContributor));
        // replacing an earlier vote
        let v = Vote::new(&alice, core, default, 100);
        cast_vote(&mut w.branches, core, v, 100, &p, true).unwrap();
        let votes: usize = w.branches[&core].sprout_selection.iter().map(|e| e.votes.len()).sum();
        assert_eq!(votes, 1);
        assert_eq!(w.branches[&core].selection_entry(&default).unwrap().votes.len(), 1);
    }

    #[test]
    fn unvetoed_contest_sidelines_the_rival() {
        let (mut w, default, rival) = contested();
        let core = w.core;
        // trigger through the rival first
        w.wrap("r1", rival, 60);
        assert_eq!(w.head(core), submit("genesis"));
        assert_eq!(w.wraps[&rival].status, SproutStatus::Converted);
        assert_eq!(w.branches[&rival].parent_branch, core);
        assert_eq!(w.branches[&rival].branch_type(), BranchType::Proper);
        assert_eq!(w.branches[&rival].expected_id(), rival);
        w.wrap("d1", default, 61);
        assert_eq!(w.branches[&core].stable_head, w.branches[&default].stable_head);
        assert_eq!(w.wraps[&default].status, SproutStatus::Absorbed { into: core });
    }

    #[test]
    fn vetoed_contest_follows_the_vote() {
        let alice = KeyIdentity::from_name("alice");
        let bob = KeyIdentity::from_name("bob");
        let (mut w, default, rival) = contested();
        let core = w.core;
        let p = w.params();
        register_veto(&mut w.branches, core, Veto::new(&alice, core, rival, 10), 10, &p, true).unwrap();
        cast_vote(&mut w.branches, core, Vote::new(&alice, core, rival, 20), 20, &p, true).unwrap();
        cast_vote(&mut w.branches, core, Vote::new(&bob, core, rival, 21), 21, &p, true).unwrap();
        // voting closes after 0 + 50 + 60 + 1
        w.wrap("t0", rival, 111);
        assert_eq!(w.head(core), submit("genesis"));
        assert_eq!(w.wraps[&rival].status, SproutStatus::Pending);
        let rival_head = w.branches[&rival].stable_head;
        w.wrap("t1", rival, 112);
        assert_eq!(w.branches[&core].stable_head, rival_head);
        assert_eq!(w.wraps[&default].status, SproutStatus::Ousted { reference: core });
        // the ousted default converts only once targeted
        assert!(w.branches[&default].parent_branch.is_zero());
        w.wrap("late", default, 200);
        assert_eq!(w.wraps[&default].status, SproutStatus::Converted);
        assert_eq!(w.branches[&default].parent_branch, core);
        assert_eq!(finalize_ousted_sprout(&mut w.branches, &mut w.wraps, default), Err(LignificationError::AlreadyConverted(default)));
    }

    #[test]
    fn tie_goes_to_default() {
        let alice = KeyIdentity::from_name("alice");
        let bob = KeyIdentity::from_name("bob");
        let (mut w, default, rival) = contested();
        let core = w.core;
        let p = w.params();
        register_veto(&mut w.branches, core, Veto::new(&alice, core, rival, 10), 10, &p, true).unwrap();
        cast_vote(&mut w.branches, core, Vote::new(&alice, core, rival, 20), 20, &p, true).unwrap();
        cast_vote(&mut w.branches, core, Vote::new(&bob, core, default, 21), 21, &p, true).unwrap();
        let sel = w.branches[&core].sprout_selection.clone();
        let c = contest(&w.branches, &sel, &p).unwrap();
        assert_eq!(tally(&w.branches, &sel, &c), default);
    }

    #[test]
    fn premature_conversion_is_refused() {
        let mut w = world();
        let core = w.core;
        let s = w.wrap("m", core, 0);
        assert_eq!(finalize_ousted_sprout(&mut w.branches, &mut w.wraps, s), Err(LignificationError::PrematureConversion(s)));
    }

    #[test]
    fn rooting_must_match_head() {
        let mut w = world();
        let core = w.core;
        let err = wrap_merge_in_sprout(
            &mut w.branches,
            &mut w.wraps,
            submit("m"),
            submit("not-the-head"),
            KeyIdentity::from_name("a").public_key(),
            None,
            core,
            0,
        );
        assert!(matches!(err, Err(LignificationError::InvalidRooting { .. })));
    }

    #[test]
    fn decision_log_format() {
        let d = Decision { tick: 7, step: 1, branch: submit("x"), action: Action::Donate(submit("y")) };
        let line = d.to_string();
        let parts: Vec<&str> = line.split(' ').collect();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[0], "7");
        assert!(parts[3].starts_with("donate:"));
    }

    proptest! {
        #[test]
        fn heads_only_grow(ops in proptest::collection::vec((0usize..8, 0u64..40), 1..40)) {
            let mut w = world();
            let core = w.core;
            let mut now = 0;
            let mut history = vec![w.head(core)];
            let mut parents: BTreeMap<ContentId, ContentId> = BTreeMap::new();
            for (i, (pick, dt)) in ops.into_iter().enumerate() {
                now += dt;
                let mut roots: Vec<BranchId> = vec![core];
                roots.extend(w.wraps.values().filter(|s| s.status == SproutStatus::Pending).map(|s| s.sprout));
                let target = roots[pick % roots.len()];
                let parent = w.head(target);
                let tag = format!("m{i}");
                parents.insert(submit(&tag), parent);
                let creator = KeyIdentity::from_name("alice").public_key();
                let id = wrap_merge_in_sprout(&mut w.branches, &mut w.wraps, submit(&tag), parent, creator, None, target, now).unwrap();
                lignify(&mut w.branches, &mut w.wraps, id, now, &mut w.log).unwrap();
                let head = w.head(core);
                if head != *history.last().unwrap() {
                    // the new head descends from every earlier head
                    let mut chain = BTreeSet::new();
                    let mut c = head;
                    chain.insert(c);
                    while let Some(p) = parents.get(&c) {
                        chain.insert(*p);
                        c = *p;
                    }
                    for h in &history {
                        prop_assert!(chain.contains(h));
                    }
                    history.push(head);
                }
            }
        }

        #[test]
        fn lignify_is_deterministic(ticks in proptest::collection::vec(0u64..30, 1..12)) {
            let run = || {
                let mut w = world();
                let core = w.core;
                let mut now = 0;
                let mut last = core;
                for (i, dt) in ticks.iter().enumerate() {
                    now += dt;
                    let target = if i % 3 == 0 { core } else { last };
                    let target = resolve(&w.wraps, target);
                    if w.wraps.get(&target).is_some_and(|s| s.status != SproutStatus::Pending) {
                        continue;
                    }
                    last = w.wrap(&format!("m{i}"), target, now);
                }
                (w.branches, w.wraps, w.log)
            };
            prop_assert_eq!(run(), run());
        }
    }
}

//! Randomized multi-peer workloads for soak testing the simulator.
//!
//! Actors build transactions from their own peer's view, so many of them
//! are stale or invalid by the time they land. That is intended: the
//! interesting part is what the ledgers do with them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::branch::{first_parent_ids, BranchConfig, BranchId, BranchType};
use crate::client;
use crate::codec::ContentId;
use crate::ledger::Tx;
use crate::lignification::SproutStatus;
use crate::por::Verdict;
use crate::requests::Channel;
use crate::sim::{Latency, Sim, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadParams {
    pub seed: u64,
    pub events: u64,
    pub peers: usize,
    pub latency: Latency,
    pub config: BranchConfig,
    pub request_capacity: usize,
    /// Chance per tick that some peer leaves or rejoins.
    pub churn: f64,
}

impl WorkloadParams {
    pub fn new(seed: u64, events: u64) -> Self {
        WorkloadParams {
            seed,
            events,
            peers: 3,
            latency: Latency::Uniform(1, 3),
            config: BranchConfig {
                lignification_time: 6,
                engagement_time: 8,
                broadcasting_buffer: 3,
                ..BranchConfig::proper()
            },
            request_capacity: 4,
            churn: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkloadReport {
    pub events: u64,
    pub ticks: u64,
    pub transcript_hash: String,
    /// Lignified submits that later vanished from a peer's proper history.
    pub finality_violations: Vec<String>,
    pub lignified: usize,
    pub donations: usize,
    pub applied: usize,
    pub rejected: usize,
    pub replays: u64,
    pub requests_routed: usize,
    pub routing_mismatches: usize,
    pub max_queue: usize,
    pub capacity: usize,
    pub overflow: u64,
    /// Whether all peers ended with identical ledger state.
    pub converged: bool,
}

const NAMES: [&str; 6] = ["alice", "bob", "carol", "dave", "erin", "frank"];

struct Driver {
    sim: Sim,
    rng: ChaCha8Rng,
    proper: BranchId,
    twigs: Vec<(BranchId, usize)>,
    prs: Vec<ContentId>,
    seen: Vec<BTreeSet<ContentId>>,
    violations: Vec<String>,
}

impl Driver {
    fn build(&mut self, actor: usize) -> Option<Tx> {
        let now = self.sim.now;
        let who = self.sim.peers[actor].identity.clone();
        let choice = self.rng.gen_range(0..100);
        let proper = self.proper;
        let mine: Vec<BranchId> = self.twigs.iter().filter(|(_, o)| *o == actor).map(|(t, _)| *t).collect();
        let pr = self.prs.choose(&mut self.rng).copied();
        let pending: Vec<(BranchId, BranchId)> = {
            let st = &self.sim.peers[actor].ledger().state;
            st.wraps
                .values()
                .filter(|w| w.status == SproutStatus::Pending)
                .map(|w| (w.rooted_at, w.sprout))
                .collect()
        };
        let pick_twig = mine.choose(&mut self.rng).copied();
        let pick_sprout = pending.choose(&mut self.rng).copied();
        let rival = self.rng.gen_bool(0.3);
        let verdict = if self.rng.gen_bool(0.8) { Verdict::Accept } else { Verdict::Reject };
        let ledger = &mut self.sim.peers[actor].replica.ledger;
        let built = match choice {
            0..=14 => {
                let (tx, id) = client::rooted(ledger, &who, &proper, Some(BranchConfig::twig()), &format!("twig {now}"), now).ok()?;
                self.twigs.push((id, actor));
                Ok(tx)
            }
            15..=34 => client::push_text(ledger, &who, &pick_twig?, &format!("edit {now}"), now),
            35..=44 => {
                let twig = pick_twig?;
                let (tx, pr) = client::pull_request(ledger, &who, &twig, &twig, &proper, "pr", now).ok()?;
                self.prs.push(pr);
                Ok(tx)
            }
            45..=54 => client::commit_review(ledger, &who, &pr?, now),
            55..=69 => client::review(ledger, &who, &pr?, verdict, vec![], now),
            70..=84 => {
                let st = &ledger.state.reviews.get(&pr?)?.pr;
                let belt = st.requesting_branch;
                let rooted_at = if rival { pick_sprout.map(|(owner, _)| owner) } else { None };
                client::merge(ledger, &who, &proper, &belt, rooted_at, None, now)
            }
            85..=91 => {
                let (owner, sprout) = pick_sprout?;
                Ok(client::veto(&who, &owner, &sprout, now))
            }
            _ => {
                let (owner, sprout) = pick_sprout?;
                Ok(client::vote(&who, &owner, &sprout, now))
            }
        };
        built.ok()
    }

    fn check_finality(&mut self) {
        for (i, peer) in self.sim.peers.iter().enumerate() {
            let ledger = peer.ledger();
            let mut now = BTreeSet::new();
            for b in ledger.state.branches.values() {
                if b.branch_type() == BranchType::Proper && !b.stable_head.is_zero() {
                    if let Ok(ids) = first_parent_ids(&ledger.store, &b.stable_head) {
                        now.extend(ids);
                    }
                }
            }
            for lost in self.seen[i].difference(&now) {
                self.violations.push(format!("{} lost {} at {}", peer.name, lost.short(), self.sim.now));
            }
            self.seen[i] = now;
        }
    }
}

/// Runs a random workload until at least `params.events` events have been
/// processed, then drains the network.
pub fn run(params: &WorkloadParams) -> WorkloadReport {
    run_with_sim(params).0
}

/// Like [`run`], also handing back the drained simulator.
pub fn run_with_sim(params: &WorkloadParams) -> (WorkloadReport, Sim) {
    let names = &NAMES[..params.peers.clamp(2, NAMES.len())];
    let config = SimConfig {
        seed: params.seed,
        latency: params.latency,
        request_capacity: params.request_capacity,
        ..SimConfig::default()
    };
    let mut sim = Sim::new(config, names);
    let alice = sim.peers[0].identity.clone();
    let (tx, proper) = client::genesis(&mut sim.peers[0].replica.ledger, &alice, params.config.clone(), "root", 0)
        .expect("genesis builds");
    sim.submit(names[0], tx).expect("alice online");
    let mut d = Driver {
        sim,
        rng: ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed),
        proper,
        twigs: Vec::new(),
        prs: Vec::new(),
        seen: vec![BTreeSet::new(); names.len()],
        violations: Vec::new(),
    };
    let mut routed = 0;
    while d.sim.processed < params.events {
        d.sim.advance(1);
        d.check_finality();
        if d.rng.gen_bool(params.churn) {
            let i = d.rng.gen_range(1..names.len());
            if d.sim.peers[i].online {
                let _ = d.sim.leave(names[i]);
            } else {
                let _ = d.sim.join(names[i]);
            }
        }
        let online: Vec<usize> = (0..names.len()).filter(|&i| d.sim.peers[i].online).collect();
        for _ in 0..d.rng.gen_range(1..=2) {
            let actor = *online.choose(&mut d.rng).expect("alice never leaves");
            if d.rng.gen_bool(0.15) {
                let channel = *Channel::ALL.choose(&mut d.rng).expect("channels");
                let branch = if d.rng.gen_bool(0.8) { proper } else { ContentId::ZERO };
                let _ = d.sim.send_request(names[actor], branch, channel, "ping");
                routed += 1;
                continue;
            }
            if let Some(tx) = d.build(actor) {
                let _ = d.sim.submit(names[actor], tx);
            }
        }
        for p in &mut d.sim.peers {
            // peers work off part of their request backlog each tick
            for c in Channel::ALL {
                if d.rng.gen_bool(0.3) {
                    p.requests.dequeue(c);
                }
            }
        }
    }
    for name in names {
        let _ = d.sim.join(name);
    }
    d.sim.drain();
    d.check_finality();

    let first = &d.sim.peers[0].ledger().state;
    let converged = d.sim.peers.iter().all(|p| p.ledger().state.branches == first.branches);
    let mismatches = d
        .sim
        .routed
        .iter()
        .filter(|(k, to)| d.sim.delivered.get(*k).cloned().unwrap_or_default() != **to)
        .count();
    let lignified = d.seen[0].len();
    let donations = first.decisions.iter().filter(|x| matches!(x.action, crate::lignification::Action::Donate(_))).count();
    let by_peer: BTreeMap<_, _> = d.sim.peers.iter().map(|p| (p.name.clone(), p.replica.replays)).collect();
    let report = WorkloadReport {
        events: d.sim.processed,
        ticks: d.sim.now,
        transcript_hash: d.sim.transcript_hash(),
        finality_violations: d.violations,
        lignified,
        donations,
        applied: first.applied.len(),
        rejected: first.rejected.len(),
        replays: by_peer.values().sum(),
        requests_routed: routed,
        routing_mismatches: mismatches,
        max_queue: d.sim.max_queue,
        capacity: params.request_capacity,
        overflow: d.sim.peers.iter().map(|p| p.overflow).sum(),
        converged,
    };
    (report, d.sim)
}

//! Deterministic discrete-event simulation of peers sharing the ledger.
//!
//! Each peer keeps a replica: a log of transactions ordered by
//! `(tick, tx id)`. A late arrival is slotted into place and the ledger
//! replays from the nearest snapshot, so every peer that has seen the
//! same transactions holds the same state.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::branch::BranchId;
use crate::codec::{content_id, ContentId, Writer};
use crate::identity::KeyIdentity;
use crate::ledger::{Ledger, LedgerState, Tx};
use crate::requests::{BranchRequests, Channel, RequestError, DEFAULT_CAPACITY};
use crate::store::Store;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("peer {0} is offline")]
    Offline(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latency {
    Fixed(u64),
    Uniform(u64, u64),
}

impl Latency {
    pub fn max(&self) -> u64 {
        match *self {
            Latency::Fixed(k) => k.max(1),
            Latency::Uniform(a, b) => a.max(b).max(1),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        let v = match *self {
            Latency::Fixed(k) => k,
            Latency::Uniform(a, b) => rng.gen_range(a.min(b)..=a.max(b)),
        };
        v.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub latency: Latency,
    pub request_capacity: usize,
    pub snapshot_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, latency: Latency::Fixed(1), request_capacity: DEFAULT_CAPACITY, snapshot_every: 64 }
    }
}

const RECENT_SNAPSHOTS: usize = 32;

/// A peer's ordered transaction log and the ledger derived from it.
pub struct Replica {
    pub ledger: Ledger,
    log: Vec<Tx>,
    keys: Vec<(u64, ContentId)>,
    known: BTreeSet<ContentId>,
    snapshots: Vec<(usize, LedgerState)>,
    every: usize,
    pub replays: u64,
}

impl Replica {
    pub fn new(store: Store, snapshot_every: usize) -> Self {
        Replica {
            ledger: Ledger::new(store),
            log: Vec::new(),
            keys: Vec::new(),
            known: BTreeSet::new(),
            snapshots: Vec::new(),
            every: snapshot_every.max(1),
            replays: 0,
        }
    }

    pub fn log(&self) -> &[Tx] {
        &self.log
    }

    pub fn knows(&self, id: &ContentId) -> bool {
        self.known.contains(id)
    }

    /// Slots `tx` into the log without applying it. Returns its position,
    /// or `None` for a duplicate.
    fn place(&mut self, tx: Tx) -> Option<usize> {
        let id = tx.id();
        if !self.known.insert(id) {
            return None;
        }
        let key = (tx.tick, id);
        let pos = self.keys.partition_point(|k| *k < key);
        self.keys.insert(pos, key);
        self.log.insert(pos, tx);
        Some(pos)
    }

    pub fn insert(&mut self, tx: Tx) -> bool {
        match self.place(tx) {
            None => false,
            Some(pos) if pos + 1 == self.log.len() => {
                self.apply_at(pos);
                true
            }
            Some(pos) => {
                self.rebuild_from(pos);
                true
            }
        }
    }

    /// Inserts several transactions and replays once.
    pub fn insert_batch(&mut self, txs: Vec<Tx>) -> usize {
        let applied = self.log.len();
        let mut first: Option<usize> = None;
        let mut added = 0;
        for tx in txs {
            if let Some(pos) = self.place(tx) {
                added += 1;
                first = Some(first.map_or(pos, |f| f.min(pos)));
            }
        }
        match first {
            Some(pos) if pos >= applied => {
                for i in pos..self.log.len() {
                    self.apply_at(i);
                }
            }
            Some(pos) => self.rebuild_from(pos),
            None => {}
        }
        added
    }

    fn apply_at(&mut self, i: usize) {
        let tx = self.log[i].clone();
        let _ = self.ledger.apply(&tx);
        // every state near the tail is kept, older ones only at multiples
        // of `every`; late arrivals are usually only a few ticks late
        self.snapshots.push((i + 1, self.ledger.state.clone()));
        if self.snapshots.len() > RECENT_SNAPSHOTS {
            let k = self.snapshots.len() - 1 - RECENT_SNAPSHOTS;
            if self.snapshots[k].0 % self.every != 0 {
                self.snapshots.remove(k);
            }
        }
    }

    fn rebuild_from(&mut self, pos: usize) {
        self.replays += 1;
        while self.snapshots.last().is_some_and(|(n, _)| *n > pos) {
            self.snapshots.pop();
        }
        let (start, state) = self.snapshots.last().cloned().unwrap_or_default();
        self.ledger.state = state;
        for i in start..self.log.len() {
            self.apply_at(i);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub from: String,
    pub branch: BranchId,
    pub channel: Channel,
    pub body: String,
}

pub struct Peer {
    pub name: String,
    pub identity: KeyIdentity,
    pub online: bool,
    pub replica: Replica,
    pub requests: BranchRequests,
    deferred: Vec<Tx>,
    /// Requests delivered while this peer's queue was full.
    pub overflow: u64,
}

impl Peer {
    pub fn ledger(&self) -> &Ledger {
        &self.replica.ledger
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    Action { peer: usize, tx: Tx },
    Gossip { from: usize, to: usize, tx: Tx },
    Request { from: usize, to: usize, key: ContentId, request: Request },
}

#[derive(Debug, Clone)]
struct Event {
    tick: u64,
    key: ContentId,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.order() == other.order()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order().cmp(&other.order())
    }
}
impl Event {
    fn order(&self) -> (u64, ContentId, u64) {
        (self.tick, self.key, self.seq)
    }
}

fn event_key(kind: &EventKind) -> ContentId {
    let mut w = Writer::default();
    match kind {
        EventKind::Action { peer, tx } => {
            w.str("action");
            w.u64(*peer as u64);
            w.id(&tx.id());
        }
        EventKind::Gossip { from, to, tx } => {
            w.str("gossip");
            w.u64(*from as u64);
            w.u64(*to as u64);
            w.id(&tx.id());
        }
        EventKind::Request { from, to, key, request } => {
            w.str("request");
            w.id(key);
            w.u64(*from as u64);
            w.u64(*to as u64);
            w.id(&request.branch);
            w.str(request.channel.name());
            w.str(&request.body);
        }
    }
    content_id(&w.into_bytes())
}

pub struct Sim {
    pub config: SimConfig,
    pub peers: Vec<Peer>,
    pub now: u64,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    transcript: Vec<String>,
    /// Recipients chosen for each routed request, by request key.
    pub routed: BTreeMap<ContentId, BTreeSet<usize>>,
    /// Deliveries seen for each routed request.
    pub delivered: BTreeMap<ContentId, BTreeSet<usize>>,
    /// Largest queue length observed on any channel of any peer.
    pub max_queue: usize,
    pub processed: u64,
}

impl Sim {
    pub fn new(config: SimConfig, names: &[&str]) -> Self {
        let peers = names
            .iter()
            .map(|n| Peer {
                name: n.to_string(),
                identity: KeyIdentity::from_name(n),
                online: true,
                replica: Replica::new(Store::memory(), config.snapshot_every),
                requests: BranchRequests::with_capacity(config.request_capacity),
                deferred: Vec::new(),
                overflow: 0,
            })
            .collect();
        Sim {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            peers,
            now: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            transcript: Vec::new(),
            routed: BTreeMap::new(),
            delivered: BTreeMap::new(),
            max_queue: 0,
            processed: 0,
        }
    }

    pub fn peer_index(&self, name: &str) -> Result<usize, SimError> {
        self.peers.iter().position(|p| p.name == name).ok_or_else(|| SimError::UnknownPeer(name.to_string()))
    }

    pub fn peer(&self, name: &str) -> Result<&Peer, SimError> {
        Ok(&self.peers[self.peer_index(name)?])
    }

    pub fn peer_mut(&mut self, name: &str) -> Result<&mut Peer, SimError> {
        let i = self.peer_index(name)?;
        Ok(&mut self.peers[i])
    }

    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn transcript_hash(&self) -> String {
        let mut h = Sha256::new();
        for line in &self.transcript {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn log(&mut self, kind: &str, src: &str, dst: &str, summary: &str) {
        self.transcript.push(format!("{} {} {} {} {}", self.now, kind, src, dst, summary));
    }

    fn schedule(&mut self, tick: u64, kind: EventKind) {
        self.seq += 1;
        let key = event_key(&kind);
        self.queue.push(Reverse(Event { tick, key, seq: self.seq, kind }));
    }

    fn latency(&mut self) -> u64 {
        self.config.latency.sample(&mut self.rng)
    }

    /// Queues `tx` as a local action of `peer` at the current tick.
    pub fn submit(&mut self, peer: &str, tx: Tx) -> Result<(), SimError> {
        let i = self.peer_index(peer)?;
        if !self.peers[i].online {
            return Err(SimError::Offline(peer.to_string()));
        }
        self.schedule(self.now, EventKind::Action { peer: i, tx });
        Ok(())
    }

    pub fn leave(&mut self, peer: &str) -> Result<(), SimError> {
        let i = self.peer_index(peer)?;
        if self.peers[i].online {
            self.peers[i].online = false;
            self.log("leave", peer, "-", "");
        }
        Ok(())
    }

    /// Brings `peer` back online. Everything it missed is handed over in a
    /// single batch, so catching up replays at most once.
    pub fn join(&mut self, peer: &str) -> Result<(), SimError> {
        let i = self.peer_index(peer)?;
        if !self.peers[i].online {
            self.peers[i].online = true;
            let txs = std::mem::take(&mut self.peers[i].deferred);
            let n = self.peers[i].replica.insert_batch(txs);
            self.log("join", peer, "-", &format!("synced={n}"));
        }
        Ok(())
    }

    /// Sends a request about `branch` to every online contributor of it,
    /// as seen by the sender when routing. Returns the recipients.
    pub fn send_request(&mut self, from: &str, branch: BranchId, channel: Channel, body: &str) -> Result<Vec<String>, SimError> {
        let src = self.peer_index(from)?;
        let members = match self.peers[src].ledger().branch(&branch) {
            Some(_) => self.peers[src].ledger().contributors(&branch).map(|c| c.all_members()).unwrap_or_default(),
            None => {
                self.log("request-drop", from, "-", &format!("untracked {}", branch.short()));
                return Ok(Vec::new());
            }
        };
        let targets: Vec<usize> = (0..self.peers.len())
            .filter(|&i| self.peers[i].online && members.contains(&self.peers[i].identity.public_key()))
            .collect();
        let request = Request { from: from.to_string(), branch, channel, body: body.to_string() };
        let mut w = Writer::default();
        w.u64(self.now);
        w.u64(src as u64);
        w.id(&branch);
        w.str(channel.name());
        w.str(body);
        w.u64(self.seq);
        let rkey = content_id(&w.into_bytes());
        self.routed.entry(rkey).or_default().extend(targets.iter().copied());
        let names: Vec<String> = targets.iter().map(|&i| self.peers[i].name.clone()).collect();
        self.log("route", from, &names.join(","), &format!("{} {}", channel.name(), branch.short()));
        for to in targets {
            let at = self.now + self.latency();
            self.schedule(at, EventKind::Request { from: src, to, key: rkey, request: request.clone() });
        }
        Ok(names)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Processes the next event if it is due by `limit`. Returns whether
    /// one was processed.
    pub fn step(&mut self, limit: u64) -> bool {
        match self.queue.peek() {
            Some(Reverse(e)) if e.tick <= limit => {}
            _ => return false,
        }
        let Reverse(event) = self.queue.pop().expect("peeked");
        self.now = self.now.max(event.tick);
        self.processed += 1;
        self.process(event.kind);
        true
    }

    /// Processes everything due by `tick`, then moves the clock there.
    pub fn run_until(&mut self, tick: u64) {
        while self.step(tick) {}
        self.now = self.now.max(tick);
    }

    pub fn advance(&mut self, ticks: u64) {
        self.run_until(self.now + ticks);
    }

    /// Runs until no events remain.
    pub fn drain(&mut self) {
        while self.step(u64::MAX) {}
    }

    fn name(&self, i: usize) -> String {
        self.peers[i].name.clone()
    }

    fn process(&mut self, kind: EventKind) {
        match kind {
            EventKind::Action { peer, tx } => {
                let verdict = self.deliver(peer, tx.clone());
                let name = self.name(peer);
                self.log("action", &name, &name, &format!("{} {}", tx.summary(), verdict));
                for to in 0..self.peers.len() {
                    if to != peer {
                        let at = self.now + self.latency();
                        self.schedule(at, EventKind::Gossip { from: peer, to, tx: tx.clone() });
                    }
                }
            }
            EventKind::Gossip { from, to, tx } => {
                let (src, dst) = (self.name(from), self.name(to));
                if self.peers[to].online {
                    let verdict = self.deliver(to, tx.clone());
                    self.log("gossip", &src, &dst, &format!("{} {}", tx.summary(), verdict));
                } else {
                    self.peers[to].deferred.push(tx.clone());
                    self.log("defer", &src, &dst, &tx.summary());
                }
            }
            EventKind::Request { from, to, key, request } => {
                let (src, dst) = (self.name(from), self.name(to));
                self.delivered.entry(key).or_default().insert(to);
                let payload = serde_json::to_vec(&request).expect("request serializes");
                let peer = &mut self.peers[to];
                let outcome = match peer.requests.enqueue(request.channel, payload) {
                    Ok(()) => "queued".to_string(),
                    Err(RequestError::CapacityRejected(_)) => {
                        peer.overflow += 1;
                        "full".to_string()
                    }
                    Err(e) => e.to_string(),
                };
                self.max_queue = self.max_queue.max(peer.requests.len(request.channel));
                self.log("request", &src, &dst, &format!("{} {} {}", request.channel.name(), request.branch.short(), outcome));
            }
        }
    }

    fn deliver(&mut self, peer: usize, tx: Tx) -> String {
        let id = tx.id();
        let replica = &mut self.peers[peer].replica;
        if !replica.insert(tx) {
            return "dup".to_string();
        }
        match replica.ledger.state.rejected.iter().rev().find(|r| r.tx == id) {
            Some(r) if !replica.ledger.state.applied.contains(&id) => format!("rejected({})", r.reason),
            _ => "ok".to_string(),
        }
    }
}

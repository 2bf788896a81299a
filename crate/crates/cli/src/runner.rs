//! Executes a parsed scenario on the simulator and renders a run report.
//!
//! Every directive is built from the acting peer's view, submitted at the
//! current tick, and the network is drained before the next one starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lakat_core::branch::{BranchConfig, BranchId, BranchType};
use lakat_core::client::{self, ClientError};
use lakat_core::codec::ContentId;
use lakat_core::identity::{KeyIdentity, ProofKind};
use lakat_core::ledger::{submit_of, Ledger, Tx};
use lakat_core::lignification::{resolve, Action, Decision, SproutStatus};
use lakat_core::por::PrStatus;
use lakat_core::sim::Sim;
use serde::{Deserialize, Serialize};

use crate::scenario::{
    Directive, Expectation, Kind, KindName, MergeStep, Outcome, PrStatusName, Scenario, StatusName, Step, TypeName,
};

/// Names bound while running, mapped to their ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bindings {
    pub branches: BTreeMap<String, BranchId>,
    pub submits: BTreeMap<String, ContentId>,
    pub prs: BTreeMap<String, ContentId>,
}

impl Bindings {
    fn branch(&self, name: &str) -> Result<BranchId, String> {
        self.branches.get(name).copied().ok_or_else(|| format!("`{name}` was never bound"))
    }

    fn submit(&self, name: &str) -> Result<ContentId, String> {
        self.submits.get(name).copied().ok_or_else(|| format!("`{name}` was never bound"))
    }

    fn pr(&self, name: &str) -> Result<ContentId, String> {
        self.prs.get(name).copied().ok_or_else(|| format!("`{name}` was never bound"))
    }

    /// Name of a branch id, or its short form if unnamed.
    pub fn branch_name(&self, id: &BranchId) -> String {
        self.branches.iter().find(|(_, v)| *v == id).map_or_else(|| id.short(), |(k, _)| k.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssertionResult {
    pub line: usize,
    pub what: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchHeader {
    pub name: String,
    pub id: BranchId,
    pub kind: BranchType,
    pub parent: String,
    pub head: ContentId,
    pub stale: bool,
    pub status: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub transcript_hash: String,
    pub branches: Vec<BranchHeader>,
    pub decisions: Vec<String>,
    pub assertions: Vec<AssertionResult>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> usize {
        self.assertions.iter().filter(|a| !a.passed).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}", self.scenario);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "ticks {}", self.ticks);
        let _ = writeln!(out, "transcript {}", self.transcript_hash);
        let _ = writeln!(out, "branches");
        for b in &self.branches {
            let kind = match b.kind {
                BranchType::Proper => "proper",
                BranchType::Twig => "twig",
                BranchType::Sprout => "sprout",
            };
            let _ = write!(out, "  {} {} {} parent={} head={}", b.name, b.id.short(), kind, b.parent, b.head);
            if b.stale {
                out.push_str(" stale");
            }
            if let Some(s) = &b.status {
                let _ = write!(out, " status={s}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "decisions");
        for d in &self.decisions {
            let _ = writeln!(out, "  {d}");
        }
        let _ = writeln!(out, "assertions");
        for a in &self.assertions {
            let mark = if a.passed { "ok  " } else { "FAIL" };
            let _ = write!(out, "  {mark} line {} {}", a.line, a.what);
            if !a.passed {
                let _ = write!(out, ": {}", a.detail);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "result {}", if self.passed() { "pass" } else { "fail" });
        out
    }
}

pub struct World {
    pub sim: Sim,
    pub bindings: Bindings,
    assertions: Vec<AssertionResult>,
}

fn status_name(s: &SproutStatus) -> &'static str {
    match s {
        SproutStatus::Pending => "pending",
        SproutStatus::Absorbed { .. } => "absorbed",
        SproutStatus::Ousted { .. } => "ousted",
        SproutStatus::Converted => "converted",
    }
}

fn proof_kind(k: KindName) -> ProofKind {
    match k {
        KindName::Content => ProofKind::Content,
        KindName::Review => ProofKind::Review,
        KindName::Token => ProofKind::Token,
        KindName::Storage => ProofKind::Storage,
    }
}

impl World {
    pub fn new(scenario: &Scenario) -> Self {
        let names: Vec<&str> = scenario.actors.iter().map(|a| a.name.as_str()).collect();
        World { sim: Sim::new(scenario.sim_config.clone(), &names), bindings: Bindings::default(), assertions: Vec::new() }
    }

    fn record(&mut self, line: usize, what: String, result: Result<(), String>) {
        let passed = result.is_ok();
        let detail = result.err().unwrap_or_default();
        if passed {
            log::info!("line {line}: {what}");
        } else {
            log::warn!("line {line}: {what}: {detail}");
        }
        self.assertions.push(AssertionResult { line, what, passed, detail });
    }

    fn identity(&self, name: &str) -> Result<KeyIdentity, String> {
        self.sim.peer(name).map(|p| p.identity.clone()).map_err(|e| e.to_string())
    }

    /// Runs `build` against the actor's ledger, submits the result and
    /// drains. Returns the transaction and whether the actor applied it.
    fn act<F>(&mut self, by: &str, build: F) -> Result<(Tx, Result<(), String>), String>
    where
        F: FnOnce(&mut Ledger, &KeyIdentity, u64) -> Result<Tx, ClientError>,
    {
        let who = self.identity(by)?;
        let now = self.sim.now;
        let ledger = &mut self.sim.peer_mut(by).map_err(|e| e.to_string())?.replica.ledger;
        let tx = build(ledger, &who, now).map_err(|e| format!("could not build: {e}"))?;
        log::debug!("{by} submits {}", tx.summary());
        self.sim.submit(by, tx.clone()).map_err(|e| e.to_string())?;
        self.sim.drain();
        let id = tx.id();
        let st = &self.sim.peer(by).map_err(|e| e.to_string())?.ledger().state;
        let applied = if st.applied.contains(&id) {
            Ok(())
        } else {
            let reason = st.rejected.iter().rev().find(|r| r.tx == id).map_or("not applied".to_string(), |r| r.reason.clone());
            Err(reason)
        };
        Ok((tx, applied))
    }

    fn check_outcome(&mut self, line: usize, label: &str, expected: Outcome, result: Result<Result<(), String>, String>) -> bool {
        let got = match &result {
            Ok(Ok(())) => Outcome::Applied,
            _ => Outcome::Rejected,
        };
        let why = match result {
            Ok(Ok(())) => "applied".to_string(),
            Ok(Err(e)) | Err(e) => e,
        };
        let want = match expected {
            Outcome::Applied => "applied",
            Outcome::Rejected => "rejected",
        };
        let check = if got == expected { Ok(()) } else { Err(why) };
        self.record(line, format!("{label} {want}"), check);
        got == Outcome::Applied
    }

    pub fn run_step(&mut self, step: &Step) {
        let line = step.line;
        match &step.directive {
            Directive::CreateBranch(c) => {
                let base = match c.kind {
                    Kind::Proper => BranchConfig::proper(),
                    Kind::Twig => BranchConfig::twig(),
                };
                let config = c.config.apply(base);
                let parent = match c.parent.as_deref().map(|p| self.bindings.branch(p)).transpose() {
                    Ok(p) => p,
                    Err(e) => return self.record(line, format!("create {}", c.name), Err(e)),
                };
                let mut made = None;
                let result = self.act(&c.by, |l, who, t| {
                    let (tx, id) = match parent {
                        None => client::genesis(l, who, config, &c.text, t)?,
                        Some(p) => client::rooted(l, who, &p, Some(config), &c.text, t)?,
                    };
                    made = Some(id);
                    Ok(tx)
                });
                let ok = self.check_outcome(line, &format!("create {}", c.name), c.outcome, result.map(|(_, r)| r));
                if let (true, Some(id)) = (ok, made) {
                    self.bindings.branches.insert(c.name.clone(), id);
                }
            }
            Directive::Submit(s) => {
                let branch = match self.bindings.branch(&s.branch) {
                    Ok(b) => b,
                    Err(e) => return self.record(line, format!("submit to {}", s.branch), Err(e)),
                };
                let result = self.act(&s.by, |l, who, t| client::push_text(l, who, &branch, &s.text, t));
                if let Ok((tx, Ok(()))) = &result {
                    if let (Some(name), Some(id)) = (&s.name, submit_of(tx)) {
                        self.bindings.submits.insert(name.clone(), id);
                    }
                }
                self.check_outcome(line, &format!("submit to {}", s.branch), s.outcome, result.map(|(_, r)| r));
            }
            Directive::PullRequest(p) => {
                let ids = (|| {
                    let from = self.bindings.branch(&p.from)?;
                    let requesting = self.bindings.branch(p.requesting.as_deref().unwrap_or(&p.from))?;
                    Ok::<_, String>((from, requesting, self.bindings.branch(&p.to)?))
                })();
                let (from, requesting, to) = match ids {
                    Ok(v) => v,
                    Err(e) => return self.record(line, format!("pull request {}", p.name), Err(e)),
                };
                let mut container = None;
                let result = self.act(&p.by, |l, who, t| {
                    let (tx, c) = client::pull_request(l, who, &from, &requesting, &to, &p.text, t)?;
                    container = Some(c);
                    Ok(tx)
                });
                let ok = self.check_outcome(line, &format!("pull request {}", p.name), p.outcome, result.map(|(_, r)| r));
                if let (true, Some(c)) = (ok, container) {
                    self.bindings.prs.insert(p.name.clone(), c);
                }
            }
            Directive::CommitReview(c) => {
                let label = format!("commit {} to {}", c.by, c.pr);
                let pr = match self.bindings.pr(&c.pr) {
                    Ok(v) => v,
                    Err(e) => return self.record(line, label, Err(e)),
                };
                let result = self.act(&c.by, |l, who, t| client::commit_review(l, who, &pr, t));
                self.check_outcome(line, &label, c.outcome, result.map(|(_, r)| r));
            }
            Directive::Review(r) => {
                let label = format!("review of {} by {}", r.pr, r.by);
                let pr = match self.bindings.pr(&r.pr) {
                    Ok(v) => v,
                    Err(e) => return self.record(line, label, Err(e)),
                };
                let result = self.act(&r.by, |l, who, t| client::review(l, who, &pr, r.verdict, vec![], t));
                self.check_outcome(line, &label, r.outcome, result.map(|(_, r)| r));
            }
            Directive::Merge(m) => self.merge(line, m),
            Directive::Veto(b) | Directive::Vote(b) => {
                let is_veto = matches!(step.directive, Directive::Veto(_));
                let label = format!("{} by {} on {}", if is_veto { "veto" } else { "vote" }, b.by, b.sprout);
                let sprout = match self.bindings.branch(&b.sprout) {
                    Ok(v) => v,
                    Err(e) => return self.record(line, label, Err(e)),
                };
                let result = self.act(&b.by, |l, who, t| {
                    // the selection may have moved to whoever absorbed the rooting branch
                    let owner = l.state.wraps.get(&sprout).map_or(sprout, |w| resolve(&l.state.wraps, w.rooted_at));
                    Ok(if is_veto { client::veto(who, &owner, &sprout, t) } else { client::vote(who, &owner, &sprout, t) })
                });
                self.check_outcome(line, &label, b.outcome, result.map(|(_, r)| r));
            }
            Directive::AdvanceTicks(n) => {
                self.sim.advance(*n);
                log::info!("line {line}: now at tick {}", self.sim.now);
            }
            Directive::Expect(e) => {
                let what = describe(e);
                let result = self.expect(e);
                self.record(line, what, result);
            }
        }
    }

    fn merge(&mut self, line: usize, m: &MergeStep) {
        let label = format!("merge {} into {}", m.from, m.into);
        let ids = (|| {
            let into = self.bindings.branch(&m.into)?;
            let from = self.bindings.branch(&m.from)?;
            let rooted = m.rooted_at.as_deref().map(|r| self.bindings.branch(r)).transpose()?;
            let approvers = m.approvals.iter().map(|a| self.identity(a)).collect::<Result<Vec<_>, _>>()?;
            Ok::<_, String>((into, from, rooted, approvers))
        })();
        let (into, from, rooted, approvers) = match ids {
            Ok(v) => v,
            Err(e) => return self.record(line, label, Err(e)),
        };
        let result = self.act(&m.by, |l, who, t| {
            let is_twig = l.branch(&into).is_some_and(|b| b.branch_type() == BranchType::Twig);
            let base = l.branch(&into).map(|b| b.config.clone());
            let change = match (&m.config, base) {
                (Some(spec), Some(base)) => Some(spec.apply(base)),
                _ => None,
            };
            if is_twig {
                let refs: Vec<&KeyIdentity> = approvers.iter().collect();
                client::twig_merge(l, who, &into, &from, &refs, change.as_ref(), t)
            } else {
                client::merge(l, who, &into, &from, rooted, change.as_ref(), t)
            }
        });
        let mut bound = None;
        if let Ok((tx, Ok(()))) = &result {
            if let Some(submit) = submit_of(tx) {
                self.bindings.submits.insert(m.name.clone(), submit);
                let st = &self.sim.peer(&m.by).expect("actor exists").ledger().state;
                bound = Some(st.wraps.values().find(|w| w.merge_submit == submit).map_or(into, |w| w.sprout));
            }
        }
        if let Some(b) = bound {
            self.bindings.branches.insert(m.name.clone(), b);
        }
        self.check_outcome(line, &label, m.outcome, result.map(|(_, r)| r));
    }

    /// Checks `e` on every peer. All of them must agree with it.
    fn expect(&self, e: &Expectation) -> Result<(), String> {
        for peer in &self.sim.peers {
            self.expect_on(peer.ledger(), e).map_err(|why| format!("{}: {why}", peer.name))?;
        }
        Ok(())
    }

    fn expect_on(&self, l: &Ledger, e: &Expectation) -> Result<(), String> {
        let b = &self.bindings;
        let branch = |name: &str| {
            let id = b.branch(name)?;
            l.branch(&id).cloned().ok_or_else(|| format!("branch {name} unknown"))
        };
        match e {
            Expectation::Head { branch: name, is } => {
                let want = b.submit(is)?;
                let got = l.head_of(&b.branch(name)?).ok_or_else(|| format!("branch {name} unknown"))?;
                if got == want {
                    Ok(())
                } else {
                    Err(format!("head is {}", self.submit_name(&got)))
                }
            }
            Expectation::InHistory { branch: name, submit } => {
                let want = b.submit(submit)?;
                let head = l.head_of(&b.branch(name)?).ok_or_else(|| format!("branch {name} unknown"))?;
                let ids = lakat_core::branch::first_parent_ids(&l.store, &head).map_err(|e| e.to_string())?;
                if ids.contains(&want) {
                    Ok(())
                } else {
                    Err("not on the first-parent history".into())
                }
            }
            Expectation::Status { sprout, is } => {
                let id = b.branch(sprout)?;
                let w = l.state.wraps.get(&id).ok_or_else(|| format!("{sprout} is not a sprout"))?;
                let want = match is {
                    StatusName::Pending => "pending",
                    StatusName::Absorbed => "absorbed",
                    StatusName::Ousted => "ousted",
                    StatusName::Converted => "converted",
                };
                let got = status_name(&w.status);
                if got == want {
                    Ok(())
                } else {
                    Err(format!("status is {got}"))
                }
            }
            Expectation::Parent { branch: name, is } => {
                let got = branch(name)?.parent_branch;
                if got == b.branch(is)? {
                    Ok(())
                } else {
                    Err(format!("parent is {}", b.branch_name(&got)))
                }
            }
            Expectation::Type { branch: name, is } => {
                let got = branch(name)?.branch_type();
                let want = match is {
                    TypeName::Proper => BranchType::Proper,
                    TypeName::Twig => BranchType::Twig,
                    TypeName::Sprout => BranchType::Sprout,
                };
                if got == want {
                    Ok(())
                } else {
                    Err(format!("type is {got:?}"))
                }
            }
            Expectation::Stale { branch: name, is } => {
                let got = branch(name)?.stale;
                if got == *is {
                    Ok(())
                } else {
                    Err(format!("stale is {got}"))
                }
            }
            Expectation::PrStatus { pr, is } => {
                let st = l.state.reviews.get(&b.pr(pr)?).ok_or_else(|| format!("{pr} unknown"))?;
                let want = match is {
                    PrStatusName::Created => PrStatus::Created,
                    PrStatusName::Mature => PrStatus::Mature,
                    PrStatusName::UnderReview => PrStatus::UnderReview,
                    PrStatusName::Complete => PrStatus::Complete,
                };
                if st.pr.status == want {
                    Ok(())
                } else {
                    Err(format!("status is {:?}", st.pr.status))
                }
            }
            Expectation::Contributor { who, branch: name, kind, is } => {
                let key = self.identity(who)?.public_key();
                let set = l.contributors(&b.branch(name)?).map_err(|e| e.to_string())?;
                let got = set.contains(proof_kind(*kind), &key);
                if got == *is {
                    Ok(())
                } else {
                    Err(format!("membership is {got}"))
                }
            }
        }
    }

    /// `tick step branch action`, with bound names in place of ids.
    fn decision_line(&self, d: &Decision) -> String {
        let name = |id: &BranchId| self.bindings.branch_name(id);
        let action = match &d.action {
            Action::Wait => "wait".to_string(),
            Action::AwaitVotes => "await-votes".to_string(),
            Action::Donate(c) => format!("donate:{}", name(c)),
            Action::SideBranch(c) => format!("side-branch:{}", name(c)),
            Action::Finalize => "finalize".to_string(),
        };
        format!("{} {} {} {action}", d.tick, d.step, name(&d.branch))
    }

    fn submit_name(&self, id: &ContentId) -> String {
        self.bindings.submits.iter().find(|(_, v)| *v == id).map_or_else(|| id.short(), |(k, _)| k.clone())
    }

    pub fn report(&self, scenario: &str) -> RunReport {
        let first = &self.sim.peers[0].ledger().state;
        let mut assertions = self.assertions.clone();
        let diverged: Vec<&str> = self
            .sim
            .peers
            .iter()
            .filter(|p| p.ledger().state.branches != first.branches || p.ledger().state.wraps != first.wraps)
            .map(|p| p.name.as_str())
            .collect();
        assertions.push(AssertionResult {
            line: 0,
            what: "peers converged".into(),
            passed: diverged.is_empty(),
            detail: diverged.join(","),
        });
        let branches = first
            .branches
            .values()
            .map(|br| BranchHeader {
                name: self.bindings.branch_name(&br.branch_id),
                id: br.branch_id,
                kind: br.branch_type(),
                parent: if br.parent_branch.is_zero() { "-".into() } else { self.bindings.branch_name(&br.parent_branch) },
                head: br.stable_head,
                stale: br.stale,
                status: first.wraps.get(&br.branch_id).map(|w| status_name(&w.status).to_string()),
            })
            .collect();
        RunReport {
            scenario: scenario.to_string(),
            seed: self.sim.config.seed,
            ticks: self.sim.now,
            transcript_hash: self.sim.transcript_hash(),
            branches,
            decisions: first.decisions.iter().map(|d| self.decision_line(d)).collect(),
            assertions,
        }
    }
}

fn lower(v: &impl std::fmt::Debug) -> String {
    format!("{v:?}").to_lowercase()
}

fn describe(e: &Expectation) -> String {
    match e {
        Expectation::Head { branch, is } => format!("head of {branch} is {is}"),
        Expectation::InHistory { branch, submit } => format!("{submit} in history of {branch}"),
        Expectation::Status { sprout, is } => format!("{sprout} is {}", lower(is)),
        Expectation::Parent { branch, is } => format!("parent of {branch} is {is}"),
        Expectation::Type { branch, is } => format!("{branch} is {}", lower(is)),
        Expectation::Stale { branch, is } => format!("{branch} stale is {is}"),
        Expectation::PrStatus { pr, is } => format!("{pr} is {}", lower(is)),
        Expectation::Contributor { who, branch, kind, is } => {
            format!("{who} {} {} contributor of {branch}", if *is { "is" } else { "is not" }, lower(kind))
        }
    }
}

/// Runs every step of `scenario` and returns the final world and report.
pub fn run(scenario: &Scenario, name: &str) -> (World, RunReport) {
    let mut world = World::new(scenario);
    for step in &scenario.steps {
        world.run_step(step);
    }
    world.sim.drain();
    let report = world.report(name);
    (world, report)
}

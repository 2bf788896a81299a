//! Scenario files: a simulator config, named actors and a list of steps.
//!
//! Steps are parsed one by one from raw JSON slices so every error can be
//! pinned to a line and column of the original text.

use std::collections::BTreeSet;

use lakat_core::branch::{AcceptanceRule, BranchConfig, Ratio};
use lakat_core::por::Verdict;
use lakat_core::sim::SimConfig;
use serde::Deserialize;
use serde_json::value::RawValue;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{line}:{column}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actor {
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    #[default]
    Applied,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Proper,
    Twig,
}

/// Overrides on top of the default config for the branch type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSpec {
    pub accept_conflicts: Option<bool>,
    pub min_reviewers: Option<u64>,
    pub acceptance_rule: Option<AcceptanceRule>,
    pub min_review_rounds: Option<u64>,
    pub twig_merge_fraction: Option<Ratio>,
    pub lignification_time: Option<u64>,
    pub engagement_time: Option<u64>,
    pub broadcasting_buffer: Option<u64>,
    pub stale_after_merge: Option<bool>,
}

impl ConfigSpec {
    pub fn apply(&self, base: BranchConfig) -> BranchConfig {
        BranchConfig {
            accept_conflicts: self.accept_conflicts.unwrap_or(base.accept_conflicts),
            min_reviewers: self.min_reviewers.unwrap_or(base.min_reviewers),
            acceptance_rule: self.acceptance_rule.unwrap_or(base.acceptance_rule),
            min_review_rounds: self.min_review_rounds.unwrap_or(base.min_review_rounds),
            twig_merge_fraction: self.twig_merge_fraction.unwrap_or(base.twig_merge_fraction),
            lignification_time: self.lignification_time.unwrap_or(base.lignification_time),
            engagement_time: self.engagement_time.unwrap_or(base.engagement_time),
            broadcasting_buffer: self.broadcasting_buffer.unwrap_or(base.broadcasting_buffer),
            stale_after_merge: self.stale_after_merge.unwrap_or(base.stale_after_merge),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBranch {
    pub name: String,
    pub by: String,
    /// Absent for a genesis branch.
    pub parent: Option<String>,
    pub kind: Kind,
    #[serde(default)]
    pub config: ConfigSpec,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitStep {
    pub name: Option<String>,
    pub branch: String,
    pub by: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PullRequestStep {
    pub name: String,
    pub by: String,
    /// Twig carrying the request.
    pub from: String,
    /// Branch to be reviewed; defaults to `from`.
    pub requesting: Option<String>,
    pub to: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitStep {
    pub pr: String,
    pub by: String,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewStep {
    pub pr: String,
    pub by: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeStep {
    /// Names the merge submit and, for proper targets, its sprout.
    pub name: String,
    pub by: String,
    pub into: String,
    pub from: String,
    /// Branch or sprout to root the sprout at; the default tip if absent.
    pub rooted_at: Option<String>,
    /// Approvers for a twig merge.
    #[serde(default)]
    pub approvals: Vec<String>,
    pub config: Option<ConfigSpec>,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallotStep {
    pub by: String,
    pub sprout: String,
    #[serde(default)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusName {
    Pending,
    Absorbed,
    Ousted,
    Converted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeName {
    Proper,
    Twig,
    Sprout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrStatusName {
    Created,
    Mature,
    UnderReview,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    Content,
    Review,
    Token,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    /// Head of `branch` is the submit named `is`.
    Head { branch: String, is: String },
    /// The submit named `submit` lies on the first-parent history of `branch`.
    InHistory { branch: String, submit: String },
    Status { sprout: String, is: StatusName },
    Parent { branch: String, is: String },
    Type { branch: String, is: TypeName },
    Stale { branch: String, is: bool },
    PrStatus { pr: String, is: PrStatusName },
    Contributor {
        who: String,
        branch: String,
        kind: KindName,
        #[serde(default = "yes")]
        is: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Directive {
    CreateBranch(CreateBranch),
    Submit(SubmitStep),
    PullRequest(PullRequestStep),
    CommitReview(CommitStep),
    Review(ReviewStep),
    Merge(MergeStep),
    Veto(BallotStep),
    Vote(BallotStep),
    AdvanceTicks(u64),
    Expect(Expectation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub column: usize,
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub sim_config: SimConfig,
    pub actors: Vec<Actor>,
    pub steps: Vec<Step>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario<'a> {
    #[serde(default)]
    sim_config: SimConfig,
    #[serde(default)]
    actors: Vec<Actor>,
    #[serde(borrow, default)]
    steps: Vec<&'a RawValue>,
}

fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn shifted(e: &serde_json::Error, line: usize, column: usize) -> ScenarioError {
    let (l, c) = (e.line().max(1), e.column().max(1));
    let (line, column) = if l == 1 { (line, column + c - 1) } else { (line + l - 1, c) };
    let message = e.to_string();
    let message = message.rsplit_once(" at line ").map_or(message.clone(), |(m, _)| m.to_string());
    ScenarioError { line, column, message }
}

/// Tracks declared names so references can be checked in order.
#[derive(Default)]
struct Names {
    actors: BTreeSet<String>,
    branches: BTreeSet<String>,
    submits: BTreeSet<String>,
    prs: BTreeSet<String>,
}

impl Names {
    fn need(set: &BTreeSet<String>, what: &str, name: &str) -> Result<(), String> {
        if set.contains(name) {
            Ok(())
        } else {
            Err(format!("undeclared {what} `{name}`"))
        }
    }

    fn fresh(set: &mut BTreeSet<String>, what: &str, name: &str) -> Result<(), String> {
        if set.insert(name.to_string()) {
            Ok(())
        } else {
            Err(format!("{what} `{name}` declared twice"))
        }
    }

    fn check(&mut self, d: &Directive) -> Result<(), String> {
        let actor = |n: &Names, a: &str| Names::need(&n.actors, "actor", a);
        let branch = |n: &Names, b: &str| Names::need(&n.branches, "branch", b);
        match d {
            Directive::CreateBranch(c) => {
                actor(self, &c.by)?;
                if let Some(p) = &c.parent {
                    branch(self, p)?;
                }
                Names::fresh(&mut self.branches, "branch", &c.name)
            }
            Directive::Submit(s) => {
                actor(self, &s.by)?;
                branch(self, &s.branch)?;
                match &s.name {
                    Some(n) => Names::fresh(&mut self.submits, "submit", n),
                    None => Ok(()),
                }
            }
            Directive::PullRequest(p) => {
                actor(self, &p.by)?;
                branch(self, &p.from)?;
                branch(self, &p.to)?;
                if let Some(r) = &p.requesting {
                    branch(self, r)?;
                }
                Names::fresh(&mut self.prs, "pull request", &p.name)
            }
            Directive::CommitReview(c) => {
                actor(self, &c.by)?;
                Names::need(&self.prs, "pull request", &c.pr)
            }
            Directive::Review(r) => {
                actor(self, &r.by)?;
                Names::need(&self.prs, "pull request", &r.pr)
            }
            Directive::Merge(m) => {
                actor(self, &m.by)?;
                branch(self, &m.into)?;
                branch(self, &m.from)?;
                if let Some(r) = &m.rooted_at {
                    branch(self, r)?;
                }
                for a in &m.approvals {
                    actor(self, a)?;
                }
                Names::fresh(&mut self.submits, "submit", &m.name)?;
                // the sprout is addressable under the merge's name
                Names::fresh(&mut self.branches, "branch", &m.name)
            }
            Directive::Veto(b) | Directive::Vote(b) => {
                actor(self, &b.by)?;
                branch(self, &b.sprout)
            }
            Directive::AdvanceTicks(_) => Ok(()),
            Directive::Expect(e) => match e {
                Expectation::Head { branch: b, is } => {
                    branch(self, b)?;
                    Names::need(&self.submits, "submit", is)
                }
                Expectation::InHistory { branch: b, submit } => {
                    branch(self, b)?;
                    Names::need(&self.submits, "submit", submit)
                }
                Expectation::Status { sprout, .. } => branch(self, sprout),
                Expectation::Parent { branch: b, is } => {
                    branch(self, b)?;
                    branch(self, is)
                }
                Expectation::Type { branch: b, .. } | Expectation::Stale { branch: b, .. } => branch(self, b),
                Expectation::PrStatus { pr, .. } => Names::need(&self.prs, "pull request", pr),
                Expectation::Contributor { who, branch: b, .. } => {
                    actor(self, who)?;
                    branch(self, b)
                }
            },
        }
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = serde_json::from_str(text).map_err(|e| shifted(&e, 1, 1))?;
    let mut names = Names::default();
    for a in &raw.actors {
        Names::fresh(&mut names.actors, "actor", &a.name).map_err(|message| ScenarioError { line: 1, column: 1, message })?;
    }
    let mut steps = Vec::new();
    for raw_step in raw.steps {
        let slice = raw_step.get();
        let offset = slice.as_ptr() as usize - text.as_ptr() as usize;
        let (line, column) = position(text, offset);
        let directive: Directive = serde_json::from_str(slice).map_err(|e| shifted(&e, line, column))?;
        names.check(&directive).map_err(|message| ScenarioError { line, column, message })?;
        steps.push(Step { line, column, directive });
    }
    Ok(Scenario { sim_config: raw.sim_config, actors: raw.actors, steps })
}

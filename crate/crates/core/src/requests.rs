//! Branch requests: eight bounded staging channels per branch.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    SubmitRequests,
    PullRequests,
    ReviewCommits,
    ReviewSubmitRequests,
    SocialTransactions,
    TokenTransactions,
    StorageUpdates,
    BranchCreationBroadcast,
}

impl Channel {
    pub const ALL: [Channel; 8] = [
        Channel::SubmitRequests,
        Channel::PullRequests,
        Channel::ReviewCommits,
        Channel::ReviewSubmitRequests,
        Channel::SocialTransactions,
        Channel::TokenTransactions,
        Channel::StorageUpdates,
        Channel::BranchCreationBroadcast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::SubmitRequests => "submit_requests",
            Channel::PullRequests => "pull_requests",
            Channel::ReviewCommits => "review_commits",
            Channel::ReviewSubmitRequests => "review_submit_requests",
            Channel::SocialTransactions => "social_transactions",
            Channel::TokenTransactions => "token_transactions",
            Channel::StorageUpdates => "storage_updates",
            Channel::BranchCreationBroadcast => "branch_creation_broadcast",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = RequestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| RequestError::UnknownChannel(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("channel {0} is at capacity")]
    CapacityRejected(Channel),
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
}

/// Ephemeral per-branch staging area. Nothing here is hashed into state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchRequests {
    capacity: usize,
    queues: BTreeMap<Channel, VecDeque<Vec<u8>>>,
}

impl Default for BranchRequests {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY)
    }
}

impl BranchRequests {
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0, "channel capacity must be positive");
        BranchRequests { capacity, queues: Channel::ALL.iter().map(|c| (*c, VecDeque::new())).collect() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn enqueue(&mut self, channel: Channel, payload: Vec<u8>) -> Result<(), RequestError> {
        let q = self.queues.entry(channel).or_default();
        if q.len() >= self.capacity {
            return Err(RequestError::CapacityRejected(channel));
        }
        q.push_back(payload);
        Ok(())
    }

    pub fn dequeue(&mut self, channel: Channel) -> Option<Vec<u8>> {
        self.queues.get_mut(&channel).and_then(VecDeque::pop_front)
    }

    pub fn len(&self, channel: Channel) -> usize {
        self.queues.get(&channel).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    pub fn total(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

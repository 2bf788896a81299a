//! Lakat: a branch-based, content-addressed knowledge protocol with
//! lignification of contested branch heads.

pub mod bucket;
pub mod codec;
pub mod identity;
pub mod store;
pub mod trie;
pub mod branch;
pub mod por;
pub mod requests;
pub mod lignification;
pub mod ops;
pub mod ledger;
pub mod client;
pub mod sim;
pub mod workload;

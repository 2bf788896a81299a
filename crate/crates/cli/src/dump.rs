//! Writes a peer's state to a directory and checks it back.
//!
//! Layout: `headers.json` (branch headers), `state.json` (full ledger
//! state), `names.json`, `tries.json` (trie root of every branch head) and
//! `store/` (the record log and its index).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lakat_core::branch::{load_submit, verify_branch, Branch, BranchId};
use lakat_core::codec::ContentId;
use lakat_core::ledger::{Ledger, LedgerState};
use lakat_core::store::{RecordKind, Store, StoreError};
use thiserror::Error;

use crate::runner::Bindings;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json in {file}: {source}")]
    Json { file: String, source: serde_json::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("dump directory {0} already holds a store")]
    NotEmpty(String),
}

const HEADERS: &str = "headers.json";
const STATE: &str = "state.json";
const NAMES: &str = "names.json";
const TRIES: &str = "tries.json";
const STORE: &str = "store";

fn write_json<T: serde::Serialize>(dir: &Path, file: &str, value: &T) -> Result<(), DumpError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DumpError::Json { file: file.into(), source })?;
    fs::write(dir.join(file), text + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<T, DumpError> {
    let text = fs::read_to_string(dir.join(file))?;
    serde_json::from_str(&text).map_err(|source| DumpError::Json { file: file.into(), source })
}

/// Trie root of every branch head, keyed by branch.
pub fn trie_roots(ledger: &Ledger) -> BTreeMap<BranchId, ContentId> {
    ledger
        .state
        .branches
        .values()
        .filter_map(|b| load_submit(&ledger.store, &b.stable_head).ok().map(|s| (b.branch_id, s.trie_root)))
        .collect()
}

pub fn dump_state(ledger: &Ledger, bindings: &Bindings, dir: &Path) -> Result<(), DumpError> {
    fs::create_dir_all(dir)?;
    let store_dir = dir.join(STORE);
    if store_dir.exists() {
        return Err(DumpError::NotEmpty(dir.display().to_string()));
    }
    let headers: Vec<&Branch> = ledger.state.branches.values().collect();
    write_json(dir, HEADERS, &headers)?;
    write_json(dir, STATE, &ledger.state)?;
    write_json(dir, NAMES, bindings)?;
    write_json(dir, TRIES, &trie_roots(ledger))?;
    let mut out = Store::open_dir(&store_dir)?;
    for id in ledger.store.ids() {
        let rec = ledger.store.record(&id).expect("listed id");
        match rec.kind {
            RecordKind::Node => out.put_node(id, rec.bytes.clone())?,
            kind => {
                out.put_raw(kind, rec.bytes.clone())?;
            }
        }
    }
    Ok(())
}

pub struct Loaded {
    pub headers: Vec<Branch>,
    pub state: LedgerState,
    pub names: Bindings,
    pub tries: BTreeMap<BranchId, ContentId>,
    pub store: Store,
}

pub fn load_dump(dir: &Path) -> Result<Loaded, DumpError> {
    Ok(Loaded {
        headers: read_json(dir, HEADERS)?,
        state: read_json(dir, STATE)?,
        names: read_json(dir, NAMES)?,
        tries: read_json(dir, TRIES)?,
        store: Store::open_dir(dir.join(STORE))?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub lines: Vec<String>,
    pub failures: usize,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }

    fn check(&mut self, passed: bool, what: String) {
        if !passed {
            self.failures += 1;
        }
        self.lines.push(format!("{} {what}", if passed { "ok  " } else { "FAIL" }));
    }
}

/// Re-checks a dump: record integrity, every branch header, and that the
/// recorded trie roots match the head submits.
pub fn verify_dump(dir: &Path) -> Result<VerifyReport, DumpError> {
    let loaded = load_dump(dir)?;
    let mut report = VerifyReport { lines: Vec::new(), failures: 0 };
    let bad = loaded.store.verify_all();
    report.check(bad.is_empty(), format!("store records intact ({} bad)", bad.len()));
    let from_state: Vec<Branch> = loaded.state.branches.values().cloned().collect();
    report.check(from_state == loaded.headers, "headers match ledger state".into());
    for b in &loaded.headers {
        let name = loaded.names.branch_name(&b.branch_id);
        let verdict = verify_branch(&loaded.store, b);
        report.check(verdict.is_ok(), format!("branch {name} {}", verdict.code()));
        let root = load_submit(&loaded.store, &b.stable_head).map(|s| s.trie_root).ok();
        report.check(
            root.is_some() && root == loaded.tries.get(&b.branch_id).copied(),
            format!("trie root of {name}"),
        );
    }
    Ok(report)
}

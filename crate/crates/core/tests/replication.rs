//! End-to-end properties of replicated peers driven by the random workload.

use lakat_core::codec::LogicalTimestamp;
use lakat_core::ledger::Ledger;
use lakat_core::sim::Latency;
use lakat_core::store::{RecordKind, Store};
use lakat_core::workload::{self, WorkloadParams};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn short_workloads_converge_and_keep_finality(
        seed in any::<u64>(),
        peers in 2usize..=5,
        max_latency in 1u64..=3,
        churn in 0.0f64..0.2,
    ) {
        let mut p = WorkloadParams::new(seed, 300);
        p.peers = peers;
        p.latency = Latency::Uniform(1, max_latency);
        p.churn = churn;
        let r = workload::run(&p);
        prop_assert!(r.converged);
        prop_assert!(r.finality_violations.is_empty(), "{:?}", r.finality_violations);
        prop_assert_eq!(r.routing_mismatches, 0);
        prop_assert!(r.max_queue <= r.capacity);
        prop_assert_eq!(workload::run(&p).transcript_hash, r.transcript_hash);
    }
}

#[test]
fn replaying_a_peer_log_rebuilds_its_state() {
    let p = WorkloadParams::new(5, 400);
    let (report, sim) = workload::run_with_sim(&p);
    assert!(report.applied > 0);
    for peer in &sim.peers {
        let mut fresh = Ledger::new(Store::memory());
        for tx in peer.replica.log() {
            let _ = fresh.apply(tx);
        }
        assert_eq!(fresh.state, peer.ledger().state, "{}", peer.name);
    }
}

#[test]
fn directory_store_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<_> = {
        let mut store = Store::open_dir(dir.path()).unwrap();
        (0..20u64).map(|i| store.put_object(RecordKind::Other, &LogicalTimestamp::at(i)).unwrap()).collect()
    };
    let store = Store::open_dir(dir.path()).unwrap();
    assert!(store.verify_all().is_empty());
    for id in &ids {
        assert!(store.ids().contains(id));
    }
}

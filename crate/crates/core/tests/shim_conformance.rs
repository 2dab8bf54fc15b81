//! Behaviour every backend must show through the shim traits, checked
//! against the simulated one.

use std::cell::RefCell;
use std::future::Future;
use std::rc::Rc;

use proptest::prelude::*;

use crossflow::ir::InvokeMode;
use crossflow::naming::BranchStack;
use crossflow::runtime::{Control, Data, Envelope, Meta, Registry, RuntimeConfig};
use crossflow::shim::{
    Backend, DataStore, DsKind, DsSpec, FaasClient, FaasSpec, ShimError, StoredValue, TABLE_ITEM_LIMIT,
};
use crossflow::sim::topology::Outage;
use crossflow::sim::{FaultPlan, SimCloud, Topology};

fn cloud(plan: FaultPlan) -> SimCloud {
    SimCloud::configure_sim(Topology::two_platform(), plan, 5).unwrap()
}

/// Runs `f` on the simulator's executor to completion.
fn drive<T: 'static, F: Future<Output = T> + 'static>(sim: &SimCloud, f: F) -> T {
    let slot = Rc::new(RefCell::new(None));
    let out = slot.clone();
    sim.spawn(async move {
        *out.borrow_mut() = Some(f.await);
    });
    sim.run_until_quiescent(100_000).unwrap();
    slot.take().expect("future finished")
}

async fn ds(sim: &SimCloud, platform: &str, kind: DsKind) -> <crossflow::sim::cloud::SimBackend as Backend>::Ds {
    sim.client_backend(platform)
        .ds_create(&DsSpec::new(platform, kind))
        .await
        .unwrap()
}

#[test]
fn output_create_is_first_writer_wins() {
    let sim = cloud(FaultPlan::none());
    let s = sim.clone();
    let (first, second, read) = drive(&sim, async move {
        let d = ds(&s, "P1", DsKind::Table).await;
        let first = d.store_output_data("w/A-output", b"one").await.unwrap();
        let second = d.store_output_data("w/A-output", b"two").await.unwrap();
        (first, second, d.get_value("w/A-output").await.unwrap())
    });
    assert!(first);
    assert!(!second);
    assert_eq!(read, Some(StoredValue::Item(b"one".to_vec())));
}

#[test]
fn lists_append_with_set_semantics() {
    let sim = cloud(FaultPlan::none());
    let s = sim.clone();
    let (missing, created, again, list) = drive(&sim, async move {
        let d = ds(&s, "P2", DsKind::Table).await;
        let missing = d.append_and_get_list("w/A-ivk", &["x".into()]).await;
        let created = d.create_invocation_list("w/A-ivk").await.unwrap();
        let again = d.create_invocation_list("w/A-ivk").await.unwrap();
        d.append_and_get_list("w/A-ivk", &["b".into(), "a".into()])
            .await
            .unwrap();
        let list = d
            .append_and_get_list("w/A-ivk", &["a".into(), "c".into()])
            .await
            .unwrap();
        (missing, created, again, list)
    });
    assert!(matches!(missing, Err(ShimError::MissingList(_))));
    assert!(created && !again);
    assert_eq!(list, ["b", "a", "c"]);
}

#[test]
fn bitmap_completes_exactly_once() {
    let sim = cloud(FaultPlan::none());
    let s = sim.clone();
    let (states, out_of_range, missing) = drive(&sim, async move {
        let d = ds(&s, "P1", DsKind::Table).await;
        assert!(d.create_bitmap(3, "w/J-bitmap").await.unwrap());
        let mut states = Vec::new();
        for i in [2, 0, 1, 1, 0] {
            states.push(d.update_bitmap(i, "w/J-bitmap").await.unwrap());
        }
        let oor = d.update_bitmap(3, "w/J-bitmap").await;
        let missing = d.update_bitmap(0, "w/K-bitmap").await;
        (states, oor, missing)
    });
    assert_eq!(states[1].completed_by, None);
    assert!(states[2].all_set());
    for s in &states[2..] {
        assert_eq!(s.completed_by, Some(1));
    }
    assert!(matches!(
        out_of_range,
        Err(ShimError::IndexOutOfRange { index: 3, size: 3 })
    ));
    assert!(matches!(missing, Err(ShimError::MissingBitmap(_))));
}

#[test]
fn table_items_are_size_limited() {
    let sim = cloud(FaultPlan::none());
    let s = sim.clone();
    let (table, object) = drive(&sim, async move {
        let big = vec![0u8; TABLE_ITEM_LIMIT + 1];
        let t = ds(&s, "P1", DsKind::Table).await.store_output_data("k", &big).await;
        let o = ds(&s, "P1", DsKind::Object).await.store_output_data("k", &big).await;
        (t, o)
    });
    assert!(matches!(table, Err(ShimError::ValueTooLarge { .. })));
    assert_eq!(object, Ok(true));
}

#[test]
fn keys_list_sorted_by_prefix_and_delete() {
    let sim = cloud(FaultPlan::none());
    let s = sim.clone();
    let (before, deleted, twice, after) = drive(&sim, async move {
        let d = ds(&s, "P1", DsKind::Table).await;
        for k in ["w1/B-output", "w2/A-output", "w1/A-output"] {
            d.store_output_data(k, b"v").await.unwrap();
        }
        let before = d.list_keys("w1/").await.unwrap();
        let deleted = d.delete("w1/A-output").await.unwrap();
        let twice = d.delete("w1/A-output").await.unwrap();
        (before, deleted, twice, d.list_keys("w1/").await.unwrap())
    });
    assert_eq!(before, ["w1/A-output", "w1/B-output"]);
    assert!(deleted && !twice);
    assert_eq!(after, ["w1/B-output"]);
}

#[test]
fn outage_makes_platform_unavailable() {
    let plan = FaultPlan {
        outages: vec![Outage {
            platform_id: "P2".into(),
            start_event: 0,
            end_event: 1_000,
        }],
        ..FaultPlan::none()
    };
    let sim = cloud(plan);
    let s = sim.clone();
    let (p2, p1) = drive(&sim, async move {
        let p2 = s
            .client_backend("P1")
            .ds_create(&DsSpec::new("P2", DsKind::Table))
            .await
            .err();
        let p1 = ds(&s, "P1", DsKind::Table).await.store_output_data("k", b"v").await;
        (p2, p1)
    });
    assert!(matches!(&p2, Some(e) if e.triggers_failover()));
    assert_eq!(p1, Ok(true));
}

#[test]
fn missing_credentials_are_rejected() {
    let sim = cloud(FaultPlan::none());
    let s = sim.clone();
    let r = drive(&sim, async move {
        let mut spec = DsSpec::new("P1", DsKind::Table);
        spec.credentials.clear();
        s.client_backend("P1").ds_create(&spec).await.err()
    });
    assert!(matches!(r, Some(ShimError::MissingCredentials(_))));
}

fn envelope(payload: usize) -> Envelope {
    Envelope::new(
        Control {
            workflow_id: "w".into(),
            step: 0,
            branch: BranchStack::new(),
            session: "w".into(),
            invoke_mode: InvokeMode::Sequence,
        },
        Data::Direct {
            payload: vec![1; payload],
        },
        Meta::default(),
    )
}

#[test]
fn invoke_checks_payload_limit_and_deployment() {
    let doc = serde_json::json!({
        "name": "one", "platforms": {"P1": {"payloadLimitBytes": 262144}, "P2": {"payloadLimitBytes": 131072}},
        "functions": {"A": {"platform": "P2"}}, "edges": [], "entry": "A", "terminal": "A"
    });
    let def = crossflow::ir::parse_workflow_def(&doc.to_string()).unwrap();
    let set = crossflow::ir::compile_subgraphs(&def).unwrap();
    let sim = cloud(FaultPlan::none());
    sim.deploy(set, Registry::new(), RuntimeConfig::default()).unwrap();
    let s = sim.clone();
    let (limit, small, big, unknown) = drive(&sim, async move {
        let f = s.client_backend("P1").faas_create(&FaasSpec::new("P2")).await.unwrap();
        let small = f.async_invoke("A", &envelope(16)).await;
        let big = f.async_invoke("A", &envelope(200 * 1024)).await;
        let unknown = f.async_invoke("Z", &envelope(16)).await;
        (f.payload_limit(), small, big, unknown)
    });
    assert_eq!(limit, 131072);
    assert_eq!(small.unwrap().platform_id, "P2");
    assert!(matches!(big, Err(ShimError::PayloadTooLarge { limit: 131072, .. })));
    assert!(matches!(unknown, Err(e) if e.triggers_failover()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any batch sequence yields the first-occurrence order of its names.
    #[test]
    fn appends_match_a_dedup_model(batches in prop::collection::vec(prop::collection::vec("[a-e]", 0..4), 1..8)) {
        let mut model: Vec<String> = Vec::new();
        for b in &batches {
            for n in b {
                if !model.contains(n) {
                    model.push(n.clone());
                }
            }
        }
        let sim = cloud(FaultPlan::none());
        let s = sim.clone();
        let got = drive(&sim, async move {
            let d = ds(&s, "P1", DsKind::Table).await;
            d.create_invocation_list("l").await.unwrap();
            let mut last = Vec::new();
            for b in batches {
                let prev = last.clone();
                last = d.append_and_get_list("l", &b).await.unwrap();
                // Positions never move.
                assert_eq!(&last[..prev.len()], &prev[..]);
            }
            last
        });
        prop_assert_eq!(got, model);
    }
}

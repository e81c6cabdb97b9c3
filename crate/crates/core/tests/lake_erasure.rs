use std::path::Path;

use fabricfl_core::fabric::{blob_digest, CatalogFilter, FabricError, FaultPoint, Lake, SelectionRule};
use fabricfl_core::fed::{ClientMetrics, WeightUpdate};
use fabricfl_core::nn::{Payload, Tensor};
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

const CLIENTS: [&str; 3] = ["alice", "bob", "carol"];

fn update(client: &str, round: u64, seed: u64, acc: f64) -> WeightUpdate {
    WeightUpdate {
        client_id: client.into(),
        round,
        model_family: "mlp".into(),
        payload: Payload::Plain(vec![Tensor::vector(vec![seed as f64, round as f64, acc]).unwrap()]),
        scaling_factor: None,
        metrics: Some(ClientMetrics { accuracy: acc, loss: 1.0 - acc }),
    }
}

fn all_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn erased_client_leaves_no_trace(
        puts in prop::collection::vec((0usize..3, 0u64..4, 0.0f64..1.0), 1..20),
        victim in 0usize..3,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        let mut victim_ids = Vec::new();
        for (i, &(c, round, acc)) in puts.iter().enumerate() {
            match lake.put(&update(CLIENTS[c], round, i as u64, acc)) {
                Ok(e) if c == victim => victim_ids.push(e.entry_id),
                Ok(_) | Err(FabricError::Duplicate { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let name = CLIENTS[victim];
        let report = lake.erase_client(name).unwrap();
        prop_assert_eq!(report.erased(), victim_ids.len());

        let entries = lake.catalog_query(&CatalogFilter::default()).unwrap();
        prop_assert!(entries.iter().all(|e| e.client_id != name));

        for f in all_files(dir.path()) {
            let file_name = f.file_name().unwrap().to_string_lossy().into_owned();
            prop_assert!(!file_name.contains(name));
            if file_name.ends_with(".dfwu") {
                let digest = blob_digest(&std::fs::read(&f).unwrap());
                prop_assert!(!victim_ids.contains(&digest));
            }
        }

        for round in 0..4 {
            for rule in [SelectionRule::Fedmax, SelectionRule::Fedmin, SelectionRule::FedavgAll] {
                match lake.select_master(round, rule, None) {
                    Ok(m) => prop_assert!(m.entries.iter().all(|e| e.client_id != name)),
                    Err(FabricError::EmptyRound(_)) => {}
                    Err(e) => panic!("{e}"),
                }
            }
        }
        for id in &victim_ids {
            prop_assert!(matches!(lake.get(id), Err(FabricError::Erased(_))));
        }
    }
}

#[test]
fn faulted_put_is_never_visible() {
    for fault in [FaultPoint::AfterTempWrite, FaultPoint::AfterRename, FaultPoint::TornCatalogAppend] {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        let u = update("alice", 0, 1, 0.5);
        let id = blob_digest(&u.payload.to_blob());
        assert!(lake.put_with_fault(&u, fault).is_err());
        // Before recovery: the catalog does not show it.
        assert!(lake.catalog_query(&CatalogFilter::default()).unwrap().is_empty());
        assert!(matches!(lake.get(&id), Err(FabricError::NotFound(_))));
        // After recovery: nothing of it remains on disk either.
        let lake = Lake::open(dir.path()).unwrap();
        assert!(lake.files_for_client("alice").unwrap().is_empty(), "{fault:?}");
        assert!(lake.catalog_query(&CatalogFilter::default()).unwrap().is_empty());
    }
}

#[test]
fn concurrent_writers_on_distinct_keys() {
    let dir = tempfile::tempdir().unwrap();
    let lake = Lake::open(dir.path()).unwrap();
    std::thread::scope(|s| {
        for (c, name) in CLIENTS.iter().enumerate() {
            let lake = Lake::open(dir.path()).unwrap();
            s.spawn(move || {
                for round in 0..10 {
                    lake.put(&update(name, round, c as u64, 0.5)).unwrap();
                }
            });
        }
    });
    let entries = lake.catalog_query(&CatalogFilter::default()).unwrap();
    assert_eq!(entries.len(), 30);
    for e in &entries {
        assert_eq!(lake.get(&e.entry_id).unwrap().client_id, e.client_id);
    }
    let ingested = lake.lineage_records().unwrap().len();
    assert_eq!(ingested, 30);
}

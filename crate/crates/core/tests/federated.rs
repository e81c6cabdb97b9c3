use fabricfl_core::fabric::{CatalogFilter, Lake, Operation};
use fabricfl_core::fed::{
    aggregate_fedavg, aggregate_fedavg_encrypted, decrypt_aggregate, encrypt_tensors, run_session, AggregatorKind,
    SessionConfig, WeightUpdate,
};
use fabricfl_core::ingest::gen_synthetic;
use fabricfl_core::nn::{ModelKind, Payload, Tensor};
use fabricfl_core::phe::{FixedPointCodec, Keypair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(aggregator: AggregatorKind, rounds: u64) -> SessionConfig {
    SessionConfig {
        model: ModelKind::Logreg,
        aggregator,
        rounds,
        clients: 3,
        local_epochs: 1,
        learning_rate: 0.1,
        batch_size: 16,
        seed: 11,
        dataset_path: "synthetic:n=300".into(),
        lake_path: None,
        encrypt_features: false,
        key_bits: 256,
    }
}

#[test]
fn encrypted_fedavg_tracks_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kp = Keypair::generate(256, &mut rng).unwrap();
    let codec = FixedPointCodec::for_key(kp.public());
    let factors = [0.2, 0.3, 0.5];
    let weights: Vec<Vec<f64>> = (0..3).map(|_| (0..200).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let plain: Vec<WeightUpdate> = (0..3)
        .map(|i| WeightUpdate {
            client_id: format!("c{i}"),
            round: 0,
            model_family: "logreg".into(),
            payload: Payload::Plain(vec![Tensor::vector(weights[i].clone()).unwrap()]),
            scaling_factor: Some(factors[i]),
            metrics: None,
        })
        .collect();
    let encrypted: Vec<WeightUpdate> = plain
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let Payload::Plain(ts) = &u.payload else { unreachable!() };
            WeightUpdate {
                payload: Payload::Encrypted(encrypt_tensors(kp.public(), &codec, ts, i as u64).unwrap()),
                ..u.clone()
            }
        })
        .collect();
    let agg = aggregate_fedavg_encrypted(kp.public(), &codec, &encrypted).unwrap();
    let decrypted = decrypt_aggregate(&kp, &codec, &agg).unwrap();
    let plain_avg = aggregate_fedavg(&plain).unwrap();
    for e in 0..decrypted[0].len() {
        let oracle: f64 = factors.iter().zip(&weights).map(|(f, w)| f * w[e]).sum();
        assert!((decrypted[0].data()[e] - oracle).abs() < (-10f64).exp2());
        assert!((plain_avg[0].data()[e] - oracle).abs() < 1e-12);
    }
}

#[test]
fn separable_blobs_reach_high_accuracy() {
    let data = gen_synthetic(300, 8, 6.0, 1).unwrap();
    for agg in [AggregatorKind::Fedmax, AggregatorKind::Fedavg, AggregatorKind::Fedmin] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_session(&config(agg, 10), &data, &Lake::open(dir.path()).unwrap()).unwrap();
        let acc = out.reports.last().unwrap().global.as_ref().unwrap().accuracy;
        assert!(acc >= 0.95, "{agg}: {acc}");
    }
}

#[test]
fn every_update_lands_in_the_lake_with_lineage() {
    let data = gen_synthetic(120, 4, 6.0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let lake = Lake::open(dir.path()).unwrap();
    let out = run_session(&config(AggregatorKind::FedavgEncrypted, 5), &data, &lake).unwrap();
    let entries = lake.catalog_query(&CatalogFilter::default()).unwrap();
    assert_eq!(entries.len(), 15);
    assert!(entries.iter().all(|e| e.encrypted));
    let reported: Vec<&str> = out.reports.iter().flat_map(|r| r.clients.iter().map(|c| c.entry_id.as_str())).collect();
    for e in &entries {
        assert!(reported.contains(&e.entry_id.as_str()));
    }
    let aggregated = lake
        .lineage_records()
        .unwrap()
        .iter()
        .filter(|l| l.operation == Operation::AggregatedInto)
        .count();
    assert_eq!(aggregated, 15);
}

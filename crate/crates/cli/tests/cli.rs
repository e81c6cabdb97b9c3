use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fabricfl_core::experiment::{read_final_report, read_keypair, read_public_key};
use fabricfl_core::fabric::{CatalogFilter, Lake};
use fabricfl_core::ingest::{read_features, read_manifest, write_pgm, ImageSample, FEATURES_FILE, MANIFEST_FILE};
use fabricfl_core::phe::{FixedPointCodec, Randomness, SessionSeed};

fn fabricfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fabricfl"))
        .env_remove("FABRICFL_LAKE")
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("session.json");
    std::fs::write(&path, body).unwrap();
    path
}

const BLOBS: &str = r#"{"model":"logreg","aggregator":"fedmax","rounds":5,"clients":3,
    "learning_rate":0.1,"seed":9,"dataset_path":"synthetic:n=300,sep=6"}"#;

fn train_blobs(dir: &Path) -> PathBuf {
    let config = write_config(dir, BLOBS);
    let out = dir.join("run");
    let o = fabricfl(&["train", "--config", p(&config), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn data_rows(listing: &str) -> Vec<&str> {
    listing.lines().skip(1).filter(|l| !l.trim().is_empty()).collect()
}

#[test]
fn keygen_writes_loadable_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o = fabricfl(&["keygen", "--bits", "512", "--out", p(dir.path())]);
    assert!(o.status.success());
    let pk = read_public_key(&dir.path().join("key.pub")).unwrap();
    let kp = read_keypair(&dir.path().join("key.sec")).unwrap();
    assert_eq!(pk, *kp.public());
    assert!(stdout(&o).contains(&pk.key_id().to_hex()));
    let codec = FixedPointCodec::for_key(&pk);
    let m = codec.encode(-12.5).unwrap();
    let c = pk.encrypt(&m, Randomness::Deterministic(&SessionSeed::from_u64(1))).unwrap();
    assert_eq!(codec.decode(&kp.decrypt(&c).unwrap()), -12.5);
}

#[test]
fn keygen_rejects_tiny_keys() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fabricfl(&["keygen", "--bits", "8", "--out", p(dir.path())]).status.code(), Some(2));
    assert!(!dir.path().join("key.pub").exists());
}

#[test]
fn repeated_keygen_gives_distinct_keys() {
    let dir = tempfile::tempdir().unwrap();
    let ids: HashSet<String> = (0..20)
        .map(|i| {
            let out = dir.path().join(i.to_string());
            let o = fabricfl(&["keygen", "--bits", "256", "--out", p(&out)]);
            assert!(o.status.success());
            read_public_key(&out.join("key.pub")).unwrap().key_id().to_hex()
        })
        .collect();
    assert_eq!(ids.len(), 20);
}

#[test]
fn seeded_keygen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = fabricfl(&["keygen", "--bits", "128", "--seed", "3", "--out", p(&dir.path().join("a"))]);
    let b = fabricfl(&["keygen", "--bits", "128", "--seed", "3", "--out", p(&dir.path().join("b"))]);
    let first = |o: &Output| stdout(o).lines().next().unwrap().to_string();
    assert_eq!(first(&a), first(&b));
}

fn fixture(dir: &Path) -> PathBuf {
    let root = dir.join("images");
    for (i, (class, label)) in [("tumor", 1u8), ("tumor", 1), ("notumor", 0), ("notumor", 0)].iter().enumerate() {
        std::fs::create_dir_all(root.join(class)).unwrap();
        let side = 8 + 4 * i;
        let img = ImageSample {
            width: side,
            height: side,
            pixels: (0..side * side).map(|k| ((k * 37 + i) % 256) as u8).collect(),
            label: *label,
            source_id: format!("img{i}"),
        };
        write_pgm(&root.join(class).join(format!("img{i}.pgm")), &img).unwrap();
    }
    root
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for class in ["tumor", "notumor"] {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join(class)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        out.extend(files.into_iter().map(|f| {
            let bytes = std::fs::read(&f).unwrap();
            (f, bytes)
        }));
    }
    out
}

#[test]
fn prepare_plain_features() {
    let dir = tempfile::tempdir().unwrap();
    let images = fixture(dir.path());
    let before = snapshot(&images);
    let out = dir.path().join("prepared");
    let o = fabricfl(&["prepare", "--data", p(&images), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_manifest(&out.join(MANIFEST_FILE)).unwrap().len(), 4);
    let data = read_features(&out.join(FEATURES_FILE)).unwrap();
    assert_eq!(data.dim(), 128 * 128);
    let all = data.features.iter().flatten();
    assert!(all.clone().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(snapshot(&images), before);
}

#[test]
fn prepare_encrypted_features_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let images = fixture(dir.path());
    let keys = dir.path().join("keys");
    assert!(fabricfl(&["keygen", "--bits", "256", "--out", p(&keys)]).status.success());
    let key = keys.join("key.pub");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fabricfl(&["prepare", "--data", p(&images), "--out", p(&out), "--encrypt", "--key", p(&key), "--seed", "4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join(FEATURES_FILE)).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    let plain = fabricfl(&["prepare", "--data", p(&images), "--out", p(&dir.path().join("plain"))]);
    assert!(plain.status.success());
    assert_ne!(run("c"), std::fs::read(dir.path().join("plain").join(FEATURES_FILE)).unwrap());
}

#[test]
fn prepare_usage_and_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let images = fixture(dir.path());
    let out = dir.path().join("out");
    assert_eq!(fabricfl(&["prepare", "--data", p(&images), "--out", p(&out), "--encrypt"]).status.code(), Some(2));
    std::fs::write(images.join("tumor").join("broken.pgm"), b"P5\n2 2\n255\n\x00").unwrap();
    let o = fabricfl(&["prepare", "--data", p(&images), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.pgm"));
    assert_eq!(read_manifest(&out.join(MANIFEST_FILE)).unwrap().len(), 4);
}

#[test]
fn train_populates_lake_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_blobs(dir.path());
    for r in 0..5 {
        assert!(out.join(format!("round-{r:03}.json")).is_file());
    }
    let report = read_final_report(&out).unwrap();
    assert!(report.evaluation.unwrap().accuracy >= 0.95);
    let lake = Lake::open(out.join("lake")).unwrap();
    assert_eq!(lake.catalog_query(&CatalogFilter::default()).unwrap().len(), 15);
    let listing = fabricfl(&["lake", "--lake", p(&out.join("lake")), "list"]);
    assert_eq!(data_rows(&stdout(&listing)).len(), 15);
}

#[test]
fn train_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = fabricfl(&["train", "--config", p(&dir.path().join("nope.json")), "--out", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = write_config(dir.path(), &BLOBS.replace("fedmax", "fedmedian"));
    assert_eq!(fabricfl(&["train", "--config", p(&bad), "--out", "x"]).status.code(), Some(2));
    let zero = write_config(dir.path(), &BLOBS.replace("\"rounds\":5", "\"rounds\":0"));
    assert_eq!(fabricfl(&["train", "--config", p(&zero), "--out", "x"]).status.code(), Some(2));

    // A second run into the same lake collides with the stored round 0.
    let out = train_blobs(dir.path());
    let config = write_config(dir.path(), BLOBS);
    let again = fabricfl(&["train", "--config", p(&config), "--out", p(&dir.path().join("again")), "--lake", p(&out.join("lake"))]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("round 0"));
}

#[test]
fn lake_list_on_empty_lake_prints_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = fabricfl(&["lake", "--lake", p(dir.path()), "list"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("entry_id"));
}

#[test]
fn lake_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_blobs(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_fabricfl"))
        .env("FABRICFL_LAKE", out.join("lake"))
        .args(["lake", "list", "--round", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(data_rows(&stdout(&o)).len(), 3);
}

#[test]
fn lake_erase_then_list() {
    let dir = tempfile::tempdir().unwrap();
    let lake_dir = train_blobs(dir.path()).join("lake");
    let erase = fabricfl(&["lake", "--lake", p(&lake_dir), "erase", "--client", "client-001"]);
    assert!(erase.status.success());
    assert!(stdout(&erase).contains("5 entries erased"));
    let listing = stdout(&fabricfl(&["lake", "--lake", p(&lake_dir), "list"]));
    let rows = data_rows(&listing);
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| !r.contains("client-001")));
}

#[test]
fn lake_master_prints_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let lake_dir = train_blobs(dir.path()).join("lake");
    let o = fabricfl(&["lake", "--lake", p(&lake_dir), "master", "--round", "2", "--rule", "fedmax"]);
    assert!(o.status.success());
    let rows: Vec<String> = data_rows(&stdout(&o)).into_iter().map(String::from).collect();
    assert_eq!(rows.len(), 1);
    let lake = Lake::open(&lake_dir).unwrap();
    let mut round = lake
        .catalog_query(&CatalogFilter {
            round: Some(2),
            ..Default::default()
        })
        .unwrap();
    round.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.client_id.cmp(&b.client_id)));
    assert!(rows[0].starts_with(&round[0].entry_id));
}

#[test]
fn lake_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fabricfl(&["lake", "--lake", p(dir.path()), "compact"]).status.code(), Some(2));
    assert_eq!(fabricfl(&["lake", "list"]).status.code(), Some(2));
    assert_eq!(
        fabricfl(&["lake", "--lake", p(dir.path()), "master", "--round", "0", "--rule", "best"]).status.code(),
        Some(2)
    );
    assert_eq!(fabricfl(&["lake", "--lake", p(&dir.path().join("absent")), "list"]).status.code(), Some(1));
}

#[test]
fn report_summarises_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_blobs(dir.path());
    let roc = dir.path().join("roc.csv");
    let o = fabricfl(&["report", "--run", p(&out), "--roc-csv", p(&roc)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rounds = text
        .lines()
        .filter(|l| l.split_whitespace().next().is_some_and(|t| t.parse::<u64>().is_ok()))
        .count();
    assert_eq!(rounds, 5);
    assert!(std::fs::read_to_string(&roc).unwrap().starts_with("fpr,tpr\n"));
}

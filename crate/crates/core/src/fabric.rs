//! Filesystem data lake for weight updates.
//!
//! ```text
//! <lake>/catalog.ndjson                    append-only entry records
//! <lake>/lineage.ndjson                    append-only lineage events
//! <lake>/<family>/round-<R>/<client>.dfwu  one blob per update
//! ```
//!
//! The catalog is append-only; for each entry the latest record wins, so
//! erasure appends a tombstone. Blobs are written to a temp file and
//! renamed into place before their catalog record is appended, and
//! [`Lake::open`] removes whatever an interrupted write left behind.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fed::{ClientMetrics, WeightUpdate};
use crate::nn::{NnError, Payload};

pub const CATALOG_FILE: &str = "catalog.ndjson";
pub const LINEAGE_FILE: &str = "lineage.ndjson";
pub const BLOB_EXTENSION: &str = "dfwu";
const TEMP_MARKER: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum FabricError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid {what} {value:?}")]
    InvalidName { what: &'static str, value: String },
    #[error("update for client {client_id} round {round} family {family} already stored")]
    Duplicate { family: String, round: u64, client_id: String },
    #[error("no entry {0}")]
    NotFound(String),
    #[error("entry {0} has been erased")]
    Erased(String),
    #[error("blob for entry {0} does not match its digest")]
    Corrupt(String),
    #[error("update has no metrics")]
    MissingMetrics,
    #[error("catalog line {line}: {message}")]
    Catalog { line: usize, message: String },
    #[error("round {0} has no entries")]
    EmptyRound(u64),
    #[error("unknown selection rule {0:?}")]
    UnknownRule(String),
    #[error("injected fault at {0:?}")]
    InjectedFault(FaultPoint),
    #[error(transparent)]
    Blob(#[from] NnError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FabricError + '_ {
    move |source| FabricError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One catalog record. `path` is relative to the lake root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LakeEntry {
    pub entry_id: String,
    pub model_family: String,
    pub client_id: String,
    pub round: u64,
    pub path: String,
    pub encrypted: bool,
    pub created_at: DateTime<Utc>,
    pub accuracy: f64,
    pub loss: f64,
    pub tombstone: bool,
}

impl LakeEntry {
    pub fn metrics(&self) -> ClientMetrics {
        ClientMetrics {
            accuracy: self.accuracy,
            loss: self.loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Ingested,
    SelectedMaster,
    AggregatedInto,
    Erased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub subject: String,
    pub operation: Operation,
    pub related: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionRule {
    #[serde(rename = "fedmax")]
    Fedmax,
    #[serde(rename = "fedmin")]
    Fedmin,
    #[serde(rename = "fedavg-all")]
    FedavgAll,
}

impl std::str::FromStr for SelectionRule {
    type Err = FabricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedmax" => Ok(SelectionRule::Fedmax),
            "fedmin" => Ok(SelectionRule::Fedmin),
            "fedavg-all" | "fedavg" => Ok(SelectionRule::FedavgAll),
            _ => Err(FabricError::UnknownRule(s.to_string())),
        }
    }
}

/// Entries chosen as a round's master data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasterDataSet {
    pub round: u64,
    pub rule: SelectionRule,
    pub entries: Vec<LakeEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CatalogFilter {
    pub model_family: Option<String>,
    pub client_id: Option<String>,
    pub round: Option<u64>,
    pub encrypted: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseOutcome {
    pub entry_id: String,
    pub path: String,
    /// False when the unlink failed; the tombstone is still written and the
    /// unlink is retried on the next open.
    pub blob_removed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EraseReport {
    pub client_id: String,
    pub outcomes: Vec<EraseOutcome>,
}

impl EraseReport {
    pub fn erased(&self) -> usize {
        self.outcomes.len()
    }
}

/// Where [`Lake::put_with_fault`] stops, simulating a crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultPoint {
    /// Temp file written, not yet renamed.
    AfterTempWrite,
    /// Blob renamed into place, catalog record not yet appended.
    AfterRename,
    /// Catalog line partially written.
    TornCatalogAppend,
}

/// Open handle on a lake. Handles on the same root share one writer lock.
#[derive(Clone, Debug)]
pub struct Lake {
    root: PathBuf,
    writer: Arc<Mutex<()>>,
}

fn writer_lock(root: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let mut locks = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    locks.entry(root.to_path_buf()).or_default().clone()
}

fn validate_name(what: &'static str, value: &str) -> Result<(), FabricError> {
    let ok = !value.is_empty()
        && value.len() <= 128
        && !value.starts_with('.')
        && value.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(FabricError::InvalidName {
            what,
            value: value.to_string(),
        })
    }
}

pub fn blob_digest(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

fn now() -> DateTime<Utc> {
    // Whole-second precision keeps the catalog readable.
    DateTime::parse_from_rfc3339(&Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true))
        .expect("own timestamp parses")
        .with_timezone(&Utc)
}

fn append_line(path: &Path, line: &str) -> Result<(), FabricError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut bytes = line.as_bytes().to_vec();
    bytes.push(b'\n');
    f.write_all(&bytes).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// Parses newline-terminated records. An unterminated final line is an
/// append still in progress (or torn by a crash) and is skipped.
fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FabricError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FabricError::Catalog {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn sync_dir(dir: &Path) {
    // Not every platform can fsync a directory; durability of the rename is
    // best effort there.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn overwrite_and_remove(path: &Path) -> io::Result<()> {
    let len = fs::metadata(path)?.len();
    {
        let mut f = OpenOptions::new().write(true).open(path)?;
        let zeros = vec![0u8; 64 * 1024];
        let mut left = len;
        while left > 0 {
            let n = left.min(zeros.len() as u64) as usize;
            f.write_all(&zeros[..n])?;
            left -= n as u64;
        }
        f.sync_all()?;
    }
    fs::remove_file(path)
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        if ty.is_dir() {
            walk_files(&entry.path(), out)?;
        } else if ty.is_file() {
            out.push(entry.path());
        }
    }
    Ok(())
}

impl Lake {
    /// Opens (creating if needed) the lake at `root` and recovers from any
    /// interrupted writes or erasures.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, FabricError> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(io_err(root))?;
        let root = root.canonicalize().map_err(io_err(root))?;
        let lake = Lake {
            writer: writer_lock(&root),
            root,
        };
        lake.recover()?;
        Ok(lake)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn catalog_path(&self) -> PathBuf {
        self.root.join(CATALOG_FILE)
    }

    fn lineage_path(&self) -> PathBuf {
        self.root.join(LINEAGE_FILE)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Latest record per entry, in catalog order.
    fn current_records(&self) -> Result<Vec<LakeEntry>, FabricError> {
        let mut latest: BTreeMap<(String, String), (usize, LakeEntry)> = BTreeMap::new();
        for (i, rec) in read_records::<LakeEntry>(&self.catalog_path())?.into_iter().enumerate() {
            let key = (rec.path.clone(), rec.entry_id.clone());
            let first_seen = latest.get(&key).map_or(i, |(pos, _)| *pos);
            latest.insert(key, (first_seen, rec));
        }
        let mut out: Vec<(usize, LakeEntry)> = latest.into_values().collect();
        out.sort_by_key(|(pos, _)| *pos);
        Ok(out.into_iter().map(|(_, r)| r).collect())
    }

    fn recover(&self) -> Result<(), FabricError> {
        let _guard = self.lock();
        let catalog = self.catalog_path();
        if let Ok(text) = fs::read(&catalog) {
            if !text.is_empty() && !text.ends_with(b"\n") {
                let keep = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                let f = OpenOptions::new().write(true).open(&catalog).map_err(io_err(&catalog))?;
                f.set_len(keep as u64).map_err(io_err(&catalog))?;
                f.sync_all().map_err(io_err(&catalog))?;
            }
        }
        let records = self.current_records()?;
        let live: HashSet<PathBuf> = records
            .iter()
            .filter(|r| !r.tombstone)
            .map(|r| self.root.join(&r.path))
            .collect();

        let mut files = Vec::new();
        walk_files(&self.root, &mut files).map_err(io_err(&self.root))?;
        for file in files {
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let is_temp = name.starts_with('.') && name.contains(TEMP_MARKER);
            let is_blob = file.extension().and_then(|e| e.to_str()) == Some(BLOB_EXTENSION);
            // Orphans: renamed into place but never catalogued, or erased
            // with a failed unlink.
            if is_temp || (is_blob && !live.contains(&file)) {
                overwrite_and_remove(&file).map_err(io_err(&file))?;
            }
        }
        Ok(())
    }

    fn lineage(&self, subject: &str, operation: Operation, related: Vec<String>) -> Result<(), FabricError> {
        let rec = LineageRecord {
            subject: subject.to_string(),
            operation,
            related,
            timestamp: now(),
        };
        append_line(&self.lineage_path(), &serde_json::to_string(&rec).expect("lineage serializes"))
    }

    /// Stores an update, keyed by the SHA-256 of its blob.
    pub fn put(&self, update: &WeightUpdate) -> Result<LakeEntry, FabricError> {
        self.put_inner(update, None)
    }

    #[doc(hidden)]
    pub fn put_with_fault(&self, update: &WeightUpdate, fault: FaultPoint) -> Result<LakeEntry, FabricError> {
        self.put_inner(update, Some(fault))
    }

    fn put_inner(&self, update: &WeightUpdate, fault: Option<FaultPoint>) -> Result<LakeEntry, FabricError> {
        validate_name("model family", &update.model_family)?;
        validate_name("client id", &update.client_id)?;
        let metrics = update.metrics.ok_or(FabricError::MissingMetrics)?;
        let blob = update.payload.to_blob();
        let entry_id = blob_digest(&blob);
        let rel = format!(
            "{}/round-{}/{}.{BLOB_EXTENSION}",
            update.model_family, update.round, update.client_id
        );

        let _guard = self.lock();
        let duplicate = self.current_records()?.into_iter().any(|r| {
            !r.tombstone
                && r.model_family == update.model_family
                && r.round == update.round
                && r.client_id == update.client_id
        });
        if duplicate {
            return Err(FabricError::Duplicate {
                family: update.model_family.clone(),
                round: update.round,
                client_id: update.client_id.clone(),
            });
        }

        let dest = self.root.join(&rel);
        let dir = dest.parent().expect("blob path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let temp = dir.join(format!(".{}{TEMP_MARKER}{}", update.client_id, uuid::Uuid::new_v4().simple()));
        {
            let mut f = File::create(&temp).map_err(io_err(&temp))?;
            f.write_all(&blob).map_err(io_err(&temp))?;
            f.sync_all().map_err(io_err(&temp))?;
        }
        if fault == Some(FaultPoint::AfterTempWrite) {
            return Err(FabricError::InjectedFault(FaultPoint::AfterTempWrite));
        }
        fs::rename(&temp, &dest).map_err(io_err(&dest))?;
        sync_dir(dir);
        if fault == Some(FaultPoint::AfterRename) {
            return Err(FabricError::InjectedFault(FaultPoint::AfterRename));
        }

        let entry = LakeEntry {
            entry_id: entry_id.clone(),
            model_family: update.model_family.clone(),
            client_id: update.client_id.clone(),
            round: update.round,
            path: rel,
            encrypted: update.payload.is_encrypted(),
            created_at: now(),
            accuracy: metrics.accuracy,
            loss: metrics.loss,
            tombstone: false,
        };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        if fault == Some(FaultPoint::TornCatalogAppend) {
            let path = self.catalog_path();
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            f.write_all(&line.as_bytes()[..line.len() / 2]).map_err(io_err(&path))?;
            return Err(FabricError::InjectedFault(FaultPoint::TornCatalogAppend));
        }
        append_line(&self.catalog_path(), &line)?;
        self.lineage(&entry_id, Operation::Ingested, Vec::new())?;
        Ok(entry)
    }

    /// Reads an update back. Scaling factors are not stored, so the result
    /// has `scaling_factor: None`.
    pub fn get(&self, entry_id: &str) -> Result<WeightUpdate, FabricError> {
        let records = self.current_records()?;
        let matching: Vec<&LakeEntry> = records.iter().filter(|r| r.entry_id == entry_id).collect();
        let Some(entry) = matching.iter().find(|r| !r.tombstone) else {
            return Err(if matching.is_empty() {
                FabricError::NotFound(entry_id.to_string())
            } else {
                FabricError::Erased(entry_id.to_string())
            });
        };
        let path = self.root.join(&entry.path);
        let blob = match fs::read(&path) {
            Ok(b) => b,
            // Erased between the catalog read and the blob read.
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(FabricError::Erased(entry_id.to_string())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        if blob_digest(&blob) != entry.entry_id {
            return Err(FabricError::Corrupt(entry_id.to_string()));
        }
        Ok(WeightUpdate {
            client_id: entry.client_id.clone(),
            round: entry.round,
            model_family: entry.model_family.clone(),
            payload: Payload::from_blob(&blob)?,
            scaling_factor: None,
            metrics: Some(entry.metrics()),
        })
    }

    /// Live entries matching `filter`, ordered by round then client id.
    pub fn catalog_query(&self, filter: &CatalogFilter) -> Result<Vec<LakeEntry>, FabricError> {
        let mut out: Vec<LakeEntry> = self
            .current_records()?
            .into_iter()
            .filter(|r| {
                !r.tombstone
                    && filter.model_family.as_ref().is_none_or(|f| &r.model_family == f)
                    && filter.client_id.as_ref().is_none_or(|c| &r.client_id == c)
                    && filter.round.is_none_or(|n| r.round == n)
                    && filter.encrypted.is_none_or(|e| r.encrypted == e)
            })
            .collect();
        out.sort_by(|a, b| {
            (a.round, &a.client_id, &a.model_family).cmp(&(b.round, &b.client_id, &b.model_family))
        });
        Ok(out)
    }

    /// Picks a round's master data: the most accurate entry, the lowest-loss
    /// entry, or all entries. Ties go to the smallest client id.
    pub fn select_master(
        &self,
        round: u64,
        rule: SelectionRule,
        family: Option<&str>,
    ) -> Result<MasterDataSet, FabricError> {
        let candidates = self.catalog_query(&CatalogFilter {
            model_family: family.map(str::to_string),
            round: Some(round),
            ..Default::default()
        })?;
        if candidates.is_empty() {
            return Err(FabricError::EmptyRound(round));
        }
        let pick = |better: &dyn Fn(&LakeEntry, &LakeEntry) -> bool| {
            let mut best = &candidates[0];
            for c in &candidates[1..] {
                if better(c, best) || (!better(best, c) && c.client_id < best.client_id) {
                    best = c;
                }
            }
            vec![best.clone()]
        };
        let entries = match rule {
            SelectionRule::Fedmax => pick(&|a, b| a.accuracy > b.accuracy),
            SelectionRule::Fedmin => pick(&|a, b| a.loss < b.loss),
            SelectionRule::FedavgAll => candidates.clone(),
        };
        let all_ids: Vec<String> = candidates.iter().map(|c| c.entry_id.clone()).collect();
        let _guard = self.lock();
        for e in &entries {
            self.lineage(&e.entry_id, Operation::SelectedMaster, all_ids.clone())?;
        }
        Ok(MasterDataSet { round, rule, entries })
    }

    /// Records that these entries were combined into one global model.
    pub fn record_aggregation(&self, entry_ids: &[String]) -> Result<(), FabricError> {
        let _guard = self.lock();
        for id in entry_ids {
            let related = entry_ids.iter().filter(|o| *o != id).cloned().collect();
            self.lineage(id, Operation::AggregatedInto, related)?;
        }
        Ok(())
    }

    pub fn lineage_records(&self) -> Result<Vec<LineageRecord>, FabricError> {
        read_records(&self.lineage_path())
    }

    /// Removes every blob from `client_id`: each is overwritten with zeros,
    /// unlinked, tombstoned in the catalog and logged in the lineage.
    pub fn erase_client(&self, client_id: &str) -> Result<EraseReport, FabricError> {
        validate_name("client id", client_id)?;
        let _guard = self.lock();
        let targets: Vec<LakeEntry> = self
            .current_records()?
            .into_iter()
            .filter(|r| !r.tombstone && r.client_id == client_id)
            .collect();
        let mut report = EraseReport {
            client_id: client_id.to_string(),
            outcomes: Vec::with_capacity(targets.len()),
        };
        for entry in targets {
            let path = self.root.join(&entry.path);
            let result = match overwrite_and_remove(&path) {
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
                r => r,
            };
            let tomb = LakeEntry {
                tombstone: true,
                created_at: now(),
                ..entry.clone()
            };
            append_line(&self.catalog_path(), &serde_json::to_string(&tomb).expect("entry serializes"))?;
            self.lineage(&entry.entry_id, Operation::Erased, vec![client_id.to_string()])?;
            report.outcomes.push(EraseOutcome {
                entry_id: entry.entry_id,
                path: entry.path,
                blob_removed: result.is_ok(),
                error: result.err().map(|e| e.to_string()),
            });
        }
        Ok(report)
    }

    /// Every regular file under the lake root whose path names `client_id`
    /// as a blob. Used to audit erasure.
    pub fn files_for_client(&self, client_id: &str) -> Result<Vec<PathBuf>, FabricError> {
        let mut files = Vec::new();
        walk_files(&self.root, &mut files).map_err(io_err(&self.root))?;
        Ok(files
            .into_iter()
            .filter(|f| {
                f.file_name().and_then(|n| n.to_str()).is_some_and(|n| {
                    n == format!("{client_id}.{BLOB_EXTENSION}") || n.starts_with(&format!(".{client_id}{TEMP_MARKER}"))
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn update(client: &str, round: u64, value: f64, acc: f64, loss: f64) -> WeightUpdate {
        WeightUpdate {
            client_id: client.into(),
            round,
            model_family: "logreg".into(),
            payload: Payload::Plain(vec![Tensor::vector(vec![value, -value]).unwrap()]),
            scaling_factor: Some(0.5),
            metrics: Some(ClientMetrics { accuracy: acc, loss }),
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        let u = update("a", 0, 1.5, 0.9, 0.2);
        let e = lake.put(&u).unwrap();
        assert_eq!(e.entry_id, blob_digest(&u.payload.to_blob()));
        assert_eq!(e.path, "logreg/round-0/a.dfwu");
        let back = lake.get(&e.entry_id).unwrap();
        assert_eq!(back.payload, u.payload);
        assert_eq!(back.scaling_factor, None);
        assert_eq!(back.metrics, u.metrics);
    }

    #[test]
    fn catalog_record_has_exact_fields() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        lake.put(&update("a", 0, 1.0, 0.5, 0.5)).unwrap();
        let text = fs::read_to_string(dir.path().join(CATALOG_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["accuracy", "client_id", "created_at", "encrypted", "entry_id", "loss", "model_family", "path", "round", "tombstone"]
        );
        assert!(DateTime::parse_from_rfc3339(v["created_at"].as_str().unwrap()).is_ok());
    }

    #[test]
    fn duplicates_and_bad_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        lake.put(&update("a", 0, 1.0, 0.5, 0.5)).unwrap();
        assert!(matches!(lake.put(&update("a", 0, 2.0, 0.5, 0.5)), Err(FabricError::Duplicate { .. })));
        assert!(matches!(lake.put(&update("../x", 0, 2.0, 0.5, 0.5)), Err(FabricError::InvalidName { .. })));
        let mut bare = update("b", 0, 1.0, 0.5, 0.5);
        bare.metrics = None;
        assert!(matches!(lake.put(&bare), Err(FabricError::MissingMetrics)));
    }

    #[test]
    fn get_distinguishes_missing_and_erased() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        let e = lake.put(&update("a", 0, 1.0, 0.5, 0.5)).unwrap();
        assert!(matches!(lake.get("00"), Err(FabricError::NotFound(_))));
        lake.erase_client("a").unwrap();
        assert!(matches!(lake.get(&e.entry_id), Err(FabricError::Erased(_))));
    }

    #[test]
    fn query_order_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        for (c, r) in [("b", 1), ("a", 1), ("c", 0), ("a", 0)] {
            lake.put(&update(c, r, r as f64 + c.len() as f64, 0.5, 0.5)).unwrap();
        }
        let all = lake.catalog_query(&CatalogFilter::default()).unwrap();
        let order: Vec<(u64, &str)> = all.iter().map(|e| (e.round, e.client_id.as_str())).collect();
        assert_eq!(order, vec![(0, "a"), (0, "c"), (1, "a"), (1, "b")]);
        let only_a = lake
            .catalog_query(&CatalogFilter {
                client_id: Some("a".into()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(only_a.len(), 2);
        assert!(lake
            .catalog_query(&CatalogFilter {
                encrypted: Some(true),
                ..Default::default()
            })
            .unwrap()
            .is_empty());
    }

    #[test]
    fn master_selection() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        lake.put(&update("c", 2, 1.0, 0.9, 0.4)).unwrap();
        lake.put(&update("b", 2, 2.0, 0.9, 0.1)).unwrap();
        lake.put(&update("a", 2, 3.0, 0.7, 0.1)).unwrap();
        let max = lake.select_master(2, SelectionRule::Fedmax, None).unwrap();
        assert_eq!(max.entries[0].client_id, "b");
        let min = lake.select_master(2, SelectionRule::Fedmin, None).unwrap();
        assert_eq!(min.entries[0].client_id, "a");
        assert_eq!(lake.select_master(2, SelectionRule::FedavgAll, None).unwrap().entries.len(), 3);
        assert!(matches!(lake.select_master(9, SelectionRule::Fedmax, None), Err(FabricError::EmptyRound(9))));
        let ops: Vec<Operation> = lake.lineage_records().unwrap().iter().map(|l| l.operation).collect();
        assert_eq!(ops.iter().filter(|o| **o == Operation::SelectedMaster).count(), 5);
    }

    #[test]
    fn erase_overwrites_and_tombstones() {
        let dir = tempfile::tempdir().unwrap();
        let lake = Lake::open(dir.path()).unwrap();
        for r in 0..3 {
            lake.put(&update("gone", r, r as f64, 0.5, 0.5)).unwrap();
            lake.put(&update("kept", r, r as f64 + 10.0, 0.5, 0.5)).unwrap();
        }
        let report = lake.erase_client("gone").unwrap();
        assert_eq!(report.erased(), 3);
        assert!(report.outcomes.iter().all(|o| o.blob_removed));
        assert!(lake.files_for_client("gone").unwrap().is_empty());
        assert_eq!(lake.files_for_client("kept").unwrap().len(), 3);
        assert_eq!(lake.catalog_query(&CatalogFilter::default()).unwrap().len(), 3);
        assert_eq!(lake.erase_client("nobody").unwrap().erased(), 0);
        let erased = lake
            .lineage_records()
            .unwrap()
            .into_iter()
            .filter(|l| l.operation == Operation::Erased)
            .count();
        assert_eq!(erased, 3);
        // The client may contribute again after erasure.
        lake.put(&update("gone", 0, 42.0, 0.5, 0.5)).unwrap();
    }

    #[test]
    fn recovery_after_each_fault() {
        for fault in [FaultPoint::AfterTempWrite, FaultPoint::AfterRename, FaultPoint::TornCatalogAppend] {
            let dir = tempfile::tempdir().unwrap();
            let lake = Lake::open(dir.path()).unwrap();
            let kept = lake.put(&update("ok", 0, 1.0, 0.5, 0.5)).unwrap();
            assert!(matches!(
                lake.put_with_fault(&update("bad", 0, 2.0, 0.5, 0.5), fault),
                Err(FabricError::InjectedFault(_))
            ));
            let reopened = Lake::open(dir.path()).unwrap();
            let entries = reopened.catalog_query(&CatalogFilter::default()).unwrap();
            assert_eq!(entries, vec![kept.clone()], "{fault:?}");
            assert!(reopened.files_for_client("bad").unwrap().is_empty(), "{fault:?}");
            reopened.put(&update("bad", 0, 2.0, 0.5, 0.5)).unwrap();
            assert_eq!(reopened.catalog_query(&CatalogFilter::default()).unwrap().len(), 2);
        }
    }
}

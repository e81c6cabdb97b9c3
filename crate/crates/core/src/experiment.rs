//! Experiment plumbing for the command-line driver: configuration files,
//! dataset preparation, key generation and report files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{FabricError, Lake};
use crate::fed::{derive_seed, run_session, AggregatorKind, FedError, RoundReport, SessionConfig, SessionOutcome};
use crate::ingest::{
    list_dataset_files, load_pgm, normalize_flatten, resize_128, write_features, write_manifest, CipherFeatureMap,
    Dataset, DatasetSource, FeatureVector, IngestError, ManifestRow, FEATURES_FILE, MANIFEST_FILE,
};
use crate::metrics::EvalReport;
use crate::nn::ModelKind;
use crate::phe::{FixedPointCodec, Keypair, PheError, PublicKey, SessionSeed};

pub const FINAL_REPORT_FILE: &str = "final_report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const PUBLIC_KEY_FILE: &str = "key.pub";
pub const SECRET_KEY_FILE: &str = "key.sec";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Phe(#[from] PheError),
}

impl ExperimentError {
    /// Errors caused by the invocation rather than by running it.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_) | ExperimentError::Fed(FedError::Config(_)) | ExperimentError::Phe(PheError::InvalidKeyBits(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A session configuration plus output settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub session: SessionConfig,
    pub output_dir: Option<PathBuf>,
    /// Also write the final ROC curve as CSV.
    pub roc_csv: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let config = |m: String| ExperimentError::Config(m);
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| config(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| config("top level must be an object".into()))?;
        let output_dir = match obj.remove("output_dir") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(config("output_dir must be a string".into())),
        };
        let roc_csv = match obj.remove("roc_csv") {
            None => false,
            Some(serde_json::Value::Bool(b)) => b,
            Some(_) => return Err(config("roc_csv must be a boolean".into())),
        };
        let session: SessionConfig = serde_json::from_value(value).map_err(|e| config(e.to_string()))?;
        session.validate()?;
        Ok(ExperimentConfig {
            session,
            output_dir,
            roc_csv,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Fresh keypair; a seed makes it reproducible.
pub fn generate_keypair(bits: u64, seed: Option<u64>) -> Result<Keypair, PheError> {
    match seed {
        Some(s) => Keypair::generate(bits, &mut ChaCha20Rng::seed_from_u64(derive_seed(s, "keygen", 0))),
        None => Keypair::generate(bits, &mut rand::rng()),
    }
}

pub fn write_keypair(dir: &Path, keypair: &Keypair) -> Result<(PathBuf, PathBuf), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let public = dir.join(PUBLIC_KEY_FILE);
    let secret = dir.join(SECRET_KEY_FILE);
    fs::write(&public, keypair.public().to_file_string()).map_err(io_err(&public))?;
    fs::write(&secret, keypair.to_secret_file_string()).map_err(io_err(&secret))?;
    Ok((public, secret))
}

pub fn read_public_key(path: &Path) -> Result<PublicKey, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(PublicKey::from_file_str(&text)?)
}

pub fn read_keypair(path: &Path) -> Result<Keypair, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Keypair::from_secret_file_str(&text)?)
}

fn feature_session_seed(seed: u64) -> SessionSeed {
    SessionSeed::from_u64(derive_seed(seed, "feature-session", 0))
}

/// Cipher-feature map for a training session, under a key derived from the
/// session seed.
pub fn session_cipher_map(session: &SessionConfig) -> Result<CipherFeatureMap, ExperimentError> {
    let keypair = Keypair::generate(
        session.key_bits,
        &mut ChaCha20Rng::seed_from_u64(derive_seed(session.seed, "feature-key", 0)),
    )?;
    let codec = FixedPointCodec::for_key(keypair.public());
    Ok(CipherFeatureMap::new(keypair.public(), &codec, &feature_session_seed(session.seed))?)
}

/// The dataset a session trains on: plain features, or cipher features when
/// `encrypt_features` is set.
pub fn load_dataset(session: &SessionConfig) -> Result<Dataset, ExperimentError> {
    let source = DatasetSource::parse(&session.dataset_path).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let data_seed = derive_seed(session.seed, "data", 0);
    if !session.encrypt_features {
        return Ok(source.load(data_seed)?);
    }
    if !source.is_image_source() {
        return Err(ExperimentError::Config(
            "encrypt_features needs an image dataset (a PGM tree or synthetic-images:)".into(),
        ));
    }
    let map = session_cipher_map(session)?;
    let vectors = source
        .images(data_seed)?
        .iter()
        .map(|img| map.apply(&resize_128(img)))
        .collect();
    Ok(Dataset::from_vectors(vectors)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub model: ModelKind,
    pub aggregator: AggregatorKind,
    pub rounds: u64,
    pub clients: usize,
    pub seed: u64,
    pub encrypt_features: bool,
    /// Held-out evaluation of the final global model.
    pub evaluation: Option<EvalReport>,
}

pub fn round_report_file(round: u64) -> String {
    format!("round-{round:03}.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes one file per round plus the final report. Contents depend only
/// on the session, never on wall-clock time.
pub fn write_reports(
    out_dir: &Path,
    config: &ExperimentConfig,
    outcome: &SessionOutcome,
) -> Result<FinalReport, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for report in &outcome.reports {
        write_json(&out_dir.join(round_report_file(report.round)), report)?;
    }
    let s = &config.session;
    let final_report = FinalReport {
        model: s.model,
        aggregator: s.aggregator,
        rounds: s.rounds,
        clients: s.clients,
        seed: s.seed,
        encrypt_features: s.encrypt_features,
        evaluation: outcome.reports.last().and_then(|r| r.global.clone()),
    };
    write_json(&out_dir.join(FINAL_REPORT_FILE), &final_report)?;
    if config.roc_csv {
        if let Some(eval) = &final_report.evaluation {
            let path = out_dir.join(ROC_FILE);
            fs::write(&path, eval.roc_csv()).map_err(io_err(&path))?;
        }
    }
    Ok(final_report)
}

/// Loads the data, runs every round against `lake` and writes the reports.
pub fn run_experiment(config: &ExperimentConfig, lake: &Lake, out_dir: &Path) -> Result<FinalReport, ExperimentError> {
    let dataset = load_dataset(&config.session)?;
    let outcome = run_session(&config.session, &dataset, lake)?;
    write_reports(out_dir, config, &outcome)
}

pub fn read_round_reports(dir: &Path) -> Result<Vec<RoundReport>, ExperimentError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("round-") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn read_final_report(dir: &Path) -> Result<FinalReport, ExperimentError> {
    let path = dir.join(FINAL_REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug)]
pub struct PrepareOutcome {
    pub rows: Vec<ManifestRow>,
    /// Files that could not be read; the rest are still written.
    pub failures: Vec<(PathBuf, IngestError)>,
}

/// Resizes, normalises and optionally cipher-maps every image under
/// `data_dir`, writing a manifest and a feature file into `out_dir`.
pub fn prepare_dataset(
    data_dir: &Path,
    out_dir: &Path,
    key: Option<&PublicKey>,
    seed: u64,
) -> Result<PrepareOutcome, ExperimentError> {
    let files = list_dataset_files(data_dir)?;
    let map = match key {
        Some(k) => Some(CipherFeatureMap::new(k, &FixedPointCodec::for_key(k), &feature_session_seed(seed))?),
        None => None,
    };
    let mut rows = Vec::with_capacity(files.len());
    let mut vectors: Vec<FeatureVector> = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for file in files {
        let img = match load_pgm(&file) {
            Ok(img) => img,
            Err(e) => {
                failures.push((file, e));
                continue;
            }
        };
        let resized = resize_128(&img);
        vectors.push(match &map {
            Some(m) => m.apply(&resized),
            None => normalize_flatten(&resized)?,
        });
        rows.push(ManifestRow {
            path: file.strip_prefix(data_dir).unwrap_or(&file).to_string_lossy().into_owned(),
            label: img.label,
            width: img.width,
            height: img.height,
        });
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &rows)?;
    write_features(&out_dir.join(FEATURES_FILE), &vectors)?;
    Ok(PrepareOutcome { rows, failures })
}

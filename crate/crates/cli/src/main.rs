//! `fabricfl`: key generation, dataset preparation, federated training and
//! lake administration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use fabricfl_core::experiment::{
    generate_keypair, prepare_dataset, read_final_report, read_public_key, read_round_reports, run_experiment,
    write_keypair, ExperimentConfig, ExperimentError,
};
use fabricfl_core::fabric::{CatalogFilter, Lake, LakeEntry, SelectionRule};
use fabricfl_core::phe::{PheError, MIN_KEY_BITS};

#[derive(Parser)]
#[command(name = "fabricfl", version, about = "Privacy-preserving federated learning data fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Paillier keypair (key.pub, key.sec).
    Keygen {
        #[arg(long, default_value_t = 2048)]
        bits: u64,
        #[arg(long)]
        out: PathBuf,
        /// Derive the key from a seed instead of system entropy.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Resize, normalise and optionally cipher-map a PGM image tree.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "key")]
        encrypt: bool,
        /// Public key file used by --encrypt.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a federated session from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's lake_path.
        #[arg(long)]
        lake: Option<PathBuf>,
    },
    /// Inspect or administer the data lake.
    Lake {
        #[arg(long, env = "FABRICFL_LAKE", global = true)]
        lake: Option<PathBuf>,
        #[command(subcommand)]
        action: LakeAction,
    },
    /// Summarise the reports written by `train`.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Copy the final ROC curve (fpr,tpr CSV) here.
        #[arg(long)]
        roc_csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LakeAction {
    /// List live catalog entries.
    List {
        #[arg(long)]
        client: Option<String>,
        #[arg(long)]
        round: Option<u64>,
        #[arg(long)]
        family: Option<String>,
    },
    /// Erase every update from one client.
    Erase {
        #[arg(long)]
        client: String,
    },
    /// Select a round's master data.
    Master {
        #[arg(long)]
        round: u64,
        #[arg(long, value_parser = ["fedmax", "fedmin", "fedavg-all"])]
        rule: String,
        #[arg(long)]
        family: Option<String>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Keygen { bits, out, seed } => keygen(bits, &out, seed),
        Command::Prepare {
            data,
            out,
            encrypt,
            key,
            seed,
        } => prepare(&data, &out, encrypt.then_some(key).flatten().as_deref(), seed),
        Command::Train { config, out, lake } => train(&config, out, lake),
        Command::Lake { lake, action } => lake_cmd(lake, action),
        Command::Report { run, roc_csv } => report(&run, roc_csv.as_deref()),
    }
}

fn keygen(bits: u64, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    if bits < MIN_KEY_BITS || !bits.is_multiple_of(2) {
        return Err(Failure::Usage(anyhow!("--bits must be even and at least {MIN_KEY_BITS}, got {bits}")));
    }
    let keypair = generate_keypair(bits, seed).map_err(|e| match e {
        PheError::InvalidKeyBits(_) => Failure::Usage(e.into()),
        e => Failure::Runtime(e.into()),
    })?;
    let (public, secret) = write_keypair(out, &keypair)?;
    println!("key_id {}", keypair.public().key_id());
    println!("public {}", public.display());
    println!("secret {}", secret.display());
    Ok(())
}

fn prepare(data: &Path, out: &Path, key: Option<&Path>, seed: u64) -> Result<(), Failure> {
    if !data.is_dir() {
        return Err(Failure::Usage(anyhow!("{} is not a directory", data.display())));
    }
    let key = key.map(read_public_key).transpose()?;
    let outcome = prepare_dataset(data, out, key.as_ref(), seed)?;
    for (path, err) in &outcome.failures {
        eprintln!("failed {}: {err}", path.display());
    }
    println!("prepared {} images into {}", outcome.rows.len(), out.display());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{} images could not be read", outcome.failures.len())))
    }
}

fn train(config_path: &Path, out: Option<PathBuf>, lake: Option<PathBuf>) -> Result<(), Failure> {
    let config = ExperimentConfig::load(config_path)?;
    let out_dir = out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Failure::Usage(anyhow!("no output directory: set output_dir or pass --out")))?;
    let lake_path = lake
        .or_else(|| config.session.lake_path.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("FABRICFL_LAKE").map(PathBuf::from))
        .unwrap_or_else(|| out_dir.join("lake"));
    let lake = Lake::open(&lake_path).with_context(|| format!("opening lake {}", lake_path.display()))?;
    let report = run_experiment(&config, &lake, &out_dir)?;
    match &report.evaluation {
        Some(eval) => println!(
            "final accuracy {:.4} f1 {:.4} auc {}",
            eval.accuracy,
            eval.f1_macro,
            eval.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        ),
        None => println!("no held-out samples; final model not evaluated"),
    }
    println!("reports in {}", out_dir.display());
    Ok(())
}

fn open_existing_lake(lake: Option<PathBuf>) -> Result<Lake, Failure> {
    let path = lake.ok_or_else(|| Failure::Usage(anyhow!("no lake: pass --lake or set FABRICFL_LAKE")))?;
    if !path.is_dir() {
        return Err(Failure::Runtime(anyhow!("lake {} does not exist", path.display())));
    }
    Ok(Lake::open(&path).with_context(|| format!("opening lake {}", path.display()))?)
}

fn print_entries(entries: &[LakeEntry]) {
    println!(
        "{:<64}  {:<10}  {:<12}  {:>5}  {:<9}  {:>8}  {:>8}",
        "entry_id", "family", "client", "round", "encrypted", "accuracy", "loss"
    );
    for e in entries {
        println!(
            "{:<64}  {:<10}  {:<12}  {:>5}  {:<9}  {:>8.4}  {:>8.4}",
            e.entry_id, e.model_family, e.client_id, e.round, e.encrypted, e.accuracy, e.loss
        );
    }
}

fn lake_cmd(lake: Option<PathBuf>, action: LakeAction) -> Result<(), Failure> {
    let lake = open_existing_lake(lake)?;
    match action {
        LakeAction::List { client, round, family } => {
            let entries = lake
                .catalog_query(&CatalogFilter {
                    model_family: family,
                    client_id: client,
                    round,
                    encrypted: None,
                })
                .context("reading catalog")?;
            print_entries(&entries);
        }
        LakeAction::Erase { client } => {
            let report = lake.erase_client(&client).context("erasing")?;
            for o in &report.outcomes {
                match &o.error {
                    None => println!("erased {} {}", o.entry_id, o.path),
                    Some(err) => println!("tombstoned {} {} (unlink pending: {err})", o.entry_id, o.path),
                }
            }
            println!("{} entries erased for {}", report.erased(), client);
        }
        LakeAction::Master { round, rule, family } => {
            let rule: SelectionRule = rule.parse().map_err(|e| Failure::Usage(anyhow!("{e}")))?;
            let master = lake
                .select_master(round, rule, family.as_deref())
                .context("selecting master data")?;
            print_entries(&master.entries);
        }
    }
    Ok(())
}

fn report(run: &Path, roc_csv: Option<&Path>) -> Result<(), Failure> {
    let rounds = read_round_reports(run)?;
    let final_report = read_final_report(run)?;
    println!(
        "model {} aggregator {} clients {} seed {}",
        final_report.model.name(),
        final_report.aggregator,
        final_report.clients,
        final_report.seed
    );
    println!("{:>5}  {:<12}  {:>8}  {:>8}  {:>8}", "round", "selected", "accuracy", "f1", "auc");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in &rounds {
        let g = r.global.as_ref();
        println!(
            "{:>5}  {:<12}  {:>8}  {:>8}  {:>8}",
            r.round,
            r.selected_client.as_deref().unwrap_or("-"),
            fmt(g.map(|g| g.accuracy)),
            fmt(g.map(|g| g.f1_macro)),
            fmt(g.and_then(|g| g.auc)),
        );
    }
    if let Some(path) = roc_csv {
        let eval = final_report
            .evaluation
            .as_ref()
            .ok_or_else(|| anyhow!("run has no final evaluation"))?;
        std::fs::write(path, eval.roc_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("roc curve written to {}", path.display());
    }
    Ok(())
}

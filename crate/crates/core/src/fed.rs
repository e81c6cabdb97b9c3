//! Federated orchestration: sharding, local training, weight scaling and
//! aggregation (FedMax, FedAvg, FedMin, and FedAvg over Paillier
//! ciphertexts).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{FabricError, Lake, SelectionRule};
use crate::ingest::Dataset;
use crate::metrics::{EvalReport, MetricsError};
use crate::nn::{CipherTensor, Hyperparams, ModelKind, NnError, Payload, Tensor, TrainableModel};
use crate::phe::{
    decrypt_vector, encrypt_vector, Ciphertext, FixedPointCodec, Keypair, PheError, PublicKey,
    Randomness,
};

/// Tolerance on the sum of a round's scaling factors.
pub const FACTOR_SUM_TOLERANCE: f64 = 1e-9;
/// Fraction of the dataset held out for global evaluation, and of each
/// shard held out for the client's own accuracy.
pub const HOLDOUT_FRACTION_DENOM: usize = 5;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { samples: usize, clients: usize },
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("update payload shapes differ")]
    ShapeMismatch,
    #[error("scaling factors sum to {0}, not 1")]
    FactorSum(f64),
    #[error("update from {0} has no scaling factor")]
    MissingFactor(String),
    #[error("update from {0} has no metrics")]
    MissingMetrics(String),
    #[error("aggregator expects {expected} payloads")]
    PayloadKind { expected: &'static str },
    #[error("empty shard list")]
    NoShards,
    #[error("round {round}: {source}")]
    Round { round: u64, source: Box<FedError> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Phe(#[from] PheError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedmax,
    Fedavg,
    Fedmin,
    FedavgEncrypted,
}

impl AggregatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Fedmax => "fedmax",
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::Fedmin => "fedmin",
            AggregatorKind::FedavgEncrypted => "fedavg_encrypted",
        }
    }

    pub fn is_averaging(self) -> bool {
        matches!(self, AggregatorKind::Fedavg | AggregatorKind::FedavgEncrypted)
    }

    fn selection_rule(self) -> SelectionRule {
        match self {
            AggregatorKind::Fedmax => SelectionRule::Fedmax,
            AggregatorKind::Fedmin => SelectionRule::Fedmin,
            AggregatorKind::Fedavg | AggregatorKind::FedavgEncrypted => SelectionRule::FedavgAll,
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            AggregatorKind::Fedmax,
            AggregatorKind::Fedavg,
            AggregatorKind::Fedmin,
            AggregatorKind::FedavgEncrypted,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| FedError::Config(format!("unknown aggregator {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// One client's model weights for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate {
    pub client_id: String,
    pub round: u64,
    pub model_family: String,
    pub payload: Payload,
    /// Not persisted in the lake; `None` for updates read back from it.
    pub scaling_factor: Option<f64>,
    pub metrics: Option<ClientMetrics>,
}

fn default_local_epochs() -> u64 {
    1
}
fn default_batch_size() -> usize {
    Hyperparams::default().batch_size
}
fn default_key_bits() -> u64 {
    512
}

/// Session configuration document (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub model: ModelKind,
    pub aggregator: AggregatorKind,
    pub rounds: u64,
    pub clients: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u64,
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_path: String,
    #[serde(default)]
    pub lake_path: Option<String>,
    #[serde(default)]
    pub encrypt_features: bool,
    #[serde(default = "default_key_bits")]
    pub key_bits: u64,
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self, FedError> {
        let cfg: SessionConfig =
            serde_json::from_str(text).map_err(|e| FedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: &str| Err(FedError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.clients == 0 {
            return bad("clients must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.key_bits < crate::phe::MIN_KEY_BITS || !self.key_bits.is_multiple_of(2) {
            return bad("key_bits must be even and at least 16");
        }
        Ok(())
    }

    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

/// Independent stream derived from the session seed for one purpose.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::new()
        .chain_update(seed.to_be_bytes())
        .chain_update(purpose.as_bytes())
        .chain_update(index.to_be_bytes())
        .finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

pub fn client_id(index: usize) -> String {
    format!("client-{index:03}")
}

/// Seeded shuffle of `0..n_samples`, dealt round-robin. Shard sizes differ
/// by at most one and the first shards take the remainder.
pub fn split_shards(n_samples: usize, num_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>, FedError> {
    if num_clients == 0 {
        return Err(FedError::Config("need at least one client".into()));
    }
    if n_samples < num_clients {
        return Err(FedError::TooManyClients {
            samples: n_samples,
            clients: num_clients,
        });
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut shards = vec![Vec::with_capacity(n_samples / num_clients + 1); num_clients];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % num_clients].push(idx);
    }
    Ok(shards)
}

/// Data fraction of each shard.
pub fn scaling_factors(shard_sizes: &[usize]) -> Result<Vec<f64>, FedError> {
    if shard_sizes.is_empty() {
        return Err(FedError::NoShards);
    }
    if shard_sizes.contains(&0) {
        return Err(FedError::Config("shard sizes must be positive".into()));
    }
    let total: usize = shard_sizes.iter().sum();
    Ok(shard_sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Updates sorted by client id, so summation order never depends on the
/// order the caller collected them in.
fn canonical(updates: &[WeightUpdate]) -> Vec<&WeightUpdate> {
    let mut sorted: Vec<&WeightUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    sorted
}

fn checked_factors(updates: &[&WeightUpdate]) -> Result<Vec<f64>, FedError> {
    let factors = updates
        .iter()
        .map(|u| u.scaling_factor.ok_or_else(|| FedError::MissingFactor(u.client_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let sum: f64 = factors.iter().sum();
    if (sum - 1.0).abs() > FACTOR_SUM_TOLERANCE || factors.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(FedError::FactorSum(sum));
    }
    Ok(factors)
}

fn uniform_shapes(updates: &[&WeightUpdate]) -> Result<(), FedError> {
    let first = updates.first().ok_or(FedError::NoUpdates)?.payload.shapes();
    if updates.iter().any(|u| u.payload.shapes() != first) {
        return Err(FedError::ShapeMismatch);
    }
    Ok(())
}

/// Elementwise `Σ factor_i · w_i` over plain payloads.
pub fn aggregate_fedavg(updates: &[WeightUpdate]) -> Result<Vec<Tensor>, FedError> {
    let sorted = canonical(updates);
    uniform_shapes(&sorted)?;
    let factors = checked_factors(&sorted)?;
    let plain: Vec<&Vec<Tensor>> = sorted
        .iter()
        .map(|u| match &u.payload {
            Payload::Plain(ts) => Ok(ts),
            Payload::Encrypted(_) => Err(FedError::PayloadKind { expected: "plain" }),
        })
        .collect::<Result<_, _>>()?;
    let mut out: Vec<Tensor> = plain[0]
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect::<Result<_, _>>()?;
    for (tensors, &factor) in plain.iter().zip(&factors) {
        for (acc, t) in out.iter_mut().zip(tensors.iter()) {
            for (a, w) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += factor * w;
            }
        }
    }
    Ok(out)
}

/// The update a selection rule picked, by position in the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub client_id: String,
    pub payload: Payload,
}

fn select_by(updates: &[WeightUpdate], better: impl Fn(&ClientMetrics, &ClientMetrics) -> bool) -> Result<Selection, FedError> {
    let mut best: Option<(usize, ClientMetrics)> = None;
    for (i, u) in updates.iter().enumerate() {
        let m = u.metrics.ok_or_else(|| FedError::MissingMetrics(u.client_id.clone()))?;
        if best.is_none_or(|(_, b)| better(&m, &b)) {
            best = Some((i, m));
        }
    }
    let (index, _) = best.ok_or(FedError::NoUpdates)?;
    Ok(Selection {
        index,
        client_id: updates[index].client_id.clone(),
        payload: updates[index].payload.clone(),
    })
}

/// The unscaled weights of the most accurate update; ties go to the
/// earliest update.
pub fn aggregate_fedmax(updates: &[WeightUpdate]) -> Result<Selection, FedError> {
    select_by(updates, |a, b| a.accuracy > b.accuracy)
}

/// The unscaled weights of the lowest-loss update; ties go to the earliest.
pub fn aggregate_fedmin(updates: &[WeightUpdate]) -> Result<Selection, FedError> {
    select_by(updates, |a, b| a.loss < b.loss)
}

/// FedAvg without decrypting: per element `Π c_i^{enc(factor_i)}`, which
/// decrypts to `Σ factor_i · w_i` at twice the codec's scale.
pub fn aggregate_fedavg_encrypted(
    key: &PublicKey,
    codec: &FixedPointCodec,
    updates: &[WeightUpdate],
) -> Result<Vec<CipherTensor>, FedError> {
    let sorted = canonical(updates);
    uniform_shapes(&sorted)?;
    let factors = checked_factors(&sorted)?;
    let encoded_factors = factors
        .iter()
        .map(|&f| codec.encode(f))
        .collect::<Result<Vec<_>, _>>()?;
    let cipher: Vec<&Vec<CipherTensor>> = sorted
        .iter()
        .map(|u| match &u.payload {
            Payload::Encrypted(ts) => Ok(ts),
            Payload::Plain(_) => Err(FedError::PayloadKind { expected: "encrypted" }),
        })
        .collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(cipher[0].len());
    for t in 0..cipher[0].len() {
        let len = cipher[0][t].values().len();
        let values = (0..len)
            .into_par_iter()
            .map(|e| {
                let mut acc: Option<Ciphertext> = None;
                for (tensors, k) in cipher.iter().zip(&encoded_factors) {
                    let term = key.scalar_mul(&tensors[t].values()[e], k)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => key.add(&a, &term)?,
                    });
                }
                Ok(acc.expect("at least one update"))
            })
            .collect::<Result<Vec<_>, PheError>>()?;
        out.push(CipherTensor::new(cipher[0][t].shape().to_vec(), values)?);
    }
    Ok(out)
}

/// Decrypts an encrypted FedAvg result (scale `2 · scale_bits`).
pub fn decrypt_aggregate(
    key: &Keypair,
    codec: &FixedPointCodec,
    aggregate: &[CipherTensor],
) -> Result<Vec<Tensor>, FedError> {
    let product_scale = 2 * codec.scale_bits();
    aggregate
        .iter()
        .map(|ct| {
            let data = ct
                .values()
                .par_iter()
                .map(|c| key.decrypt(c).map(|m| codec.decode_with_scale(&m, product_scale)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Tensor::new(ct.shape().to_vec(), data)?)
        })
        .collect()
}

/// Encrypts every parameter tensor of a model.
pub fn encrypt_tensors(
    key: &PublicKey,
    codec: &FixedPointCodec,
    tensors: &[Tensor],
    seed: u64,
) -> Result<Vec<CipherTensor>, FedError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    tensors
        .iter()
        .map(|t| {
            let values = encrypt_vector(key, codec, t.data(), Randomness::Fresh(&mut rng))?;
            Ok(CipherTensor::new(t.shape().to_vec(), values)?)
        })
        .collect()
}

/// Decrypts tensors encrypted at the codec's own scale.
pub fn decrypt_tensors(
    key: &Keypair,
    codec: &FixedPointCodec,
    tensors: &[CipherTensor],
) -> Result<Vec<Tensor>, FedError> {
    tensors
        .iter()
        .map(|ct| Ok(Tensor::new(ct.shape().to_vec(), decrypt_vector(key, codec, ct.values())?)?))
        .collect()
}

/// Rebuilds one round's global weights from the plain updates still in the
/// lake, e.g. after a client was erased. The lake does not keep scaling
/// factors, so averaging weights clients equally unless `factors` maps every
/// remaining client id to its factor (renormalised to sum to 1).
pub fn reaggregate_round(
    lake: &Lake,
    family: &str,
    round: u64,
    aggregator: AggregatorKind,
    factors: Option<&std::collections::BTreeMap<String, f64>>,
) -> Result<Vec<Tensor>, FedError> {
    let entries = lake.catalog_query(&crate::fabric::CatalogFilter {
        model_family: Some(family.to_string()),
        round: Some(round),
        ..Default::default()
    })?;
    let mut updates = entries
        .iter()
        .map(|e| lake.get(&e.entry_id))
        .collect::<Result<Vec<_>, _>>()?;
    if updates.is_empty() {
        return Err(FedError::NoUpdates);
    }
    let raw: Vec<f64> = match factors {
        None => vec![1.0; updates.len()],
        Some(map) => updates
            .iter()
            .map(|u| map.get(&u.client_id).copied().ok_or_else(|| FedError::MissingFactor(u.client_id.clone())))
            .collect::<Result<_, _>>()?,
    };
    let total: f64 = raw.iter().sum();
    for (u, f) in updates.iter_mut().zip(&raw) {
        u.scaling_factor = Some(f / total);
    }
    let pick = |sel: Selection| match sel.payload {
        Payload::Plain(ts) => Ok(ts),
        Payload::Encrypted(_) => Err(FedError::PayloadKind { expected: "plain" }),
    };
    match aggregator {
        AggregatorKind::Fedavg => aggregate_fedavg(&updates),
        AggregatorKind::Fedmax => pick(aggregate_fedmax(&updates)?),
        AggregatorKind::Fedmin => pick(aggregate_fedmin(&updates)?),
        AggregatorKind::FedavgEncrypted => Err(FedError::PayloadKind { expected: "plain" }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: String,
    pub train: Dataset,
    /// Held out from the shard; client accuracy and loss are measured here.
    pub validation: Dataset,
    pub shuffle_seed: u64,
}

/// Everything about a session that is fixed before the first round.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionPlan {
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub init_seed: u64,
}

impl SessionPlan {
    pub fn new(config: &SessionConfig, dataset: &Dataset) -> Result<Self, FedError> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(FedError::Config("empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "holdout", 0)));
        let n_test = dataset.len() / HOLDOUT_FRACTION_DENOM;
        let (test_idx, train_idx) = order.split_at(n_test);
        let shards = split_shards(train_idx.len(), config.clients, derive_seed(config.seed, "shards", 0))?;
        let shards = shards
            .into_iter()
            .enumerate()
            .map(|(k, positions)| {
                let indices: Vec<usize> = positions.iter().map(|&p| train_idx[p]).collect();
                let n_val = indices.len() / HOLDOUT_FRACTION_DENOM;
                let (train, val) = indices.split_at(indices.len() - n_val);
                ClientShard {
                    client_id: client_id(k),
                    train: dataset.subset(train),
                    // Tiny shards validate on their training data.
                    validation: if n_val == 0 { dataset.subset(train) } else { dataset.subset(val) },
                    shuffle_seed: derive_seed(config.seed, "client-shuffle", k as u64),
                }
            })
            .collect();
        Ok(SessionPlan {
            test: dataset.subset(test_idx),
            shards,
            init_seed: derive_seed(config.seed, "init", 0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: String,
    pub train_samples: usize,
    pub scaling_factor: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub entry_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub aggregator: AggregatorKind,
    pub clients: Vec<ClientReport>,
    /// Set for selection aggregators only.
    pub selected_client: Option<String>,
    /// Absent when the held-out set is empty.
    pub global: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub reports: Vec<RoundReport>,
    pub model: TrainableModel,
}

fn accuracy_and_loss(model: &TrainableModel, data: &Dataset) -> Result<ClientMetrics, FedError> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let p = model.forward(x)?;
        if (p >= crate::metrics::DECISION_THRESHOLD) == (y == 1) {
            correct += 1;
        }
        loss += model.loss(x, y)?;
    }
    let n = data.len().max(1) as f64;
    Ok(ClientMetrics {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

pub fn evaluate(model: &TrainableModel, data: &Dataset) -> Result<Option<EvalReport>, FedError> {
    if data.is_empty() {
        return Ok(None);
    }
    let scores = model.predict_proba(&data.features)?;
    Ok(Some(EvalReport::from_scores(&scores, &data.labels)?))
}

/// Runs every communication round: broadcast, local training, persistence
/// of each update to the lake, then aggregation into the next global model.
pub fn run_session(config: &SessionConfig, dataset: &Dataset, lake: &Lake) -> Result<SessionOutcome, FedError> {
    let plan = SessionPlan::new(config, dataset)?;
    let family = config.model.name().to_string();
    let mut global = TrainableModel::init(config.model, dataset.dim(), plan.init_seed, config.hyperparams())?;
    let factors = scaling_factors(&plan.shards.iter().map(|s| s.train.len()).collect::<Vec<_>>())?;

    let keypair = match config.aggregator {
        AggregatorKind::FedavgEncrypted => {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "keygen", 0));
            Some(Keypair::generate(config.key_bits, &mut rng)?)
        }
        _ => None,
    };
    let codec = keypair.as_ref().map(|kp| FixedPointCodec::for_key(kp.public()));

    let mut reports = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        let in_round = |source: FedError| FedError::Round {
            round,
            source: Box::new(source),
        };

        let trained = plan
            .shards
            .par_iter()
            .map(|shard| {
                let mut model = global
                    .clone()
                    .with_shuffle_seed(shard.shuffle_seed)
                    .with_epochs_trained(global.epochs_trained());
                for _ in 0..config.local_epochs {
                    model = model.train_epoch(&shard.train.features, &shard.train.labels)?.0;
                }
                let metrics = accuracy_and_loss(&model, &shard.validation)?;
                Ok((model, metrics))
            })
            .collect::<Result<Vec<_>, FedError>>()
            .map_err(in_round)?;

        let mut updates = Vec::with_capacity(trained.len());
        for (k, ((model, metrics), shard)) in trained.iter().zip(&plan.shards).enumerate() {
            let payload = match (&keypair, &codec) {
                (Some(kp), Some(codec)) => {
                    let seed = derive_seed(config.seed, "encrypt", round * 1_000_003 + k as u64);
                    Payload::Encrypted(encrypt_tensors(kp.public(), codec, model.parameters(), seed).map_err(in_round)?)
                }
                _ => Payload::Plain(model.parameters().to_vec()),
            };
            updates.push(WeightUpdate {
                client_id: shard.client_id.clone(),
                round,
                model_family: family.clone(),
                payload,
                scaling_factor: Some(factors[k]),
                metrics: Some(*metrics),
            });
        }

        let entries = updates
            .iter()
            .map(|u| lake.put(u))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| in_round(e.into()))?;

        let (parameters, selected) = match config.aggregator {
            AggregatorKind::Fedavg => (aggregate_fedavg(&updates).map_err(in_round)?, None),
            AggregatorKind::Fedmax | AggregatorKind::Fedmin => {
                let pick = if config.aggregator == AggregatorKind::Fedmax {
                    aggregate_fedmax(&updates)
                } else {
                    aggregate_fedmin(&updates)
                }
                .map_err(in_round)?;
                match pick.payload {
                    Payload::Plain(ts) => (ts, Some(pick.client_id)),
                    Payload::Encrypted(_) => unreachable!("selection aggregators use plain payloads"),
                }
            }
            AggregatorKind::FedavgEncrypted => {
                let (kp, codec) = (keypair.as_ref().unwrap(), codec.as_ref().unwrap());
                let aggregate = aggregate_fedavg_encrypted(kp.public(), codec, &updates).map_err(in_round)?;
                (decrypt_aggregate(kp, codec, &aggregate).map_err(in_round)?, None)
            }
        };

        let entry_ids: Vec<String> = entries.iter().map(|e| e.entry_id.clone()).collect();
        lake.select_master(round, config.aggregator.selection_rule(), Some(&family))
            .map_err(|e| in_round(e.into()))?;
        lake.record_aggregation(&entry_ids).map_err(|e| in_round(e.into()))?;

        let epochs = global.epochs_trained() + config.local_epochs;
        global = global
            .with_parameters(parameters)
            .map_err(|e| in_round(e.into()))?
            .with_epochs_trained(epochs);

        reports.push(RoundReport {
            round,
            aggregator: config.aggregator,
            clients: plan
                .shards
                .iter()
                .zip(&trained)
                .zip(&entries)
                .zip(&factors)
                .map(|(((shard, (_, m)), entry), &f)| ClientReport {
                    client_id: shard.client_id.clone(),
                    train_samples: shard.train.len(),
                    scaling_factor: f,
                    accuracy: m.accuracy,
                    loss: m.loss,
                    entry_id: entry.entry_id.clone(),
                })
                .collect(),
            selected_client: selected,
            global: evaluate(&global, &plan.test).map_err(in_round)?,
        });
    }
    Ok(SessionOutcome { reports, model: global })
}

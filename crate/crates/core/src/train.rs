//! Training harness: dataset splits, pair enumeration, the Adam loop,
//! validation, and checkpoints.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, TensorData, TensorError};
use crate::ged::GroundTruthTable;
use crate::graph::{dataset_vocabulary, Graph, GraphError, LabelVocabulary};
use crate::metrics::spearman_rho;
use crate::model::{Encoding, Model, ModelConfig, ModelError};

const CHECKPOINT_FORMAT: &str = "gsim-checkpoint-v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {0} graphs; splitting needs at least 5")]
    TooFewGraphs(usize),
    #[error("duplicate graph id {0} in dataset")]
    DuplicateGraphId(u32),
    #[error("split references unknown graph id {0}")]
    UnknownGraphId(u32),
    #[error("graph id {0} appears in more than one split section")]
    OverlappingSplit(u32),
    #[error("graph id {0} is not assigned to any split section")]
    UnassignedGraphId(u32),
    #[error("{count} training pairs lack ground truth, starting with {shown:?}")]
    MissingGroundTruth {
        count: usize,
        shown: Vec<(u32, u32)>,
    },
    #[error("non-finite loss at epoch {epoch} on batch pairs {pairs:?}")]
    NonFiniteLoss {
        epoch: usize,
        pairs: Vec<(u32, u32)>,
    },
    #[error("unsupported checkpoint format `{0}`")]
    CheckpointFormat(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

fn default_batch_size() -> usize {
    128
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_validation_every() -> usize {
    5
}

fn default_lr_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_validation_every")]
    pub validation_every: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
}

impl TrainConfig {
    pub fn new(seed: u64, epochs: usize) -> Self {
        TrainConfig {
            seed,
            epochs,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            validation_every: default_validation_every(),
            weight_decay: 0.0,
            grad_clip_norm: None,
            lr_decay: default_lr_decay(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config(
                "learning_rate must be finite and positive".into(),
            ));
        }
        if self.validation_every == 0 {
            return Err(TrainError::Config(
                "validation_every must be at least 1".into(),
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(TrainError::Config(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        if let Some(c) = self.grad_clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(TrainError::Config(
                    "grad_clip_norm must be finite and positive".into(),
                ));
            }
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(TrainError::Config("lr_decay must be in (0, 1]".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(TrainError::Config("betas must be in [0, 1)".into()));
        }
        if !o.epsilon.is_finite() || o.epsilon <= 0.0 {
            return Err(TrainError::Config("epsilon must be positive".into()));
        }
        self.model
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let config: TrainConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// Disjoint train/validation/query id sets. The retrieval database is
/// train plus validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    #[serde(rename = "train")]
    pub train_ids: Vec<u32>,
    #[serde(rename = "val")]
    pub val_ids: Vec<u32>,
    #[serde(rename = "query")]
    pub query_ids: Vec<u32>,
}

impl Split {
    /// Sorted union of train and validation ids.
    pub fn database_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .train_ids
            .iter()
            .chain(&self.val_ids)
            .copied()
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Checks that the sections are disjoint and exactly cover the dataset.
    pub fn validate_against(&self, graphs: &[Graph]) -> Result<(), TrainError> {
        let dataset: HashSet<u32> = graphs.iter().map(|g| g.id).collect();
        if dataset.len() != graphs.len() {
            let mut seen = HashSet::new();
            for g in graphs {
                if !seen.insert(g.id) {
                    return Err(TrainError::DuplicateGraphId(g.id));
                }
            }
        }
        let mut assigned = HashSet::new();
        for &id in self
            .train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.query_ids)
        {
            if !dataset.contains(&id) {
                return Err(TrainError::UnknownGraphId(id));
            }
            if !assigned.insert(id) {
                return Err(TrainError::OverlappingSplit(id));
            }
        }
        let mut ids: Vec<u32> = dataset.into_iter().collect();
        ids.sort_unstable();
        for id in ids {
            if !assigned.contains(&id) {
                return Err(TrainError::UnassignedGraphId(id));
            }
        }
        Ok(())
    }
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Splits graph ids 60/20/20 into train/validation/query, deterministically
/// for a given seed. Rounding sends the remainder to train.
pub fn split_dataset(graphs: &[Graph], seed: u64) -> Result<Split, TrainError> {
    let n = graphs.len();
    if n < 5 {
        return Err(TrainError::TooFewGraphs(n));
    }
    let mut ids: Vec<u32> = graphs.iter().map(|g| g.id).collect();
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(TrainError::DuplicateGraphId(w[0]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut ids, &mut rng);
    let n_val = n / 5;
    let n_query = n / 5;
    let n_train = n - n_val - n_query;
    let mut train_ids: Vec<u32> = ids[..n_train].to_vec();
    let mut val_ids: Vec<u32> = ids[n_train..n_train + n_val].to_vec();
    let mut query_ids: Vec<u32> = ids[n_train + n_val..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    query_ids.sort_unstable();
    Ok(Split {
        train_ids,
        val_ids,
        query_ids,
    })
}

fn check_covered(
    pairs: &[(u32, u32)],
    gt: &GroundTruthTable,
) -> Result<(), TrainError> {
    let missing: Vec<(u32, u32)> = pairs
        .iter()
        .copied()
        .filter(|&(i, j)| gt.lookup(i, j).is_none())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TrainError::MissingGroundTruth {
            count: missing.len(),
            shown: missing.into_iter().take(8).collect(),
        })
    }
}

/// All unordered training pairs including each graph with itself, in
/// canonical (i <= j, ascending) order. Fails if any pair lacks ground truth.
pub fn training_pairs(
    split: &Split,
    gt: &GroundTruthTable,
) -> Result<Vec<(u32, u32)>, TrainError> {
    let mut ids = split.train_ids.clone();
    ids.sort_unstable();
    let mut pairs = Vec::with_capacity(ids.len() * (ids.len() + 1) / 2);
    for (a, &i) in ids.iter().enumerate() {
        for &j in &ids[a..] {
            pairs.push((i, j));
        }
    }
    check_covered(&pairs, gt)?;
    Ok(pairs)
}

/// Serialized model state: every parameter tensor by name plus the pieces
/// needed to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config().clone(),
            vocabulary: model.vocabulary().tokens().to_vec(),
            seed,
            epoch,
            params: model
                .params()
                .iter()
                .map(|(name, value)| ParamEntry {
                    name: name.to_string(),
                    shape: value.shape.clone(),
                    data: value.data.clone(),
                })
                .collect(),
        }
    }

    pub fn vocabulary(&self) -> Result<LabelVocabulary, GraphError> {
        if self.vocabulary.is_empty() {
            Ok(LabelVocabulary::unlabeled())
        } else {
            LabelVocabulary::labeled(self.vocabulary.clone())
        }
    }

    /// Rebuilds the model, validating every stored name and shape.
    pub fn model(&self) -> Result<Model, TrainError> {
        let vocab = self.vocabulary()?;
        let mut store = ParamStore::new();
        for p in &self.params {
            let value = TensorData::new(p.shape.clone(), p.data.clone())?;
            store.insert(&p.name, value)?;
        }
        Ok(Model::from_parts(self.config.clone(), vocab, store)?)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    let mut bytes = serde_json::to_vec(checkpoint)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads and fully validates a checkpoint: format marker, parameter names,
/// and tensor shapes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    if checkpoint.format != CHECKPOINT_FORMAT {
        return Err(TrainError::CheckpointFormat(checkpoint.format));
    }
    checkpoint.model()?;
    Ok(checkpoint)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    pub val_rho: Option<f64>,
}

/// Renders the per-epoch log as CSV. Validation columns are empty on epochs
/// without a validation pass.
pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_mse,val_rho\n");
    for e in log {
        let val_mse = e.val_mse.map(|v| v.to_string()).unwrap_or_default();
        let val_rho = e.val_rho.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, val_mse, val_rho
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    grad_clip_norm: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(config: &TrainConfig, params: &ParamStore) -> Self {
        let sizes: Vec<usize> = (0..params.len()).map(|i| params.value(i).numel()).collect();
        Adam {
            beta1: config.optimizer.beta1,
            beta2: config.optimizer.beta2,
            epsilon: config.optimizer.epsilon,
            weight_decay: config.weight_decay,
            grad_clip_norm: config.grad_clip_norm,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Option<TensorData>], lr: f64) {
        self.t += 1;
        let mut effective: Vec<Vec<f64>> = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            let theta = &params.value(i).data;
            let mut e = match g {
                Some(g) => g.data.clone(),
                None => vec![0.0; theta.len()],
            };
            if self.weight_decay != 0.0 {
                for (ek, &tk) in e.iter_mut().zip(theta) {
                    *ek += self.weight_decay * tk;
                }
            }
            effective.push(e);
        }
        if let Some(clip) = self.grad_clip_norm {
            let norm = effective
                .iter()
                .flat_map(|e| e.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for e in &mut effective {
                    for g in e.iter_mut() {
                        *g *= scale;
                    }
                }
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in effective.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = &mut params.value_mut(i).data;
            for k in 0..e.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * e[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * e[k] * e[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

fn ensure_encoded<'c>(
    cache: &'c mut HashMap<u32, Encoding>,
    model: &Model,
    tape: &Tape,
    ids: &[crate::autodiff::TensorId],
    graphs: &HashMap<u32, &Graph>,
    gid: u32,
) -> Result<&'c Encoding, ModelError> {
    if let Entry::Vacant(slot) = cache.entry(gid) {
        slot.insert(model.encode_on(tape, ids, graphs[&gid])?);
    }
    Ok(&cache[&gid])
}

struct Validation {
    mse: f64,
    rho: f64,
}

fn validate_model(
    model: &Model,
    graphs: &HashMap<u32, &Graph>,
    split: &Split,
    gt: &GroundTruthTable,
) -> Result<Validation, TrainError> {
    let db = split.database_ids();
    let mut val_ids = split.val_ids.clone();
    val_ids.sort_unstable();

    let mut embeddings: HashMap<u32, Vec<f64>> = HashMap::new();
    for &id in &db {
        embeddings.insert(id, model.embed(graphs[&id])?);
    }

    let mut sq_sum = 0.0;
    let mut rho_sum = 0.0;
    for &q in &val_ids {
        let q_emb = &embeddings[&q];
        let pairs: Vec<(&[f64], &[f64])> = db
            .iter()
            .map(|id| (q_emb.as_slice(), embeddings[id].as_slice()))
            .collect();
        let preds = model.score_embedded_batch(&pairs)?;
        let mut actuals = Vec::with_capacity(db.len());
        for (&id, &pred) in db.iter().zip(&preds) {
            let entry = gt
                .lookup(q, id)
                .ok_or(TrainError::MissingGroundTruth {
                    count: 1,
                    shown: vec![(q, id)],
                })?;
            sq_sum += (pred - entry.similarity) * (pred - entry.similarity);
            actuals.push(entry.similarity);
        }
        rho_sum += spearman_rho(&preds, &actuals)
            .map_err(|e| TrainError::Config(e.to_string()))?
            .value;
    }
    let n_pairs = (val_ids.len() * db.len()) as f64;
    Ok(Validation {
        mse: sq_sum / n_pairs,
        rho: rho_sum / val_ids.len() as f64,
    })
}

/// Trains a model from scratch and returns the checkpoint with the best
/// validation MSE, together with the full per-epoch log.
pub fn train(
    graphs: &[Graph],
    gt: &GroundTruthTable,
    split: &Split,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    split.validate_against(graphs)?;
    let by_id: HashMap<u32, &Graph> = graphs.iter().map(|g| (g.id, g)).collect();

    let canonical = training_pairs(split, gt)?;
    let db = split.database_ids();
    let val_pairs: Vec<(u32, u32)> = split
        .val_ids
        .iter()
        .flat_map(|&q| db.iter().map(move |&d| (q, d)))
        .collect();
    check_covered(&val_pairs, gt)?;

    let vocab = dataset_vocabulary(graphs)?;
    let mut model = Model::new(config.model.clone(), vocab, config.seed)?;
    let mut adam = Adam::new(config, model.params());

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=config.epochs {
        let mut order = canonical.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        shuffle(&mut order, &mut rng);

        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32 - 1);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let ids = model.bind(&tape);
            let mut cache: HashMap<u32, Encoding> = HashMap::new();
            let mut preds = Vec::with_capacity(batch.len());
            let mut aregs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let with_areg = model.config().use_areg && model.config().lambda > 0.0;
            for &(i, j) in batch {
                ensure_encoded(&mut cache, &model, &tape, &ids, &by_id, i)?;
                ensure_encoded(&mut cache, &model, &tape, &ids, &by_id, j)?;
                let (ei, ej) = (&cache[&i], &cache[&j]);
                preds.push(model.combined_score_on(&tape, &ids, ei.z_hat, ej.z_hat)?);
                if with_areg {
                    aregs.push(model.alignment_loss_on(&tape, ei, ej)?);
                }
                targets.push(gt.lookup(i, j).expect("coverage checked").similarity);
            }
            let preds_cat = tape.concat(&preds)?;
            let target_leaf = tape.leaf(TensorData::vector(targets));
            let mut loss = tape.mse(preds_cat, target_leaf)?;
            if with_areg {
                let areg_sum = tape.sum_all(tape.concat(&aregs)?)?;
                let weighted =
                    tape.scale_const(areg_sum, model.config().lambda / batch.len() as f64)?;
                loss = tape.add(loss, weighted)?;
            }
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    pairs: batch.to_vec(),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<TensorData>> = ids.iter().map(|&id| tape.grad(id)).collect();
            adam.step(model.params_mut(), &grads, lr);
            loss_sum += loss_val * batch.len() as f64;
        }
        let train_loss = loss_sum / canonical.len() as f64;

        let validate = epoch % config.validation_every == 0 || epoch == config.epochs;
        let (val_mse, val_rho) = if validate {
            let v = validate_model(&model, &by_id, split, gt)?;
            let better = match &best {
                None => true,
                Some((best_mse, _, _)) => v.mse < *best_mse,
            };
            if better {
                best = Some((v.mse, epoch, model.params().clone()));
            }
            (Some(v.mse), Some(v.rho))
        } else {
            (None, None)
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mse,
            val_rho,
        });
    }

    let (best_val_mse, best_epoch, best_params) = best.expect("final epoch always validates");
    let best_model = Model::from_parts(config.model.clone(), model.vocabulary().clone(), best_params)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&best_model, config.seed, best_epoch),
        log,
        best_epoch,
        best_val_mse,
    })
}

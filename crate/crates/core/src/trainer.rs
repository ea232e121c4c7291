//! Training loop, checkpointing, evaluation and ablation sweeps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ModalitySet, ModelConfig, UpdateRule};
use crate::data::Dataset;
use crate::head::{evaluate, EvalReport};
use crate::model::{Model, ModelError};
use crate::tensor::{AdamWConfig, AdamWState, Mode, Tape, Tensor};

/// Stream-splitting constant so the training RNG differs from the
/// weight-init RNG even though both derive from the same seed.
const TRAIN_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

const CHECKPOINT_MAGIC: &[u8; 4] = b"EFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {details}")]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        details: String,
    },
}

/// One line of training history.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_acc: f64,
    pub valid_wa_f1: f64,
}

/// Versioned snapshot: config, dataset shape, named parameters, RNG state,
/// best validation metric.
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: crate::data::DatasetMeta,
    pub params: Vec<(String, Tensor)>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub best_metric: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: crate::data::DatasetMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, rng: &ChaCha8Rng, best_metric: f64) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            meta: model.meta().clone(),
            params,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            best_metric,
        }
    }

    /// Rebuilds the model and restores every parameter by name.
    pub fn to_model(&self) -> Result<Model, ModelError> {
        let mut model = Model::build(self.config.clone(), self.meta.clone())?;
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Binary layout: magic, version, JSON header (config + meta), RNG seed
    /// and position, best metric, then per parameter name, shape and raw
    /// little-endian f64 data.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        out.write_all(&self.version.to_le_bytes()).map_err(io)?;
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| TrainError::Format(e.to_string()))?;
        out.write_all(&(header.len() as u64).to_le_bytes())
            .map_err(io)?;
        out.write_all(&header).map_err(io)?;
        out.write_all(&self.rng_seed).map_err(io)?;
        out.write_all(&self.rng_word_pos.to_le_bytes()).map_err(io)?;
        out.write_all(&self.best_metric.to_le_bytes()).map_err(io)?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())
            .map_err(io)?;
        for (name, tensor) in &self.params {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io)?;
            out.write_all(bytes).map_err(io)?;
            out.write_all(&(tensor.rows() as u64).to_le_bytes())
                .map_err(io)?;
            out.write_all(&(tensor.cols() as u64).to_le_bytes())
                .map_err(io)?;
            for &v in tensor.data() {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut input = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Format("bad magic bytes".into()));
        }
        let version = read_u32(&mut input, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u64(&mut input, path)? as usize;
        let mut header = vec![0u8; header_len];
        input.read_exact(&mut header).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| TrainError::Format(format!("header: {e}")))?;
        let mut rng_seed = [0u8; 32];
        input.read_exact(&mut rng_seed).map_err(io)?;
        let mut pos = [0u8; 16];
        input.read_exact(&mut pos).map_err(io)?;
        let rng_word_pos = u128::from_le_bytes(pos);
        let mut metric = [0u8; 8];
        input.read_exact(&mut metric).map_err(io)?;
        let best_metric = f64::from_le_bytes(metric);
        let count = read_u64(&mut input, path)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u64(&mut input, path)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|e| TrainError::Format(format!("param name: {e}")))?;
            let rows = read_u64(&mut input, path)? as usize;
            let cols = read_u64(&mut input, path)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                input.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
            let tensor = Tensor::from_vec(rows, cols, data)
                .map_err(|e| TrainError::Format(e.to_string()))?;
            params.push((name, tensor));
        }
        Ok(Self {
            version,
            config: header.config,
            meta: header.meta,
            params,
            rng_seed,
            rng_word_pos,
            best_metric,
        })
    }
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32, TrainError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(input: &mut impl Read, path: &Path) -> Result<u64, TrainError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(u64::from_le_bytes(buf))
}

/// Gradients for one whole batch: zeroes the store, runs every conversation
/// forward with the cross-entropy normalized by the batch-wide utterance
/// count, and backpropagates. Returns the batch loss.
fn batch_gradients(
    model: &mut Model,
    dataset: &Dataset,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64, ModelError> {
    let total_utts: usize = batch.iter().map(|&i| dataset.conversations[i].len()).sum();
    model.store_mut().zero_grads();
    let mut batch_loss = 0.0;
    for &idx in batch {
        let conv = &dataset.conversations[idx];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, conv, Mode::Train, rng)?;
        let loss = crate::head::loss(&mut tape, out.probs, &conv.labels(), total_utts)?;
        batch_loss += tape.value(loss).item();
        tape.backward(loss)?;
        let mut store = std::mem::take(model.store_mut());
        tape.harvest_grads(&mut store);
        *model.store_mut() = store;
    }
    Ok(batch_loss)
}

fn top_grad_norms(model: &Model, k: usize) -> String {
    let mut norms = model.store().grad_norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    norms
        .iter()
        .take(k)
        .map(|(name, n)| format!("{name}={n:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Predictions over a whole dataset in eval mode.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    let mut preds = Vec::with_capacity(dataset.num_utterances());
    let mut labels = Vec::with_capacity(dataset.num_utterances());
    for conv in &dataset.conversations {
        let (p, _) = model.predict(conv)?;
        preds.extend(p);
        labels.extend(conv.labels());
    }
    Ok((preds, labels))
}

/// Outcome of a training run: the best checkpoint by validation weighted F1
/// plus the per-epoch history.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Trains a model: seeded shuffling, whole-conversation batches, AdamW steps,
/// early stopping on validation weighted F1.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    valid_set: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.conversations.is_empty() || valid_set.conversations.is_empty() {
        return Err(TrainError::Mismatch(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if train_set.meta != valid_set.meta {
        return Err(TrainError::Mismatch(
            "training and validation sets declare different metadata".into(),
        ));
    }
    let mut model = Model::build(config.clone(), train_set.meta.clone())?;
    let mut optimizer = AdamWState::new(
        AdamWConfig::new(config.lr, config.weight_decay),
        model.store(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM);

    let snapshot = |model: &Model| -> Vec<(String, Tensor)> {
        model
            .store()
            .iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect()
    };

    let mut best_params = snapshot(&model);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.conversations.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_ce = 0.0;
        let mut epoch_utts = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let batch_utts: usize = batch
                .iter()
                .map(|&i| train_set.conversations[i].len())
                .sum();
            let batch_loss = batch_gradients(&mut model, train_set, batch, &mut rng)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::NumericalAbort {
                    epoch,
                    batch: batch_idx,
                    details: format!(
                        "loss={batch_loss}; top grad norms: {}",
                        top_grad_norms(&model, 5)
                    ),
                });
            }
            optimizer
                .step(model.store_mut())
                .map_err(|e| TrainError::Format(e.to_string()))?;
            epoch_ce += batch_loss * batch_utts as f64;
            epoch_utts += batch_utts;
        }

        let (preds, labels) = predict_dataset(&model, valid_set)?;
        let report = evaluate(&preds, &labels, valid_set.meta.num_classes)
            .map_err(|e| TrainError::Mismatch(e.to_string()))?;
        let stats = EpochStats {
            epoch,
            train_loss: epoch_ce / epoch_utts.max(1) as f64,
            valid_acc: report.accuracy,
            valid_wa_f1: report.weighted_f1,
        };
        history.push(stats);

        if report.weighted_f1 > best_metric {
            best_metric = report.weighted_f1;
            best_params = snapshot(&model);
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    model.load_params(&best_params)?;
    let checkpoint = Checkpoint::from_model(&model, &rng, best_metric);
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_epoch,
    })
}

/// Eval-mode metrics of a checkpoint over a dataset. The dataset must match
/// the checkpoint's declared feature dims and class count.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
) -> Result<EvalReport, TrainError> {
    if checkpoint.meta.dims != dataset.meta.dims {
        return Err(TrainError::Mismatch(format!(
            "checkpoint dims {:?} but dataset dims {:?}",
            checkpoint.meta.dims, dataset.meta.dims
        )));
    }
    if checkpoint.meta.num_classes != dataset.meta.num_classes {
        return Err(TrainError::Mismatch(format!(
            "checkpoint has {} classes but dataset has {}",
            checkpoint.meta.num_classes, dataset.meta.num_classes
        )));
    }
    if dataset.meta.num_speakers > checkpoint.meta.num_speakers {
        return Err(TrainError::Mismatch(format!(
            "dataset declares {} speakers but checkpoint knows {}",
            dataset.meta.num_speakers, checkpoint.meta.num_speakers
        )));
    }
    let model = checkpoint.to_model()?;
    let (preds, labels) = predict_dataset(&model, dataset)?;
    evaluate(&preds, &labels, dataset.meta.num_classes)
        .map_err(|e| TrainError::Mismatch(e.to_string()))
}

/// History serialization: `epoch,train_loss,valid_acc,valid_wa_f1`.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_acc,valid_wa_f1\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.valid_acc, row.valid_wa_f1
        ));
    }
    out
}

/// One swept hyperparameter axis.
#[derive(Debug, Clone)]
pub enum SweepAxis {
    Windows(Vec<(usize, usize)>),
    /// (graph layers, cross layers) pairs.
    Layers(Vec<(usize, usize)>),
    SpeakerScale(Vec<f64>),
    UpdateRules(Vec<UpdateRule>),
    Modalities(Vec<ModalitySet>),
}

impl SweepAxis {
    /// Axis values applied to copies of the base config, with display labels.
    pub fn apply(&self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        match self {
            SweepAxis::Windows(values) => values
                .iter()
                .map(|&(j, k)| {
                    let mut c = base.clone();
                    c.window_past = j;
                    c.window_future = k;
                    (format!("{j}:{k}"), c)
                })
                .collect(),
            SweepAxis::Layers(values) => values
                .iter()
                .map(|&(l, k)| {
                    let mut c = base.clone();
                    c.graph_layers = l;
                    c.cross_layers = k;
                    (format!("{l}:{k}"), c)
                })
                .collect(),
            SweepAxis::SpeakerScale(values) => values
                .iter()
                .map(|&v| {
                    let mut c = base.clone();
                    c.speaker_scale = v;
                    (format!("{v}"), c)
                })
                .collect(),
            SweepAxis::UpdateRules(values) => values
                .iter()
                .map(|&rule| {
                    let mut c = base.clone();
                    c.update_rule = rule;
                    (rule.to_string(), c)
                })
                .collect(),
            SweepAxis::Modalities(values) => values
                .iter()
                .map(|&set| {
                    let mut c = base.clone();
                    c.modalities = set;
                    (set.to_string(), c)
                })
                .collect(),
        }
    }
}

/// One sweep result row.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

/// Trains one model per axis value (shared seed) and reports eval metrics.
/// Runs sequentially unless `workers > 1`.
pub fn ablation_sweep(
    base: &ModelConfig,
    axis: &SweepAxis,
    train_set: &Dataset,
    valid_set: &Dataset,
    eval_set: &Dataset,
    workers: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    let configs = axis.apply(base);
    let run_one = |label: &str, config: &ModelConfig| -> Result<SweepRow, TrainError> {
        config.validate()?;
        let outcome = train(config, train_set, valid_set)?;
        let report = evaluate_checkpoint(&outcome.checkpoint, eval_set)?;
        Ok(SweepRow {
            value: label.to_string(),
            accuracy: report.accuracy,
            weighted_f1: report.weighted_f1,
        })
    };

    if workers <= 1 {
        return configs
            .iter()
            .map(|(label, config)| run_one(label, config))
            .collect();
    }

    let mut results: Vec<Option<Result<SweepRow, TrainError>>> =
        (0..configs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers.min(configs.len()) {
            let configs = &configs;
            let next = &next;
            handles.push(scope.spawn(move || {
                let mut local = Vec::new();
                loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= configs.len() {
                        break;
                    }
                    let (label, config) = &configs[idx];
                    local.push((idx, run_one(label, config)));
                }
                local
            }));
        }
        for handle in handles {
            for (idx, res) in handle.join().expect("sweep worker panicked") {
                results[idx] = Some(res);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every sweep index visited"))
        .collect()
}

/// Sweep table as CSV.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,accuracy,weighted_f1\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.value, row.accuracy, row.weighted_f1
        ));
    }
    out
}

//! Mini-batch fine-tuning of the dual heads with Adam, validation-based
//! checkpoint selection, run-directory bookkeeping, and resumable
//! optimizer state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Zip};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    cascade_predict, loss_and_gradients, ClassifierError, HeadGradients, TaskAHead, TaskBHead,
    DEFAULT_THRESHOLD,
};
use crate::corpus::{CorpusError, Document, LabelVocabulary, HUMAN_LABEL};
use crate::encoding::{
    compose_input, save_encoder, splitmix64, CompositeInput, Encoder, EncoderConfig, EncodingError,
};
use crate::evaluation::{score, EvalError, MetricsReport, PredictionRecord};
use crate::reasoning::{conditioning_label_for, ConditioningMode, Reasoning, ReasoningCache};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("use_cot is set but the cache has no reasoning for: {ids:?}")]
    MissingReasonings { ids: Vec<String> },
    #[error("train documents must carry usable labels; offenders: {ids:?}")]
    UnlabeledTrainDocuments { ids: Vec<String> },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {message}")]
    NonFiniteLoss { epoch: usize, batch: usize, message: String },
    #[error("checkpoint at {path} is incompatible: {message}")]
    IncompatibleCheckpoint { path: PathBuf, message: String },
    #[error("another process holds the lock {path}")]
    Locked { path: PathBuf },
    #[error("corpus error")]
    Corpus(#[from] CorpusError),
    #[error("classifier error")]
    Classifier(#[from] ClassifierError),
    #[error("encoding error")]
    Encoding(#[from] EncodingError),
    #[error("evaluation error")]
    Eval(#[from] EvalError),
    #[error("i/o failure at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failure")]
    Json(#[from] serde_json::Error),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub threshold: f64,
    pub use_cot: bool,
    /// Consecutive epochs without a strict improvement of the
    /// validation (Task A F1, Task B F1) pair tolerated before
    /// training stops early.
    pub early_stop_patience: usize,
    /// Adds a classification loss on the reasoning-only encoding.
    /// Off by default: the total loss has exactly two terms.
    pub aux_reasoning_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            optimizer: Optimizer::Adam,
            seed: 42,
            threshold: DEFAULT_THRESHOLD,
            use_cot: true,
            early_stop_patience: 10,
            aux_reasoning_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(TrainError::InvalidConfig("threshold must lie in [0, 1]".into()));
        }
        if self.aux_reasoning_loss && !self.use_cot {
            return Err(TrainError::InvalidConfig("aux_reasoning_loss requires use_cot".into()));
        }
        Ok(())
    }
}

/// First and second Adam moments for both heads, persisted so a
/// resumed run continues the exact optimizer trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m_a_weights: Array1<f64>,
    pub v_a_weights: Array1<f64>,
    pub m_a_bias: f64,
    pub v_a_bias: f64,
    pub m_b_weights: Array2<f64>,
    pub v_b_weights: Array2<f64>,
    pub m_b_bias: Array1<f64>,
    pub v_b_bias: Array1<f64>,
}

impl AdamState {
    pub fn zeros(embedding_dim: usize, generator_classes: usize) -> Self {
        AdamState {
            step: 0,
            m_a_weights: Array1::zeros(embedding_dim),
            v_a_weights: Array1::zeros(embedding_dim),
            m_a_bias: 0.0,
            v_a_bias: 0.0,
            m_b_weights: Array2::zeros((embedding_dim, generator_classes)),
            v_b_weights: Array2::zeros((embedding_dim, generator_classes)),
            m_b_bias: Array1::zeros(generator_classes),
            v_b_bias: Array1::zeros(generator_classes),
        }
    }

    /// One bias-corrected Adam step on both heads from batch gradients.
    fn apply(&mut self, a: &mut TaskAHead, b: &mut TaskBHead, grads: &HeadGradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let scalar =
            |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            };
        Zip::from(&mut a.weights)
            .and(&mut self.m_a_weights)
            .and(&mut self.v_a_weights)
            .and(&grads.a_weights)
            .for_each(|w, m, v, &g| scalar(w, m, v, g));
        scalar(&mut a.bias, &mut self.m_a_bias, &mut self.v_a_bias, grads.a_bias);
        Zip::from(&mut b.weights)
            .and(&mut self.m_b_weights)
            .and(&mut self.v_b_weights)
            .and(&grads.b_weights)
            .for_each(|w, m, v, &g| scalar(w, m, v, g));
        Zip::from(&mut b.bias)
            .and(&mut self.m_b_bias)
            .and(&mut self.v_b_bias)
            .and(&grads.b_bias)
            .for_each(|w, m, v, &g| scalar(w, m, v, g));
    }
}

/// Mutable training state: last-epoch heads plus optimizer moments.
/// The best-epoch heads live beside it in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch, 1-based.
    pub epoch: usize,
    pub task_a: TaskAHead,
    pub task_b: TaskBHead,
    pub adam: AdamState,
    pub best_epoch: usize,
    pub best_val_f1_a: f64,
    pub best_val_f1_b: f64,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    /// Epoch whose heads were selected (best validation metrics).
    pub epoch: usize,
    pub val_f1_a: f64,
    pub val_f1_b: f64,
    pub threshold: f64,
    pub use_cot: bool,
}

/// Selected model plus the state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab: LabelVocabulary,
    pub encoder_config: EncoderConfig,
    pub task_a: TaskAHead,
    pub task_b: TaskBHead,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn encoder_dir(dir: &Path) -> PathBuf {
        dir.join("encoder")
    }

    /// Writes the checkpoint directory: meta.json, vocab.json,
    /// task_a.json, task_b.json, train_state.json, encoder/.
    pub fn save(&self, dir: &Path, encoder: &dyn Encoder) -> Result<(), TrainError> {
        if *encoder.config() != self.encoder_config {
            return Err(TrainError::IncompatibleCheckpoint {
                path: dir.to_path_buf(),
                message: "encoder config differs from the checkpoint's".into(),
            });
        }
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        write_json(&dir.join("task_a.json"), &self.task_a)?;
        write_json(&dir.join("task_b.json"), &self.task_b)?;
        write_json(&dir.join("train_state.json"), &self.state)?;
        save_encoder(encoder, &Self::encoder_dir(dir))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint, TrainError> {
        let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::IncompatibleCheckpoint {
                path: dir.to_path_buf(),
                message: format!(
                    "format version {} does not match supported version {}",
                    meta.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            });
        }
        Ok(Checkpoint {
            meta,
            vocab: read_json(&dir.join("vocab.json"))?,
            encoder_config: read_json(&Self::encoder_dir(dir).join("config.json"))?,
            task_a: read_json(&dir.join("task_a.json"))?,
            task_b: read_json(&dir.join("task_b.json"))?,
            state: read_json(&dir.join("train_state.json"))?,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let mut data = serde_json::to_string_pretty(value)?;
    data.push('\n');
    fs::write(path, data).map_err(io_at(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, TrainError> {
    let data = fs::read_to_string(path).map_err(io_at(path))?;
    Ok(serde_json::from_str(&data)?)
}

/// Stable hash over everything a checkpoint must agree on before it
/// can be resumed: class vocabulary, encoder config, use_cot, and the
/// decision threshold. Canonical form: JSON with sorted keys.
pub fn config_hash(
    vocab: &LabelVocabulary,
    encoder: &EncoderConfig,
    use_cot: bool,
    threshold: f64,
) -> String {
    let canonical = serde_json::json!({
        "classes": vocab.classes(),
        "encoder": encoder,
        "threshold": threshold,
        "use_cot": use_cot,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Exclusive guard on a run directory; the lock file disappears when
/// the guard drops.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock, TrainError> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(TrainError::Locked { path })
            }
            Err(e) => Err(io_at(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Run directory layout: config.json, metrics.jsonl, checkpoints/best.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints").join("best")
    }
}

/// One line of metrics.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1_a: f64,
    pub val_f1_b: f64,
}

/// Selected checkpoint plus the epoch history of the run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// One embedded training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub doc_id: String,
    pub features: Array1<f64>,
    /// Reasoning-only encoding, present under aux_reasoning_loss.
    pub aux_features: Option<Array1<f64>>,
    pub label_a: u8,
    /// Index into the generator classes; None for human rows.
    pub generator_class: Option<usize>,
}

/// Looks up the cached reasoning for every document under the given
/// conditioning mode; fails listing every document that has none.
pub fn resolve_reasonings(
    docs: &[Document],
    mode: ConditioningMode,
    cache: &ReasoningCache,
    backend_id: &str,
) -> Result<Vec<Reasoning>, TrainError> {
    let mut reasonings = Vec::with_capacity(docs.len());
    let mut missing = Vec::new();
    for doc in docs {
        let label = conditioning_label_for(doc, mode);
        match cache.lookup(&doc.text, &label, backend_id) {
            Some(mut r) => {
                // The cache is keyed by text, so a hit may carry the id of
                // another document with identical text; re-stamp it.
                r.doc_id = doc.id.clone();
                reasonings.push(r);
            }
            None => missing.push(doc.id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(reasonings)
    } else {
        Err(TrainError::MissingReasonings { ids: missing })
    }
}

fn usable_labels(doc: &Document, vocab: &LabelVocabulary) -> bool {
    match (doc.label_a, doc.label_b.as_deref()) {
        (Some(0), b) => b.map_or(true, |b| b == HUMAN_LABEL),
        (Some(1), Some(b)) => vocab.generator_index(b).is_some(),
        _ => false,
    }
}

fn encode_reasoning_only(
    reasoning_text: &str,
    encoder: &dyn Encoder,
) -> Result<Array1<f64>, TrainError> {
    let input = CompositeInput {
        text: String::new(),
        reasoning: reasoning_text.to_string(),
        rendered: reasoning_text.to_string(),
    };
    Ok(encoder.encode(&input)?)
}

/// Embeds labeled training documents, resolving gold-conditioned
/// reasonings from the cache when use_cot is set.
pub fn prepare_train_samples(
    docs: &[Document],
    cache: &ReasoningCache,
    backend_id: &str,
    encoder: &dyn Encoder,
    vocab: &LabelVocabulary,
    config: &TrainConfig,
) -> Result<Vec<TrainSample>, TrainError> {
    let unlabeled: Vec<String> =
        docs.iter().filter(|d| !usable_labels(d, vocab)).map(|d| d.id.clone()).collect();
    if !unlabeled.is_empty() {
        return Err(TrainError::UnlabeledTrainDocuments { ids: unlabeled });
    }

    let reasonings = if config.use_cot {
        Some(resolve_reasonings(docs, ConditioningMode::Gold, cache, backend_id)?)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let reasoning = reasonings.as_ref().map(|rs| &rs[i]);
        let composed = compose_input(doc, reasoning, encoder.config().max_tokens)?;
        let features = encoder.encode(&composed)?;
        let aux_features = if config.aux_reasoning_loss {
            Some(encode_reasoning_only(&composed.reasoning, encoder)?)
        } else {
            None
        };
        let label_a = doc.label_a.expect("validated above");
        let generator_class = if label_a == 1 {
            vocab.generator_index(doc.label_b.as_deref().expect("validated above"))
        } else {
            None
        };
        samples.push(TrainSample {
            doc_id: doc.id.clone(),
            features,
            aux_features,
            label_a,
            generator_class,
        });
    }
    Ok(samples)
}

/// Embeds documents for inference: inference-conditioned reasonings
/// under use_cot, the raw document otherwise.
pub fn prepare_inference_features(
    docs: &[Document],
    cache: &ReasoningCache,
    backend_id: &str,
    encoder: &dyn Encoder,
    use_cot: bool,
) -> Result<Vec<Array1<f64>>, TrainError> {
    let reasonings = if use_cot {
        Some(resolve_reasonings(docs, ConditioningMode::Inference, cache, backend_id)?)
    } else {
        None
    };
    let mut features = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let reasoning = reasonings.as_ref().map(|rs| &rs[i]);
        let composed = compose_input(doc, reasoning, encoder.config().max_tokens)?;
        features.push(encoder.encode(&composed)?);
    }
    Ok(features)
}

/// Scores the current heads on pre-embedded documents.
pub fn evaluate_heads(
    docs: &[Document],
    features: &[Array1<f64>],
    task_a: &TaskAHead,
    task_b: &TaskBHead,
    vocab: &LabelVocabulary,
    threshold: f64,
) -> Result<MetricsReport, TrainError> {
    let preds: Vec<PredictionRecord> = docs
        .iter()
        .zip(features)
        .map(|(doc, e)| {
            cascade_predict(&doc.id, e, task_a, task_b, vocab, threshold)
                .map(|p| PredictionRecord::from(&p))
        })
        .collect::<Result<_, _>>()?;
    Ok(score(&preds, docs)?)
}

/// Trains the heads from zero initialization.
///
/// The class vocabulary is built from the train documents. When
/// `run_dir` is given, the run directory is locked, config.json and
/// per-epoch metrics.jsonl lines are written, and the selected
/// checkpoint is saved under checkpoints/best.
pub fn train(
    train_docs: &[Document],
    val_docs: &[Document],
    cache: &ReasoningCache,
    backend_id: &str,
    encoder: &dyn Encoder,
    config: &TrainConfig,
    run_dir: Option<&RunDir>,
) -> Result<TrainRun, TrainError> {
    run_loop(None, train_docs, val_docs, cache, backend_id, encoder, config, run_dir)
}

/// Continues training from a saved checkpoint up to `config.epochs`
/// total epochs. The checkpoint must carry the current format version
/// and the same config hash; empty additional data or an already
/// reached epoch target returns the checkpoint unchanged.
pub fn resume(
    checkpoint_dir: &Path,
    train_docs: &[Document],
    val_docs: &[Document],
    cache: &ReasoningCache,
    backend_id: &str,
    encoder: &dyn Encoder,
    config: &TrainConfig,
    run_dir: Option<&RunDir>,
) -> Result<TrainRun, TrainError> {
    config.validate()?;
    let checkpoint = Checkpoint::load(checkpoint_dir)?;
    let expected =
        config_hash(&checkpoint.vocab, encoder.config(), config.use_cot, config.threshold);
    if expected != checkpoint.meta.config_hash {
        return Err(TrainError::IncompatibleCheckpoint {
            path: checkpoint_dir.to_path_buf(),
            message: "config hash mismatch (vocabulary, encoder, use_cot, or threshold changed)"
                .into(),
        });
    }
    if train_docs.is_empty() || config.epochs <= checkpoint.state.epoch {
        return Ok(TrainRun { checkpoint, history: Vec::new() });
    }
    let vocab = LabelVocabulary::build(train_docs)?;
    if vocab != checkpoint.vocab {
        return Err(TrainError::IncompatibleCheckpoint {
            path: checkpoint_dir.to_path_buf(),
            message: "label vocabulary of the resumed data differs from the checkpoint's".into(),
        });
    }
    run_loop(
        Some(checkpoint),
        train_docs,
        val_docs,
        cache,
        backend_id,
        encoder,
        config,
        run_dir,
    )
}

struct BestModel {
    epoch: usize,
    val_f1_a: f64,
    val_f1_b: f64,
    task_a: TaskAHead,
    task_b: TaskBHead,
}

fn run_loop(
    init: Option<Checkpoint>,
    train_docs: &[Document],
    val_docs: &[Document],
    cache: &ReasoningCache,
    backend_id: &str,
    encoder: &dyn Encoder,
    config: &TrainConfig,
    run_dir: Option<&RunDir>,
) -> Result<TrainRun, TrainError> {
    config.validate()?;
    let vocab = match &init {
        Some(ckpt) => ckpt.vocab.clone(),
        None => LabelVocabulary::build(train_docs)?,
    };
    let dim = encoder.config().embedding_dim;
    let n_generators = vocab.generator_classes().len();

    let samples = prepare_train_samples(train_docs, cache, backend_id, encoder, &vocab, config)?;
    let val_features =
        prepare_inference_features(val_docs, cache, backend_id, encoder, config.use_cot)?;

    let (mut task_a, mut task_b, mut adam, start_epoch, mut best, mut epochs_since_best) =
        match init {
            Some(ckpt) => (
                ckpt.state.task_a.clone(),
                ckpt.state.task_b.clone(),
                ckpt.state.adam.clone(),
                ckpt.state.epoch + 1,
                Some(BestModel {
                    epoch: ckpt.meta.epoch,
                    val_f1_a: ckpt.meta.val_f1_a,
                    val_f1_b: ckpt.meta.val_f1_b,
                    task_a: ckpt.task_a,
                    task_b: ckpt.task_b,
                }),
                ckpt.state.epochs_since_best,
            ),
            None => (
                TaskAHead::new_zeros(dim),
                TaskBHead::new_zeros(dim, n_generators),
                AdamState::zeros(dim, n_generators),
                1,
                None,
                0,
            ),
        };

    let _lock;
    let mut metrics_writer = None;
    if let Some(rd) = run_dir {
        _lock = Some(RunLock::acquire(&rd.root)?);
        write_json(&rd.config_path(), config)?;
        let path = rd.metrics_path();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_at(&path))?;
        metrics_writer = Some(file);
    }

    log::info!(
        "training: {} train / {} val docs, dim {dim}, {} classes, seed {}, epochs {}..={}, \
         batch {}, lr {}, weight_decay {}, threshold {}, use_cot {}",
        samples.len(),
        val_docs.len(),
        vocab.len(),
        config.seed,
        start_epoch,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.weight_decay,
        config.threshold,
        config.use_cot,
    );

    let mut history = Vec::new();
    let mut completed = start_epoch - 1;
    for epoch in start_epoch..=config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ splitmix64(epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads = HeadGradients::zeros(dim, n_generators);
            let mut batch_loss = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &samples[i];
                let (loss, g) =
                    loss_and_gradients(&s.features, s.label_a, s.generator_class, &task_a, &task_b)?;
                batch_loss += loss;
                grads.add_scaled(&g, scale);
                if let Some(aux) = &s.aux_features {
                    let (aux_loss, aux_g) =
                        loss_and_gradients(aux, s.label_a, s.generator_class, &task_a, &task_b)?;
                    batch_loss += aux_loss;
                    grads.add_scaled(&aux_g, scale);
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    message: format!("batch loss {batch_loss} over {} examples", chunk.len()),
                });
            }
            loss_sum += batch_loss;
            if config.weight_decay > 0.0 {
                grads.a_weights.scaled_add(config.weight_decay, &task_a.weights);
                grads.b_weights.scaled_add(config.weight_decay, &task_b.weights);
            }
            adam.apply(&mut task_a, &mut task_b, &grads, config.learning_rate);
        }
        completed = epoch;

        let report =
            evaluate_heads(val_docs, &val_features, &task_a, &task_b, &vocab, config.threshold)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / samples.len().max(1) as f64,
            val_f1_a: report.task_a_f1,
            val_f1_b: report.task_b_f1,
        };
        if let Some(w) = &mut metrics_writer {
            let line = serde_json::to_string(&metrics)?;
            writeln!(w, "{line}").map_err(io_at(&run_dir.expect("writer implies dir").metrics_path()))?;
        }
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_f1_a {:.4} val_f1_b {:.4}",
            metrics.train_loss,
            metrics.val_f1_a,
            metrics.val_f1_b
        );
        history.push(metrics.clone());

        let improved = best.as_ref().map_or(true, |b| {
            (metrics.val_f1_a, metrics.val_f1_b) > (b.val_f1_a, b.val_f1_b)
        });
        if improved {
            best = Some(BestModel {
                epoch,
                val_f1_a: metrics.val_f1_a,
                val_f1_b: metrics.val_f1_b,
                task_a: task_a.clone(),
                task_b: task_b.clone(),
            });
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > config.early_stop_patience {
                log::info!(
                    "early stop after epoch {epoch}: no improvement for {epochs_since_best} epochs"
                );
                break;
            }
        }
    }

    let best = best.expect("at least one epoch ran");
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config_hash: config_hash(&vocab, encoder.config(), config.use_cot, config.threshold),
        epoch: best.epoch,
        val_f1_a: best.val_f1_a,
        val_f1_b: best.val_f1_b,
        threshold: config.threshold,
        use_cot: config.use_cot,
    };
    let state = TrainState {
        epoch: completed,
        task_a,
        task_b,
        adam,
        best_epoch: best.epoch,
        best_val_f1_a: best.val_f1_a,
        best_val_f1_b: best.val_f1_b,
        epochs_since_best,
    };
    let checkpoint = Checkpoint {
        meta,
        vocab,
        encoder_config: encoder.config().clone(),
        task_a: best.task_a,
        task_b: best.task_b,
        state,
    };
    if let Some(rd) = run_dir {
        checkpoint.save(&rd.checkpoint_dir(), encoder)?;
    }
    Ok(TrainRun { checkpoint, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashedNgramEncoder;
    use crate::reasoning::{generate_all, RetryPolicy, TemplateBackend, TEMPLATE_BACKEND_ID};
    use crate::synth::{generate_corpus, SynthSpec};
    use tempfile::TempDir;

    const DIM: usize = 256;

    fn encoder() -> HashedNgramEncoder {
        HashedNgramEncoder::new(EncoderConfig::hashed(DIM)).unwrap()
    }

    fn corpus(seed: u64) -> (Vec<Document>, Vec<Document>) {
        let docs = generate_corpus(&SynthSpec { humans: 40, per_generator: 8, seed });
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, d) in docs.into_iter().enumerate() {
            if i % 5 == 0 {
                val.push(d);
            } else {
                train.push(d);
            }
        }
        (train, val)
    }

    fn filled_cache(docs: &[&[Document]]) -> ReasoningCache {
        let cache = ReasoningCache::in_memory();
        let all: Vec<Document> = docs.iter().flat_map(|s| s.iter().cloned()).collect();
        for mode in [ConditioningMode::Gold, ConditioningMode::Inference] {
            let report =
                generate_all(&all, mode, &TemplateBackend, &cache, &RetryPolicy::default(), 4);
            assert!(report.failed.is_empty());
        }
        cache
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            epochs: 12,
            learning_rate: 1e-3,
            early_stop_patience: 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_config_matches_documented_values() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 50);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.optimizer, Optimizer::Adam);
        assert_eq!(c.seed, 42);
        assert_eq!(c.threshold, 0.5);
        assert!(c.use_cot);
        assert_eq!(c.early_stop_patience, 10);
        assert!(!c.aux_reasoning_loss);
        c.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let base = TrainConfig::default();
        let cases = [
            TrainConfig { epochs: 0, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { learning_rate: f64::NAN, ..base.clone() },
            TrainConfig { weight_decay: -0.1, ..base.clone() },
            TrainConfig { threshold: 1.5, ..base.clone() },
            TrainConfig { aux_reasoning_loss: true, use_cot: false, ..base.clone() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn config_hash_is_keyed_by_every_ingredient() {
        let (train, _) = corpus(1);
        let vocab = LabelVocabulary::build(&train).unwrap();
        let enc = EncoderConfig::hashed(DIM);
        let h = config_hash(&vocab, &enc, true, 0.5);
        assert_eq!(h, config_hash(&vocab, &enc, true, 0.5));
        assert_ne!(h, config_hash(&vocab, &enc, false, 0.5));
        assert_ne!(h, config_hash(&vocab, &enc, true, 0.6));
        assert_ne!(h, config_hash(&vocab, &EncoderConfig::hashed(DIM * 2), true, 0.5));
        let human_only =
            vec![Document::new("a human line of text", Some(0), Some(HUMAN_LABEL)).unwrap()];
        let other_vocab = LabelVocabulary::build(&human_only).unwrap();
        assert_ne!(h, config_hash(&other_vocab, &enc, true, 0.5));
    }

    #[test]
    fn training_learns_and_selects_best_epoch() {
        let (train, val) = corpus(2);
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        let run = train_run(&train, &val, &cache, &enc, &fast_config());
        let best = run.checkpoint.meta.clone();
        assert!(best.val_f1_a >= 0.9, "task A f1 {}", best.val_f1_a);
        assert!(best.val_f1_b >= 0.8, "task B f1 {}", best.val_f1_b);

        let mut expected: Option<(f64, f64, usize)> = None;
        for m in &run.history {
            let improved = expected.map_or(true, |(a, b, _)| (m.val_f1_a, m.val_f1_b) > (a, b));
            if improved {
                expected = Some((m.val_f1_a, m.val_f1_b, m.epoch));
            }
        }
        let (f1_a, f1_b, epoch) = expected.unwrap();
        assert_eq!(best.epoch, epoch);
        assert_eq!(best.val_f1_a, f1_a);
        assert_eq!(best.val_f1_b, f1_b);
    }

    fn train_run(
        train_docs: &[Document],
        val_docs: &[Document],
        cache: &ReasoningCache,
        enc: &HashedNgramEncoder,
        config: &TrainConfig,
    ) -> TrainRun {
        train(train_docs, val_docs, cache, TEMPLATE_BACKEND_ID, enc, config, None).unwrap()
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let (train, val) = corpus(3);
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 4, ..fast_config() };
        let a = train_run(&train, &val, &cache, &enc, &config);
        let b = train_run(&train, &val, &cache, &enc, &config);
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn full_batch_loss_non_increasing_early() {
        let (train, val) = corpus(4);
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        let config = TrainConfig {
            epochs: 3,
            batch_size: train.len(),
            learning_rate: 1e-4,
            weight_decay: 0.0,
            early_stop_patience: 3,
            ..TrainConfig::default()
        };
        let run = train_run(&train, &val, &cache, &enc, &config);
        assert_eq!(run.history.len(), 3);
        assert!(run.history[1].train_loss <= run.history[0].train_loss);
        assert!(run.history[2].train_loss <= run.history[1].train_loss);
    }

    #[test]
    fn single_epoch_patience_zero_returns_first_checkpoint() {
        let (train, val) = corpus(5);
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 1, early_stop_patience: 0, ..fast_config() };
        let run = train_run(&train, &val, &cache, &enc, &config);
        assert_eq!(run.history.len(), 1);
        assert_eq!(run.checkpoint.meta.epoch, 1);
        assert_eq!(run.checkpoint.state.epoch, 1);
    }

    #[test]
    fn patience_zero_stops_at_first_flat_epoch() {
        let (train, val) = corpus(6);
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        // A vanishing learning rate freezes the heads, so epoch 2 cannot
        // strictly improve on epoch 1.
        let config = TrainConfig {
            epochs: 50,
            learning_rate: 1e-30,
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        let run = train_run(&train, &val, &cache, &enc, &config);
        assert_eq!(run.history.len(), 2);
        assert_eq!(run.checkpoint.meta.epoch, 1);
    }

    #[test]
    fn missing_reasonings_error_lists_every_id() {
        let (train_docs, val) = corpus(7);
        let empty = ReasoningCache::in_memory();
        let enc = encoder();
        match train_result(&train_docs, &val, &empty, &enc, &fast_config()) {
            Err(TrainError::MissingReasonings { ids }) => assert_eq!(ids.len(), train_docs.len()),
            other => panic!("expected missing reasonings, got {other:?}"),
        }
    }

    #[test]
    fn unlabeled_train_documents_are_rejected() {
        let (mut train, val) = corpus(8);
        train.push(Document::new("an unlabeled stray row", None, None).unwrap());
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        match train_result(&train, &val, &cache, &enc, &fast_config()) {
            Err(TrainError::UnlabeledTrainDocuments { ids }) => assert_eq!(ids.len(), 1),
            other => panic!("expected unlabeled error, got {other:?}"),
        }
    }

    fn train_result(
        train_docs: &[Document],
        val_docs: &[Document],
        cache: &ReasoningCache,
        enc: &HashedNgramEncoder,
        config: &TrainConfig,
    ) -> Result<TrainRun, TrainError> {
        train(train_docs, val_docs, cache, TEMPLATE_BACKEND_ID, enc, config, None)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (train, val) = corpus(9);
        let cache = filled_cache(&[&train, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 2, use_cot: false, ..fast_config() };
        let run = train_run(&train, &val, &cache, &enc, &config);
        let dir = TempDir::new().unwrap();
        run.checkpoint.save(dir.path(), &enc).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded, run.checkpoint);

        let fixtures = generate_corpus(&SynthSpec { humans: 52, per_generator: 8, seed: 99 });
        assert_eq!(fixtures.len(), 100);
        let features =
            prepare_inference_features(&fixtures, &cache, TEMPLATE_BACKEND_ID, &enc, false)
                .unwrap();
        for (doc, e) in fixtures.iter().zip(&features) {
            let before = cascade_predict(
                &doc.id,
                e,
                &run.checkpoint.task_a,
                &run.checkpoint.task_b,
                &run.checkpoint.vocab,
                config.threshold,
            )
            .unwrap();
            let after =
                cascade_predict(&doc.id, e, &loaded.task_a, &loaded.task_b, &loaded.vocab, config.threshold)
                    .unwrap();
            assert_eq!(before.p_ai.to_bits(), after.p_ai.to_bits());
            assert_eq!(before.label_a, after.label_a);
            assert_eq!(before.label_b, after.label_b);
        }
    }

    #[test]
    fn resume_matches_straight_run() {
        let (train_docs, val) = corpus(10);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let full_batch = TrainConfig {
            batch_size: train_docs.len(),
            learning_rate: 1e-3,
            early_stop_patience: 20,
            ..TrainConfig::default()
        };

        let straight = train_run(
            &train_docs,
            &val,
            &cache,
            &enc,
            &TrainConfig { epochs: 10, ..full_batch.clone() },
        );

        let five = train_run(
            &train_docs,
            &val,
            &cache,
            &enc,
            &TrainConfig { epochs: 5, ..full_batch.clone() },
        );
        let dir = TempDir::new().unwrap();
        five.checkpoint.save(dir.path(), &enc).unwrap();
        let resumed = resume(
            dir.path(),
            &train_docs,
            &val,
            &cache,
            TEMPLATE_BACKEND_ID,
            &enc,
            &TrainConfig { epochs: 10, ..full_batch },
            None,
        )
        .unwrap();

        assert_eq!(resumed.history.len(), 5);
        assert_eq!(resumed.checkpoint.state.epoch, 10);
        let max_diff = |x: &Array1<f64>, y: &Array1<f64>| {
            x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max)
        };
        let a_diff =
            max_diff(&resumed.checkpoint.state.task_a.weights, &straight.checkpoint.state.task_a.weights);
        assert!(a_diff <= 1e-12, "task A weight drift {a_diff}");
        let b_resumed = &resumed.checkpoint.state.task_b.weights;
        let b_straight = &straight.checkpoint.state.task_b.weights;
        let b_diff = b_resumed
            .iter()
            .zip(b_straight.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(b_diff <= 1e-12, "task B weight drift {b_diff}");
        assert_eq!(resumed.checkpoint.meta.epoch, straight.checkpoint.meta.epoch);
        assert_eq!(resumed.checkpoint.meta.val_f1_a, straight.checkpoint.meta.val_f1_a);
    }

    #[test]
    fn resume_refuses_version_and_config_mismatches() {
        let (train_docs, val) = corpus(11);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 2, ..fast_config() };
        let run = train_run(&train_docs, &val, &cache, &enc, &config);
        let dir = TempDir::new().unwrap();
        run.checkpoint.save(dir.path(), &enc).unwrap();

        let meta_path = dir.path().join("meta.json");
        let doctored = fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&meta_path, doctored).unwrap();
        match Checkpoint::load(dir.path()) {
            Err(TrainError::IncompatibleCheckpoint { message, .. }) => {
                assert!(message.contains("format version"), "{message}");
            }
            other => panic!("expected version error, got {other:?}"),
        }

        let dir2 = TempDir::new().unwrap();
        run.checkpoint.save(dir2.path(), &enc).unwrap();
        let altered = TrainConfig { epochs: 4, threshold: 0.7, ..config.clone() };
        match resume(
            dir2.path(),
            &train_docs,
            &val,
            &cache,
            TEMPLATE_BACKEND_ID,
            &enc,
            &altered,
            None,
        ) {
            Err(TrainError::IncompatibleCheckpoint { message, .. }) => {
                assert!(message.contains("config hash"), "{message}");
            }
            other => panic!("expected config hash error, got {other:?}"),
        }
    }

    #[test]
    fn resume_with_altered_vocabulary_is_refused() {
        let (train_docs, val) = corpus(12);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 2, ..fast_config() };
        let run = train_run(&train_docs, &val, &cache, &enc, &config);
        let dir = TempDir::new().unwrap();
        run.checkpoint.save(dir.path(), &enc).unwrap();

        let mut altered_docs = train_docs.clone();
        altered_docs.push(Document::new("novel generator text", Some(1), Some("Brand-New")).unwrap());
        let cache2 = filled_cache(&[&altered_docs, &val]);
        match resume(
            dir.path(),
            &altered_docs,
            &val,
            &cache2,
            TEMPLATE_BACKEND_ID,
            &enc,
            &TrainConfig { epochs: 4, ..config },
            None,
        ) {
            Err(TrainError::IncompatibleCheckpoint { message, .. }) => {
                assert!(message.contains("vocabulary"), "{message}");
            }
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn resume_on_empty_data_returns_checkpoint_unchanged() {
        let (train_docs, val) = corpus(13);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 2, ..fast_config() };
        let run = train_run(&train_docs, &val, &cache, &enc, &config);
        let dir = TempDir::new().unwrap();
        run.checkpoint.save(dir.path(), &enc).unwrap();

        let resumed = resume(
            dir.path(),
            &[],
            &[],
            &cache,
            TEMPLATE_BACKEND_ID,
            &enc,
            &TrainConfig { epochs: 10, ..config.clone() },
            None,
        )
        .unwrap();
        assert!(resumed.history.is_empty());
        assert_eq!(resumed.checkpoint, run.checkpoint);

        let reached = resume(
            dir.path(),
            &train_docs,
            &val,
            &cache,
            TEMPLATE_BACKEND_ID,
            &enc,
            &config,
            None,
        )
        .unwrap();
        assert!(reached.history.is_empty());
        assert_eq!(reached.checkpoint, run.checkpoint);
    }

    #[test]
    fn run_dir_artifacts_and_lock_lifecycle() {
        let (train_docs, val) = corpus(14);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let tmp = TempDir::new().unwrap();
        let rd = RunDir::new(tmp.path().join("run"));
        let config = TrainConfig { epochs: 3, ..fast_config() };
        let run = train(
            &train_docs,
            &val,
            &cache,
            TEMPLATE_BACKEND_ID,
            &enc,
            &config,
            Some(&rd),
        )
        .unwrap();

        let written: TrainConfig = read_json(&rd.config_path()).unwrap();
        assert_eq!(written, config);
        let metrics = fs::read_to_string(rd.metrics_path()).unwrap();
        let lines: Vec<EpochMetrics> =
            metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, run.history);
        assert!(rd.checkpoint_dir().join("meta.json").exists());
        assert!(!rd.root.join(LOCK_FILE).exists(), "lock must be released");

        let reloaded = Checkpoint::load(&rd.checkpoint_dir()).unwrap();
        assert_eq!(reloaded, run.checkpoint);
    }

    #[test]
    fn lock_blocks_concurrent_training() {
        let (train_docs, val) = corpus(15);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let tmp = TempDir::new().unwrap();
        let rd = RunDir::new(tmp.path().join("run"));
        let held = RunLock::acquire(&rd.root).unwrap();
        match train(
            &train_docs,
            &val,
            &cache,
            TEMPLATE_BACKEND_ID,
            &enc,
            &fast_config(),
            Some(&rd),
        ) {
            Err(TrainError::Locked { .. }) => {}
            other => panic!("expected lock error, got {other:?}"),
        }
        drop(held);
        train(&train_docs, &val, &cache, TEMPLATE_BACKEND_ID, &enc, &fast_config(), Some(&rd))
            .unwrap();
    }

    #[test]
    fn absurd_learning_rate_aborts_with_diagnostics() {
        let (train_docs, val) = corpus(16);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let config = TrainConfig { epochs: 5, learning_rate: 1e300, ..fast_config() };
        let result = train_result(&train_docs, &val, &cache, &enc, &config);
        match result {
            Err(TrainError::NonFiniteLoss { .. }) | Err(TrainError::Classifier(_)) => {}
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn aux_reasoning_loss_doubles_zero_init_loss() {
        let (train_docs, val) = corpus(17);
        let cache = filled_cache(&[&train_docs, &val]);
        let enc = encoder();
        let base = TrainConfig {
            epochs: 1,
            batch_size: train_docs.len(),
            early_stop_patience: 1,
            ..TrainConfig::default()
        };
        let plain = train_run(&train_docs, &val, &cache, &enc, &base);
        let aux = train_run(
            &train_docs,
            &val,
            &cache,
            &enc,
            &TrainConfig { aux_reasoning_loss: true, ..base },
        );
        let ratio = aux.history[0].train_loss / plain.history[0].train_loss;
        assert!((ratio - 2.0).abs() < 1e-9, "ratio {ratio}");
    }
}

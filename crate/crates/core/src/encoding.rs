//! Composition of (document + reasoning) into one input string, and the
//! text encoders that turn it into a fixed-dimension vector.
//!
//! Two backends: a hashed character-n-gram encoder (pure arithmetic,
//! deterministic across processes, no checkpoint) and a forward-only
//! transformer loaded from a checkpoint directory. Both are frozen during
//! training; only the classifier heads learn.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::reasoning::Reasoning;

/// Joins document and reasoning in the rendered classifier input. One
/// whitespace token wide, so it costs exactly one token of the budget.
pub const REASONING_SEPARATOR: &str = "\n###REASON###\n";

const SEPARATOR_CORE: &str = "###REASON###";

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("reasoning for document {reasoning_doc_id} cannot be composed with document {doc_id}")]
    DocMismatch { doc_id: String, reasoning_doc_id: String },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("encoder checkpoint unusable at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("encoder produced a non-finite value at coordinate {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Document text plus reasoning, joined for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeInput {
    pub text: String,
    pub reasoning: String,
    pub rendered: String,
}

/// Byte spans of whitespace-separated tokens.
fn token_spans(s: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if let Some(st) = start.take() {
                spans.push((st, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        spans.push((st, s.len()));
    }
    spans
}

/// Prefix of `s` spanning its first `k` tokens, original whitespace kept.
fn take_tokens(s: &str, k: usize) -> &str {
    let spans = token_spans(s);
    if k == 0 {
        return "";
    }
    match spans.get(k - 1) {
        Some(&(_, end)) => &s[..end],
        None => s,
    }
}

fn sanitize(part: &str) -> String {
    // The separator token may not occur inside either part; a collision
    // is rewritten to a visibly similar but non-matching form.
    part.replace(SEPARATOR_CORE, "## REASON ##")
}

/// Joins document text and reasoning under a token budget.
///
/// The document has priority: its prefix is taken first, and the
/// reasoning (preceded by the one-token separator) is appended only if
/// at least two tokens of budget remain. Absent or empty reasoning
/// renders the document text alone, with no separator.
pub fn compose_input(
    doc: &Document,
    reasoning: Option<&Reasoning>,
    max_tokens: usize,
) -> Result<CompositeInput, EncodingError> {
    if max_tokens == 0 {
        return Err(EncodingError::InvalidConfig("max_tokens must be positive".into()));
    }
    if let Some(r) = reasoning {
        if r.doc_id != doc.id {
            return Err(EncodingError::DocMismatch {
                doc_id: doc.id.clone(),
                reasoning_doc_id: r.doc_id.clone(),
            });
        }
    }
    let text = sanitize(&doc.text);
    let reasoning_text = reasoning.map(|r| sanitize(r.text.trim())).unwrap_or_default();

    let doc_token_count = token_spans(&text).len();
    let taken_doc = doc_token_count.min(max_tokens);
    let doc_part = take_tokens(&text, taken_doc);

    let remaining = max_tokens - taken_doc;
    let rendered = if reasoning_text.is_empty() || remaining < 2 {
        doc_part.to_string()
    } else {
        let reasoning_part = take_tokens(&reasoning_text, remaining - 1);
        format!("{doc_part}{REASONING_SEPARATOR}{reasoning_part}")
    };
    Ok(CompositeInput { text, reasoning: reasoning_text, rendered })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    HashedNgram,
    Transformer,
}

/// Encoder selection and shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backend: EncoderBackend,
    pub embedding_dim: usize,
    /// Top encoder layers left trainable. The hashed backend has no
    /// layers, so it requires 0. Recorded for the transformer backend;
    /// this implementation keeps every encoder layer frozen and trains
    /// the classifier heads only.
    pub trainable_depth: usize,
    pub max_tokens: usize,
    pub hash_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::hashed(2048)
    }
}

impl EncoderConfig {
    pub fn hashed(embedding_dim: usize) -> Self {
        EncoderConfig {
            backend: EncoderBackend::HashedNgram,
            embedding_dim,
            trainable_depth: 0,
            max_tokens: 512,
            hash_seed: 0,
        }
    }

    pub fn transformer(embedding_dim: usize) -> Self {
        EncoderConfig {
            backend: EncoderBackend::Transformer,
            embedding_dim,
            trainable_depth: 6,
            max_tokens: 512,
            hash_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.embedding_dim == 0 {
            return Err(EncodingError::InvalidConfig("embedding_dim must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(EncodingError::InvalidConfig("max_tokens must be positive".into()));
        }
        if self.backend == EncoderBackend::HashedNgram && self.trainable_depth != 0 {
            return Err(EncodingError::InvalidConfig(
                "hashed_ngram encoder has no layers; trainable_depth must be 0".into(),
            ));
        }
        Ok(())
    }
}

/// Turns a composed input into a fixed-dimension vector.
pub trait Encoder: Send + Sync {
    fn config(&self) -> &EncoderConfig;
    fn encode(&self, input: &CompositeInput) -> Result<Array1<f64>, EncodingError>;
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Signed feature hashing over character 3–5-grams, L2-normalized.
/// Stateless and deterministic given (embedding_dim, hash_seed).
pub struct HashedNgramEncoder {
    config: EncoderConfig,
}

impl HashedNgramEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self, EncodingError> {
        config.validate()?;
        if config.backend != EncoderBackend::HashedNgram {
            return Err(EncodingError::InvalidConfig(
                "HashedNgramEncoder requires the hashed_ngram backend".into(),
            ));
        }
        Ok(HashedNgramEncoder { config })
    }

    fn accumulate(&self, gram: &str, out: &mut Array1<f64>) {
        let h = splitmix64(fnv1a64(gram.as_bytes()) ^ self.config.hash_seed);
        let bucket = ((h >> 1) % self.config.embedding_dim as u64) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign;
    }
}

impl Encoder for HashedNgramEncoder {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn encode(&self, input: &CompositeInput) -> Result<Array1<f64>, EncodingError> {
        let mut out = Array1::zeros(self.config.embedding_dim);
        let chars: Vec<char> = input.rendered.chars().collect();
        if chars.len() < 3 {
            // Too short for any 3-gram; hash the whole string once.
            self.accumulate(&input.rendered, &mut out);
        } else {
            for n in 3..=5usize {
                if chars.len() < n {
                    break;
                }
                for window in chars.windows(n) {
                    let gram: String = window.iter().collect();
                    self.accumulate(&gram, &mut out);
                }
            }
        }
        let norm = out.dot(&out).sqrt();
        if norm > 0.0 {
            out /= norm;
        }
        check_finite(&out)?;
        Ok(out)
    }
}

fn check_finite(v: &Array1<f64>) -> Result<(), EncodingError> {
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(EncodingError::NonFinite { index });
    }
    Ok(())
}

const TRANSFORMER_LAYERS: usize = 6;
const VOCAB_BUCKETS: usize = 1024;
const WEIGHTS_MAGIC: &[u8; 4] = b"AENC";
const WEIGHTS_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
const ENCODER_CONFIG_FILE: &str = "config.json";
const ENCODER_WEIGHTS_FILE: &str = "weights.bin";

struct LayerNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
}

impl LayerNorm {
    fn ones(dim: usize) -> Self {
        LayerNorm { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        let mean = x.mean().unwrap_or(0.0);
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let denom = (var + LN_EPS).sqrt();
        let mut out = Array1::zeros(x.len());
        for i in 0..x.len() {
            out[i] = (x[i] - mean) / denom * self.gamma[i] + self.beta[i];
        }
        out
    }
}

struct TransformerLayer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

/// Forward-only single-head transformer over hashed token embeddings with
/// sinusoidal positions; mean-pooled and L2-normalized output.
pub struct TransformerEncoder {
    config: EncoderConfig,
    token_table: Array2<f64>,
    layers: Vec<TransformerLayer>,
}

impl TransformerEncoder {
    /// Random initialization (weights ~ N(0, 0.02)), reproducible by seed.
    pub fn init_random(config: EncoderConfig, seed: u64) -> Result<Self, EncodingError> {
        config.validate()?;
        if config.backend != EncoderBackend::Transformer {
            return Err(EncodingError::InvalidConfig(
                "TransformerEncoder requires the transformer backend".into(),
            ));
        }
        if config.trainable_depth > TRANSFORMER_LAYERS {
            return Err(EncodingError::InvalidConfig(format!(
                "trainable_depth {} exceeds the {TRANSFORMER_LAYERS}-layer encoder",
                config.trainable_depth
            )));
        }
        let d = config.embedding_dim;
        let ff = 2 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut randn = |rows: usize, cols: usize| -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * 0.02
            })
        };
        let token_table = randn(VOCAB_BUCKETS, d);
        let layers = (0..TRANSFORMER_LAYERS)
            .map(|_| TransformerLayer {
                wq: randn(d, d),
                wk: randn(d, d),
                wv: randn(d, d),
                wo: randn(d, d),
                w1: randn(d, ff),
                b1: Array1::zeros(ff),
                w2: randn(ff, d),
                b2: Array1::zeros(d),
                ln1: LayerNorm::ones(d),
                ln2: LayerNorm::ones(d),
            })
            .collect();
        Ok(TransformerEncoder { config, token_table, layers })
    }

    /// Loads `{config.json, weights.bin}` from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self, EncodingError> {
        let config_path = dir.join(ENCODER_CONFIG_FILE);
        let weights_path = dir.join(ENCODER_WEIGHTS_FILE);
        if !config_path.exists() || !weights_path.exists() {
            return Err(EncodingError::Checkpoint {
                path: dir.to_path_buf(),
                message: "missing config.json or weights.bin".into(),
            });
        }
        let config: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(&config_path)?)
            .map_err(|e| EncodingError::Checkpoint {
                path: config_path.clone(),
                message: e.to_string(),
            })?;
        config.validate()?;

        let mut file = std::fs::File::open(&weights_path)?;
        let corrupt = |message: &str| EncodingError::Checkpoint {
            path: weights_path.clone(),
            message: message.to_string(),
        };
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(&mut file)?;
        if version != WEIGHTS_VERSION {
            return Err(corrupt(&format!("unsupported weights version {version}")));
        }
        let d = read_u32(&mut file)? as usize;
        let n_layers = read_u32(&mut file)? as usize;
        let buckets = read_u32(&mut file)? as usize;
        if d != config.embedding_dim {
            return Err(corrupt("weights dimension disagrees with config.json"));
        }
        if n_layers != TRANSFORMER_LAYERS || buckets != VOCAB_BUCKETS {
            return Err(corrupt("unexpected layer or bucket count"));
        }
        let ff = 2 * d;
        let token_table = read_arr2(&mut file, buckets, d)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(TransformerLayer {
                wq: read_arr2(&mut file, d, d)?,
                wk: read_arr2(&mut file, d, d)?,
                wv: read_arr2(&mut file, d, d)?,
                wo: read_arr2(&mut file, d, d)?,
                w1: read_arr2(&mut file, d, ff)?,
                b1: read_arr1(&mut file, ff)?,
                w2: read_arr2(&mut file, ff, d)?,
                b2: read_arr1(&mut file, d)?,
                ln1: LayerNorm { gamma: read_arr1(&mut file, d)?, beta: read_arr1(&mut file, d)? },
                ln2: LayerNorm { gamma: read_arr1(&mut file, d)?, beta: read_arr1(&mut file, d)? },
            });
        }
        Ok(TransformerEncoder { config, token_table, layers })
    }

    /// Writes `{config.json, weights.bin}` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EncodingError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(ENCODER_CONFIG_FILE),
            serde_json::to_string_pretty(&self.config).expect("config serializes"),
        )?;
        let mut file = std::fs::File::create(dir.join(ENCODER_WEIGHTS_FILE))?;
        file.write_all(WEIGHTS_MAGIC)?;
        write_u32(&mut file, WEIGHTS_VERSION)?;
        write_u32(&mut file, self.config.embedding_dim as u32)?;
        write_u32(&mut file, self.layers.len() as u32)?;
        write_u32(&mut file, VOCAB_BUCKETS as u32)?;
        write_arr2(&mut file, &self.token_table)?;
        for layer in &self.layers {
            write_arr2(&mut file, &layer.wq)?;
            write_arr2(&mut file, &layer.wk)?;
            write_arr2(&mut file, &layer.wv)?;
            write_arr2(&mut file, &layer.wo)?;
            write_arr2(&mut file, &layer.w1)?;
            write_arr1(&mut file, &layer.b1)?;
            write_arr2(&mut file, &layer.w2)?;
            write_arr1(&mut file, &layer.b2)?;
            write_arr1(&mut file, &layer.ln1.gamma)?;
            write_arr1(&mut file, &layer.ln1.beta)?;
            write_arr1(&mut file, &layer.ln2.gamma)?;
            write_arr1(&mut file, &layer.ln2.beta)?;
        }
        Ok(())
    }

    fn embed_tokens(&self, rendered: &str) -> Array2<f64> {
        let d = self.config.embedding_dim;
        let tokens: Vec<&str> = rendered.split_whitespace().collect();
        let count = tokens.len().clamp(1, self.config.max_tokens);
        let mut x = Array2::zeros((count, d));
        for (pos, row) in x.outer_iter_mut().enumerate().take(count) {
            let token = tokens.get(pos).copied().unwrap_or("");
            let bucket =
                (splitmix64(fnv1a64(token.as_bytes()) ^ self.config.hash_seed)
                    % VOCAB_BUCKETS as u64) as usize;
            let mut row = row;
            for i in 0..d {
                let angle = pos as f64
                    / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
                let positional = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                row[i] = self.token_table[(bucket, i)] + 0.01 * positional;
            }
        }
        x
    }

    fn attention(&self, layer: &TransformerLayer, x: &Array2<f64>) -> Array2<f64> {
        let d = self.config.embedding_dim as f64;
        let q = x.dot(&layer.wq);
        let k = x.dot(&layer.wk);
        let v = x.dot(&layer.wv);
        let mut scores = q.dot(&k.t()) / d.sqrt();
        for mut row in scores.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|s| (s - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|s| s / sum);
        }
        scores.dot(&v).dot(&layer.wo)
    }

    fn feed_forward(&self, layer: &TransformerLayer, x: &Array1<f64>) -> Array1<f64> {
        let hidden = x.dot(&layer.w1) + &layer.b1;
        let hidden = hidden.mapv(|v| v.max(0.0));
        hidden.dot(&layer.w2) + &layer.b2
    }
}

impl Encoder for TransformerEncoder {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn encode(&self, input: &CompositeInput) -> Result<Array1<f64>, EncodingError> {
        let mut x = self.embed_tokens(&input.rendered);
        for layer in &self.layers {
            // Pre-norm residual blocks.
            let mut normed = x.clone();
            for mut row in normed.outer_iter_mut() {
                let n = layer.ln1.apply(&row.to_owned());
                row.assign(&n);
            }
            let attended = self.attention(layer, &normed);
            x = x + attended;
            for mut row in x.outer_iter_mut() {
                let n = layer.ln2.apply(&row.to_owned());
                let ff = self.feed_forward(layer, &n);
                row += &ff;
            }
        }
        let pooled = x.mean_axis(ndarray::Axis(0)).expect("at least one token row");
        let norm = pooled.dot(&pooled).sqrt();
        let out = if norm > 0.0 { pooled / norm } else { pooled };
        check_finite(&out)?;
        Ok(out)
    }
}

/// Instantiates the encoder described by `config`. The transformer
/// backend requires `checkpoint_dir`; the hashed backend needs no state.
pub fn build_encoder(
    config: &EncoderConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Box<dyn Encoder>, EncodingError> {
    config.validate()?;
    match config.backend {
        EncoderBackend::HashedNgram => {
            Ok(Box::new(HashedNgramEncoder::new(config.clone())?))
        }
        EncoderBackend::Transformer => {
            let dir = checkpoint_dir.ok_or_else(|| EncodingError::Checkpoint {
                path: PathBuf::from("<unset>"),
                message: "transformer backend requires an encoder checkpoint directory".into(),
            })?;
            let encoder = TransformerEncoder::load(dir)?;
            if encoder.config != *config {
                return Err(EncodingError::Checkpoint {
                    path: dir.to_path_buf(),
                    message: "checkpoint config disagrees with requested config".into(),
                });
            }
            Ok(Box::new(encoder))
        }
    }
}

/// Persists the encoder config (and, for the transformer, its weights)
/// into `dir` so a checkpoint can rebuild the exact encoder.
pub fn save_encoder(encoder: &dyn Encoder, dir: &Path) -> Result<(), EncodingError> {
    match encoder.config().backend {
        EncoderBackend::HashedNgram => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(
                dir.join(ENCODER_CONFIG_FILE),
                serde_json::to_string_pretty(encoder.config()).expect("config serializes"),
            )?;
            Ok(())
        }
        EncoderBackend::Transformer => Err(EncodingError::InvalidConfig(
            "save the transformer through TransformerEncoder::save".into(),
        )),
    }
}

/// Loads whatever encoder `dir` holds, keyed by its config.json.
pub fn load_encoder(dir: &Path) -> Result<Box<dyn Encoder>, EncodingError> {
    let config_path = dir.join(ENCODER_CONFIG_FILE);
    if !config_path.exists() {
        return Err(EncodingError::Checkpoint {
            path: dir.to_path_buf(),
            message: "missing config.json".into(),
        });
    }
    let config: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(&config_path)?)
        .map_err(|e| EncodingError::Checkpoint {
            path: config_path,
            message: e.to_string(),
        })?;
    match config.backend {
        EncoderBackend::HashedNgram => Ok(Box::new(HashedNgramEncoder::new(config)?)),
        EncoderBackend::Transformer => Ok(Box::new(TransformerEncoder::load(dir)?)),
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_f64s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_arr1<R: Read>(r: &mut R, len: usize) -> Result<Array1<f64>, EncodingError> {
    Ok(Array1::from_vec(read_f64s(r, len)?))
}

fn read_arr2<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>, EncodingError> {
    let data = read_f64s(r, rows * cols)?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| EncodingError::Checkpoint {
        path: PathBuf::new(),
        message: e.to_string(),
    })
}

fn write_arr1<W: Write>(w: &mut W, a: &Array1<f64>) -> std::io::Result<()> {
    write_f64s(w, a.iter().cloned())
}

fn write_arr2<W: Write>(w: &mut W, a: &Array2<f64>) -> std::io::Result<()> {
    write_f64s(w, a.iter().cloned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::template_reasoning;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new(text, None, None).unwrap()
    }

    fn reasoning_for(d: &Document, text: &str) -> Reasoning {
        let mut r = template_reasoning(d, "AI").unwrap();
        r.text = text.to_string();
        r
    }

    #[test]
    fn composes_doc_and_reasoning() {
        let d = doc("abc");
        let r = reasoning_for(&d, "xyz");
        let input = compose_input(&d, Some(&r), 512).unwrap();
        assert_eq!(input.rendered, "abc\n###REASON###\nxyz");
    }

    #[test]
    fn no_reasoning_renders_text_exactly() {
        let d = doc("plain document text");
        let input = compose_input(&d, None, 512).unwrap();
        assert_eq!(input.rendered, d.text);

        let r = reasoning_for(&d, "   ");
        let input = compose_input(&d, Some(&r), 512).unwrap();
        assert_eq!(input.rendered, d.text);
    }

    #[test]
    fn mismatched_reasoning_is_rejected() {
        let d = doc("first document");
        let other = doc("a different document");
        let r = reasoning_for(&other, "some text");
        assert!(matches!(
            compose_input(&d, Some(&r), 512),
            Err(EncodingError::DocMismatch { .. })
        ));
    }

    #[test]
    fn long_document_crowds_out_reasoning() {
        let words: Vec<String> = (0..10_000).map(|i| format!("w{i}")).collect();
        let d = doc(&words.join(" "));
        let r = reasoning_for(&d, "this reasoning never fits");
        let input = compose_input(&d, Some(&r), 512).unwrap();
        let tokens: Vec<&str> = input.rendered.split_whitespace().collect();
        assert_eq!(tokens.len(), 512);
        assert_eq!(tokens[0], "w0");
        assert_eq!(tokens[511], "w511");
        assert!(!input.rendered.contains(SEPARATOR_CORE));
    }

    #[test]
    fn reasoning_needs_two_spare_tokens() {
        let d = doc(&(0..511).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "));
        let r = reasoning_for(&d, "cue words here");
        // 511 doc tokens + 1 spare: not enough for separator + reasoning.
        let input = compose_input(&d, Some(&r), 512).unwrap();
        assert!(!input.rendered.contains(SEPARATOR_CORE));

        // 510 doc tokens + 2 spare: separator + first reasoning token.
        let d2 = doc(&(0..510).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "));
        let r2 = reasoning_for(&d2, "cue words here");
        let input2 = compose_input(&d2, Some(&r2), 512).unwrap();
        assert!(input2.rendered.ends_with("###REASON###\ncue"));
        assert_eq!(input2.rendered.split_whitespace().count(), 512);
    }

    #[test]
    fn separator_collision_is_sanitized() {
        let d = doc("before ###REASON### after");
        let r = reasoning_for(&d, "also ###REASON### inside");
        let input = compose_input(&d, Some(&r), 512).unwrap();
        assert_eq!(input.rendered.matches(SEPARATOR_CORE).count(), 1);
    }

    #[test]
    fn truncation_preserves_whitespace() {
        let d = doc("a  b\tc d");
        let input = compose_input(&d, None, 2).unwrap();
        assert_eq!(input.rendered, "a  b");
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::hashed(0);
        assert!(c.validate().is_err());
        c.embedding_dim = 16;
        assert!(c.validate().is_ok());
        c.trainable_depth = 1;
        assert!(c.validate().is_err());
        let mut t = EncoderConfig::transformer(16);
        assert!(t.validate().is_ok());
        t.max_tokens = 0;
        assert!(t.validate().is_err());
    }

    fn hashed(dim: usize, seed: u64) -> HashedNgramEncoder {
        let mut config = EncoderConfig::hashed(dim);
        config.hash_seed = seed;
        HashedNgramEncoder::new(config).unwrap()
    }

    fn input_of(text: &str) -> CompositeInput {
        compose_input(&doc(text), None, 512).unwrap()
    }

    #[test]
    fn hashed_is_unit_norm_and_deterministic() {
        let enc_a = hashed(256, 0);
        let enc_b = hashed(256, 0);
        let input = input_of("The quick brown fox jumps over the lazy dog.");
        let va = enc_a.encode(&input).unwrap();
        let vb = enc_b.encode(&input).unwrap();
        assert_eq!(va, vb);
        assert!((va.dot(&va) - 1.0).abs() < 1e-6);
        assert_eq!(va.len(), 256);
    }

    #[test]
    fn hashed_short_string_fallback_distinguishes() {
        // Under 3 chars the whole string is the only gram; wiring is
        // cross-checked against a reference computation of the hash chain.
        let enc = hashed(64, 0);
        let va = enc.encode(&input_of("aa")).unwrap();
        let vb = enc.encode(&input_of("ab")).unwrap();
        assert_ne!(va, vb);

        let reference = |s: &str| {
            let mut h: u64 = 0xcbf29ce484222325;
            for &b in s.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            let mut x = h.wrapping_add(0x9e3779b97f4a7c15);
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
            x ^= x >> 31;
            (((x >> 1) % 64) as usize, if x & 1 == 0 { 1.0 } else { -1.0 })
        };
        let (bucket, sign) = reference("aa");
        assert_eq!(va[bucket], sign);
    }

    #[test]
    fn hash_seed_changes_vectors() {
        let input = input_of("seed sensitivity check text");
        let v0 = hashed(128, 0).encode(&input).unwrap();
        let v1 = hashed(128, 1).encode(&input).unwrap();
        assert_ne!(v0, v1);
    }

    #[test]
    fn no_cot_encoding_equals_text_alone() {
        let d = doc("identical content either way");
        let enc = hashed(128, 0);
        let with_empty = compose_input(&d, Some(&reasoning_for(&d, "")), 512).unwrap();
        let without = compose_input(&d, None, 512).unwrap();
        assert_eq!(enc.encode(&with_empty).unwrap(), enc.encode(&without).unwrap());
    }

    #[test]
    fn transformer_round_trips_through_checkpoint() {
        let config = EncoderConfig::transformer(16);
        let enc = TransformerEncoder::init_random(config, 9).unwrap();
        let input = input_of("a handful of tokens to push through the layers");
        let before = enc.encode(&input).unwrap();
        assert_eq!(before.len(), 16);
        assert!((before.dot(&before) - 1.0).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        enc.save(dir.path()).unwrap();
        let reloaded = TransformerEncoder::load(dir.path()).unwrap();
        let after = reloaded.encode(&input).unwrap();
        assert_eq!(before, after);

        let generic = load_encoder(dir.path()).unwrap();
        assert_eq!(generic.encode(&input).unwrap(), before);
    }

    #[test]
    fn transformer_missing_checkpoint_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(
            TransformerEncoder::load(&missing),
            Err(EncodingError::Checkpoint { .. })
        ));
        let config = EncoderConfig::transformer(16);
        assert!(build_encoder(&config, None).is_err());
    }

    #[test]
    fn transformer_depth_bound() {
        let mut config = EncoderConfig::transformer(8);
        config.trainable_depth = 7;
        assert!(TransformerEncoder::init_random(config, 0).is_err());
    }

    #[test]
    fn hashed_encoder_round_trips_config_dir() {
        let enc = hashed(96, 5);
        let dir = tempfile::tempdir().unwrap();
        save_encoder(&enc, dir.path()).unwrap();
        let reloaded = load_encoder(dir.path()).unwrap();
        let input = input_of("round trip content");
        assert_eq!(reloaded.encode(&input).unwrap(), enc.encode(&input).unwrap());
    }

    proptest! {
        #[test]
        fn hashed_outputs_are_finite_unit_vectors(text in "[ -~]{1,120}") {
            prop_assume!(!text.trim().is_empty());
            let enc = hashed(64, 3);
            let v = enc.encode(&input_of(&text)).unwrap();
            prop_assert!(v.iter().all(|x| x.is_finite()));
            let norm2 = v.dot(&v);
            prop_assert!((norm2 - 1.0).abs() < 1e-6);
        }

        #[test]
        fn compose_respects_budget(
            doc_words in 1..40usize,
            reason_words in 1..40usize,
            budget in 1..60usize,
        ) {
            let d = doc(&(0..doc_words).map(|i| format!("d{i}")).collect::<Vec<_>>().join(" "));
            let r = reasoning_for(
                &d,
                &(0..reason_words).map(|i| format!("r{i}")).collect::<Vec<_>>().join(" "),
            );
            let input = compose_input(&d, Some(&r), budget).unwrap();
            let tokens = input.rendered.split_whitespace().count();
            prop_assert!(tokens <= budget);
            // The document prefix always leads.
            prop_assert!(input.rendered.starts_with("d0"));
        }
    }
}

//! Bag-of-words logistic regression over gate-matched messages and the
//! classifier-filtered query fractions built on it.
//!
//! `p(y = 1 | x) = sigmoid(x · theta)` where `x` holds raw token counts plus
//! a constant bias feature at index 0. Training minimises the negative
//! log-likelihood plus `lambda / 2 * |theta[1..]|^2` with L-BFGS; the bias
//! is not penalised.

pub mod cv;
pub mod lbfgs;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError, HasText, Message, TokenizedMessage, WeekBucket};
use crate::query::{Query, QueryError};
use crate::regress::sigmoid;

pub use cv::{cross_validate, CvReport, FoldMetrics, Metric};
pub use lbfgs::Lbfgs;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training data contains only class {0}")]
    SingleClass(u8),
    #[error("training data is empty")]
    Empty,
    #[error("l2_lambda must be finite and >= 0, got {0}")]
    Lambda(f64),
    #[error("message {0:?} does not match the gate query")]
    NotGated(String),
    #[error("line {line}: label must be 0 or 1, got {label}")]
    Label { line: usize, label: i64 },
    #[error("stratification: {0}")]
    Stratification(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

pub type Result<T, E = ClassifyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMessage {
    pub message: TokenizedMessage,
    pub label: u8,
}

impl LabeledMessage {
    /// Requires the message to match the gate query.
    pub fn new(message: TokenizedMessage, label: u8, gate: &Query) -> Result<Self> {
        if !gate.matches(&message) {
            return Err(ClassifyError::NotGated(message.message.id.clone()));
        }
        Ok(LabeledMessage { message, label })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabeledRecord {
    #[serde(flatten)]
    message: Message,
    label: i64,
}

impl HasText for LabeledRecord {
    fn text(&self) -> &str {
        &self.message.text
    }
}

/// Reads labeled JSONL: the message format plus an integer `label` (0/1).
pub fn read_labeled(path: impl AsRef<Path>) -> Result<Vec<LabeledMessage>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records: Vec<LabeledRecord> =
        corpus::read_records(BufReader::new(file), path, |r: &LabeledRecord| {
            &r.message.id
        })?;
    let gate = Query::gate();
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let label = match r.label {
                0 => 0,
                1 => 1,
                other => {
                    return Err(ClassifyError::Label {
                        line: i + 1,
                        label: other,
                    })
                }
            };
            LabeledMessage::new(TokenizedMessage::new(r.message), label, &gate)
        })
        .collect()
}

pub fn write_labeled<W: Write>(mut w: W, data: &[LabeledMessage]) -> std::io::Result<()> {
    for d in data {
        let rec = LabeledRecord {
            message: d.message.message.clone(),
            label: i64::from(d.label),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Token to feature index. Index 0 is the bias; tokens take `1..=len`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary(BTreeMap<String, usize>);

impl Vocabulary {
    /// Every token occurring at least `min_count` times, indexed in sorted
    /// order.
    pub fn build<'a, I>(docs: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        Vocabulary(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_count.max(1))
                .enumerate()
                .map(|(i, (t, _))| (t.to_string(), i + 1))
                .collect(),
        )
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Self {
        Vocabulary(map)
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.0.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of weights including the bias.
    pub fn dim(&self) -> usize {
        self.0.len() + 1
    }
}

/// Sparse token counts; entry `(0, 1)` is the bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector(Vec<(usize, u32)>);

impl FeatureVector {
    pub fn entries(&self) -> &[(usize, u32)] {
        &self.0
    }

    pub fn get(&self, index: usize) -> u32 {
        self.0
            .binary_search_by_key(&index, |(i, _)| *i)
            .map(|pos| self.0[pos].1)
            .unwrap_or(0)
    }

    pub fn dot(&self, theta: &[f64]) -> f64 {
        self.0.iter().map(|&(i, c)| theta[i] * f64::from(c)).sum()
    }
}

pub fn featurize(tokens: &[String], vocab: &Vocabulary) -> FeatureVector {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    counts.insert(0, 1);
    for t in tokens {
        if let Some(i) = vocab.index(t) {
            *counts.entry(i).or_default() += 1;
        }
    }
    FeatureVector(counts.into_iter().collect())
}

/// Regularised negative log-likelihood over a featurized dataset.
#[derive(Debug, Clone)]
pub struct LogLoss {
    features: Vec<FeatureVector>,
    labels: Vec<f64>,
    lambda: f64,
    dim: usize,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LogLoss {
    pub fn new(features: Vec<FeatureVector>, labels: Vec<u8>, lambda: f64, dim: usize) -> Self {
        LogLoss {
            features,
            labels: labels.into_iter().map(f64::from).collect(),
            lambda,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.value_and_gradient(theta).0
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.dim];
        let mut loss = 0.0;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let z = x.dot(theta);
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for &(i, c) in x.entries() {
                grad[i] += r * f64::from(c);
            }
        }
        for j in 1..self.dim {
            loss += 0.5 * self.lambda * theta[j] * theta[j];
            grad[j] += self.lambda * theta[j];
        }
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_lambda: 1.0,
            tol: 1e-6,
            max_iters: 1000,
            seed: 0,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub vocabulary: Vocabulary,
    pub theta: Vec<f64>,
    pub l2_lambda: f64,
    pub trained_on: String,
    pub converged: bool,
    pub iterations: usize,
}

impl ClassifierModel {
    /// A model with every weight zero except the bias.
    pub fn constant(vocabulary: Vocabulary, bias: f64) -> Self {
        let mut theta = vec![0.0; vocabulary.dim()];
        theta[0] = bias;
        ClassifierModel {
            vocabulary,
            theta,
            l2_lambda: 0.0,
            trained_on: String::new(),
            converged: true,
            iterations: 0,
        }
    }

    pub fn predict_tokens(&self, tokens: &[String]) -> f64 {
        sigmoid(featurize(tokens, &self.vocabulary).dot(&self.theta))
    }

    pub fn predict_proba(&self, m: &TokenizedMessage) -> f64 {
        self.predict_tokens(&m.tokens)
    }

    pub fn weight(&self, token: &str) -> Option<f64> {
        self.vocabulary.index(token).map(|i| self.theta[i])
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(std::io::Error::other)
    }
}

/// SHA-256 over ids, labels and texts in input order.
pub fn fingerprint(data: &[LabeledMessage]) -> String {
    let mut h = Sha256::new();
    for d in data {
        h.update(d.message.message.id.as_bytes());
        h.update([0, d.label, 0]);
        h.update(d.message.message.text.as_bytes());
        h.update([0xff]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn train(data: &[LabeledMessage], config: &TrainConfig) -> Result<ClassifierModel> {
    if data.is_empty() {
        return Err(ClassifyError::Empty);
    }
    if !(config.l2_lambda.is_finite() && config.l2_lambda >= 0.0) {
        return Err(ClassifyError::Lambda(config.l2_lambda));
    }
    let first = data[0].label;
    if data.iter().all(|d| d.label == first) {
        return Err(ClassifyError::SingleClass(first));
    }
    let vocabulary = Vocabulary::build(
        data.iter().map(|d| d.message.tokens.as_slice()),
        config.min_count,
    );
    let loss = LogLoss::new(
        data.iter()
            .map(|d| featurize(&d.message.tokens, &vocabulary))
            .collect(),
        data.iter().map(|d| d.label).collect(),
        config.l2_lambda,
        vocabulary.dim(),
    );
    let x0 = initial_theta(vocabulary.dim(), config.seed);
    let outcome = Lbfgs {
        tol: config.tol,
        max_iters: config.max_iters,
        ..Lbfgs::default()
    }
    .minimize(|t| loss.value_and_gradient(t), x0);
    Ok(ClassifierModel {
        vocabulary,
        theta: outcome.x,
        l2_lambda: config.l2_lambda,
        trained_on: fingerprint(data),
        converged: outcome.converged,
        iterations: outcome.iterations,
    })
}

/// Small Gaussian starting point drawn from `seed`.
pub fn initial_theta(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid sd");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Expected fraction of positively classified matched messages.
pub fn soft_query_fraction(q: &Query, bucket: &WeekBucket, model: &ClassifierModel) -> Result<f64> {
    if bucket.is_empty() {
        return Err(QueryError::EmptyBucket {
            week: bucket.week_index,
        }
        .into());
    }
    let sum: f64 = bucket
        .messages
        .iter()
        .filter(|m| q.matches(m))
        .map(|m| model.predict_proba(m))
        .sum();
    Ok(sum / bucket.len() as f64)
}

/// Fraction of messages that match and have positive-class probability
/// strictly above 0.5.
pub fn hard_query_fraction(q: &Query, bucket: &WeekBucket, model: &ClassifierModel) -> Result<f64> {
    if bucket.is_empty() {
        return Err(QueryError::EmptyBucket {
            week: bucket.week_index,
        }
        .into());
    }
    let count = bucket
        .messages
        .iter()
        .filter(|m| q.matches(m) && model.predict_proba(m) > 0.5)
        .count();
    Ok(count as f64 / bucket.len() as f64)
}

//! Linear dual-encoder model, in-batch-negative loss, and training loop.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Passage};
use crate::error::{Error, Result};
use crate::retriever::features::{featurize, FeatureVector, NUM_FEATURES};
use crate::seeding::derive_seed;

const MODEL_MAGIC: &[u8; 8] = b"CSDEM01\0";
const MODEL_VERSION: u32 = 1;
const INIT_SCALE: f64 = 0.01;

/// One training example: the concatenated query history and its positive
/// passage id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_context: String,
    pub positive_id: String,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Queries per batch; in-batch negatives need at least 2.
    pub batch_size: usize,
    /// Step size for plain mini-batch gradient descent. The default suits the
    /// linear towers; a pretrained-transformer recipe would use 2e-5.
    pub learning_rate: f64,
    pub epochs: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 2e-2,
            epochs: 10,
            embedding_dim: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation(format!(
                "batch_size must be >= 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::validation("embedding_dim must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Two linear projection towers over the hashed feature space.
#[derive(Debug, Clone)]
pub struct DualEncoderModel {
    dim: usize,
    seed: u64,
    query_tower: Vec<f64>,
    passage_tower: Vec<f64>,
}

impl DualEncoderModel {
    /// Seeded uniform(-0.01, 0.01) initialization for both towers.
    pub fn new_seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init", 0));
        let mut init = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
                .collect()
        };
        let n = NUM_FEATURES * dim;
        DualEncoderModel {
            dim,
            seed,
            query_tower: init(n),
            passage_tower: init(n),
        }
    }

    /// All-zero towers. Useful as the untrained reference: every similarity
    /// is exactly zero and the in-batch loss is exactly ln(B).
    pub fn zeros(dim: usize) -> Self {
        DualEncoderModel {
            dim,
            seed: 0,
            query_tower: vec![0.0; NUM_FEATURES * dim],
            passage_tower: vec![0.0; NUM_FEATURES * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn project(&self, tower: &[f64], fv: &FeatureVector) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(idx, val) in fv.entries() {
            let row = idx as usize * self.dim;
            for (k, o) in out.iter_mut().enumerate() {
                *o += val * tower[row + k];
            }
        }
        out
    }

    /// Embeds a conversational query history: turns joined by single spaces,
    /// then hashed and projected through the query tower.
    pub fn encode_query<S: AsRef<str>>(&self, history: &[S]) -> Vec<f64> {
        let joined = history
            .iter()
            .map(|s| s.as_ref())
            .collect::<Vec<_>>()
            .join(" ");
        self.encode_context(&joined)
    }

    /// Embeds an already-concatenated query context string.
    pub fn encode_context(&self, context: &str) -> Vec<f64> {
        self.project(&self.query_tower, &featurize(context))
    }

    /// Embeds a passage as `title + " " + text` through the passage tower.
    pub fn encode_passage(&self, passage: &Passage) -> Vec<f64> {
        let text = format!("{} {}", passage.title, passage.text);
        self.project(&self.passage_tower, &featurize(&text))
    }

    /// Overwrites one feature's query-tower row. Intended for hand-built
    /// models in tests and probes.
    pub fn set_query_row(&mut self, feature: u32, row: &[f64]) {
        let base = feature as usize * self.dim;
        self.query_tower[base..base + self.dim].copy_from_slice(row);
    }

    /// Overwrites one feature's passage-tower row.
    pub fn set_passage_row(&mut self, feature: u32, row: &[f64]) {
        let base = feature as usize * self.dim;
        self.passage_tower[base..base + self.dim].copy_from_slice(row);
    }

    /// Adds `delta` to a single weight. Finite-difference checks perturb
    /// weights through this.
    pub fn nudge_weight(&mut self, tower: Tower, feature: u32, k: usize, delta: f64) {
        let i = feature as usize * self.dim + k;
        match tower {
            Tower::Query => self.query_tower[i] += delta,
            Tower::Passage => self.passage_tower[i] += delta,
        }
    }

    fn apply_gradients(&mut self, grads: &BatchGradients, lr: f64) {
        for (&feature, row) in &grads.query_rows {
            let base = feature as usize * self.dim;
            for (k, g) in row.iter().enumerate() {
                self.query_tower[base + k] -= lr * g;
            }
        }
        for (&feature, row) in &grads.passage_rows {
            let base = feature as usize * self.dim;
            for (k, g) in row.iter().enumerate() {
                self.passage_tower[base + k] -= lr * g;
            }
        }
    }

    /// Binary container: magic, version, dims, seed, then both towers as
    /// little-endian f64. Byte-identical for identical models.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.query_tower.len() * 16);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(NUM_FEATURES as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for w in self.query_tower.iter().chain(self.passage_tower.iter()) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::data(format!("{}: truncated model file", path.display())))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::data(format!("{}: not a model file", path.display())));
        }
        let mut buf4 = [0u8; 4];
        f.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != MODEL_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported model version {version}",
                path.display()
            )));
        }
        let mut buf8 = [0u8; 8];
        f.read_exact(&mut buf8)?;
        let features = u64::from_le_bytes(buf8) as usize;
        if features != NUM_FEATURES {
            return Err(Error::data(format!(
                "{}: feature space {features} does not match {NUM_FEATURES}",
                path.display()
            )));
        }
        f.read_exact(&mut buf8)?;
        let dim = u64::from_le_bytes(buf8) as usize;
        f.read_exact(&mut buf8)?;
        let seed = u64::from_le_bytes(buf8);
        let n = NUM_FEATURES * dim;
        let mut weights = vec![0u8; n * 16];
        f.read_exact(&mut weights)
            .map_err(|_| Error::data(format!("{}: truncated model weights", path.display())))?;
        let read_tower = |bytes: &[u8]| -> Vec<f64> {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let query_tower = read_tower(&weights[..n * 8]);
        let passage_tower = read_tower(&weights[n * 8..]);
        Ok(DualEncoderModel {
            dim,
            seed,
            query_tower,
            passage_tower,
        })
    }
}

/// Selects which tower a weight operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Query,
    Passage,
}

/// Dot-product similarity.
pub fn similarity(q_emb: &[f64], p_emb: &[f64]) -> Result<f64> {
    if q_emb.len() != p_emb.len() {
        return Err(Error::validation(format!(
            "embedding dim mismatch: {} vs {}",
            q_emb.len(),
            p_emb.len()
        )));
    }
    Ok(q_emb.iter().zip(p_emb).map(|(a, b)| a * b).sum())
}

/// Sparse per-feature gradients for both towers.
#[derive(Debug, Clone, Default)]
pub struct BatchGradients {
    pub query_rows: BTreeMap<u32, Vec<f64>>,
    pub passage_rows: BTreeMap<u32, Vec<f64>>,
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// In-batch-negative softmax loss and its exact gradients.
///
/// With `S[i][j] = sim(q_i, p_j)`, the loss is
/// `-(1/B) * sum_i (S[i][i] - logsumexp_j S[i][j])`; every other pair's
/// positive passage serves as a negative for query i.
pub fn in_batch_loss(
    model: &DualEncoderModel,
    batch: &[TrainingPair],
    corpus: &Corpus,
) -> Result<(f64, BatchGradients)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::validation(format!(
            "in-batch loss needs at least 2 pairs, got {b}"
        )));
    }
    let mut seen = HashSet::with_capacity(b);
    for pair in batch {
        if !seen.insert(pair.positive_id.as_str()) {
            return Err(Error::data(format!(
                "duplicate positive id {:?} in batch (would be a false negative)",
                pair.positive_id
            )));
        }
    }

    let query_features: Vec<FeatureVector> = batch
        .iter()
        .map(|p| featurize(&p.query_context))
        .collect();
    let mut passage_features = Vec::with_capacity(b);
    for pair in batch {
        let passage = corpus.get(&pair.positive_id).ok_or_else(|| {
            Error::data(format!("unresolvable passage id {:?}", pair.positive_id))
        })?;
        passage_features.push(featurize(&format!("{} {}", passage.title, passage.text)));
    }

    let q_emb: Vec<Vec<f64>> = query_features
        .iter()
        .map(|fv| model.project(&model.query_tower, fv))
        .collect();
    let p_emb: Vec<Vec<f64>> = passage_features
        .iter()
        .map(|fv| model.project(&model.passage_tower, fv))
        .collect();

    let mut scores = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            scores[i][j] = similarity(&q_emb[i], &p_emb[j])?;
        }
    }

    let mut loss = 0.0;
    // d_scores[i][j] = dL/dS[i][j] = (softmax_j(S[i]) - delta_ij) / B
    let mut d_scores = vec![vec![0.0; b]; b];
    for i in 0..b {
        let lse = logsumexp(&scores[i]);
        loss += lse - scores[i][i];
        for j in 0..b {
            let p = (scores[i][j] - lse).exp();
            d_scores[i][j] = (p - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;

    let dim = model.dim;
    let mut grads = BatchGradients::default();
    for i in 0..b {
        // dL/dq_i = sum_j dL/dS[i][j] * p_j, scattered over q_i's features.
        let mut d_q = vec![0.0; dim];
        for j in 0..b {
            let c = d_scores[i][j];
            if c != 0.0 {
                for (k, d) in d_q.iter_mut().enumerate() {
                    *d += c * p_emb[j][k];
                }
            }
        }
        for &(idx, val) in query_features[i].entries() {
            let row = grads
                .query_rows
                .entry(idx)
                .or_insert_with(|| vec![0.0; dim]);
            for (k, d) in d_q.iter().enumerate() {
                row[k] += val * d;
            }
        }
    }
    for j in 0..b {
        let mut d_p = vec![0.0; dim];
        for i in 0..b {
            let c = d_scores[i][j];
            if c != 0.0 {
                for (k, d) in d_p.iter_mut().enumerate() {
                    *d += c * q_emb[i][k];
                }
            }
        }
        for &(idx, val) in passage_features[j].entries() {
            let row = grads
                .passage_rows
                .entry(idx)
                .or_insert_with(|| vec![0.0; dim]);
            for (k, d) in d_p.iter().enumerate() {
                row[k] += val * d;
            }
        }
    }

    Ok((loss, grads))
}

/// Per-epoch mean batch loss recorded during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

fn shuffle<R: Rng>(indices: &mut [usize], rng: &mut R) {
    // Fisher-Yates, hand-rolled so the permutation stays stable across rand
    // releases.
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Splits shuffled pair indices into batches of at most `batch_size` with
/// pairwise-distinct positive ids. Pairs colliding with the current batch
/// spill into later batches; a final remainder smaller than 2 (or sharing a
/// single id) is skipped for the epoch and reshuffled into the next one.
fn plan_batches(
    order: &[usize],
    positives: &[&str],
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut pending: Vec<usize> = order.to_vec();
    while pending.len() >= 2 {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen: HashSet<&str> = HashSet::with_capacity(batch_size);
        let mut rest = Vec::with_capacity(pending.len());
        for idx in pending {
            if batch.len() < batch_size && seen.insert(positives[idx]) {
                batch.push(idx);
            } else {
                rest.push(idx);
            }
        }
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
        pending = rest;
    }
    batches
}

/// Trains a dual encoder with plain mini-batch gradient descent. Shuffling is
/// seeded per epoch and updates run single-threaded, so a fixed seed gives
/// bit-identical weights on every run.
pub fn train(
    pairs: &[TrainingPair],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(DualEncoderModel, TrainTrace)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    for pair in pairs {
        if corpus.get(&pair.positive_id).is_none() {
            return Err(Error::data(format!(
                "unresolvable passage id {:?} in training pairs",
                pair.positive_id
            )));
        }
    }

    let positives: Vec<&str> = pairs.iter().map(|p| p.positive_id.as_str()).collect();
    let mut model = DualEncoderModel::new_seeded(cfg.embedding_dim, cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch", epoch as u64));
        shuffle(&mut order, &mut rng);

        let mut loss_sum = 0.0;
        let mut examples = 0usize;
        for batch_idx in plan_batches(&order, &positives, cfg.batch_size) {
            let batch: Vec<TrainingPair> =
                batch_idx.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grads) = in_batch_loss(&model, &batch, corpus)?;
            model.apply_gradients(&grads, cfg.learning_rate);
            loss_sum += loss * batch.len() as f64;
            examples += batch.len();
        }
        let epoch_loss = if examples > 0 {
            loss_sum / examples as f64
        } else {
            f64::NAN
        };
        epoch_losses.push(epoch_loss);
    }

    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        model,
        TrainTrace {
            epoch_losses,
            final_loss,
        },
    ))
}

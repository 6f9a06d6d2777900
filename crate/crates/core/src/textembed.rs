//! Paragraph vectors (distributed bag of words) with negative sampling.
//!
//! Each document vector is trained to predict the document's own tokens
//! against sampled noise tokens. Identical documents are trained once and
//! share their vector; initial vectors are seeded from a content hash.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::EntityId;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum TextEmbedError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty document for {0}")]
    EmptyDocument(String),
    #[error("document has no in-vocabulary tokens")]
    OutOfVocabulary,
    #[error("embedding dim must be >= 2, got {0}")]
    BadDim(usize),
    #[error("bad vector entry `{0}`")]
    BadEntry(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DocEmbedConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
}

impl Default for DocEmbedConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            epochs: 50,
            negatives: 5,
            learning_rate: 0.025,
            min_learning_rate: 0.0001,
        }
    }
}

/// Entity id -> document vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DocVectors {
    pub dim: usize,
    pub map: BTreeMap<EntityId, Vec<f64>>,
}

impl DocVectors {
    pub fn get(&self, id: &EntityId) -> Option<&[f64]> {
        self.map.get(id).map(Vec::as_slice)
    }

    /// Named tensors (`"item:3"` -> `1 x dim`) for the checkpoint format.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.map
            .iter()
            .map(|(id, v)| (id.to_string(), Tensor::row_vector(v.clone())))
            .collect()
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self, TextEmbedError> {
        let mut map = BTreeMap::new();
        let mut dim = 0;
        for (name, t) in named {
            let id: EntityId = name.parse().map_err(|_| TextEmbedError::BadEntry(name.clone()))?;
            dim = t.len();
            map.insert(id, t.into_data());
        }
        Ok(Self { dim, map })
    }
}

/// Frozen output (word) weights and noise distribution, used to infer
/// vectors for unseen documents.
#[derive(Clone, Debug)]
pub struct DocModel {
    pub config: DocEmbedConfig,
    vocab: HashMap<String, usize>,
    word_out: Vec<f64>,
    noise_cdf: Vec<f64>,
}

pub fn content_seed(tokens: &[String]) -> u64 {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

fn init_vector(tokens: &[String], dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed(tokens));
    (0..dim).map(|_| (rng.random::<f64>() - 0.5) / dim as f64).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_noise(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

impl DocModel {
    /// One negative-sampling update of `doc` on `word`. Updates `word_out`
    /// only when `train_words` is set.
    fn update(&mut self, doc: &mut [f64], word: usize, lr: f64, rng: &mut ChaCha8Rng, train_words: bool) {
        let dim = doc.len();
        let mut grad = vec![0.0; dim];
        for n in 0..=self.config.negatives {
            let (target, label) = if n == 0 {
                (word, 1.0)
            } else {
                let t = sample_noise(&self.noise_cdf, rng);
                if t == word {
                    continue;
                }
                (t, 0.0)
            };
            let out = &mut self.word_out[target * dim..(target + 1) * dim];
            let score: f64 = doc.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
            let g = lr * (label - sigmoid(score));
            for k in 0..dim {
                grad[k] += g * out[k];
                if train_words {
                    out[k] += g * doc[k];
                }
            }
        }
        doc.iter_mut().zip(&grad).for_each(|(d, g)| *d += g);
    }
}

pub fn train_doc_embeddings(
    corpus: &[(EntityId, Vec<String>)],
    cfg: &DocEmbedConfig,
    seed: u64,
) -> Result<(DocVectors, DocModel), TextEmbedError> {
    if corpus.is_empty() {
        return Err(TextEmbedError::EmptyCorpus);
    }
    if cfg.dim < 2 {
        return Err(TextEmbedError::BadDim(cfg.dim));
    }
    let mut vocab: HashMap<String, usize> = HashMap::new();
    let mut freq: Vec<f64> = Vec::new();
    // distinct documents in first-seen order
    let mut unique: Vec<&Vec<String>> = Vec::new();
    let mut doc_slot: HashMap<&Vec<String>, usize> = HashMap::new();
    let mut entity_slot = Vec::with_capacity(corpus.len());
    for (id, doc) in corpus {
        if doc.is_empty() {
            return Err(TextEmbedError::EmptyDocument(id.to_string()));
        }
        let slot = *doc_slot.entry(doc).or_insert_with(|| {
            unique.push(doc);
            unique.len() - 1
        });
        entity_slot.push(slot);
    }
    let mut docs_ids: Vec<Vec<usize>> = Vec::with_capacity(unique.len());
    for doc in &unique {
        let ids = doc
            .iter()
            .map(|t| {
                let next = vocab.len();
                let id = *vocab.entry(t.clone()).or_insert(next);
                if id == freq.len() {
                    freq.push(0.0);
                }
                freq[id] += 1.0;
                id
            })
            .collect();
        docs_ids.push(ids);
    }
    let mut noise_cdf = Vec::with_capacity(freq.len());
    let mut acc = 0.0;
    for f in &freq {
        acc += f.powf(0.75);
        noise_cdf.push(acc);
    }
    let dim = cfg.dim;
    let mut model = DocModel {
        config: cfg.clone(),
        vocab,
        word_out: vec![0.0; freq.len() * dim],
        noise_cdf,
    };
    let mut vectors: Vec<Vec<f64>> = unique.iter().map(|d| init_vector(d, dim)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_steps = (cfg.epochs * docs_ids.iter().map(Vec::len).sum::<usize>()).max(1) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..docs_ids.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &d in &order {
            for &w in &docs_ids[d] {
                let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps)).max(cfg.min_learning_rate);
                model.update(&mut vectors[d], w, lr, &mut rng, true);
                step += 1;
            }
        }
    }
    let map = corpus
        .iter()
        .zip(&entity_slot)
        .map(|((id, _), &slot)| (*id, vectors[slot].clone()))
        .collect();
    Ok((DocVectors { dim, map }, model))
}

/// Infers a vector for `doc` with the word weights frozen. Deterministic in
/// the document content.
pub fn embed_query(doc: &[String], model: &DocModel) -> Result<Vec<f64>, TextEmbedError> {
    if doc.is_empty() {
        return Err(TextEmbedError::EmptyDocument("query".into()));
    }
    let ids: Vec<usize> = doc.iter().filter_map(|t| model.vocab.get(t).copied()).collect();
    if ids.is_empty() {
        return Err(TextEmbedError::OutOfVocabulary);
    }
    let cfg = model.config.clone();
    let mut v = init_vector(doc, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed(doc) ^ 0x9e37_79b9_7f4a_7c15);
    let mut scratch = model.clone();
    let total = (cfg.epochs * ids.len()).max(1) as f64;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        for &w in &ids {
            let lr = (cfg.learning_rate * (1.0 - step as f64 / total)).max(cfg.min_learning_rate);
            scratch.update(&mut v, w, lr, &mut rng, false);
            step += 1;
        }
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

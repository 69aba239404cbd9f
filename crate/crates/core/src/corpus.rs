//! Tokenization, vocabulary, document encoding and data splits.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;

use crate::rng;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_RESERVED: usize = 3;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Content tokens kept per document before the boundary markers are added.
pub const MAX_CONTENT_TOKENS: usize = 80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusError {
    EmptyCorpus,
    InvalidMinCount,
    InsufficientClass {
        label: usize,
        available: usize,
        requested: usize,
    },
    MissingLabel {
        label: usize,
        num_labels: usize,
    },
    EmptyPool,
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            CorpusError::InvalidMinCount => write!(f, "min_count must be at least 1"),
            CorpusError::InsufficientClass {
                label,
                available,
                requested,
            } => write!(
                f,
                "class {label} has {available} instances but {requested} were requested"
            ),
            CorpusError::MissingLabel { label, num_labels } => write!(
                f,
                "label {label} never occurs in the training pool (num_labels = {num_labels})"
            ),
            CorpusError::EmptyPool => write!(f, "the training pool is empty"),
        }
    }
}

/// Lowercases, detaches every non-alphanumeric, non-space character as its
/// own token, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Builds the vocabulary from training texts. Tokens seen fewer than
    /// `min_count` times are left out and encode as UNK. Ids are assigned by
    /// descending count, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Self, CorpusError> {
        if min_count < 1 {
            return Err(CorpusError::InvalidMinCount);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = kept.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_content_tokens(tokens, min_count))
    }

    /// Vocabulary whose ids `3..` are `tokens` in order.
    pub fn from_content_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let mut all = Vec::with_capacity(tokens.len() + NUM_RESERVED);
        all.push(UNK_TOKEN.to_string());
        all.push(BOS_TOKEN.to_string());
        all.push(EOS_TOKEN.to_string());
        all.extend(tokens);
        let mut v = Vocabulary {
            tokens: all,
            index: BTreeMap::new(),
            min_count,
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(NUM_RESERVED)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes, keeps the first 80 tokens, maps OOV to UNK and wraps with BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(MAX_CONTENT_TOKENS + 2);
        ids.push(BOS);
        ids.extend(
            tokenize(text)
                .iter()
                .take(MAX_CONTENT_TOKENS)
                .map(|t| self.id(t)),
        );
        ids.push(EOS);
        ids
    }

    /// Content tokens of `ids` joined with single spaces; boundary markers dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&i| i != BOS && i != EOS) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub label: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDocument {
    pub ids: Vec<usize>,
    pub label: usize,
}

impl EncodedDocument {
    pub fn encode(doc: &RawDocument, vocab: &Vocabulary) -> Self {
        EncodedDocument {
            ids: vocab.encode(&doc.text),
            label: doc.label,
        }
    }
}

pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for RawDocument {
    fn label(&self) -> usize {
        self.label
    }
}

impl Labeled for EncodedDocument {
    fn label(&self) -> usize {
        self.label
    }
}

/// `max label + 1`, checking that every label below it occurs.
pub fn infer_num_labels<T: Labeled>(pool: &[T]) -> Result<usize, CorpusError> {
    let n = pool.iter().map(|d| d.label() + 1).max().ok_or(CorpusError::EmptyPool)?;
    let counts = label_counts(pool, n);
    match counts.iter().position(|&c| c == 0) {
        Some(label) => Err(CorpusError::MissingLabel { label, num_labels: n }),
        None => Ok(n),
    }
}

pub fn label_counts<T: Labeled>(docs: &[T], num_labels: usize) -> Vec<usize> {
    let mut c = alloc::vec![0; num_labels];
    for d in docs {
        if d.label() < num_labels {
            c[d.label()] += 1;
        }
    }
    c
}

/// Exactly `n_per_class` items per label drawn without replacement. The
/// result keeps pool order.
pub fn subsample_per_class<T: Labeled + Clone>(
    pool: &[T],
    num_labels: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<T>, CorpusError> {
    let mut by_class: Vec<Vec<usize>> = alloc::vec![Vec::new(); num_labels];
    for (i, d) in pool.iter().enumerate() {
        if d.label() < num_labels {
            by_class[d.label()].push(i);
        }
    }
    let mut chosen = Vec::with_capacity(n_per_class * num_labels);
    for (label, members) in by_class.iter().enumerate() {
        if members.len() < n_per_class {
            return Err(CorpusError::InsufficientClass {
                label,
                available: members.len(),
                requested: n_per_class,
            });
        }
        let mut r = rng::substream(seed, rng::streams::SUBSAMPLE, label as u64);
        chosen.extend(
            index::sample(&mut r, members.len(), n_per_class)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevSplit<T> {
    pub train_pool: Vec<T>,
    pub dev: Vec<T>,
    /// `(requested, used)` when the pool was too small for the requested dev size.
    pub fallback: Option<(usize, usize)>,
}

/// Draws a dev set uniformly without replacement; the rest is the pool that
/// training subsets are sampled from. A pool not larger than `dev_size`
/// gets a dev set of 10% of the pool instead.
pub fn split_dev<T: Clone>(pool: &[T], dev_size: usize, seed: u64) -> DevSplit<T> {
    let (size, fallback) = if pool.len() > dev_size {
        (dev_size, None)
    } else {
        let used = pool.len() / 10;
        (used, Some((dev_size, used)))
    };
    let mut r = rng::stream(seed, rng::streams::DEV_SPLIT);
    let mut in_dev = alloc::vec![false; pool.len()];
    for i in index::sample(&mut r, pool.len(), size) {
        in_dev[i] = true;
    }
    let mut train_pool = Vec::with_capacity(pool.len() - size);
    let mut dev = Vec::with_capacity(size);
    for (d, &is_dev) in pool.iter().zip(&in_dev) {
        if is_dev {
            dev.push(d.clone());
        } else {
            train_pool.push(d.clone());
        }
    }
    DevSplit {
        train_pool,
        dev,
        fallback,
    }
}

/// Maximum-likelihood label distribution, optionally add-one smoothed.
pub fn label_prior<T: Labeled>(docs: &[T], num_labels: usize, add_one: bool) -> Vec<f64> {
    let counts = label_counts(docs, num_labels);
    let extra = if add_one { 1.0 } else { 0.0 };
    let total: f64 = counts.iter().map(|&c| c as f64 + extra).sum();
    counts.iter().map(|&c| (c as f64 + extra) / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<EncodedDocument>,
    pub dev: Vec<EncodedDocument>,
    pub test: Vec<EncodedDocument>,
    pub num_labels: usize,
    pub label_counts: Vec<usize>,
}

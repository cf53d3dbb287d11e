//! Bag-of-embeddings classifier: token embeddings, max pooling over the
//! sentence, optional dropout, linear head.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::TokenSequence;

pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_EMBEDDING_DIM: usize = 32;
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_tokens(Vec::<String>::new()).expect("empty vocabulary is valid")
    }
}

impl Vocabulary {
    pub const UNK: usize = 0;

    /// Tokens seen at least `min_freq` times, in order of first occurrence.
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut first_seen: Vec<&str> = Vec::new();
        for seq in corpus {
            for tok in seq.iter() {
                let c = counts.entry(tok.as_str()).or_insert(0);
                if *c == 0 {
                    first_seen.push(tok.as_str());
                }
                *c += 1;
            }
        }
        let mut vocab = Vocabulary::default();
        for tok in first_seen {
            if counts[tok] >= min_freq && tok != UNK_TOKEN {
                vocab.push(tok.to_owned());
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its ordered token list (without UNK).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        v.push(UNK_TOKEN.to_owned());
        for t in tokens {
            let t = t.into();
            if v.contains(&t) {
                return Err(Error::InvalidInput(format!("token `{t}` listed twice")));
            }
            v.push(t);
        }
        Ok(v)
    }

    fn push(&mut self, tok: String) -> usize {
        let id = self.id_to_token.len();
        self.token_to_id.insert(tok.clone(), id);
        self.id_to_token.push(tok);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.token_to_id.contains_key(tok)
    }

    pub fn id(&self, tok: &str) -> usize {
        self.token_to_id.get(tok).copied().unwrap_or(Self::UNK)
    }

    pub fn get(&self, tok: &str) -> Option<usize> {
        self.token_to_id.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// All registered tokens except UNK, in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[1..]
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `vocab_size x dim`
    pub embedding: Matrix,
    /// `num_classes x dim`
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
    pub dropout_rate: f64,
}

impl ClassifierParams {
    /// Uniform init in `[-INIT_RANGE, INIT_RANGE]` for embeddings and head
    /// weights, zero bias.
    pub fn init(
        vocab_size: usize,
        dim: usize,
        num_classes: usize,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {dropout_rate} not in [0, 1)"
            )));
        }
        let mut embedding = Matrix::zeros(vocab_size, dim);
        fill_uniform(&mut embedding.data, rng);
        let mut head_weights = Matrix::zeros(num_classes, dim);
        fill_uniform(&mut head_weights.data, rng);
        Ok(ClassifierParams {
            embedding,
            head_weights,
            head_bias: vec![0.0; num_classes],
            dropout_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols
    }

    pub fn num_classes(&self) -> usize {
        self.head_weights.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    pub fn is_finite(&self) -> bool {
        self.embedding
            .data
            .iter()
            .chain(&self.head_weights.data)
            .chain(&self.head_bias)
            .all(|x| x.is_finite())
    }
}

fn fill_uniform(values: &mut [f64], rng: &mut impl Rng) {
    for v in values {
        *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
    /// Token position that supplied each coordinate (first maximum).
    pub argmax: Vec<usize>,
}

/// Column-wise maximum of the token embeddings, ties routed to the first
/// token attaining the maximum.
pub fn pool_ids(ids: &[usize], params: &ClassifierParams) -> Result<SentenceEmbedding> {
    if ids.is_empty() {
        return Err(Error::InvalidInput(
            "cannot embed an empty token sequence".into(),
        ));
    }
    let dim = params.dim();
    let mut values = params.embedding.row(ids[0]).to_vec();
    let mut argmax = vec![0usize; dim];
    for (pos, &id) in ids.iter().enumerate().skip(1) {
        for (j, &x) in params.embedding.row(id).iter().enumerate() {
            if x > values[j] {
                values[j] = x;
                argmax[j] = pos;
            }
        }
    }
    Ok(SentenceEmbedding { values, argmax })
}

pub fn embed_and_pool(
    tokens: &TokenSequence,
    params: &ClassifierParams,
    vocab: &Vocabulary,
) -> Result<SentenceEmbedding> {
    pool_ids(&vocab.encode(tokens), params)
}

pub fn logits_of(params: &ClassifierParams, h: &[f64]) -> Vec<f64> {
    (0..params.num_classes())
        .map(|k| {
            let w = params.head_weights.row(k);
            w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + params.head_bias[k]
        })
        .collect()
}

/// Inverted dropout mask: each unit kept with probability `1 - rate` and
/// scaled by `1 / (1 - rate)`.
pub fn dropout_mask(dim: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..dim)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Returns the logits and the pre-dropout sentence embedding.
pub fn forward_ids(
    ids: &[usize],
    params: &ClassifierParams,
    mask: Option<&[f64]>,
) -> Result<(Vec<f64>, SentenceEmbedding)> {
    let e = pool_ids(ids, params)?;
    let logits = match mask {
        None => logits_of(params, &e.values),
        Some(m) => {
            if m.len() != e.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "dropout mask has {} entries, embedding has {}",
                    m.len(),
                    e.values.len()
                )));
            }
            let h: Vec<f64> = e.values.iter().zip(m).map(|(a, b)| a * b).collect();
            logits_of(params, &h)
        }
    };
    Ok((logits, e))
}

pub fn forward(
    tokens: &TokenSequence,
    params: &ClassifierParams,
    vocab: &Vocabulary,
    mask: Option<&[f64]>,
) -> Result<(Vec<f64>, SentenceEmbedding)> {
    forward_ids(&vocab.encode(tokens), params, mask)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

pub fn predict(
    tokens: &TokenSequence,
    params: &ClassifierParams,
    vocab: &Vocabulary,
) -> Result<usize> {
    let (logits, _) = forward(tokens, params, vocab, None)?;
    Ok(argmax(&logits))
}

/// Registers `new_tokens`, appending freshly initialized embedding rows.
/// Existing rows are left untouched.
pub fn extend_vocab(
    params: &mut ClassifierParams,
    vocab: &mut Vocabulary,
    new_tokens: &[&str],
    rng: &mut impl Rng,
) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for t in new_tokens {
        if vocab.contains(t) || !seen.insert(*t) {
            return Err(Error::InvalidInput(format!(
                "token `{t}` is already registered"
            )));
        }
    }
    let dim = params.dim();
    for t in new_tokens {
        vocab.push((*t).to_owned());
        let mut row = vec![0.0; dim];
        fill_uniform(&mut row, rng);
        params.embedding.data.extend_from_slice(&row);
        params.embedding.rows += 1;
    }
    Ok(())
}

/// A trained (or freshly initialized) classifier with everything needed to
/// reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: Vocabulary,
    pub params: ClassifierParams,
    pub seed: u64,
    /// Strategy the model was trained with, if any.
    pub strategy: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    strategy: Option<String>,
    seed: u64,
    dim: usize,
    num_classes: usize,
    dropout_rate: f64,
    vocab: Vec<String>,
    embedding: Vec<f64>,
    head_weights: Vec<f64>,
    head_bias: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "counterbias-checkpoint-v1";

impl Model {
    pub fn predict(&self, tokens: &TokenSequence) -> Result<usize> {
        predict(tokens, &self.params, &self.vocab)
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            strategy: self.strategy.clone(),
            seed: self.seed,
            dim: self.params.dim(),
            num_classes: self.params.num_classes(),
            dropout_rate: self.params.dropout_rate,
            vocab: self.vocab.tokens().to_vec(),
            embedding: self.params.embedding.data.clone(),
            head_weights: self.params.head_weights.data.clone(),
            head_bias: self.params.head_bias.clone(),
        };
        let mut s = serde_json::to_string_pretty(&ckpt)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!(
                "unknown checkpoint format `{}`",
                c.format
            )));
        }
        let vocab = Vocabulary::from_tokens(c.vocab)?;
        let n = vocab.len();
        if c.embedding.len() != n * c.dim
            || c.head_weights.len() != c.num_classes * c.dim
            || c.head_bias.len() != c.num_classes
        {
            return Err(Error::ShapeMismatch(
                "checkpoint matrices do not match header".into(),
            ));
        }
        let params = ClassifierParams {
            embedding: Matrix {
                rows: n,
                cols: c.dim,
                data: c.embedding,
            },
            head_weights: Matrix {
                rows: c.num_classes,
                cols: c.dim,
                data: c.head_weights,
            },
            head_bias: c.head_bias,
            dropout_rate: c.dropout_rate,
        };
        if !params.is_finite() {
            return Err(Error::InvalidInput(
                "checkpoint holds non-finite values".into(),
            ));
        }
        Ok(Model {
            vocab,
            params,
            seed: c.seed,
            strategy: c.strategy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

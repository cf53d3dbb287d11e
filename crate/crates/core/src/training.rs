//! Joint-loss fine-tuning.
//!
//! The objective for a pair is `ce(original) + lambda * (1 - cos(e1, e2))`
//! where `e1`/`e2` are the max-pooled embeddings of the original and its
//! swapped variant. Gradients are analytic and flow through both encoder
//! paths; dropout touches only the classification path of the original.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    dropout_mask, extend_vocab, forward_ids, seeded_rng, ClassifierParams, Matrix, Model,
    Vocabulary,
};
use crate::transform::{PairedSample, TokenMasker, TokenSequence, GENDER_TOKEN, NAME_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No training; the seeded initialization is evaluated as-is.
    ZeroShot,
    /// Cross-entropy on originals only.
    Fod,
    /// Cross-entropy on originals plus canonical variants.
    Foa,
    /// Cross-entropy on masked originals.
    Tm,
    /// Joint loss on (original, canonical variant) pairs.
    Jlo,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ZeroShot,
        Strategy::Fod,
        Strategy::Tm,
        Strategy::Jlo,
        Strategy::Foa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::Fod => "fod",
            Strategy::Foa => "foa",
            Strategy::Tm => "tm",
            Strategy::Jlo => "jlo",
        }
    }

    /// Display label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "Zero Shot",
            Strategy::Fod => "FOD",
            Strategy::Foa => "FOA",
            Strategy::Tm => "TM",
            Strategy::Jlo => "JLO",
        }
    }

    pub fn uses_masking(self) -> bool {
        self == Strategy::Tm
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zeroshot" => Ok(Strategy::ZeroShot),
            "fod" => Ok(Strategy::Fod),
            "foa" => Ok(Strategy::Foa),
            "tm" => Ok(Strategy::Tm),
            "jlo" => Ok(Strategy::Jlo),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            strategy: Strategy::Jlo,
            lambda: 1.0,
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 15,
            dropout_rate: 0.2,
            seed: 42,
        }
    }
}

impl MitigationConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        MitigationConfig {
            strategy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub gb: f64,
    pub joint: f64,
    pub lambda: f64,
}

// ---------------------------------------------------------------------------
// Loss terms

pub fn cosine_similarity(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings of length {} and {}",
            e1.len(),
            e2.len()
        )));
    }
    let n1 = norm(e1);
    let n2 = norm(e2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm embedding".into()));
    }
    Ok((dot(e1, e2) / (n1 * n2)).clamp(-1.0, 1.0))
}

pub fn gender_debias_loss(e1: &[f64], e2: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(e1, e2)?)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(max + log_sum - logits[label])
}

pub fn joint_loss(
    logits: &[f64],
    label: usize,
    e1: &[f64],
    e2: &[f64],
    lambda: f64,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, label)?;
    let gb = gender_debias_loss(e1, e2)?;
    Ok(LossBreakdown {
        ce,
        gb,
        joint: if lambda == 0.0 { ce } else { ce + lambda * gb },
        lambda,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / sum).collect()
}

/// `(d/de1, d/de2)` of `1 - cos(e1, e2)`.
pub fn debias_loss_gradients(e1: &[f64], e2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n1 = norm(e1);
    let n2 = norm(e2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm embedding".into()));
    }
    let d = dot(e1, e2);
    let inv = 1.0 / (n1 * n2);
    let g1 = e1
        .iter()
        .zip(e2)
        .map(|(a, b)| -(b * inv - d * a / (n1 * n1 * n1 * n2)))
        .collect();
    let g2 = e1
        .iter()
        .zip(e2)
        .map(|(a, b)| -(a * inv - d * b / (n2 * n2 * n2 * n1)))
        .collect();
    Ok((g1, g2))
}

// ---------------------------------------------------------------------------
// Gradients

/// Dense gradient (or optimizer moment) with the shape of `ClassifierParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Matrix,
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Gradients {
            embedding: Matrix::zeros(params.embedding.rows, params.embedding.cols),
            head_weights: Matrix::zeros(params.head_weights.rows, params.head_weights.cols),
            head_bias: vec![0.0; params.head_bias.len()],
        }
    }

    fn matches(&self, params: &ClassifierParams) -> bool {
        self.embedding.same_shape(&params.embedding)
            && self.head_weights.same_shape(&params.head_weights)
            && self.head_bias.len() == params.head_bias.len()
    }

    pub fn clear(&mut self) {
        self.embedding.data.iter_mut().for_each(|x| *x = 0.0);
        self.head_weights.data.iter_mut().for_each(|x| *x = 0.0);
        self.head_bias.iter_mut().for_each(|x| *x = 0.0);
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.embedding
            .data
            .iter()
            .chain(&self.head_weights.data)
            .chain(&self.head_bias)
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|&x| x == 0.0)
    }
}

/// One training example expressed in token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub original: Vec<usize>,
    /// Present only for joint-loss training.
    pub swapped: Option<Vec<usize>>,
    pub label: usize,
    /// Inverted-dropout mask for the original's classification path.
    pub mask: Option<Vec<f64>>,
    pub lambda: f64,
}

impl Instance {
    pub fn loss(&self, params: &ClassifierParams) -> Result<LossBreakdown> {
        let (logits, e1) = forward_ids(&self.original, params, self.mask.as_deref())?;
        match &self.swapped {
            Some(sw) => {
                let (_, e2) = forward_ids(sw, params, None)?;
                joint_loss(&logits, self.label, &e1.values, &e2.values, self.lambda)
            }
            None => {
                let ce = cross_entropy(&logits, self.label)?;
                Ok(LossBreakdown {
                    ce,
                    gb: 0.0,
                    joint: ce,
                    lambda: 0.0,
                })
            }
        }
    }

    /// Adds `scale * dJ/dparams` into `grads` and returns the loss.
    pub fn accumulate(
        &self,
        params: &ClassifierParams,
        grads: &mut Gradients,
        scale: f64,
    ) -> Result<LossBreakdown> {
        let dim = params.dim();
        let (logits, e1) = forward_ids(&self.original, params, self.mask.as_deref())?;
        let h: Vec<f64> = match &self.mask {
            Some(m) => e1.values.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => e1.values.clone(),
        };
        let ce = cross_entropy(&logits, self.label)?;
        let mut dz = softmax(&logits);
        dz[self.label] -= 1.0;

        let mut de1 = vec![0.0; dim];
        for (k, &dzk) in dz.iter().enumerate() {
            grads.head_bias[k] += scale * dzk;
            let w = params.head_weights.row(k);
            let gw = grads.head_weights.row_mut(k);
            for j in 0..dim {
                gw[j] += scale * dzk * h[j];
                de1[j] += dzk * w[j];
            }
        }
        if let Some(m) = &self.mask {
            de1.iter_mut().zip(m).for_each(|(g, mj)| *g *= mj);
        }

        let mut breakdown = LossBreakdown {
            ce,
            gb: 0.0,
            joint: ce,
            lambda: 0.0,
        };
        if let Some(sw) = &self.swapped {
            let (_, e2) = forward_ids(sw, params, None)?;
            let gb = gender_debias_loss(&e1.values, &e2.values)?;
            breakdown = LossBreakdown {
                ce,
                gb,
                joint: if self.lambda == 0.0 {
                    ce
                } else {
                    ce + self.lambda * gb
                },
                lambda: self.lambda,
            };
            if self.lambda != 0.0 {
                let (g1, g2) = debias_loss_gradients(&e1.values, &e2.values)?;
                for j in 0..dim {
                    de1[j] += self.lambda * g1[j];
                }
                for j in 0..dim {
                    let row = sw[e2.argmax[j]];
                    grads.embedding.data[row * dim + j] += scale * self.lambda * g2[j];
                }
            }
        }
        for (j, d) in de1.iter().enumerate() {
            let row = self.original[e1.argmax[j]];
            grads.embedding.data[row * dim + j] += scale * d;
        }
        Ok(breakdown)
    }
}

/// Gradients of the joint loss for one (original, swapped) pair.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    original: &TokenSequence,
    swapped: &TokenSequence,
    label: usize,
    params: &ClassifierParams,
    vocab: &Vocabulary,
    mask: Option<&[f64]>,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let inst = Instance {
        original: vocab.encode(original),
        swapped: Some(vocab.encode(swapped)),
        label,
        mask: mask.map(<[f64]>::to_vec),
        lambda,
    };
    let mut grads = Gradients::zeros_like(params);
    let loss = inst.accumulate(params, &mut grads, 1.0)?;
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ClassifierParams) -> Self {
        AdamState {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn adam_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    state: (f64, f64, f64, f64, f64, f64),
) {
    let (beta1, beta2, eps, lr, c1, c2) = state;
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Standard Adam with bias correction.
pub fn adam_step(
    params: &mut ClassifierParams,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if !grads.matches(params)
        || !state.first_moment.matches(params)
        || !state.second_moment.matches(params)
    {
        return Err(Error::ShapeMismatch(
            "gradient or optimizer state does not match parameters".into(),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c = (
        state.beta1,
        state.beta2,
        state.epsilon,
        learning_rate,
        1.0 - state.beta1.powi(t),
        1.0 - state.beta2.powi(t),
    );
    adam_update(
        &mut params.embedding.data,
        &grads.embedding.data,
        &mut state.first_moment.embedding.data,
        &mut state.second_moment.embedding.data,
        c,
    );
    adam_update(
        &mut params.head_weights.data,
        &grads.head_weights.data,
        &mut state.first_moment.head_weights.data,
        &mut state.second_moment.head_weights.data,
        c,
    );
    adam_update(
        &mut params.head_bias,
        &grads.head_bias,
        &mut state.first_moment.head_bias,
        &mut state.second_moment.head_bias,
        c,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// One entry per epoch, empty for zero-shot.
    pub log: Vec<LossBreakdown>,
    /// Number of training examples seen per epoch.
    pub samples_per_epoch: usize,
}

struct Example {
    original: TokenSequence,
    swapped: Option<TokenSequence>,
    label: usize,
}

fn examples_for(
    pairs: &[PairedSample],
    strategy: Strategy,
    masker: Option<&TokenMasker<'_>>,
) -> Result<Vec<Example>> {
    let canonical = |p: &PairedSample| -> Result<TokenSequence> {
        p.canonical().cloned().ok_or_else(|| {
            Error::Config(format!(
                "{strategy} needs a swapped variant but pair `{}` has none",
                p.pair_id
            ))
        })
    };
    let mut out = Vec::new();
    match strategy {
        Strategy::ZeroShot => {}
        Strategy::Fod => {
            for p in pairs {
                out.push(Example {
                    original: p.original.clone(),
                    swapped: None,
                    label: p.label,
                });
            }
        }
        Strategy::Foa => {
            for p in pairs {
                out.push(Example {
                    original: p.original.clone(),
                    swapped: None,
                    label: p.label,
                });
            }
            for p in pairs {
                out.push(Example {
                    original: canonical(p)?,
                    swapped: None,
                    label: p.label,
                });
            }
        }
        Strategy::Tm => {
            let masker = masker.ok_or_else(|| {
                Error::Config("token masking needs a lexicon and name detector".into())
            })?;
            for p in pairs {
                out.push(Example {
                    original: masker.mask(&p.original),
                    swapped: None,
                    label: p.label,
                });
            }
        }
        Strategy::Jlo => {
            for p in pairs {
                out.push(Example {
                    original: p.original.clone(),
                    swapped: Some(canonical(p)?),
                    label: p.label,
                });
            }
        }
    }
    Ok(out)
}

/// Trains `model` on `pairs` according to `config.strategy`.
pub fn train(
    pairs: &[PairedSample],
    config: &MitigationConfig,
    mut model: Model,
    masker: Option<&TokenMasker<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let examples = examples_for(pairs, config.strategy, masker)?;
    model.strategy = Some(config.strategy.as_str().to_owned());
    if config.strategy == Strategy::ZeroShot {
        return Ok(TrainOutcome {
            model,
            log: Vec::new(),
            samples_per_epoch: 0,
        });
    }
    let num_classes = model.params.num_classes();
    if let Some(p) = pairs.iter().find(|p| p.label >= num_classes) {
        return Err(Error::InvalidInput(format!(
            "pair `{}` has label {} but the model has {num_classes} classes",
            p.pair_id, p.label
        )));
    }

    // Dropout masks and batch order come from one stream offset from the
    // init stream, so the run is a pure function of the seed.
    let mut rng = seeded_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    if config.strategy.uses_masking() {
        let missing: Vec<&str> = [NAME_TOKEN, GENDER_TOKEN]
            .into_iter()
            .filter(|t| !model.vocab.contains(t))
            .collect();
        extend_vocab(&mut model.params, &mut model.vocab, &missing, &mut rng)?;
    }
    model.params.dropout_rate = config.dropout_rate;

    let encoded: Vec<(Vec<usize>, Option<Vec<usize>>, usize)> = examples
        .iter()
        .map(|ex| {
            (
                model.vocab.encode(&ex.original),
                ex.swapped.as_ref().map(|s| model.vocab.encode(s)),
                ex.label,
            )
        })
        .collect();
    if let Some(i) = encoded
        .iter()
        .position(|(o, s, _)| o.is_empty() || s.as_ref().is_some_and(Vec::is_empty))
    {
        return Err(Error::InvalidInput(format!(
            "training example {i} has no tokens"
        )));
    }

    let dim = model.params.dim();
    let mut state = AdamState::new(&model.params);
    let mut grads = Gradients::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let lambda = if config.strategy == Strategy::Jlo {
        config.lambda
    } else {
        0.0
    };

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut gb, mut joint) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (orig, swapped, label) = &encoded[i];
                let inst = Instance {
                    original: orig.clone(),
                    swapped: swapped.clone(),
                    label: *label,
                    mask: Some(dropout_mask(dim, config.dropout_rate, &mut rng)),
                    lambda,
                };
                let l = inst.accumulate(&model.params, &mut grads, scale)?;
                ce += l.ce;
                gb += l.gb;
                joint += l.joint;
            }
            adam_step(&mut model.params, &grads, &mut state, config.learning_rate)?;
        }
        let n = encoded.len() as f64;
        log.push(LossBreakdown {
            ce: ce / n,
            gb: gb / n,
            joint: joint / n,
            lambda,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        samples_per_epoch: encoded.len(),
    })
}

/// Fresh model over the vocabulary of a paired corpus (originals and all
/// variants), initialized from `seed`.
pub fn init_model(
    pairs: &[PairedSample],
    dim: usize,
    num_classes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<Model> {
    let vocab = Vocabulary::build(
        pairs
            .iter()
            .flat_map(|p| std::iter::once(&p.original).chain(&p.variants)),
        1,
    );
    let mut rng = seeded_rng(seed);
    let params = ClassifierParams::init(vocab.len(), dim, num_classes, dropout_rate, &mut rng)?;
    Ok(Model {
        vocab,
        params,
        seed,
        strategy: None,
    })
}

pub fn write_loss_log<W: std::io::Write>(writer: W, log: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "ce", "gb", "joint"])?;
    for (i, l) in log.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            l.ce.to_string(),
            l.gb.to_string(),
            l.joint.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<loss log>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdOutcome {
    Checked {
        max_rel_error: f64,
        coordinates: usize,
    },
    /// Some pooled coordinate is within `2h` of a tie between distinct
    /// tokens, where the loss is not differentiable.
    NonSmooth,
}

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so coordinates with vanishing gradient are compared
/// absolutely.
pub const REL_FLOOR: f64 = 1e-6;

fn near_pooling_tie(ids: &[usize], params: &ClassifierParams, h: f64) -> bool {
    let mut distinct: Vec<usize> = ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return false;
    }
    for j in 0..params.dim() {
        let mut col: Vec<f64> = distinct
            .iter()
            .map(|&r| params.embedding.get(r, j))
            .collect();
        col.sort_by(|a, b| b.total_cmp(a));
        if col[0] - col[1] < 2.0 * h {
            return true;
        }
    }
    false
}

/// Compares analytic gradients against central differences over every
/// parameter the instance touches.
pub fn finite_difference_check(
    instance: &Instance,
    params: &ClassifierParams,
    h: f64,
) -> Result<FdOutcome> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    if near_pooling_tie(&instance.original, params, h)
        || instance
            .swapped
            .as_ref()
            .is_some_and(|s| near_pooling_tie(s, params, h))
    {
        return Ok(FdOutcome::NonSmooth);
    }
    let mut analytic = Gradients::zeros_like(params);
    instance.accumulate(params, &mut analytic, 1.0)?;

    let dim = params.dim();
    let mut rows: Vec<usize> = instance
        .original
        .iter()
        .chain(instance.swapped.iter().flatten())
        .copied()
        .collect();
    rows.sort_unstable();
    rows.dedup();

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let mut compare = |a: f64, n: f64| {
        let denom = a.abs().max(n.abs()).max(REL_FLOOR);
        worst = worst.max((a - n).abs() / denom);
        coords += 1;
    };

    for &r in &rows {
        for j in 0..dim {
            let idx = r * dim + j;
            let n = central(&mut probe, h, |p| &mut p.embedding.data[idx], instance)?;
            compare(analytic.embedding.data[idx], n);
        }
    }
    for idx in 0..params.head_weights.data.len() {
        let n = central(&mut probe, h, |p| &mut p.head_weights.data[idx], instance)?;
        compare(analytic.head_weights.data[idx], n);
    }
    for k in 0..params.head_bias.len() {
        let n = central(&mut probe, h, |p| &mut p.head_bias[k], instance)?;
        compare(analytic.head_bias[k], n);
    }
    Ok(FdOutcome::Checked {
        max_rel_error: worst,
        coordinates: coords,
    })
}

fn central(
    probe: &mut ClassifierParams,
    h: f64,
    slot: impl Fn(&mut ClassifierParams) -> &mut f64,
    instance: &Instance,
) -> Result<f64> {
    let orig = *slot(probe);
    *slot(probe) = orig + h;
    let plus = instance.loss(probe)?.joint;
    *slot(probe) = orig - h;
    let minus = instance.loss(probe)?.joint;
    *slot(probe) = orig;
    Ok((plus - minus) / (2.0 * h))
}

//! Training loop: batch sampling, Adam with bias correction and coupled
//! weight decay, global-norm gradient clipping, the two-stage learning-rate
//! schedule, and best-validation model selection.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{build_vocab, Corpus, DataError, TripleBatch};
use crate::encoders::Vocabulary;
use crate::evaluation::{
    encode_split, retrieval_reports, validation_score, EvalError, RetrievalReport,
};
use crate::model::{loss_and_grads, ModelError, ModelParams};
use crate::objectives::LossBreakdown;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    /// A gradient went non-finite; training aborts naming the parameter.
    NonFiniteGradient { param: String, coord: usize },
    /// The loss went non-finite; the last breakdown is attached.
    NonFiniteLoss { last: Box<LossBreakdown> },
    /// Requested more distinct images than the pool holds.
    PoolExhausted { requested: usize, available: usize },
    /// Batch size below the hard minimum.
    BatchTooSmall { size: usize },
    /// Gradient vector count does not match the parameter count.
    GradientArity { params: usize, grads: usize },
    Model(String),
    Data(DataError),
    Eval(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFiniteGradient { param, coord } => {
                write!(f, "non-finite gradient in parameter '{param}' at coordinate {coord}")
            }
            TrainError::NonFiniteLoss { last } => {
                write!(f, "non-finite loss; last breakdown: {last:?}")
            }
            TrainError::PoolExhausted { requested, available } => {
                write!(f, "cannot sample {requested} distinct images from {available}")
            }
            TrainError::BatchTooSmall { size } => {
                write!(f, "batch size {size} is below the minimum of 2")
            }
            TrainError::GradientArity { params, grads } => {
                write!(f, "{grads} gradient blocks for {params} parameters")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Eval(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e.to_string())
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e.to_string())
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam moment accumulators, aligned with the canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.flat().iter().map(|p| vec![0.0; p.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    /// Decoupled decay applies `lr * wd * param` outside the moment update;
    /// the default couples decay into the gradient.
    pub decoupled: bool,
}

/// One in-place Adam update. The effective gradient is
/// `grad + weight_decay * param` unless decay is decoupled. Frozen parameter
/// blocks are skipped entirely.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    frozen: &[bool],
) -> TrainResult<()> {
    let mut flat = params.flat_mut();
    if flat.len() != grads.len() {
        return Err(TrainError::GradientArity {
            params: flat.len(),
            grads: grads.len(),
        });
    }
    for (pi, p) in flat.iter().enumerate() {
        for (ci, g) in grads[pi].iter().enumerate() {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                    coord: ci,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (pi, p) in flat.iter_mut().enumerate() {
        if frozen.get(pi).copied().unwrap_or(false) {
            continue;
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for (ci, value) in p.values.iter_mut().enumerate() {
            let mut g = grads[pi][ci];
            if !hyper.decoupled {
                g += hyper.weight_decay * *value;
            }
            m[ci] = ADAM_BETA1 * m[ci] + (1.0 - ADAM_BETA1) * g;
            v[ci] = ADAM_BETA2 * v[ci] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[ci] / bc1;
            let v_hat = v[ci] / bc2;
            *value -= hyper.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if hyper.decoupled {
                *value -= hyper.lr * hyper.weight_decay * *value;
            }
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the applied scale (1.0 when untouched).
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm2: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = norm2.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    scale
}

// ── Sampling ─────────────────────────────────────────────────────────

/// Sample `size` distinct images from the pool, drawing one caption per
/// language uniformly for each.
pub fn sample_batch(
    corpus: &Corpus,
    pool: &[String],
    vocab_a: &Vocabulary,
    vocab_b: &Vocabulary,
    rng: &mut impl Rng,
    size: usize,
) -> TrainResult<TripleBatch> {
    if size < 2 {
        return Err(TrainError::BatchTooSmall { size });
    }
    if size > pool.len() {
        return Err(TrainError::PoolExhausted {
            requested: size,
            available: pool.len(),
        });
    }
    let mut ids = pool.to_vec();
    ids.partial_shuffle(rng, size);
    ids.truncate(size);
    Ok(TripleBatch::build(corpus, &ids, vocab_a, vocab_b, rng)?)
}

// ── Training loop ────────────────────────────────────────────────────

/// One logged optimization step.
#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub clip_scale: f64,
    pub breakdown: LossBreakdown,
}

impl TrainLogRow {
    pub fn csv(&self) -> String {
        self.breakdown.csv_row(self.step, self.lr, self.clip_scale)
    }
}

/// Validation scores of one epoch.
#[derive(Clone, Debug)]
pub struct EpochValidation {
    pub epoch: usize,
    pub reports: [RetrievalReport; 4],
    pub score: f64,
}

/// A restorable training state: everything needed to evaluate or resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub epoch: usize,
    pub val_score: f64,
    pub vocab_a: Vocabulary,
    pub vocab_b: Vocabulary,
}

pub struct TrainOutcome {
    /// Checkpoint with the best validation score.
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub log: Vec<TrainLogRow>,
    pub validations: Vec<EpochValidation>,
}

/// Build the two vocabularies from the training split's captions.
pub fn build_vocabs(corpus: &Corpus, min_count: usize) -> (Vocabulary, Vocabulary) {
    fn collect<'a>(
        corpus: &'a Corpus,
        table: &'a std::collections::BTreeMap<String, Vec<Vec<String>>>,
    ) -> Vec<&'a Vec<String>> {
        corpus
            .splits
            .train
            .iter()
            .filter_map(|id| table.get(id))
            .flatten()
            .collect()
    }
    (
        build_vocab(collect(corpus, &corpus.captions_a), min_count),
        build_vocab(collect(corpus, &corpus.captions_b), min_count),
    )
}

fn frozen_mask(params: &ModelParams, freeze_embeddings: bool) -> Vec<bool> {
    params
        .flat()
        .iter()
        .map(|p| freeze_embeddings && p.name.starts_with("emb_"))
        .collect()
}

/// Train from explicit initial parameters and vocabularies.
///
/// Each epoch draws ceil(pool/batch) batches from a freshly shuffled
/// training pool without replacement (a trailing chunk of one image is
/// dropped: it has no in-batch negatives). Validation recall runs after
/// every epoch; the checkpoint with the best R@{1,5,10} sum over all four
/// directions wins.
pub fn train_from(
    cfg: &RunConfig,
    corpus: &Corpus,
    mut params: ModelParams,
    vocab_a: Vocabulary,
    vocab_b: Vocabulary,
    mut on_row: impl FnMut(&TrainLogRow),
) -> TrainResult<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = OptimizerState::new(&params);
    let frozen = frozen_mask(&params, cfg.freeze_embeddings);
    let loss_cfg = cfg.loss();
    let mut log = Vec::new();
    let mut validations = Vec::new();
    let mut step: u64 = 0;

    let validate = |params: &ModelParams, epoch: usize| -> TrainResult<EpochValidation> {
        let split = encode_split(params, corpus, "val", &vocab_a, &vocab_b, cfg.max_objects)?;
        let reports = retrieval_reports(&split, &[1, 5, 10], 1)?;
        let score = validation_score(&reports);
        Ok(EpochValidation {
            epoch,
            reports,
            score,
        })
    };

    let snapshot = |params: &ModelParams,
                    opt: &OptimizerState,
                    epoch: usize,
                    val_score: f64,
                    vocab_a: &Vocabulary,
                    vocab_b: &Vocabulary| {
        Checkpoint {
            cfg: cfg.clone(),
            params: params.clone(),
            opt: opt.clone(),
            epoch,
            val_score,
            vocab_a: vocab_a.clone(),
            vocab_b: vocab_b.clone(),
        }
    };

    let initial = validate(&params, 0)?;
    let mut best = snapshot(&params, &opt, 0, initial.score, &vocab_a, &vocab_b);
    validations.push(initial);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order = corpus.splits.train.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                // A single leftover image has no negatives.
                continue;
            }
            let batch = TripleBatch::build(corpus, chunk, &vocab_a, &vocab_b, &mut rng)?;
            let (breakdown, mut grads) =
                loss_and_grads(&params, &batch, &loss_cfg, cfg.max_objects)?;
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    last: Box::new(breakdown),
                });
            }
            let clip_scale = clip_gradients(&mut grads, cfg.clip_norm);
            adam_step(
                &mut params,
                &grads,
                &mut opt,
                &AdamHyper {
                    lr,
                    weight_decay: cfg.weight_decay,
                    decoupled: cfg.decoupled_weight_decay,
                },
                &frozen,
            )?;
            step += 1;
            let row = TrainLogRow {
                step,
                epoch,
                lr,
                clip_scale,
                breakdown,
            };
            on_row(&row);
            log.push(row);
        }
        let val = validate(&params, epoch + 1)?;
        if val.score > best.val_score {
            best = snapshot(&params, &opt, epoch + 1, val.score, &vocab_a, &vocab_b);
        }
        validations.push(val);
    }

    let last_score = validations.last().map(|v| v.score).unwrap_or(0.0);
    let last = snapshot(&params, &opt, cfg.epochs, last_score, &vocab_a, &vocab_b);
    Ok(TrainOutcome {
        best,
        last,
        log,
        validations,
    })
}

/// Train from freshly initialized parameters (vocabularies built from the
/// training split).
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    on_row: impl FnMut(&TrainLogRow),
) -> TrainResult<TrainOutcome> {
    let (vocab_a, vocab_b) = build_vocabs(corpus, cfg.min_count);
    let params = ModelParams::init(cfg, vocab_a.len(), vocab_b.len(), cfg.seed);
    train_from(cfg, corpus, params, vocab_a, vocab_b, on_row)
}

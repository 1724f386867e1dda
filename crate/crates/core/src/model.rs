//! Full model assembly: every trainable parameter, the batch forward pass
//! producing an [`EncodedBatch`], gradient collection for the optimizer, and
//! the model-level finite-difference gradient check.
//!
//! Parameters have a canonical flat order (text A, text B, visual projector,
//! then the three per-stream head sets). The optimizer state, checkpoint
//! manifest, and gradient vectors all follow it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend_all_with_weights, AttentionHeadNodes, AttentionHeadParams, HeadedRepresentation,
};
use crate::config::RunConfig;
use crate::data::{ImageFeatures, TripleBatch};
use crate::encoders::{
    bilstm_encode, embed_tokens, encode_visual, EncodeError, TextEncoderNodes, TextEncoderParams,
    VisualEncoderNodes, VisualEncoderParams,
};
use crate::objectives::{total_loss, EncodedBatch, LossBreakdown, LossConfig, LossError};
use crate::params::Param;
use crate::tensor::{finite_diff_check, GradCheckReport, Shape, Tape, Tensor};

/// Which language stream a sentence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lang {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Encode(EncodeError),
    Loss(LossError),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::Encode(e) => write!(f, "{e}"),
            ModelError::Loss(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<EncodeError> for ModelError {
    fn from(e: EncodeError) -> Self {
        ModelError::Encode(e)
    }
}

impl From<LossError> for ModelError {
    fn from(e: LossError) -> Self {
        ModelError::Loss(e)
    }
}

impl From<crate::tensor::TensorError> for ModelError {
    fn from(e: crate::tensor::TensorError) -> Self {
        ModelError::Encode(EncodeError::Tensor(e))
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

/// All trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub text_a: TextEncoderParams,
    pub text_b: TextEncoderParams,
    pub visual: VisualEncoderParams,
    pub attn_v: Vec<AttentionHeadParams>,
    pub attn_a: Vec<AttentionHeadParams>,
    pub attn_b: Vec<AttentionHeadParams>,
}

impl ModelParams {
    pub fn init(cfg: &RunConfig, vocab_a: usize, vocab_b: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = |tag: &str, rng: &mut ChaCha8Rng| -> Vec<AttentionHeadParams> {
            (0..cfg.k)
                .map(|k| AttentionHeadParams::init(&format!("attn_{tag}_{k}"), cfg.h, cfg.h, cfg.h, rng))
                .collect()
        };
        ModelParams {
            text_a: TextEncoderParams::init("a", vocab_a, cfg.d_w, cfg.h, &mut rng),
            text_b: TextEncoderParams::init("b", vocab_b, cfg.d_w, cfg.h, &mut rng),
            visual: VisualEncoderParams::init(cfg.d_v, cfg.h, &mut rng),
            attn_v: heads("v", &mut rng),
            attn_a: heads("a", &mut rng),
            attn_b: heads("b", &mut rng),
        }
    }

    /// Canonical parameter order.
    pub fn flat(&self) -> Vec<&Param> {
        let mut out = self.text_a.flat();
        out.extend(self.text_b.flat());
        out.extend(self.visual.flat());
        for h in self.attn_v.iter().chain(&self.attn_a).chain(&self.attn_b) {
            out.extend(h.flat());
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.text_a.flat_mut();
        out.extend(self.text_b.flat_mut());
        out.extend(self.visual.flat_mut());
        for h in self
            .attn_v
            .iter_mut()
            .chain(self.attn_a.iter_mut())
            .chain(self.attn_b.iter_mut())
        {
            out.extend(h.flat_mut());
        }
        out
    }

    /// Total scalar coordinate count.
    pub fn n_coords(&self) -> usize {
        self.flat().iter().map(|p| p.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> ModelNodes {
        ModelNodes {
            text_a: self.text_a.register(tape),
            text_b: self.text_b.register(tape),
            visual: self.visual.register(tape),
            attn_v: self.attn_v.iter().map(|h| h.register(tape)).collect(),
            attn_a: self.attn_a.iter().map(|h| h.register(tape)).collect(),
            attn_b: self.attn_b.iter().map(|h| h.register(tape)).collect(),
        }
    }
}

/// Registered tape handles mirroring [`ModelParams`], in the same order.
pub struct ModelNodes {
    pub text_a: TextEncoderNodes,
    pub text_b: TextEncoderNodes,
    pub visual: VisualEncoderNodes,
    pub attn_v: Vec<AttentionHeadNodes>,
    pub attn_a: Vec<AttentionHeadNodes>,
    pub attn_b: Vec<AttentionHeadNodes>,
}

impl ModelNodes {
    pub fn flat(&self) -> Vec<Tensor> {
        let mut out = self.text_a.flat();
        out.extend(self.text_b.flat());
        out.extend([self.visual.w, self.visual.b]);
        for h in self.attn_v.iter().chain(&self.attn_a).chain(&self.attn_b) {
            out.extend(h.flat());
        }
        out
    }
}

/// One encoded instance of one stream, with per-head attention weights.
pub struct StreamForward {
    pub rep: HeadedRepresentation,
    pub weights: Vec<Tensor>,
}

fn forward_sentence(
    tape: &mut Tape,
    text: &TextEncoderNodes,
    heads: &[AttentionHeadNodes],
    tokens: &[u32],
    mask: &[bool],
    external: Option<&[Vec<f64>]>,
) -> ModelResult<StreamForward> {
    let embedded = embed_tokens(tape, text.embedding, tokens, external)?;
    let states = bilstm_encode(tape, embedded, mask, &text.fwd, &text.bwd)?;
    let (rep, weights) = attend_all_with_weights(tape, &states, heads)
        .map_err(EncodeError::Tensor)?;
    Ok(StreamForward { rep, weights })
}

fn forward_image(
    tape: &mut Tape,
    visual: &VisualEncoderNodes,
    heads: &[AttentionHeadNodes],
    objects: &[f64],
    mask: &[bool],
    d_v: usize,
    max_objects: usize,
) -> ModelResult<StreamForward> {
    let rows = mask.len();
    let objects = tape.constant(objects.to_vec(), Shape::new(rows, d_v));
    let states = encode_visual(tape, objects, mask, visual, max_objects)?;
    let (rep, weights) = attend_all_with_weights(tape, &states, heads)
        .map_err(EncodeError::Tensor)?;
    Ok(StreamForward { rep, weights })
}

/// Forward pass of a whole batch through all three streams.
pub fn forward_batch(
    tape: &mut Tape,
    nodes: &ModelNodes,
    batch: &TripleBatch,
    max_objects: usize,
) -> ModelResult<EncodedBatch> {
    let mut visual = Vec::with_capacity(batch.len());
    let mut lang_a = Vec::with_capacity(batch.len());
    let mut lang_b = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        visual.push(
            forward_image(
                tape,
                &nodes.visual,
                &nodes.attn_v,
                &batch.objects[i],
                &batch.obj_mask[i],
                batch.d_v,
                max_objects,
            )?
            .rep,
        );
        lang_a.push(
            forward_sentence(
                tape,
                &nodes.text_a,
                &nodes.attn_a,
                &batch.tokens_a[i],
                &batch.mask_a[i],
                None,
            )?
            .rep,
        );
        lang_b.push(
            forward_sentence(
                tape,
                &nodes.text_b,
                &nodes.attn_b,
                &batch.tokens_b[i],
                &batch.mask_b[i],
                None,
            )?
            .rep,
        );
    }
    Ok(EncodedBatch {
        visual,
        lang_a,
        lang_b,
    })
}

/// One full training evaluation: forward, total loss, backward, gradients
/// collected in canonical parameter order.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &TripleBatch,
    loss_cfg: &LossConfig,
    max_objects: usize,
) -> ModelResult<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let encoded = forward_batch(&mut tape, &nodes, batch, max_objects)?;
    let (loss, breakdown) = total_loss(&mut tape, &encoded, loss_cfg)?;
    tape.backward(loss).map_err(EncodeError::Tensor)?;
    let grads = nodes
        .flat()
        .into_iter()
        .map(|t| tape.grad(t).expect("parameter node must carry grad").to_vec())
        .collect();
    Ok((breakdown, grads))
}

/// Loss value only (used by the finite-difference probes).
pub fn loss_value(
    params: &ModelParams,
    batch: &TripleBatch,
    loss_cfg: &LossConfig,
    max_objects: usize,
) -> ModelResult<f64> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let encoded = forward_batch(&mut tape, &nodes, batch, max_objects)?;
    let (_, breakdown) = total_loss(&mut tape, &encoded, loss_cfg)?;
    Ok(breakdown.total)
}

// ── Evaluation-side encoding (values, no gradients) ──────────────────

/// Encoded instance extracted from a tape: plain values.
#[derive(Clone, Debug)]
pub struct EncodedValues {
    pub id: String,
    pub concat: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
    /// Per-head attention weights over the instance's valid positions.
    pub weights: Vec<Vec<f64>>,
}

fn extract(tape: &Tape, id: &str, fwd: &StreamForward, valid: usize) -> EncodedValues {
    EncodedValues {
        id: id.to_string(),
        concat: tape.values(fwd.rep.concat).to_vec(),
        heads: fwd
            .rep
            .heads
            .iter()
            .map(|h| tape.values(*h).to_vec())
            .collect(),
        weights: fwd
            .weights
            .iter()
            .map(|w| tape.values(*w)[..valid].to_vec())
            .collect(),
    }
}

const ENCODE_CHUNK: usize = 64;

/// Encode tokenized sentences with one language encoder, in chunks so tapes
/// stay small.
pub fn encode_sentences(
    params: &ModelParams,
    items: &[(String, Vec<u32>)],
    lang: Lang,
) -> ModelResult<Vec<EncodedValues>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape);
        let (text, heads) = match lang {
            Lang::A => (&nodes.text_a, &nodes.attn_a),
            Lang::B => (&nodes.text_b, &nodes.attn_b),
        };
        for (id, tokens) in chunk {
            let mask: Vec<bool> = tokens.iter().map(|&t| t != 0).collect();
            let fwd = forward_sentence(&mut tape, text, heads, tokens, &mask, None)?;
            let valid = mask.iter().filter(|&&m| m).count();
            out.push(extract(&tape, id, &fwd, valid));
        }
    }
    Ok(out)
}

/// Encode images (packed feature rows), in chunks.
pub fn encode_images(
    params: &ModelParams,
    items: &[(String, &ImageFeatures)],
    d_v: usize,
    max_objects: usize,
) -> ModelResult<Vec<EncodedValues>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape);
        for (id, feats) in chunk {
            let mask = vec![true; feats.rows.max(1)];
            let data = if feats.rows == 0 {
                vec![0.0; d_v]
            } else {
                feats.data.clone()
            };
            let fwd = forward_image(
                &mut tape,
                &nodes.visual,
                &nodes.attn_v,
                &data,
                &mask,
                d_v,
                max_objects,
            )?;
            out.push(extract(&tape, id, &fwd, feats.rows.max(1)));
        }
    }
    Ok(out)
}

// ── Gradient check ───────────────────────────────────────────────────

/// A detailed probe report including the owning parameter of the worst
/// coordinate.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub worst_param: Option<String>,
    pub loss: f64,
}

/// Compare analytic gradients of the total loss against central finite
/// differences over `n_probe` uniformly sampled parameter coordinates
/// (every coordinate when `n_probe` covers them all).
pub fn gradcheck_model(
    params: &mut ModelParams,
    batch: &TripleBatch,
    loss_cfg: &LossConfig,
    max_objects: usize,
    n_probe: usize,
    h: f64,
    seed: u64,
) -> ModelResult<ModelGradCheck> {
    let (breakdown, grads) = loss_and_grads(params, batch, loss_cfg, max_objects)?;
    let flat_grads: Vec<f64> = grads.into_iter().flatten().collect();
    let n_coords = flat_grads.len();

    // Per-parameter offsets for coordinate addressing.
    let spans: Vec<(String, usize)> = params
        .flat()
        .iter()
        .map(|p| (p.name.clone(), p.len()))
        .collect();
    let locate = |mut idx: usize, spans: &[(String, usize)]| -> (usize, usize) {
        for (pi, (_, len)) in spans.iter().enumerate() {
            if idx < *len {
                return (pi, idx);
            }
            idx -= len;
        }
        unreachable!("coordinate out of range")
    };

    let cell = std::cell::RefCell::new(params);
    let mut failure: Option<ModelError> = None;
    let report = finite_diff_check(
        n_coords,
        |i| {
            let (pi, off) = locate(i, &spans);
            cell.borrow().flat()[pi].values[off]
        },
        |i, v| {
            let (pi, off) = locate(i, &spans);
            cell.borrow_mut().flat_mut()[pi].values[off] = v;
        },
        || match loss_value(&cell.borrow(), batch, loss_cfg, max_objects) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        &flat_grads,
        n_probe,
        h,
        seed,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let worst_param = report
        .worst
        .map(|(idx, _, _)| locate(idx, &spans))
        .map(|(pi, _)| spans[pi].0.clone());
    Ok(ModelGradCheck {
        report,
        worst_param,
        loss: breakdown.total,
    })
}

/// Deterministic synthetic batch for gradient checks: random token ids over
/// small vocabularies and random object features.
pub fn synthetic_gradcheck_batch(
    cfg: &RunConfig,
    vocab_a: usize,
    vocab_b: usize,
    batch_size: usize,
    sentence_len: usize,
    seed: u64,
) -> TripleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects_per_image = cfg.max_objects.min(3).max(1);
    let mut batch = TripleBatch {
        image_ids: (0..batch_size).map(|i| format!("gc{i}")).collect(),
        d_v: cfg.d_v,
        objects: Vec::new(),
        obj_mask: Vec::new(),
        tokens_a: Vec::new(),
        mask_a: Vec::new(),
        tokens_b: Vec::new(),
        mask_b: Vec::new(),
    };
    for _ in 0..batch_size {
        let data: Vec<f64> = (0..objects_per_image * cfg.d_v)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        batch.objects.push(data);
        batch.obj_mask.push(vec![true; objects_per_image]);
        let seq = |vocab: usize, rng: &mut ChaCha8Rng| -> (Vec<u32>, Vec<bool>) {
            let len = rng.gen_range(2..=sentence_len.max(2));
            let mut ids: Vec<u32> = (0..len)
                .map(|_| rng.gen_range(2..vocab as u32))
                .collect();
            let mut mask = vec![true; len];
            ids.resize(sentence_len, 0);
            mask.resize(sentence_len, false);
            (ids, mask)
        };
        let (ta, ma) = seq(vocab_a, &mut rng);
        batch.tokens_a.push(ta);
        batch.mask_a.push(ma);
        let (tb, mb) = seq(vocab_b, &mut rng);
        batch.tokens_b.push(tb);
        batch.mask_b.push(mb);
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::DiversityMode;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.k = 2;
        cfg.h = 8;
        cfg.d_w = 6;
        cfg.d_v = 5;
        cfg.max_objects = 3;
        cfg
    }

    fn tiny_loss(mode: DiversityMode) -> LossConfig {
        LossConfig {
            margin: 0.2,
            gamma: 0.6,
            diversity_margin: 0.1,
            beta: 1.0,
            mode,
        }
    }

    #[test]
    fn flat_orders_agree_between_params_and_nodes() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 9, 11, 1);
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape);
        let flat_p = params.flat();
        let flat_n = nodes.flat();
        assert_eq!(flat_p.len(), flat_n.len());
        for (p, n) in flat_p.iter().zip(&flat_n) {
            assert_eq!(p.shape, tape.shape(*n), "misaligned at {}", p.name);
            assert_eq!(p.values, tape.values(*n), "misaligned at {}", p.name);
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 9, 11, 1);
        let mut names: Vec<&str> = params.flat().iter().map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn every_parameter_block_receives_gradient() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 9, 11, 2);
        let batch = synthetic_gradcheck_batch(&cfg, 9, 11, 3, 4, 3);
        let (_, grads) = loss_and_grads(
            &params,
            &batch,
            &tiny_loss(DiversityMode::Intent),
            cfg.max_objects,
        )
        .unwrap();
        for (p, g) in params.flat().iter().zip(&grads) {
            assert!(
                g.iter().any(|&x| x != 0.0),
                "parameter {} has all-zero gradient",
                p.name
            );
        }
    }

    #[test]
    fn per_language_isolation() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 9, 11, 4);
        let batch = synthetic_gradcheck_batch(&cfg, 9, 11, 2, 4, 5);

        let encode_b = |params: &ModelParams| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape);
            let encoded = forward_batch(&mut tape, &nodes, &batch, cfg.max_objects).unwrap();
            encoded
                .lang_b
                .iter()
                .map(|r| tape.values(r.concat).to_vec())
                .collect()
        };
        let before = encode_b(&params);
        let mut perturbed = params.clone();
        for p in perturbed.text_a.flat_mut() {
            p.values.iter_mut().for_each(|v| *v += 0.37);
        }
        for h in perturbed.attn_a.iter_mut() {
            for p in h.flat_mut() {
                p.values.iter_mut().for_each(|v| *v += 0.37);
            }
        }
        let after = encode_b(&perturbed);
        assert_eq!(before, after, "language B states must not move");
    }

    #[test]
    fn full_model_gradcheck_small_probe() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 9, 11, 6);
        let batch = synthetic_gradcheck_batch(&cfg, 9, 11, 3, 4, 7);
        let check = gradcheck_model(
            &mut params,
            &batch,
            &tiny_loss(DiversityMode::Intent),
            cfg.max_objects,
            120,
            1e-5,
            8,
        )
        .unwrap();
        assert!(
            check.report.passes(1e-4),
            "max rel err {} at {:?}",
            check.report.max_rel_err,
            check.worst_param
        );
    }

    #[test]
    fn gradcheck_literal_mode_also_passes() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 9, 11, 9);
        let batch = synthetic_gradcheck_batch(&cfg, 9, 11, 2, 3, 10);
        let check = gradcheck_model(
            &mut params,
            &batch,
            &tiny_loss(DiversityMode::Literal),
            cfg.max_objects,
            80,
            1e-5,
            11,
        )
        .unwrap();
        assert!(check.report.passes(1e-4), "{}", check.report.max_rel_err);
    }

    #[test]
    fn encode_sentences_matches_batch_forward() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 9, 11, 12);
        let batch = synthetic_gradcheck_batch(&cfg, 9, 11, 2, 4, 13);

        let mut tape = Tape::new();
        let nodes = params.register(&mut tape);
        let encoded = forward_batch(&mut tape, &nodes, &batch, cfg.max_objects).unwrap();
        let expect = tape.values(encoded.lang_a[0].concat).to_vec();

        let items = vec![("s0".to_string(), batch.tokens_a[0].clone())];
        let got = encode_sentences(&params, &items, Lang::A).unwrap();
        assert_eq!(got[0].concat, expect);
        assert_eq!(got[0].heads.len(), cfg.k);
    }
}

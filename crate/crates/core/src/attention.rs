//! K-head context-vector attention pooling.
//!
//! Each head scores token states against a learnable context vector,
//! normalizes the scores over valid positions, and pools the raw states by
//! the resulting weights. Head outputs are concatenated into the final
//! fixed-length representation. One independent head set exists per stream
//! (image, language A, language B).

use rand::Rng;

use crate::encoders::TokenStates;
use crate::params::Param;
use crate::tensor::{Shape, Tape, Tensor, TensorError, TensorResult};

/// Parameters of one attention head: the state projection, the context
/// projection, and the learnable context vector itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams {
    pub w_in: Param,
    pub w_ctx: Param,
    pub ctx: Param,
}

impl AttentionHeadParams {
    /// `prefix` tags names like `attn_v_0`. Projections are Xavier-uniform;
    /// the context vector is uniform(-0.1, 0.1), so heads start distinct
    /// even without the diversity objective.
    pub fn init(prefix: &str, h: usize, h_attn: usize, h_c: usize, rng: &mut impl Rng) -> Self {
        AttentionHeadParams {
            w_in: Param::xavier(format!("{prefix}_w_in"), Shape::new(h, h_attn), rng),
            w_ctx: Param::xavier(format!("{prefix}_w_ctx"), Shape::new(h_c, h_attn), rng),
            ctx: Param::uniform(format!("{prefix}_ctx"), Shape::vector(h_c), 0.1, rng),
        }
    }

    pub fn flat(&self) -> Vec<&Param> {
        vec![&self.w_in, &self.w_ctx, &self.ctx]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_in, &mut self.w_ctx, &mut self.ctx]
    }

    pub fn register(&self, tape: &mut Tape) -> AttentionHeadNodes {
        AttentionHeadNodes {
            w_in: self.w_in.register(tape),
            w_ctx: self.w_ctx.register(tape),
            ctx: self.ctx.register(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionHeadNodes {
    pub w_in: Tensor,
    pub w_ctx: Tensor,
    pub ctx: Tensor,
}

impl AttentionHeadNodes {
    pub fn flat(&self) -> Vec<Tensor> {
        vec![self.w_in, self.w_ctx, self.ctx]
    }
}

/// All heads of one stream applied to one instance: per-head pooled vectors
/// and their in-order concatenation.
#[derive(Clone, Debug)]
pub struct HeadedRepresentation {
    pub heads: Vec<Tensor>,
    pub concat: Tensor,
}

/// Attention weights and pooled output of a single head.
fn head_forward(
    tape: &mut Tape,
    states: &TokenStates,
    head: &AttentionHeadNodes,
) -> TensorResult<(Tensor, Tensor)> {
    // q = tanh(ctx * W_ctx), scores_i = q . tanh(states_i * W_in)
    let ctx_proj = tape.matmul(head.ctx, head.w_ctx)?;
    let q = tape.tanh_ew(ctx_proj);
    let proj = tape.matmul(states.states, head.w_in)?;
    let keys = tape.tanh_ew(proj);
    let scores = tape.matmul_nt(q, keys)?;
    let weights = tape.masked_softmax(scores, &states.mask)?;
    // Pool the raw states, not the tanh-projected ones.
    let pooled = tape.matmul(weights, states.states)?;
    Ok((weights, pooled))
}

/// Pooled representation of one head over the valid positions.
pub fn attend_head(
    tape: &mut Tape,
    states: &TokenStates,
    head: &AttentionHeadNodes,
) -> TensorResult<Tensor> {
    head_forward(tape, states, head).map(|(_, pooled)| pooled)
}

/// The attention weight vector of one head (masked entries exactly zero).
pub fn attention_weights(
    tape: &mut Tape,
    states: &TokenStates,
    head: &AttentionHeadNodes,
) -> TensorResult<Tensor> {
    head_forward(tape, states, head).map(|(weights, _)| weights)
}

/// Apply every head and concatenate the outputs.
pub fn attend_all(
    tape: &mut Tape,
    states: &TokenStates,
    heads: &[AttentionHeadNodes],
) -> TensorResult<HeadedRepresentation> {
    if heads.is_empty() {
        return Err(TensorError::EmptyInput("attend_all"));
    }
    let mut pooled = Vec::with_capacity(heads.len());
    for head in heads {
        pooled.push(attend_head(tape, states, head)?);
    }
    let concat = tape.concat_rows(&pooled)?;
    Ok(HeadedRepresentation {
        heads: pooled,
        concat,
    })
}

/// Heads plus their weight vectors, for diagnostics and embedding export.
pub fn attend_all_with_weights(
    tape: &mut Tape,
    states: &TokenStates,
    heads: &[AttentionHeadNodes],
) -> TensorResult<(HeadedRepresentation, Vec<Tensor>)> {
    if heads.is_empty() {
        return Err(TensorError::EmptyInput("attend_all"));
    }
    let mut pooled = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for head in heads {
        let (w, p) = head_forward(tape, states, head)?;
        weights.push(w);
        pooled.push(p);
    }
    let concat = tape.concat_rows(&pooled)?;
    Ok((
        HeadedRepresentation {
            heads: pooled,
            concat,
        },
        weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_states(tape: &mut Tape, n: usize, h: usize, seed: u64) -> (TokenStates, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let states = tape.constant(vals.clone(), Shape::new(n, h));
        (
            TokenStates {
                states,
                mask: vec![true; n],
            },
            vals,
        )
    }

    #[test]
    fn single_valid_token_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let head = AttentionHeadParams::init("attn_t", 3, 3, 3, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let vals = vec![0.4, -1.2, 2.0, 9.0, 9.0, 9.0];
        let states = tape.constant(vals.clone(), Shape::new(2, 3));
        let ts = TokenStates {
            states,
            mask: vec![true, false],
        };
        let out = attend_head(&mut tape, &ts, &nodes).unwrap();
        assert_eq!(tape.values(out), &vals[0..3]);
    }

    #[test]
    fn identical_tokens_pool_to_shared_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let head = AttentionHeadParams::init("attn_t", 3, 3, 3, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let row = [0.7, -0.2, 0.5];
        let states = tape.constant([row, row].concat(), Shape::new(2, 3));
        let ts = TokenStates {
            states,
            mask: vec![true, true],
        };
        let out = attend_head(&mut tape, &ts, &nodes).unwrap();
        for (v, e) in tape.values(out).iter().zip(row) {
            assert!(close(*v, e, 1e-12));
        }
        let w = attention_weights(&mut tape, &ts, &nodes).unwrap();
        for &v in tape.values(w) {
            assert!(close(v, 0.5, 1e-12));
        }
    }

    #[test]
    fn three_tokens_match_formula_transliteration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 4;
        let head = AttentionHeadParams::init("attn_t", h, h, h, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let (ts, vals) = random_states(&mut tape, 3, h, 24);
        let out = attend_head(&mut tape, &ts, &nodes).unwrap();
        let weights = attention_weights(&mut tape, &ts, &nodes).unwrap();

        // Independent evaluation of the scoring and pooling formulas.
        let q: Vec<f64> = (0..h)
            .map(|j| {
                let mut s = 0.0;
                for p in 0..h {
                    s += head.ctx.values[p] * head.w_ctx.values[p * h + j];
                }
                s.tanh()
            })
            .collect();
        let mut scores = [0.0; 3];
        for i in 0..3 {
            let mut dot = 0.0;
            for j in 0..h {
                let mut proj = 0.0;
                for p in 0..h {
                    proj += vals[i * h + p] * head.w_in.values[p * h + j];
                }
                dot += q[j] * proj.tanh();
            }
            scores[i] = dot;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let expect_w: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let mut expect_out = vec![0.0; h];
        for i in 0..3 {
            for j in 0..h {
                expect_out[j] += expect_w[i] * vals[i * h + j];
            }
        }

        for (got, exp) in tape.values(weights).iter().zip(&expect_w) {
            assert!(close(*got, *exp, 1e-12));
        }
        for (got, exp) in tape.values(out).iter().zip(&expect_out) {
            assert!(close(*got, *exp, 1e-12));
        }
    }

    #[test]
    fn weights_dotted_with_states_reproduce_pooled_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let h = 3;
        let head = AttentionHeadParams::init("attn_t", h, h, h, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let (ts, vals) = random_states(&mut tape, 4, h, 26);
        let out = attend_head(&mut tape, &ts, &nodes).unwrap();
        let w = attention_weights(&mut tape, &ts, &nodes).unwrap();
        let wv = tape.values(w).to_vec();
        for j in 0..h {
            let mut s = 0.0;
            for i in 0..4 {
                s += wv[i] * vals[i * h + j];
            }
            assert!(close(tape.values(out)[j], s, 1e-12));
        }
    }

    #[test]
    fn concat_length_is_heads_times_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let h = 512;
        let heads: Vec<AttentionHeadParams> = (0..3)
            .map(|k| AttentionHeadParams::init(&format!("attn_t_{k}"), h, h, h, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let nodes: Vec<AttentionHeadNodes> = heads.iter().map(|p| p.register(&mut tape)).collect();
        let (ts, _) = random_states(&mut tape, 2, h, 28);
        let rep = attend_all(&mut tape, &ts, &nodes).unwrap();
        assert_eq!(tape.shape(rep.concat), Shape::vector(1536));
        assert_eq!(rep.heads.len(), 3);
    }

    #[test]
    fn single_head_concat_equals_head_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let head = AttentionHeadParams::init("attn_t_0", 3, 3, 3, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let (ts, _) = random_states(&mut tape, 2, 3, 30);
        let rep = attend_all(&mut tape, &ts, &[nodes]).unwrap();
        assert_eq!(tape.values(rep.concat), tape.values(rep.heads[0]));
    }

    #[test]
    fn permuting_heads_permutes_concat_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 3;
        let a = AttentionHeadParams::init("attn_t_0", h, h, h, &mut rng);
        let b = AttentionHeadParams::init("attn_t_1", h, h, h, &mut rng);
        let mut tape = Tape::new();
        let na = a.register(&mut tape);
        let nb = b.register(&mut tape);
        let (ts, _) = random_states(&mut tape, 3, h, 32);
        let ab = attend_all(&mut tape, &ts, &[na, nb]).unwrap();
        let ba = attend_all(&mut tape, &ts, &[nb, na]).unwrap();
        let ab_v = tape.values(ab.concat).to_vec();
        let ba_v = tape.values(ba.concat).to_vec();
        assert_eq!(&ab_v[0..h], &ba_v[h..2 * h]);
        assert_eq!(&ab_v[h..2 * h], &ba_v[0..h]);
    }

    #[test]
    fn padding_invariance_of_head_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let h = 3;
        let head = AttentionHeadParams::init("attn_t", h, h, h, &mut rng);
        let base: Vec<f64> = (0..2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |pad: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let nodes = head.register(&mut tape);
            let mut vals = base.clone();
            vals.extend(std::iter::repeat(0.0).take(pad * h));
            let mut mask = vec![true, true];
            mask.extend(std::iter::repeat(false).take(pad));
            let states = tape.constant(vals, Shape::new(2 + pad, h));
            let ts = TokenStates { states, mask };
            let out = attend_head(&mut tape, &ts, &nodes).unwrap();
            tape.values(out).to_vec()
        };
        assert_eq!(run(0), run(4));
    }

    #[test]
    fn output_is_convex_combination_of_valid_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let h = 4;
        let head = AttentionHeadParams::init("attn_t", h, h, h, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let (ts, vals) = random_states(&mut tape, 5, h, 35);
        let out = attend_head(&mut tape, &ts, &nodes).unwrap();
        let w = attention_weights(&mut tape, &ts, &nodes).unwrap();
        let wv = tape.values(w);
        assert!(wv.iter().all(|&x| x >= 0.0));
        assert!(close(wv.iter().sum::<f64>(), 1.0, 1e-9));
        // Residual between the pooled output and the explicit combination.
        for j in 0..h {
            let mut s = 0.0;
            for i in 0..5 {
                s += wv[i] * vals[i * h + j];
            }
            assert!((tape.values(out)[j] - s).abs() <= 1e-9);
        }
    }

    #[test]
    fn all_masked_positions_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let head = AttentionHeadParams::init("attn_t", 2, 2, 2, &mut rng);
        let mut tape = Tape::new();
        let nodes = head.register(&mut tape);
        let states = tape.constant(vec![0.0; 4], Shape::new(2, 2));
        let ts = TokenStates {
            states,
            mask: vec![false, false],
        };
        assert_eq!(
            attend_head(&mut tape, &ts, &nodes),
            Err(TensorError::InvalidMask)
        );
    }

    #[test]
    fn head_independence_of_gradients() {
        // A loss consuming only head 0 leaves head 1 parameters untouched.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let h = 3;
        let a = AttentionHeadParams::init("attn_t_0", h, h, h, &mut rng);
        let b = AttentionHeadParams::init("attn_t_1", h, h, h, &mut rng);
        let mut tape = Tape::new();
        let na = a.register(&mut tape);
        let nb = b.register(&mut tape);
        let (ts, _) = random_states(&mut tape, 3, h, 38);
        let rep = attend_all(&mut tape, &ts, &[na, nb]).unwrap();
        let loss = tape.sum(rep.heads[0]);
        tape.backward(loss).unwrap();
        assert!(tape.grad(na.ctx).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(nb.ctx).unwrap().iter().all(|&g| g == 0.0));
        assert!(tape.grad(nb.w_in).unwrap().iter().all(|&g| g == 0.0));
    }
}

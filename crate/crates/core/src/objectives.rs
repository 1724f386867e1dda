//! Loss functions: cosine similarity, hinge triplet ranking with in-batch
//! hard-negative mining, the trilingual ranking composition, and the
//! inter-head diversity terms.
//!
//! The diversity hinge exists in two selectable forms. The `Literal` form is
//! `[margin - s]_+`, which penalizes *dissimilar* head pairs; the `Intent`
//! form is `[margin - (1 - s)]_+`, which penalizes head pairs whose cosine
//! distance falls below the margin, i.e. pushes heads apart. Intent is the
//! default; the two differ only in the hinge argument.

use std::fmt;

use crate::attention::HeadedRepresentation;
use crate::tensor::{Tape, Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq)]
pub enum LossError {
    /// Hard-negative mining needs at least two instances.
    BatchTooSmall { size: usize },
    /// The two sides of a loss disagree on batch size.
    BatchSizeMismatch { left: usize, right: usize },
    /// The two sides of a diversity term disagree on head count.
    HeadCountMismatch { left: usize, right: usize },
    Tensor(TensorError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::BatchTooSmall { size } => {
                write!(f, "batch of {size} has no negatives; need at least 2")
            }
            LossError::BatchSizeMismatch { left, right } => {
                write!(f, "batch sizes differ: {left} vs {right}")
            }
            LossError::HeadCountMismatch { left, right } => {
                write!(f, "head counts differ: {left} vs {right}")
            }
            LossError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

pub type LossResult<T> = Result<T, LossError>;

/// Which hinge argument the diversity loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DiversityMode {
    /// `[margin - s]_+`: active while heads are *less* similar than margin.
    Literal,
    /// `[margin - (1 - s)]_+`: active while the cosine distance between
    /// distinct heads is below the margin. Default.
    #[default]
    Intent,
}

impl DiversityMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(DiversityMode::Literal),
            "intent" => Some(DiversityMode::Intent),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DiversityMode::Literal => "literal",
            DiversityMode::Intent => "intent",
        }
    }
}

/// Loss hyperparameters, decoupled from the full run configuration.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Ranking margin (alpha).
    pub margin: f64,
    /// Weight of the sentence-sentence ranking term (gamma).
    pub gamma: f64,
    /// Diversity margin (alpha_D).
    pub diversity_margin: f64,
    /// Weight of the diversity objective (beta).
    pub beta: f64,
    pub mode: DiversityMode,
}

/// Encoded (image, language-A, language-B) batch: one headed representation
/// per stream per instance. Index p refers to the same pivot image in all
/// three streams.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub visual: Vec<HeadedRepresentation>,
    pub lang_a: Vec<HeadedRepresentation>,
    pub lang_b: Vec<HeadedRepresentation>,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.visual.len()
    }

    pub fn head_count(&self) -> usize {
        self.visual.first().map(|r| r.heads.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> LossResult<()> {
        let b = self.visual.len();
        for side in [&self.lang_a, &self.lang_b] {
            if side.len() != b {
                return Err(LossError::BatchSizeMismatch {
                    left: b,
                    right: side.len(),
                });
            }
        }
        let k = self.head_count();
        for stream in [&self.visual, &self.lang_a, &self.lang_b] {
            for rep in stream.iter() {
                if rep.heads.len() != k {
                    return Err(LossError::HeadCountMismatch {
                        left: k,
                        right: rep.heads.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-term values of one total-loss evaluation. `total` is exactly the
/// composed objective: `l_vg + l_ve + gamma*l_ge + beta*(sum of the six
/// diversity terms)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_vg: f64,
    pub l_ve: f64,
    pub l_ge: f64,
    pub div_vv: f64,
    pub div_gg: f64,
    pub div_ee: f64,
    pub div_ve: f64,
    pub div_vg: f64,
    pub div_ge: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,l_vg,l_ve,l_ge,div_vv,div_gg,div_ee,div_ve,div_vg,div_ge,total,lr,clip_scale";

    pub fn diversity_sum(&self) -> f64 {
        self.div_vv + self.div_gg + self.div_ee + self.div_ve + self.div_vg + self.div_ge
    }

    pub fn csv_row(&self, step: u64, lr: f64, clip_scale: f64) -> String {
        format!(
            "{step},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{lr:e},{clip_scale:.17e}",
            self.l_vg,
            self.l_ve,
            self.l_ge,
            self.div_vv,
            self.div_gg,
            self.div_ee,
            self.div_ve,
            self.div_vg,
            self.div_ge,
            self.total,
        )
    }
}

/// Cosine similarity as a tape scalar (zero-norm inputs give 0 with zero
/// gradient).
pub fn cosine(tape: &mut Tape, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
    tape.cosine(a, b)
}

/// Hinge triplet ranking loss with in-batch hard negatives, summed over both
/// retrieval directions. `a[p]` and `b[p]` are the paired representations.
pub fn triplet_hn(
    tape: &mut Tape,
    a: &[Tensor],
    b: &[Tensor],
    margin: f64,
) -> LossResult<Tensor> {
    if a.len() != b.len() {
        return Err(LossError::BatchSizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall { size: n });
    }

    let mut sims = vec![Vec::with_capacity(n); n];
    for p in 0..n {
        for q in 0..n {
            let s = tape.cosine(a[p], b[q])?;
            sims[p].push(s);
        }
    }

    let mut terms = Vec::with_capacity(2 * n);
    // Hardest negative on the b side for each a_p.
    for p in 0..n {
        let mut best: Option<usize> = None;
        for q in 0..n {
            if q == p {
                continue;
            }
            if best.map_or(true, |cur| tape.scalar(sims[p][q]) > tape.scalar(sims[p][cur])) {
                best = Some(q);
            }
        }
        let neg = sims[p][best.unwrap()];
        let gap = tape.sub(neg, sims[p][p])?;
        let arg = tape.add_const(gap, margin);
        terms.push(tape.relu0(arg));
    }
    // Hardest negative on the a side for each b_q.
    for q in 0..n {
        let mut best: Option<usize> = None;
        for p in 0..n {
            if p == q {
                continue;
            }
            if best.map_or(true, |cur| tape.scalar(sims[p][q]) > tape.scalar(sims[cur][q])) {
                best = Some(p);
            }
        }
        let neg = sims[best.unwrap()][q];
        let gap = tape.sub(neg, sims[q][q])?;
        let arg = tape.add_const(gap, margin);
        terms.push(tape.relu0(arg));
    }
    Ok(tape.add_n(&terms)?)
}

/// The three ranking terms of one batch as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct RankingTerms {
    pub l_vg: Tensor,
    pub l_ve: Tensor,
    pub l_ge: Tensor,
    pub total: Tensor,
}

/// Trilingual ranking objective: `l(V,G) + l(V,E) + gamma * l(G,E)` where V
/// is the image stream, E language A, and G language B.
pub fn ranking_loss(
    tape: &mut Tape,
    batch: &EncodedBatch,
    margin: f64,
    gamma: f64,
) -> LossResult<RankingTerms> {
    batch.validate()?;
    let v: Vec<Tensor> = batch.visual.iter().map(|r| r.concat).collect();
    let e: Vec<Tensor> = batch.lang_a.iter().map(|r| r.concat).collect();
    let g: Vec<Tensor> = batch.lang_b.iter().map(|r| r.concat).collect();
    let l_vg = triplet_hn(tape, &v, &g, margin)?;
    let l_ve = triplet_hn(tape, &v, &e, margin)?;
    let l_ge = triplet_hn(tape, &g, &e, margin)?;
    let scaled_ge = tape.scale(l_ge, gamma);
    let total = tape.add_n(&[l_vg, l_ve, scaled_ge])?;
    Ok(RankingTerms {
        l_vg,
        l_ve,
        l_ge,
        total,
    })
}

/// Diversity hinge between two streams: sums over instances and ordered
/// head pairs (k, r) with k != r. Pass the same stream twice for the
/// intra-stream terms (an instance's own heads are compared).
pub fn diversity_pair(
    tape: &mut Tape,
    x: &[HeadedRepresentation],
    y: &[HeadedRepresentation],
    diversity_margin: f64,
    mode: DiversityMode,
) -> LossResult<Tensor> {
    if x.len() != y.len() {
        return Err(LossError::BatchSizeMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let mut terms = Vec::new();
    for (xr, yr) in x.iter().zip(y) {
        let k = xr.heads.len();
        if yr.heads.len() != k {
            return Err(LossError::HeadCountMismatch {
                left: k,
                right: yr.heads.len(),
            });
        }
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let s = tape.cosine(xr.heads[a], yr.heads[b])?;
                let arg = match mode {
                    // margin - s
                    DiversityMode::Literal => {
                        let neg = tape.scale(s, -1.0);
                        tape.add_const(neg, diversity_margin)
                    }
                    // margin - (1 - s) = s - (1 - margin)
                    DiversityMode::Intent => tape.add_const(s, diversity_margin - 1.0),
                };
                terms.push(tape.relu0(arg));
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    Ok(tape.add_n(&terms)?)
}

/// The six diversity terms of one batch, in composition order: VV, GG, EE,
/// VE, VG, GE (three intra-stream, then three cross-stream).
#[derive(Clone, Copy, Debug)]
pub struct DiversityTerms {
    pub vv: Tensor,
    pub gg: Tensor,
    pub ee: Tensor,
    pub ve: Tensor,
    pub vg: Tensor,
    pub ge: Tensor,
    pub total: Tensor,
}

pub fn diversity_total(
    tape: &mut Tape,
    batch: &EncodedBatch,
    diversity_margin: f64,
    mode: DiversityMode,
) -> LossResult<DiversityTerms> {
    batch.validate()?;
    let v = &batch.visual;
    let e = &batch.lang_a;
    let g = &batch.lang_b;
    let vv = diversity_pair(tape, v, v, diversity_margin, mode)?;
    let gg = diversity_pair(tape, g, g, diversity_margin, mode)?;
    let ee = diversity_pair(tape, e, e, diversity_margin, mode)?;
    let ve = diversity_pair(tape, v, e, diversity_margin, mode)?;
    let vg = diversity_pair(tape, v, g, diversity_margin, mode)?;
    let ge = diversity_pair(tape, g, e, diversity_margin, mode)?;
    let total = tape.add_n(&[vv, gg, ee, ve, vg, ge])?;
    Ok(DiversityTerms {
        vv,
        gg,
        ee,
        ve,
        vg,
        ge,
        total,
    })
}

/// Full objective: ranking plus beta-weighted diversity. Returns the loss
/// node (for backward) and the recorded breakdown values.
pub fn total_loss(
    tape: &mut Tape,
    batch: &EncodedBatch,
    cfg: &LossConfig,
) -> LossResult<(Tensor, LossBreakdown)> {
    let rank = ranking_loss(tape, batch, cfg.margin, cfg.gamma)?;
    let div = diversity_total(tape, batch, cfg.diversity_margin, cfg.mode)?;
    let scaled_div = tape.scale(div.total, cfg.beta);
    let total = tape.add(rank.total, scaled_div)?;
    let breakdown = LossBreakdown {
        l_vg: tape.scalar(rank.l_vg),
        l_ve: tape.scalar(rank.l_ve),
        l_ge: tape.scalar(rank.l_ge),
        div_vv: tape.scalar(div.vv),
        div_gg: tape.scalar(div.gg),
        div_ee: tape.scalar(div.ee),
        div_ve: tape.scalar(div.ve),
        div_vg: tape.scalar(div.vg),
        div_ge: tape.scalar(div.ge),
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::tensor::{cosine_slices, Shape};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Exhaustive mining oracle: per index, maximum hinge over every
    /// negative in each direction.
    fn triplet_oracle(a: &[Vec<f64>], b: &[Vec<f64>], margin: f64) -> f64 {
        let n = a.len();
        let mut total = 0.0;
        for p in 0..n {
            let pos = cosine_slices(&a[p], &b[p]);
            let mut worst = f64::NEG_INFINITY;
            for q in 0..n {
                if q != p {
                    worst = worst.max((margin - pos + cosine_slices(&a[p], &b[q])).max(0.0));
                }
            }
            total += worst;
        }
        for q in 0..n {
            let pos = cosine_slices(&a[q], &b[q]);
            let mut worst = f64::NEG_INFINITY;
            for p in 0..n {
                if p != q {
                    worst = worst.max((margin - pos + cosine_slices(&a[p], &b[q])).max(0.0));
                }
            }
            total += worst;
        }
        total
    }

    fn consts(tape: &mut Tape, rows: &[Vec<f64>]) -> Vec<Tensor> {
        rows.iter()
            .map(|r| tape.constant(r.clone(), Shape::vector(r.len())))
            .collect()
    }

    #[test]
    fn cosine_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 0.0], Shape::vector(2));
        let b = tape.constant(vec![1.0, 1.0], Shape::vector(2));
        let s = cosine(&mut tape, a, b).unwrap();
        assert!(close(tape.scalar(s), 0.7071067811865475, 1e-12));
    }

    #[test]
    fn triplet_zero_when_margin_satisfied() {
        let mut tape = Tape::new();
        let a = consts(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = consts(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let loss = triplet_hn(&mut tape, &a, &b, 0.2).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn triplet_identical_vectors_gives_two_b_alpha() {
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![0.3, -0.4, 0.5]).collect();
        let a = consts(&mut tape, &rows);
        let b = consts(&mut tape, &rows);
        let loss = triplet_hn(&mut tape, &a, &b, 0.2).unwrap();
        assert!(close(tape.scalar(loss), 2.0 * 4.0 * 0.2, 1e-12));
    }

    #[test]
    fn triplet_matches_bruteforce_oracle_on_random_batches() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let n = rng.gen_range(2..6);
            let dim = rng.gen_range(2..5);
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            };
            let av = mk(&mut rng);
            let bv = mk(&mut rng);
            let mut tape = Tape::new();
            let a = consts(&mut tape, &av);
            let b = consts(&mut tape, &bv);
            let loss = triplet_hn(&mut tape, &a, &b, 0.2).unwrap();
            let expect = triplet_oracle(&av, &bv, 0.2);
            assert!(
                close(tape.scalar(loss), expect, 1e-12),
                "seed {seed}: {} vs {expect}",
                tape.scalar(loss)
            );
        }
    }

    #[test]
    fn triplet_rejects_tiny_batch() {
        let mut tape = Tape::new();
        let a = consts(&mut tape, &[vec![1.0, 0.0]]);
        let b = consts(&mut tape, &[vec![1.0, 0.0]]);
        assert!(matches!(
            triplet_hn(&mut tape, &a, &b, 0.2),
            Err(LossError::BatchTooSmall { size: 1 })
        ));
    }

    #[test]
    fn ranking_gamma_zero_drops_sentence_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 3, 2, 4);
        let terms = ranking_loss(&mut tape, &batch, 0.2, 0.0).unwrap();
        let total = tape.scalar(terms.total);
        let expect = tape.scalar(terms.l_vg) + tape.scalar(terms.l_ve);
        assert_eq!(total, expect);
    }

    #[test]
    fn ranking_recomposes_at_paper_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 4, 2, 4);
        let terms = ranking_loss(&mut tape, &batch, 0.2, 0.6).unwrap();
        let expect =
            tape.scalar(terms.l_vg) + tape.scalar(terms.l_ve) + 0.6 * tape.scalar(terms.l_ge);
        assert!(close(tape.scalar(terms.total), expect, 1e-12));
    }

    #[test]
    fn ranking_swapping_languages_swaps_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 3, 2, 4);
        let swapped = EncodedBatch {
            visual: batch.visual.clone(),
            lang_a: batch.lang_b.clone(),
            lang_b: batch.lang_a.clone(),
        };
        let t1 = ranking_loss(&mut tape, &batch, 0.2, 0.6).unwrap();
        let t2 = ranking_loss(&mut tape, &swapped, 0.2, 0.6).unwrap();
        assert_eq!(tape.scalar(t1.l_vg), tape.scalar(t2.l_ve));
        assert_eq!(tape.scalar(t1.l_ve), tape.scalar(t2.l_vg));
    }

    #[test]
    fn diversity_single_head_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 3, 1, 4);
        let d = diversity_pair(&mut tape, &batch.visual, &batch.visual, 0.1, DiversityMode::Intent)
            .unwrap();
        assert_eq!(tape.scalar(d), 0.0);
    }

    #[test]
    fn diversity_identical_heads_fully_active() {
        // All heads of an instance identical: cosine 1, distance 0, each
        // ordered pair contributes the full margin.
        let mut tape = Tape::new();
        let k = 3;
        let rows: Vec<Vec<f64>> = (0..k).map(|_| vec![0.5, -0.25, 1.0]).collect();
        let x = vec![rep_from_rows(&mut tape, &rows), rep_from_rows(&mut tape, &rows)];
        let d = diversity_pair(&mut tape, &x, &x, 0.1, DiversityMode::Intent).unwrap();
        let per_instance = (k * (k - 1)) as f64 * 0.1;
        assert!(close(tape.scalar(d), 2.0 * per_instance, 1e-12));
    }

    #[test]
    fn diversity_inactive_when_distance_exceeds_margin() {
        // cosine 0.85 -> distance 0.15 >= 0.1, hinge inactive.
        let s: f64 = 0.85;
        let mut tape = Tape::new();
        let rows = vec![
            vec![1.0, 0.0],
            vec![s, (1.0 - s * s).sqrt()],
        ];
        let x = vec![rep_from_rows(&mut tape, &rows)];
        let d = diversity_pair(&mut tape, &x, &x, 0.1, DiversityMode::Intent).unwrap();
        assert_eq!(tape.scalar(d), 0.0);
    }

    #[test]
    fn diversity_orthogonal_heads_inactive_intra() {
        let mut tape = Tape::new();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let x = vec![rep_from_rows(&mut tape, &rows)];
        let d = diversity_pair(&mut tape, &x, &x, 0.1, DiversityMode::Intent).unwrap();
        assert_eq!(tape.scalar(d), 0.0);
    }

    #[test]
    fn diversity_head_count_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = vec![rep_from_rows(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]])];
        let y = vec![rep_from_rows(&mut tape, &[vec![1.0, 0.0]])];
        assert!(matches!(
            diversity_pair(&mut tape, &x, &y, 0.1, DiversityMode::Intent),
            Err(LossError::HeadCountMismatch { .. })
        ));
    }

    #[test]
    fn diversity_intent_monotone_in_similarity() {
        // Sweep the inter-head cosine; the intent hinge must be
        // non-decreasing in s.
        let eval = |s: f64| -> f64 {
            let mut tape = Tape::new();
            let rows = vec![vec![1.0, 0.0], vec![s, (1.0 - s * s).max(0.0).sqrt()]];
            let x = vec![rep_from_rows(&mut tape, &rows)];
            let d =
                diversity_pair(&mut tape, &x, &x, 0.3, DiversityMode::Intent).unwrap();
            tape.scalar(d)
        };
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=40 {
            let s = -1.0 + 2.0 * (i as f64) / 40.0;
            let v = eval(s);
            assert!(v >= prev - 1e-12, "not monotone at s={s}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn diversity_modes_pull_in_opposite_directions() {
        // Slope of the loss in the inter-head cosine: literal is
        // non-positive, intent non-negative, each strictly somewhere.
        let eval = |s: f64, mode: DiversityMode| -> f64 {
            let mut tape = Tape::new();
            let rows = vec![vec![1.0, 0.0], vec![s, (1.0 - s * s).max(0.0).sqrt()]];
            let x = vec![rep_from_rows(&mut tape, &rows)];
            let d = diversity_pair(&mut tape, &x, &x, 0.3, mode).unwrap();
            tape.scalar(d)
        };
        let h = 1e-6;
        let mut lit_strict = false;
        let mut int_strict = false;
        for i in 1..40 {
            let s = -0.95 + 1.9 * (i as f64) / 40.0;
            let lit = (eval(s + h, DiversityMode::Literal) - eval(s - h, DiversityMode::Literal))
                / (2.0 * h);
            let int = (eval(s + h, DiversityMode::Intent) - eval(s - h, DiversityMode::Intent))
                / (2.0 * h);
            assert!(lit <= 1e-9, "literal slope positive at s={s}: {lit}");
            assert!(int >= -1e-9, "intent slope negative at s={s}: {int}");
            if lit < -1e-6 {
                lit_strict = true;
            }
            if int > 1e-6 {
                int_strict = true;
            }
        }
        assert!(lit_strict && int_strict);
    }

    #[test]
    fn diversity_total_recomposes_from_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 3, 3, 4);
        let d = diversity_total(&mut tape, &batch, 0.5, DiversityMode::Intent).unwrap();
        let parts = [d.vv, d.gg, d.ee, d.ve, d.vg, d.ge];
        let sum: f64 = parts.iter().map(|t| tape.scalar(*t)).sum();
        assert!(close(tape.scalar(d.total), sum, 1e-12));
    }

    #[test]
    fn diversity_total_zero_for_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 2, 1, 4);
        let d = diversity_total(&mut tape, &batch, 0.1, DiversityMode::Intent).unwrap();
        for t in [d.vv, d.gg, d.ee, d.ve, d.vg, d.ge, d.total] {
            assert_eq!(tape.scalar(t), 0.0);
        }
    }

    fn loss_cfg(beta: f64) -> LossConfig {
        LossConfig {
            margin: 0.2,
            gamma: 0.6,
            diversity_margin: 0.5,
            beta,
            mode: DiversityMode::Intent,
        }
    }

    #[test]
    fn total_loss_beta_zero_is_ranking_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 4, 2, 4);
        let (_, bd) = total_loss(&mut tape, &batch, &loss_cfg(0.0)).unwrap();
        let rank = bd.l_vg + bd.l_ve + 0.6 * bd.l_ge;
        assert!(close(bd.total, rank, 1e-12));
    }

    #[test]
    fn total_loss_beta_one_adds_diversity_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 4, 2, 4);
        let (_, bd) = total_loss(&mut tape, &batch, &loss_cfg(1.0)).unwrap();
        let expect = bd.l_vg + bd.l_ve + 0.6 * bd.l_ge + bd.diversity_sum();
        assert!(close(bd.total, expect, 1e-12));
    }

    #[test]
    fn total_loss_is_linear_in_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let mut tape = Tape::new();
        let batch = random_batch(&mut tape, &mut rng, 4, 2, 4);
        let (_, b0) = total_loss(&mut tape, &batch, &loss_cfg(0.0)).unwrap();
        let (_, b1) = total_loss(&mut tape, &batch, &loss_cfg(0.7)).unwrap();
        let (_, b2) = total_loss(&mut tape, &batch, &loss_cfg(1.4)).unwrap();
        let inc1 = b1.total - b0.total;
        let inc2 = b2.total - b0.total;
        assert!(close(inc2, 2.0 * inc1, 1e-12));
    }

    #[test]
    fn triplet_loss_nonnegative_and_zero_iff_margins_met() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        for _ in 0..30 {
            let n = rng.gen_range(2..6);
            let rows_a: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let rows_b: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut tape = Tape::new();
            let a = consts(&mut tape, &rows_a);
            let b = consts(&mut tape, &rows_b);
            let loss = triplet_hn(&mut tape, &a, &b, 0.2).unwrap();
            let v = tape.scalar(loss);
            assert!(v >= 0.0);

            // Zero exactly when every positive beats every negative by the
            // margin in both directions.
            let mut satisfied = true;
            for p in 0..n {
                for q in 0..n {
                    if p == q {
                        continue;
                    }
                    if cosine_slices(&rows_a[p], &rows_b[p])
                        - cosine_slices(&rows_a[p], &rows_b[q])
                        < 0.2
                        || cosine_slices(&rows_a[q], &rows_b[q])
                            - cosine_slices(&rows_a[p], &rows_b[q])
                            < 0.2
                    {
                        satisfied = false;
                    }
                }
            }
            assert_eq!(v == 0.0, satisfied);
        }
    }
}

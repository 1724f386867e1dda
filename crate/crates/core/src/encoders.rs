//! Token and visual-object encoders.
//!
//! Sentences pass through an embedding lookup and a bidirectional LSTM whose
//! per-direction hidden width is half the shared embedding dimension, so each
//! token state lands in R^H without an extra projection. Visual object
//! features pass through a one-layer affine perceptron into the same space.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;

use crate::params::Param;
use crate::tensor::{Shape, Tape, Tensor, TensorError};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq)]
pub enum EncodeError {
    /// Token index outside the vocabulary.
    VocabIndex { index: u32, vocab_size: usize },
    /// A validity mask had a true entry after the first false.
    MaskNotLeftAligned,
    /// Mask length differs from the sequence length.
    MaskLength { expected: usize, got: usize },
    /// External per-token features do not match the recurrent input width.
    ExternalWidth { expected: usize, got: usize },
    /// More visual objects than the configured maximum.
    TooManyObjects { count: usize, max: usize },
    Tensor(TensorError),
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncodeError::VocabIndex { index, vocab_size } => {
                write!(f, "token index {index} out of range for vocabulary of {vocab_size}")
            }
            EncodeError::MaskNotLeftAligned => {
                write!(f, "validity mask must be left-aligned (no gaps)")
            }
            EncodeError::MaskLength { expected, got } => {
                write!(f, "mask length {got} does not match sequence length {expected}")
            }
            EncodeError::ExternalWidth { expected, got } => {
                write!(f, "external feature width {got} does not match encoder input width {expected}")
            }
            EncodeError::TooManyObjects { count, max } => {
                write!(f, "{count} visual objects exceed the maximum of {max}")
            }
            EncodeError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EncodeError {}

impl From<TensorError> for EncodeError {
    fn from(e: TensorError) -> Self {
        EncodeError::Tensor(e)
    }
}

pub type EncodeResult<T> = Result<T, EncodeError>;

// ── Vocabulary ───────────────────────────────────────────────────────

/// Per-language token table. Index 0 is reserved for padding, index 1 for
/// unknown tokens; real tokens start at 2 in a deterministic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;

    /// Build from real tokens in their final order; the reserved markers are
    /// prepended automatically.
    pub fn from_tokens(real_tokens: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(real_tokens);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode_seq(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuild from a full token list (save/load path); the first two tokens
    /// must be the reserved markers.
    pub fn from_full_list(tokens: Vec<String>) -> Self {
        assert!(tokens.len() >= 2 && tokens[0] == PAD_TOKEN && tokens[1] == UNK_TOKEN);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }
}

// ── Parameters ───────────────────────────────────────────────────────

/// One LSTM direction: gate weights for input, forget, output and the tanh
/// candidate. Biases are coupled (one vector per gate).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub w_i: Param,
    pub u_i: Param,
    pub b_i: Param,
    pub w_f: Param,
    pub u_f: Param,
    pub b_f: Param,
    pub w_o: Param,
    pub u_o: Param,
    pub b_o: Param,
    pub w_c: Param,
    pub u_c: Param,
    pub b_c: Param,
}

impl LstmCellParams {
    /// Xavier-uniform matrices, zero biases except the forget gate at 1.0.
    pub fn init(prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w = |g: &str, rng: &mut _| Param::xavier(format!("{prefix}_w_{g}"), Shape::new(input_dim, hidden), rng);
        let u = |g: &str, rng: &mut _| Param::xavier(format!("{prefix}_u_{g}"), Shape::new(hidden, hidden), rng);
        LstmCellParams {
            w_i: w("i", rng),
            u_i: u("i", rng),
            b_i: Param::zeros(format!("{prefix}_b_i"), Shape::vector(hidden)),
            w_f: w("f", rng),
            u_f: u("f", rng),
            b_f: Param::filled(format!("{prefix}_b_f"), Shape::vector(hidden), 1.0),
            w_o: w("o", rng),
            u_o: u("o", rng),
            b_o: Param::zeros(format!("{prefix}_b_o"), Shape::vector(hidden)),
            w_c: w("c", rng),
            u_c: u("c", rng),
            b_c: Param::zeros(format!("{prefix}_b_c"), Shape::vector(hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_i.shape.cols
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.shape.rows
    }

    pub fn flat(&self) -> Vec<&Param> {
        vec![
            &self.w_i, &self.u_i, &self.b_i,
            &self.w_f, &self.u_f, &self.b_f,
            &self.w_o, &self.u_o, &self.b_o,
            &self.w_c, &self.u_c, &self.b_c,
        ]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_i, &mut self.u_i, &mut self.b_i,
            &mut self.w_f, &mut self.u_f, &mut self.b_f,
            &mut self.w_o, &mut self.u_o, &mut self.b_o,
            &mut self.w_c, &mut self.u_c, &mut self.b_c,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> LstmCellNodes {
        LstmCellNodes {
            w_i: self.w_i.register(tape),
            u_i: self.u_i.register(tape),
            b_i: self.b_i.register(tape),
            w_f: self.w_f.register(tape),
            u_f: self.u_f.register(tape),
            b_f: self.b_f.register(tape),
            w_o: self.w_o.register(tape),
            u_o: self.u_o.register(tape),
            b_o: self.b_o.register(tape),
            w_c: self.w_c.register(tape),
            u_c: self.u_c.register(tape),
            b_c: self.b_c.register(tape),
        }
    }
}

/// Tape handles for one registered LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellNodes {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
    pub w_c: Tensor,
    pub u_c: Tensor,
    pub b_c: Tensor,
}

impl LstmCellNodes {
    pub fn flat(&self) -> Vec<Tensor> {
        vec![
            self.w_i, self.u_i, self.b_i,
            self.w_f, self.u_f, self.b_f,
            self.w_o, self.u_o, self.b_o,
            self.w_c, self.u_c, self.b_c,
        ]
    }
}

/// Per-language text encoder: embedding table plus forward and backward
/// recurrent cells of hidden width H/2 each.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    pub embedding: Param,
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
}

impl TextEncoderParams {
    /// `lang` tags parameter names ("a" or "b"). `h` is the shared embedding
    /// dimension H and must be even.
    pub fn init(lang: &str, vocab_size: usize, d_w: usize, h: usize, rng: &mut impl Rng) -> Self {
        assert!(h % 2 == 0, "shared embedding dimension must be even");
        let mut embedding = Param::uniform(
            format!("emb_{lang}"),
            Shape::new(vocab_size, d_w),
            0.1,
            rng,
        );
        // The padding row is never read, but keep it zero so dumps and
        // checkpoints stay tidy.
        for v in embedding.values[..d_w].iter_mut() {
            *v = 0.0;
        }
        TextEncoderParams {
            embedding,
            fwd: LstmCellParams::init(&format!("lstm_{lang}_fwd"), d_w, h / 2, rng),
            bwd: LstmCellParams::init(&format!("lstm_{lang}_bwd"), d_w, h / 2, rng),
        }
    }

    pub fn flat(&self) -> Vec<&Param> {
        let mut out = vec![&self.embedding];
        out.extend(self.fwd.flat());
        out.extend(self.bwd.flat());
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.fwd.flat_mut());
        out.extend(self.bwd.flat_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape) -> TextEncoderNodes {
        TextEncoderNodes {
            embedding: self.embedding.register(tape),
            fwd: self.fwd.register(tape),
            bwd: self.bwd.register(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextEncoderNodes {
    pub embedding: Tensor,
    pub fwd: LstmCellNodes,
    pub bwd: LstmCellNodes,
}

impl TextEncoderNodes {
    pub fn flat(&self) -> Vec<Tensor> {
        let mut out = vec![self.embedding];
        out.extend(self.fwd.flat());
        out.extend(self.bwd.flat());
        out
    }
}

/// One-layer affine perceptron from visual feature space into R^H.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoderParams {
    pub w: Param,
    pub b: Param,
}

impl VisualEncoderParams {
    pub fn init(d_v: usize, h: usize, rng: &mut impl Rng) -> Self {
        VisualEncoderParams {
            w: Param::xavier("vis_w", Shape::new(d_v, h), rng),
            b: Param::zeros("vis_b", Shape::vector(h)),
        }
    }

    pub fn flat(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn register(&self, tape: &mut Tape) -> VisualEncoderNodes {
        VisualEncoderNodes {
            w: self.w.register(tape),
            b: self.b.register(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VisualEncoderNodes {
    pub w: Tensor,
    pub b: Tensor,
}

// ── Encoded sequences ────────────────────────────────────────────────

/// Per-position encoder outputs in the shared space, with the validity mask.
/// Rows at masked positions are all-zero.
#[derive(Clone, Debug)]
pub struct TokenStates {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

impl TokenStates {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Number of leading true entries; errors if any true follows a false.
pub fn left_aligned_len(mask: &[bool]) -> EncodeResult<usize> {
    let len = mask.iter().take_while(|&&m| m).count();
    if mask[len..].iter().any(|&m| m) {
        return Err(EncodeError::MaskNotLeftAligned);
    }
    Ok(len)
}

// ── Operations ───────────────────────────────────────────────────────

/// Look up embeddings for a padded token sequence. Padding positions
/// (id 0) yield zero rows. When `external` per-token features are given they
/// replace the table rows verbatim (still zero at padding).
pub fn embed_tokens(
    tape: &mut Tape,
    table: Tensor,
    ids: &[u32],
    external: Option<&[Vec<f64>]>,
) -> EncodeResult<Tensor> {
    let table_shape = tape.shape(table);
    for &id in ids {
        if id as usize >= table_shape.rows {
            return Err(EncodeError::VocabIndex {
                index: id,
                vocab_size: table_shape.rows,
            });
        }
    }
    let width = match external {
        Some(rows) => {
            if rows.len() != ids.len() {
                return Err(EncodeError::MaskLength {
                    expected: ids.len(),
                    got: rows.len(),
                });
            }
            rows.first().map(|r| r.len()).unwrap_or(table_shape.cols)
        }
        None => table_shape.cols,
    };
    let zero = tape.zeros(Shape::vector(width));
    let mut rows = Vec::with_capacity(ids.len());
    for (n, &id) in ids.iter().enumerate() {
        if id == Vocabulary::PAD {
            rows.push(zero);
        } else if let Some(ext) = external {
            if ext[n].len() != width {
                return Err(EncodeError::ExternalWidth {
                    expected: width,
                    got: ext[n].len(),
                });
            }
            rows.push(tape.constant(ext[n].clone(), Shape::vector(width)));
        } else {
            rows.push(tape.embed_rows(table, &[id])?);
        }
    }
    Ok(tape.stack_rows(&rows)?)
}

/// One LSTM step: returns (h_t, c_t).
fn lstm_step(
    tape: &mut Tape,
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    cell: &LstmCellNodes,
) -> Result<(Tensor, Tensor), TensorError> {
    let gate = |tape: &mut Tape, w, u, b| -> Result<Tensor, TensorError> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h_prev, u)?;
        tape.add_n(&[xw, hu, b])
    };
    let pre_i = gate(tape, cell.w_i, cell.u_i, cell.b_i)?;
    let pre_f = gate(tape, cell.w_f, cell.u_f, cell.b_f)?;
    let pre_o = gate(tape, cell.w_o, cell.u_o, cell.b_o)?;
    let pre_c = gate(tape, cell.w_c, cell.u_c, cell.b_c)?;
    let i = tape.sigmoid_ew(pre_i);
    let f = tape.sigmoid_ew(pre_f);
    let o = tape.sigmoid_ew(pre_o);
    let cand = tape.tanh_ew(pre_c);
    let fc = tape.mul_ew(f, c_prev)?;
    let ic = tape.mul_ew(i, cand)?;
    let c = tape.add(fc, ic)?;
    let tc = tape.tanh_ew(c);
    let h = tape.mul_ew(o, tc)?;
    Ok((h, c))
}

/// Bidirectional LSTM over a left-aligned sequence. Row n of the output is
/// the concatenation of the forward and backward hidden states at n; masked
/// positions are zero rows and the recurrences never see them.
pub fn bilstm_encode(
    tape: &mut Tape,
    inputs: Tensor,
    mask: &[bool],
    fwd: &LstmCellNodes,
    bwd: &LstmCellNodes,
) -> EncodeResult<TokenStates> {
    let shape = tape.shape(inputs);
    if mask.len() != shape.rows {
        return Err(EncodeError::MaskLength {
            expected: shape.rows,
            got: mask.len(),
        });
    }
    let len = left_aligned_len(mask)?;
    let hidden = tape.shape(fwd.b_i).cols;

    let mut fwd_states = Vec::with_capacity(len);
    let mut h = tape.zeros(Shape::vector(hidden));
    let mut c = tape.zeros(Shape::vector(hidden));
    for t in 0..len {
        let x = tape.slice_row(inputs, t)?;
        let (nh, nc) = lstm_step(tape, x, h, c, fwd)?;
        fwd_states.push(nh);
        h = nh;
        c = nc;
    }

    let mut bwd_states = vec![None; len];
    let mut h = tape.zeros(Shape::vector(hidden));
    let mut c = tape.zeros(Shape::vector(hidden));
    for t in (0..len).rev() {
        let x = tape.slice_row(inputs, t)?;
        let (nh, nc) = lstm_step(tape, x, h, c, bwd)?;
        bwd_states[t] = Some(nh);
        h = nh;
        c = nc;
    }

    let zero_row = tape.zeros(Shape::vector(2 * hidden));
    let mut rows = Vec::with_capacity(shape.rows);
    for t in 0..shape.rows {
        if t < len {
            let row = tape.concat_rows(&[fwd_states[t], bwd_states[t].unwrap()])?;
            rows.push(row);
        } else {
            rows.push(zero_row);
        }
    }
    Ok(TokenStates {
        states: tape.stack_rows(&rows)?,
        mask: mask.to_vec(),
    })
}

/// Project visual object features into the shared space: row m maps to
/// `objects_m * W + b` for valid rows; masked rows stay zero (the affine
/// bias is not applied to padding).
pub fn encode_visual(
    tape: &mut Tape,
    objects: Tensor,
    mask: &[bool],
    nodes: &VisualEncoderNodes,
    max_objects: usize,
) -> EncodeResult<TokenStates> {
    let shape = tape.shape(objects);
    if mask.len() != shape.rows {
        return Err(EncodeError::MaskLength {
            expected: shape.rows,
            got: mask.len(),
        });
    }
    let len = left_aligned_len(mask)?;
    if len > max_objects {
        return Err(EncodeError::TooManyObjects {
            count: len,
            max: max_objects,
        });
    }
    let h = tape.shape(nodes.b).cols;
    let zero_row = tape.zeros(Shape::vector(h));
    let mut rows = Vec::with_capacity(shape.rows);
    for m in 0..shape.rows {
        if m < len {
            let row = tape.slice_row(objects, m)?;
            let proj = tape.matmul(row, nodes.w)?;
            rows.push(tape.add(proj, nodes.b)?);
        } else {
            rows.push(zero_row);
        }
    }
    Ok(TokenStates {
        states: tape.stack_rows(&rows)?,
        mask: mask.to_vec(),
    })
}

// ── Pretrained embeddings ────────────────────────────────────────────

/// Result of loading a pretrained embedding file against a vocabulary.
#[derive(Clone, Debug)]
pub struct PretrainedLoad {
    /// Per-vocabulary-index replacement rows (None where the file had no
    /// entry; reserved indices are always None).
    pub rows: Vec<Option<Vec<f64>>>,
    /// Fraction of real vocabulary tokens covered by the file.
    pub coverage: f64,
}

/// Parse a FastText-style text file (`word f1 ... fD`, one entry per line,
/// optional `count dim` header) and collect vectors for vocabulary tokens.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<PretrainedLoad, String> {
    let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut found = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| format!("{}:{}: {e}", path.display(), lineno + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap();
        let nums: Vec<&str> = parts.collect();
        // FastText files open with a "count dim" header line.
        if lineno == 0 && nums.len() == 1 && word.parse::<usize>().is_ok() {
            continue;
        }
        if nums.len() != dim {
            return Err(format!(
                "{}:{}: expected {dim} values for '{word}', got {}",
                path.display(),
                lineno + 1,
                nums.len()
            ));
        }
        let id = vocab.encode(word);
        if id == Vocabulary::UNK && word != UNK_TOKEN {
            continue;
        }
        let mut vec = Vec::with_capacity(dim);
        for n in nums {
            vec.push(n.parse::<f64>().map_err(|e| {
                format!("{}:{}: bad float '{n}': {e}", path.display(), lineno + 1)
            })?);
        }
        if rows[id as usize].is_none() {
            found += 1;
        }
        rows[id as usize] = Some(vec);
    }
    let real = vocab.len().saturating_sub(2).max(1);
    Ok(PretrainedLoad {
        rows,
        coverage: found as f64 / real as f64,
    })
}

/// Overwrite embedding-table rows with loaded pretrained vectors.
pub fn apply_pretrained(table: &mut Param, load: &PretrainedLoad) {
    let cols = table.shape.cols;
    for (i, row) in load.rows.iter().enumerate() {
        if let Some(row) = row {
            table.values[i * cols..(i + 1) * cols].copy_from_slice(row);
        }
    }
}

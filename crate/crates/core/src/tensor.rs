//! Dense-tensor tape for reverse-mode automatic differentiation.
//!
//! All tensors are row-major two-dimensional 64-bit float matrices (vectors
//! are single rows, scalars are 1x1). Operations are recorded on a [`Tape`]
//! in SSA form; [`Tape::backward`] replays the record in reverse topological
//! order and accumulates gradients across fan-out. A tape is rebuilt per
//! batch, so sequence lengths can vary freely.

use std::fmt;

/// Shape of a tensor: `rows x cols`, row-major storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    /// A single-row vector.
    pub fn vector(n: usize) -> Self {
        Shape { rows: 1, cols: n }
    }

    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Errors from tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// A masked softmax received a mask with no valid entry.
    InvalidMask,
    /// Mask length does not match the score vector length.
    MaskLength { scores: usize, mask: usize },
    /// backward() requires a scalar loss.
    NonScalarLoss { shape: Shape },
    /// An operation over a list of tensors received an empty list.
    EmptyInput(&'static str),
    /// A row or element index is out of range.
    IndexOutOfRange { index: usize, len: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left} and {right}")
            }
            TensorError::InvalidMask => write!(f, "masked softmax: mask has no valid entry"),
            TensorError::MaskLength { scores, mask } => {
                write!(f, "masked softmax: {scores} scores but {mask} mask entries")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be scalar, got {shape}")
            }
            TensorError::EmptyInput(op) => write!(f, "{op}: empty input list"),
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

// ── Raw f64 kernels (shared by forward and backward) ────────────────

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = arow[p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// Cosine similarity of two equal-length slices. A zero-norm operand yields
/// 0.0 so dead vectors do not poison downstream values with NaNs.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

// ── Recorded operations ──────────────────────────────────────────────

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// out = A * B
    MatMul { a: usize, b: usize },
    /// out = A * B^T
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddN { parts: Vec<usize> },
    Sub { a: usize, b: usize },
    MulEw { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    /// Hinge [x]_+ with zero subgradient at the kink.
    Relu0 { a: usize },
    MaskedSoftmax { a: usize, mask: Vec<bool> },
    /// Flat concatenation of parts; covers both row concatenation and row
    /// stacking (identical layout in row-major storage).
    ConcatFlat { parts: Vec<usize> },
    SliceRow { a: usize, row: usize },
    /// Row gather: out[n] = table[ids[n]]. Backward scatter-adds.
    EmbedRows { table: usize, ids: Vec<u32> },
    Sum { a: usize },
    Dot { a: usize, b: usize },
    Cosine { a: usize, b: usize },
}

struct Node {
    values: Vec<f64>,
    shape: Shape,
    grad: Option<Vec<f64>>,
    op: Op,
}

impl Node {
    fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// Computation tape. Nodes are appended in forward order, which is a valid
/// topological order by construction; backward walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, values: Vec<f64>, shape: Shape, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), shape.len());
        let grad = if requires_grad {
            Some(vec![0.0; shape.len()])
        } else {
            None
        };
        self.nodes.push(Node {
            values,
            shape,
            grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad())
    }

    // ── Leaves ────────────────────────────────────────────────────

    /// A constant: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: Shape) -> Tensor {
        assert_eq!(values.len(), shape.len(), "constant: value/shape mismatch");
        self.push(values, shape, false, Op::Leaf)
    }

    /// A gradient-requiring leaf (model parameter registered for this pass).
    pub fn leaf(&mut self, values: Vec<f64>, shape: Shape) -> Tensor {
        assert_eq!(values.len(), shape.len(), "leaf: value/shape mismatch");
        self.push(values, shape, true, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Shape) -> Tensor {
        self.push(vec![0.0; shape.len()], shape, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> Tensor {
        self.constant(vec![v], Shape::scalar())
    }

    // ── Accessors ─────────────────────────────────────────────────

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn shape(&self, t: Tensor) -> Shape {
        self.nodes[t.0].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        debug_assert!(self.nodes[t.0].shape.is_scalar());
        self.nodes[t.0].values[0]
    }

    // ── Operations ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let values = mm(self.values(a), self.values(b), sa.rows, sa.cols, sb.cols);
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            values,
            Shape::new(sa.rows, sb.cols),
            rg,
            Op::MatMul { a: a.0, b: b.0 },
        ))
    }

    /// out = a * b^T; `a` is m x k, `b` is n x k.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: sa,
                right: sb,
            });
        }
        let values = mm_nt(self.values(a), self.values(b), sa.rows, sa.cols, sb.rows);
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            values,
            Shape::new(sa.rows, sb.rows),
            rg,
            Op::MatMulNT { a: a.0, b: b.0 },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> TensorResult<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        let shape = self.same_shape("add", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(values, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise sum of one or more same-shape tensors.
    pub fn add_n(&mut self, parts: &[Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("add_n"));
        }
        let shape = self.shape(parts[0]);
        for &p in &parts[1..] {
            self.same_shape("add_n", parts[0], p)?;
        }
        let mut values = vec![0.0; shape.len()];
        for &p in parts {
            for (v, x) in values.iter_mut().zip(self.values(p)) {
                *v += x;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let rg = self.any_requires(&ids);
        Ok(self.push(values, shape, rg, Op::AddN { parts: ids }))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        let shape = self.same_shape("sub", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(values, shape, rg, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul_ew(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        let shape = self.same_shape("mul_ew", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(values, shape, rg, Op::MulEw { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|x| c * x).collect();
        let rg = self.nodes[a.0].requires_grad();
        self.push(values, shape, rg, Op::Scale { a: a.0, c })
    }

    pub fn add_const(&mut self, a: Tensor, c: f64) -> Tensor {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|x| c + x).collect();
        let rg = self.nodes[a.0].requires_grad();
        self.push(values, shape, rg, Op::AddConst { a: a.0 })
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh_ew(&mut self, a: Tensor) -> Tensor {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad();
        self.push(values, shape, rg, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid_ew(&mut self, a: Tensor) -> Tensor {
        let shape = self.shape(a);
        let values = self
            .values(a)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.nodes[a.0].requires_grad();
        self.push(values, shape, rg, Op::Sigmoid { a: a.0 })
    }

    /// Hinge [x]_+ = max(0, x). The subgradient at exactly zero is zero.
    pub fn relu0(&mut self, a: Tensor) -> Tensor {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.nodes[a.0].requires_grad();
        self.push(values, shape, rg, Op::Relu0 { a: a.0 })
    }

    /// Softmax over the unmasked entries of a row vector. Masked entries are
    /// exactly zero in the output and receive no gradient; the maximum over
    /// unmasked scores is subtracted before exponentiation for stability.
    pub fn masked_softmax(&mut self, scores: Tensor, mask: &[bool]) -> TensorResult<Tensor> {
        let shape = self.shape(scores);
        let n = shape.len();
        if mask.len() != n {
            return Err(TensorError::MaskLength {
                scores: n,
                mask: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::InvalidMask);
        }
        let xs = self.values(scores);
        let mut max = f64::NEG_INFINITY;
        for (x, &m) in xs.iter().zip(mask) {
            if m && *x > max {
                max = *x;
            }
        }
        let mut values = vec![0.0; n];
        let mut denom = 0.0;
        for i in 0..n {
            if mask[i] {
                let e = (xs[i] - max).exp();
                values[i] = e;
                denom += e;
            }
        }
        for v in values.iter_mut() {
            *v /= denom;
        }
        let rg = self.nodes[scores.0].requires_grad();
        Ok(self.push(
            values,
            shape,
            rg,
            Op::MaskedSoftmax {
                a: scores.0,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Concatenate single-row tensors of equal width into one row.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> TensorResult<Tensor> {
        self.concat_flat("concat_rows", parts, |n, w| Shape::new(1, n * w))
    }

    /// Stack single-row tensors of equal width into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Tensor]) -> TensorResult<Tensor> {
        self.concat_flat("stack_rows", parts, |n, w| Shape::new(n, w))
    }

    fn concat_flat(
        &mut self,
        op: &'static str,
        parts: &[Tensor],
        out_shape: impl Fn(usize, usize) -> Shape,
    ) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput(op));
        }
        let first = self.shape(parts[0]);
        for &p in parts {
            let sp = self.shape(p);
            if sp.rows != 1 || sp.cols != first.cols {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: first,
                    right: sp,
                });
            }
        }
        let mut values = Vec::with_capacity(parts.len() * first.cols);
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let rg = self.any_requires(&ids);
        let shape = out_shape(parts.len(), first.cols);
        Ok(self.push(values, shape, rg, Op::ConcatFlat { parts: ids }))
    }

    /// Extract row `row` of a matrix as a 1 x cols tensor.
    pub fn slice_row(&mut self, a: Tensor, row: usize) -> TensorResult<Tensor> {
        let shape = self.shape(a);
        if row >= shape.rows {
            return Err(TensorError::IndexOutOfRange {
                index: row,
                len: shape.rows,
            });
        }
        let values = self.values(a)[row * shape.cols..(row + 1) * shape.cols].to_vec();
        let rg = self.nodes[a.0].requires_grad();
        Ok(self.push(
            values,
            Shape::new(1, shape.cols),
            rg,
            Op::SliceRow { a: a.0, row },
        ))
    }

    /// Gather rows of `table` by index. Backward scatter-adds into the table.
    pub fn embed_rows(&mut self, table: Tensor, ids: &[u32]) -> TensorResult<Tensor> {
        let shape = self.shape(table);
        if ids.is_empty() {
            return Err(TensorError::EmptyInput("embed_rows"));
        }
        for &id in ids {
            if id as usize >= shape.rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id as usize,
                    len: shape.rows,
                });
            }
        }
        let cols = shape.cols;
        let mut values = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let r = id as usize;
            values.extend_from_slice(&self.values(table)[r * cols..(r + 1) * cols]);
        }
        let rg = self.nodes[table.0].requires_grad();
        Ok(self.push(
            values,
            Shape::new(ids.len(), cols),
            rg,
            Op::EmbedRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let total = self.values(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad();
        self.push(vec![total], Shape::scalar(), rg, Op::Sum { a: a.0 })
    }

    /// Scalar dot product of two same-shape tensors (flattened).
    pub fn dot(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        self.same_shape("dot", a, b)?;
        let v = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(vec![v], Shape::scalar(), rg, Op::Dot { a: a.0, b: b.0 }))
    }

    /// Cosine similarity of two same-shape tensors (flattened). Zero-norm
    /// operands yield value 0 with zero gradient.
    pub fn cosine(&mut self, a: Tensor, b: Tensor) -> TensorResult<Tensor> {
        self.same_shape("cosine", a, b)?;
        let v = cosine_slices(self.values(a), self.values(b));
        let rg = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            vec![v],
            Shape::scalar(),
            rg,
            Op::Cosine { a: a.0, b: b.0 },
        ))
    }

    // ── Backward ──────────────────────────────────────────────────

    /// Reverse pass. Seeds `loss` with 1.0 and propagates gradients to every
    /// gradient-requiring node. Gradients are reset first, so repeated calls
    /// on the same tape produce identical results.
    pub fn backward(&mut self, loss: Tensor) -> TensorResult<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape });
        }
        for node in self.nodes.iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any gradient-requiring leaf; nothing
            // to propagate.
            return Ok(());
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad() {
                continue;
            }
            let d_out = match self.nodes[idx].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &d_out);
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, delta: &[f64]) {
        if let Some(g) = self.nodes[id].grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn backward_op(&mut self, out: usize, op: &Op, d_out: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.nodes[a].shape;
                let sb = self.nodes[b].shape;
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                if self.nodes[a].requires_grad() {
                    let d_a = mm_nt(d_out, &self.nodes[b].values, m, n, k);
                    self.accum(a, &d_a);
                }
                if self.nodes[b].requires_grad() {
                    let d_b = mm_tn(&self.nodes[a].values, d_out, m, k, n);
                    self.accum(b, &d_b);
                }
            }
            Op::MatMulNT { a, b } => {
                let sa = self.nodes[a].shape;
                let sb = self.nodes[b].shape;
                let (m, k, n) = (sa.rows, sa.cols, sb.rows);
                if self.nodes[a].requires_grad() {
                    let d_a = mm(d_out, &self.nodes[b].values, m, n, k);
                    self.accum(a, &d_a);
                }
                if self.nodes[b].requires_grad() {
                    let d_b = mm_tn(d_out, &self.nodes[a].values, m, n, k);
                    self.accum(b, &d_b);
                }
            }
            Op::Add { a, b } => {
                self.accum(a, d_out);
                self.accum(b, d_out);
            }
            Op::AddN { ref parts } => {
                for &p in parts {
                    self.accum(p, d_out);
                }
            }
            Op::Sub { a, b } => {
                self.accum(a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|x| -x).collect();
                self.accum(b, &neg);
            }
            Op::MulEw { a, b } => {
                if self.nodes[a].requires_grad() {
                    let d_a: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[b].values)
                        .map(|(d, y)| d * y)
                        .collect();
                    self.accum(a, &d_a);
                }
                if self.nodes[b].requires_grad() {
                    let d_b: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[a].values)
                        .map(|(d, x)| d * x)
                        .collect();
                    self.accum(b, &d_b);
                }
            }
            Op::Scale { a, c } => {
                let d_a: Vec<f64> = d_out.iter().map(|d| c * d).collect();
                self.accum(a, &d_a);
            }
            Op::AddConst { a } => {
                self.accum(a, d_out);
            }
            Op::Tanh { a } => {
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(d, y)| d * (1.0 - y * y))
                    .collect();
                self.accum(a, &d_a);
            }
            Op::Sigmoid { a } => {
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[out].values)
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                self.accum(a, &d_a);
            }
            Op::Relu0 { a } => {
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[a].values)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(a, &d_a);
            }
            Op::MaskedSoftmax { a, ref mask } => {
                let p = &self.nodes[out].values;
                let mut dot = 0.0;
                for i in 0..p.len() {
                    if mask[i] {
                        dot += d_out[i] * p[i];
                    }
                }
                let d_a: Vec<f64> = (0..p.len())
                    .map(|i| if mask[i] { p[i] * (d_out[i] - dot) } else { 0.0 })
                    .collect();
                self.accum(a, &d_a);
            }
            Op::ConcatFlat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].shape.len();
                    let slice = d_out[offset..offset + len].to_vec();
                    self.accum(p, &slice);
                    offset += len;
                }
            }
            Op::SliceRow { a, row } => {
                let sa = self.nodes[a].shape;
                let mut d_a = vec![0.0; sa.len()];
                d_a[row * sa.cols..(row + 1) * sa.cols].copy_from_slice(d_out);
                self.accum(a, &d_a);
            }
            Op::EmbedRows { table, ref ids } => {
                let st = self.nodes[table].shape;
                let cols = st.cols;
                let mut d_t = vec![0.0; st.len()];
                for (n, &id) in ids.iter().enumerate() {
                    let r = id as usize;
                    for j in 0..cols {
                        d_t[r * cols + j] += d_out[n * cols + j];
                    }
                }
                self.accum(table, &d_t);
            }
            Op::Sum { a } => {
                let d = d_out[0];
                let d_a = vec![d; self.nodes[a].shape.len()];
                self.accum(a, &d_a);
            }
            Op::Dot { a, b } => {
                let d = d_out[0];
                if self.nodes[a].requires_grad() {
                    let d_a: Vec<f64> = self.nodes[b].values.iter().map(|y| d * y).collect();
                    self.accum(a, &d_a);
                }
                if self.nodes[b].requires_grad() {
                    let d_b: Vec<f64> = self.nodes[a].values.iter().map(|x| d * x).collect();
                    self.accum(b, &d_b);
                }
            }
            Op::Cosine { a, b } => {
                let d = d_out[0];
                let va = &self.nodes[a].values;
                let vb = &self.nodes[b].values;
                let na2: f64 = va.iter().map(|x| x * x).sum();
                let nb2: f64 = vb.iter().map(|x| x * x).sum();
                if na2 == 0.0 || nb2 == 0.0 {
                    return;
                }
                let na = na2.sqrt();
                let nb = nb2.sqrt();
                let s = self.nodes[out].values[0];
                let d_a: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| d * (y / (na * nb) - s * x / na2))
                    .collect();
                let d_b: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| d * (x / (na * nb) - s * y / nb2))
                    .collect();
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
        }
    }
}

/// Result of a finite-difference gradient probe.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub n_probes: usize,
    pub max_rel_err: f64,
    /// Flat coordinate index of the worst probe, with (analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients against central finite differences on a sample
/// of parameter coordinates.
///
/// `read`/`write` access a flat parameter coordinate, `loss` recomputes the
/// scalar objective from the current parameters, `analytic[i]` is the
/// gradient for coordinate `i` from a reverse pass at the unperturbed point.
/// Probes `n_probe` coordinates drawn uniformly (all of them when `n_probe`
/// covers the space). Relative error is |ga - gn| / max(1e-8, |ga| + |gn|).
pub fn finite_diff_check<R, W, L>(
    n_coords: usize,
    mut read: R,
    mut write: W,
    mut loss: L,
    analytic: &[f64],
    n_probe: usize,
    h: f64,
    seed: u64,
) -> GradCheckReport
where
    R: FnMut(usize) -> f64,
    W: FnMut(usize, f64),
    L: FnMut() -> f64,
{
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    assert_eq!(analytic.len(), n_coords);
    let coords: Vec<usize> = if n_probe >= n_coords {
        (0..n_coords).collect()
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..n_coords).collect();
        all.shuffle(&mut rng);
        let mut picked: Vec<usize> = all.into_iter().take(n_probe).collect();
        picked.sort_unstable();
        picked
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for &i in &coords {
        let orig = read(i);
        write(i, orig + h);
        let up = loss();
        write(i, orig - h);
        let down = loss();
        write(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let ga = analytic[i];
        let rel = (ga - numeric).abs() / (1e-8f64).max(ga.abs() + numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some((i, ga, numeric));
        }
    }
    GradCheckReport {
        n_probes: coords.len(),
        max_rel_err,
        worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 0.0, 0.0, 1.0], Shape::new(2, 2));
        let b = tape.constant(vec![3.0, 4.0], Shape::new(2, 1));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(out), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_row() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], Shape::new(1, 2));
        let b = tape.constant(vec![3.0, 4.0], Shape::new(2, 1));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], Shape::new(2, 3));
        let b = tape.constant(vec![0.0; 4], Shape::new(2, 2));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        // d sum(a*b) / d a == column-sums of b broadcast over rows of a.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a_vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |a_vals: &[f64], b_vals: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let a = tape.leaf(a_vals.to_vec(), Shape::new(3, 4));
            let b = tape.leaf(b_vals.to_vec(), Shape::new(4, 2));
            let out = tape.matmul(a, b).unwrap();
            let loss = tape.sum(out);
            tape.backward(loss).unwrap();
            (
                tape.scalar(loss),
                tape.grad(a).unwrap().to_vec(),
                tape.grad(b).unwrap().to_vec(),
            )
        };
        let (_, ga, gb) = run(&a_vals, &b_vals);

        let h = 1e-5;
        for i in 0..a_vals.len() {
            let mut up = a_vals.clone();
            up[i] += h;
            let mut dn = a_vals.clone();
            dn[i] -= h;
            let num = (run(&up, &b_vals).0 - run(&dn, &b_vals).0) / (2.0 * h);
            let rel = (ga[i] - num).abs() / (1e-8f64).max(ga[i].abs() + num.abs());
            assert!(rel <= 1e-4, "a[{i}]: analytic {} numeric {num}", ga[i]);
        }
        for i in 0..b_vals.len() {
            let mut up = b_vals.clone();
            up[i] += h;
            let mut dn = b_vals.clone();
            dn[i] -= h;
            let num = (run(&a_vals, &up).0 - run(&a_vals, &dn).0) / (2.0 * h);
            let rel = (gb[i] - num).abs() / (1e-8f64).max(gb[i].abs() + num.abs());
            assert!(rel <= 1e-4, "b[{i}]: analytic {} numeric {num}", gb[i]);
        }
    }

    #[test]
    fn tanh_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 1e9], Shape::vector(2));
        let y = tape.tanh_ew(x);
        assert_eq!(tape.values(y)[0], 0.0);
        assert!(close(tape.values(y)[1], 1.0, 1e-12));

        let first = tape.slice_row(y, 0).unwrap();
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(vec![0.0], Shape::scalar());
        let y2 = tape2.tanh_ew(x2);
        tape2.backward(y2).unwrap();
        assert!(close(tape2.grad(x2).unwrap()[0], 1.0, 1e-9));
        let _ = first;
    }

    #[test]
    fn masked_softmax_uniform_scores() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![2.5, 2.5, 2.5], Shape::vector(3));
        let p = tape.masked_softmax(s, &[true, true, true]).unwrap();
        for &v in tape.values(p) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn masked_softmax_single_valid_entry() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![5.0, 5.0], Shape::vector(2));
        let p = tape.masked_softmax(s, &[true, false]).unwrap();
        assert_eq!(tape.values(p), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_formula_oracle() {
        // Frozen from exp-normalization of [1,2,3] in a scripting scratchpad.
        let expected = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748218,
        ];
        let mut tape = Tape::new();
        let s = tape.constant(vec![1.0, 2.0, 3.0], Shape::vector(3));
        let p = tape.masked_softmax(s, &[true, true, true]).unwrap();
        for (v, e) in tape.values(p).iter().zip(expected) {
            assert!(close(*v, e, 1e-12), "{v} vs {e}");
        }
    }

    #[test]
    fn masked_softmax_all_false_is_error() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![1.0, 2.0], Shape::vector(2));
        assert_eq!(
            tape.masked_softmax(s, &[false, false]),
            Err(TensorError::InvalidMask)
        );
    }

    #[test]
    fn masked_softmax_large_magnitude_is_stable() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![1e4, -1e4, 9.9e3], Shape::vector(3));
        let p = tape.masked_softmax(s, &[true, true, true]).unwrap();
        let sum: f64 = tape.values(p).iter().sum();
        assert!(close(sum, 1.0, 1e-9));
        assert!(tape.values(p).iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn concat_rows_layout_and_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], Shape::vector(2));
        let b = tape.leaf(vec![3.0, 4.0], Shape::vector(2));
        let c = tape.leaf(vec![5.0, 6.0], Shape::vector(2));
        let cat = tape.concat_rows(&[a, b, c]).unwrap();
        assert_eq!(tape.values(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(tape.shape(cat), Shape::vector(6));
        let loss = tape.sum(cat);
        tape.backward(loss).unwrap();
        for t in [a, b, c] {
            assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn concat_rows_single_part_is_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.5, -2.0], Shape::vector(2));
        let cat = tape.concat_rows(&[a]).unwrap();
        assert_eq!(tape.values(cat), tape.values(a));
    }

    #[test]
    fn concat_rows_width_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], Shape::vector(2));
        let b = tape.constant(vec![3.0], Shape::vector(1));
        assert!(matches!(
            tape.concat_rows(&[a, b]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stack_rows_builds_matrix() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], Shape::vector(2));
        let b = tape.constant(vec![3.0, 4.0], Shape::vector(2));
        let m = tape.stack_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(m), Shape::new(2, 2));
        assert_eq!(tape.values(m), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0, 0.5], Shape::new(2, 2));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares_gives_two_x() {
        let mut tape = Tape::new();
        let vals = vec![1.0, -2.0, 3.0];
        let x = tape.leaf(vals.clone(), Shape::vector(3));
        let sq = tape.mul_ew(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.iter().zip(&vals) {
            assert!(close(*gi, 2.0 * xi, 1e-12));
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], Shape::vector(2));
        let y = tape.scale(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn fanout_accumulates_sum_of_contributions() {
        // x feeds two consumers; grad equals the sum of each in isolation.
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], Shape::scalar());
        let twice = tape.scale(x, 2.0);
        let thrice = tape.scale(x, 3.0);
        let loss = tape.add(twice, thrice).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn backward_is_deterministic_and_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(vals, Shape::new(2, 3));
        let t = tape.tanh_ew(x);
        let sq = tape.mul_ew(t, t).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();
        assert_eq!(g1, g2, "two backward runs must agree bit-for-bit");
    }

    #[test]
    fn relu0_zero_input_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 1.0, -1.0], Shape::vector(3));
        let r = tape.relu0(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Shape::new(3, 2));
        let out = tape.embed_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.values(out), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rows_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(vec![0.0; 4], Shape::new(2, 2));
        assert!(matches!(
            tape.embed_rows(table, &[2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cosine_basic_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2.0, 1.0], Shape::vector(2));
        let same = tape.cosine(a, a).unwrap();
        assert!(close(tape.scalar(same), 1.0, 1e-12));

        let x = tape.constant(vec![1.0, 0.0], Shape::vector(2));
        let y = tape.constant(vec![0.0, 1.0], Shape::vector(2));
        let orth = tape.cosine(x, y).unwrap();
        assert!(close(tape.scalar(orth), 0.0, 1e-12));

        // Hand arithmetic: 1/sqrt(2).
        let z = tape.constant(vec![1.0, 1.0], Shape::vector(2));
        let half = tape.cosine(x, z).unwrap();
        assert!(close(tape.scalar(half), 0.7071067811865475, 1e-12));
    }

    #[test]
    fn cosine_zero_norm_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0, 0.0], Shape::vector(2));
        let b = tape.leaf(vec![1.0, 2.0], Shape::vector(2));
        let s = tape.cosine(a, b).unwrap();
        assert_eq!(tape.scalar(s), 0.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences_on_random_instances() {
        // A composite touching every differentiable primitive, re-checked on
        // 100 random instances against central differences.
        let h = 1e-5;
        for inst in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
            let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ws: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let eval = |xs: &[f64], ws: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let x = tape.leaf(xs.to_vec(), Shape::new(2, 4));
                let w = tape.constant(ws.to_vec(), Shape::new(4, 2));
                let y = tape.matmul(x, w).unwrap();
                let t = tape.tanh_ew(y);
                let s = tape.sigmoid_ew(y);
                let prod = tape.mul_ew(t, s).unwrap();
                let r0 = tape.slice_row(prod, 0).unwrap();
                let r1 = tape.slice_row(prod, 1).unwrap();
                let sm = tape.masked_softmax(r0, &[true, true]).unwrap();
                let cos = tape.cosine(r0, r1).unwrap();
                let d = tape.dot(sm, r1).unwrap();
                let hinge_in = tape.sub(d, cos).unwrap();
                let shifted = tape.add_const(hinge_in, 0.05);
                let hinge = tape.relu0(shifted);
                let scaled = tape.scale(hinge, 1.7);
                let cat = tape.concat_rows(&[r0, r1]).unwrap();
                let total = tape.sum(cat);
                let loss = tape.add(scaled, total).unwrap();
                tape.backward(loss).unwrap();
                (tape.scalar(loss), tape.grad(x).unwrap().to_vec())
            };

            let (_, g) = eval(&xs, &ws);
            for i in 0..xs.len() {
                let mut up = xs.clone();
                up[i] += h;
                let mut dn = xs.clone();
                dn[i] -= h;
                let num = (eval(&up, &ws).0 - eval(&dn, &ws).0) / (2.0 * h);
                let rel = (g[i] - num).abs() / (1e-8f64).max(g[i].abs() + num.abs());
                assert!(
                    rel <= 1e-4,
                    "inst {inst} coord {i}: analytic {} numeric {num}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn finite_diff_check_constant_function_is_exact() {
        let store = std::cell::RefCell::new(vec![1.0, 2.0, 3.0]);
        let analytic = vec![0.0, 0.0, 0.0];
        let report = finite_diff_check(
            3,
            |i| store.borrow()[i],
            |i, v| store.borrow_mut()[i] = v,
            || 42.0,
            &analytic,
            3,
            1e-5,
            0,
        );
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.n_probes, 3);
    }

    #[test]
    fn finite_diff_check_quadratic_matches() {
        // f = 0.5 * sum(x^2): central differences are exact up to h^2.
        let store = std::cell::RefCell::new(vec![0.3, -1.2, 2.0, 0.7]);
        let analytic: Vec<f64> = store.borrow().clone();
        let report = finite_diff_check(
            4,
            |i| store.borrow()[i],
            |i, v| store.borrow_mut()[i] = v,
            || store.borrow().iter().map(|x| 0.5 * x * x).sum(),
            &analytic,
            4,
            1e-5,
            0,
        );
        assert!(report.passes(1e-9), "max err {}", report.max_rel_err);
    }

    #[test]
    fn finite_diff_check_subsamples_deterministically() {
        let store = std::cell::RefCell::new(vec![1.0; 10]);
        let analytic = vec![1.0; 10];
        let run = || {
            finite_diff_check(
                10,
                |i| store.borrow()[i],
                |i, v| store.borrow_mut()[i] = v,
                || store.borrow().iter().sum(),
                &analytic,
                4,
                1e-5,
                99,
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.n_probes, 4);
        assert_eq!(a.worst.map(|w| w.0), b.worst.map(|w| w.0));
    }
}

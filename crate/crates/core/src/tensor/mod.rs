//! Dense fp64 matrices with reverse-mode automatic differentiation.
//!
//! Every differentiable computation is recorded on an explicit [`Tape`]:
//! each op appends one node holding its output value and enough bookkeeping
//! to push gradients back to its inputs. [`Tape::backward`] walks the tape
//! in reverse from a scalar node and accumulates gradients into a
//! [`Gradients`] buffer keyed by [`ParamId`]. There is no global state; one
//! tape per frame (or per batch) is the intended usage, and independent
//! tapes may run on separate threads.
//!
//! Loss ops (`cross_entropy_sum`, `l1_sum`, `bce_sum`, `mse_sum`) produce
//! weighted *sums*; callers apply their own normalization with [`Tape::scale`]
//! so that every averaging convention stays explicit at the call site.

pub mod blocks;

use std::collections::HashMap;

use rand::Rng;

/// Dense row-major fp64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        FeatureMatrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "flat data length mismatch");
        FeatureMatrix { rows, cols, data }
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        FeatureMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = FeatureMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Xavier/Glorot uniform init in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        FeatureMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &FeatureMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transposed(&self) -> FeatureMatrix {
        let mut out = FeatureMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain (non-recorded) product; the tape op wraps this.
    pub fn matmul(&self, other: &FeatureMatrix) -> FeatureMatrix {
        mm(self, other)
    }
}

/// c = a·b, saxpy inner loop over contiguous rows.
fn mm(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    assert_eq!(a.cols, b.rows, "matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut c = FeatureMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let c_row = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c = a·bᵀ without materializing the transpose.
fn mm_nt(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    assert_eq!(a.cols, b.cols, "matmul_nt {}x{} by {}x{}ᵀ", a.rows, a.cols, b.rows, b.cols);
    let mut c = FeatureMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let dot: f64 = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            c.data[i * b.rows + j] = dot;
        }
    }
    c
}

/// c = aᵀ·b without materializing the transpose.
fn mm_tn(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    assert_eq!(a.rows, b.rows, "matmul_tn {}x{}ᵀ by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut c = FeatureMatrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let b_row = &b.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c.data[k * b.cols..(k + 1) * b.cols];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn add_into(acc: &mut FeatureMatrix, delta: &FeatureMatrix) {
    assert_eq!((acc.rows, acc.cols), (delta.rows, delta.cols), "shape mismatch");
    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
        *a += d;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("parameter `{0}` already registered")]
    DuplicateParameter(String),
    #[error("parameter `{0}` has no matching gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` expects shape {want_rows}x{want_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch { name: String, want_rows: usize, want_cols: usize, got_rows: usize, got_cols: usize },
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named model parameters. Insertion order is the checkpoint order, so
/// building a model from the same config always reproduces the same layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<FeatureMatrix>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: FeatureMatrix) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn add_xavier(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId, TensorError> {
        self.add(name, FeatureMatrix::xavier_uniform(fan_in, fan_out, rng))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, TensorError> {
        self.add(name, FeatureMatrix::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> Result<ParamId, TensorError> {
        self.add(name, FeatureMatrix::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &FeatureMatrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut FeatureMatrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureMatrix)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Replaces a parameter value by name, e.g. when loading a checkpoint.
    pub fn load_value(&mut self, name: &str, value: FeatureMatrix) -> Result<(), TensorError> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let current = &self.values[idx];
        if (current.rows, current.cols) != (value.rows, value.cols) {
            return Err(TensorError::ShapeMismatch {
                name: name.to_string(),
                want_rows: current.rows,
                want_cols: current.cols,
                got_rows: value.rows,
                got_cols: value.cols,
            });
        }
        self.values[idx] = value;
        Ok(())
    }
}

/// Gradient buffer parallel to one [`ParamSet`]. Starts zeroed; tapes
/// accumulate into it, so multi-frame batches just call `backward` per frame.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<FeatureMatrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            slots: params.values.iter().map(|v| FeatureMatrix::zeros(v.rows, v.cols)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &FeatureMatrix {
        &self.slots[id.0]
    }

    pub fn scale_all(&mut self, factor: f64) {
        for slot in &mut self.slots {
            for v in &mut slot.data {
                *v *= factor;
            }
        }
    }

    pub fn zero_all(&mut self) {
        for slot in &mut self.slots {
            slot.data.fill(0.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.data.iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

/// One full-batch gradient-descent step: p ← p − lr·grad, then gradients are
/// zeroed for the next accumulation round.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &mut Gradients,
    learning_rate: f64,
) -> Result<(), TensorError> {
    if grads.slots.len() != params.values.len() {
        let name = params.names.get(grads.slots.len()).cloned().unwrap_or_default();
        return Err(TensorError::MissingGradient(name));
    }
    for (i, (value, grad)) in params.values.iter_mut().zip(&grads.slots).enumerate() {
        if (value.rows, value.cols) != (grad.rows, grad.cols) {
            return Err(TensorError::MissingGradient(params.names[i].clone()));
        }
        for (v, g) in value.data.iter_mut().zip(&grad.data) {
            *v -= learning_rate * g;
        }
    }
    grads.zero_all();
    Ok(())
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Const,
    Param(ParamId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    AddN(Vec<NodeId>),
    Scale(NodeId, f64),
    /// (matrix n×d, row 1×d)
    AddRow(NodeId, NodeId),
    /// (matrix n×d, row 1×d), elementwise per column
    MulRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// Per-segment columnwise max; argmax row recorded per (segment, col),
    /// usize::MAX marking an empty segment.
    SegmentMax { input: NodeId, argmax: Vec<usize> },
    /// out[i] = Σ w·in[src] over combos[i].
    RowCombine { input: NodeId, combos: Vec<Vec<(usize, f64)>> },
    /// Σ_ij probe_ij·x_ij, a scalar probe for gradient checks.
    DotConst { input: NodeId, probe: FeatureMatrix },
    /// Σ_i w_i·(logsumexp(row_i) − logit_{i,t_i})
    CeSum { logits: NodeId, targets: Vec<usize>, weights: Vec<f64> },
    /// Σ_i w_i·Σ_c |pred − target|
    L1Sum { pred: NodeId, target: FeatureMatrix, row_weights: Vec<f64> },
    /// Σ_ij w_ij·bce(logit_ij, target_ij), numerically stable form
    BceSum { logits: NodeId, target: FeatureMatrix, weights: FeatureMatrix },
    /// Σ_ij w_ij·(pred − target)²
    MseSum { pred: NodeId, target: FeatureMatrix, weights: FeatureMatrix },
}

struct Node {
    op: Op,
    value: FeatureMatrix,
}

/// Wengert list: append-only op records plus memoized parameter leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: FeatureMatrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &FeatureMatrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: FeatureMatrix) -> NodeId {
        self.push(Op::Const, value)
    }

    /// A leaf bound to a parameter; repeated calls for the same id reuse the
    /// same node so shared weights accumulate one gradient slot.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(Op::Param(id), params.get(id).clone());
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = mm(self.value(a), self.value(b));
        self.push(Op::Matmul(a, b), value)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transposed();
        self.push(Op::Transpose(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add_n needs at least one term");
        let first = self.value(terms[0]);
        let mut value = first.clone();
        for &t in &terms[1..] {
            add_into(&mut value, self.value(t));
        }
        self.push(Op::AddN(terms.to_vec()), value)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            *v *= factor;
        }
        self.push(Op::Scale(x, factor), value)
    }

    pub fn add_row(&mut self, matrix: NodeId, row: NodeId) -> NodeId {
        let (m, r) = (self.value(matrix), self.value(row));
        assert_eq!(r.rows, 1, "broadcast row must be 1x{}", m.cols);
        assert_eq!(m.cols, r.cols, "add_row {}x{} + 1x{}", m.rows, m.cols, r.cols);
        let mut value = m.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(Op::AddRow(matrix, row), value)
    }

    pub fn mul_row(&mut self, matrix: NodeId, row: NodeId) -> NodeId {
        let (m, r) = (self.value(matrix), self.value(row));
        assert_eq!(r.rows, 1, "broadcast row must be 1x{}", m.cols);
        assert_eq!(m.cols, r.cols, "mul_row {}x{} * 1x{}", m.rows, m.cols, r.cols);
        let mut value = m.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *v *= b;
            }
        }
        self.push(Op::MulRow(matrix, row), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            *v = v.max(0.0);
        }
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            *v = sigmoid(*v);
        }
        self.push(Op::Sigmoid(x), value)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let input = self.value(x);
        assert!(input.rows > 0 && input.cols > 0, "softmax of empty matrix");
        let mut value = input.clone();
        for i in 0..value.rows {
            softmax_in_place(value.row_mut(i));
        }
        self.push(Op::SoftmaxRows(x), value)
    }

    /// Row-wise (x − mean) / sqrt(var + eps), no affine part; compose with
    /// `mul_row`/`add_row` for learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let input = self.value(x);
        let mut value = input.clone();
        for i in 0..value.rows {
            let row = value.row_mut(i);
            let (mean, sd) = row_mean_sd(row, eps);
            for v in row {
                *v = (*v - mean) / sd;
            }
        }
        self.push(Op::LayerNormRows(x, eps), value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = FeatureMatrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let part = self.value(p);
            assert_eq!(part.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.data[i * cols + offset..i * cols + offset + part.cols]
                    .copy_from_slice(part.row(i));
            }
            offset += part.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let part = self.value(p);
            assert_eq!(part.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&part.data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), FeatureMatrix::from_flat(rows, cols, data))
    }

    /// out row i = input row indices[i]; duplicates allowed.
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let input = self.value(x);
        let mut value = FeatureMatrix::zeros(indices.len(), input.cols);
        for (i, &src) in indices.iter().enumerate() {
            assert!(src < input.rows, "gather index {} out of {} rows", src, input.rows);
            value.row_mut(i).copy_from_slice(input.row(src));
        }
        self.push(Op::GatherRows(x, indices), value)
    }

    /// Columnwise max over rows sharing a segment id. Ties keep the lowest
    /// row index; empty segments produce zero rows with no gradient.
    pub fn segment_max(&mut self, x: NodeId, segments: &[usize], segment_count: usize) -> NodeId {
        let input = self.value(x);
        assert_eq!(segments.len(), input.rows, "one segment id per row");
        let cols = input.cols;
        let mut value = FeatureMatrix::filled(segment_count, cols, f64::NEG_INFINITY);
        let mut argmax = vec![usize::MAX; segment_count * cols];
        for (i, &s) in segments.iter().enumerate() {
            assert!(s < segment_count, "segment id {} out of {}", s, segment_count);
            for c in 0..cols {
                let v = input.data[i * cols + c];
                if v > value.data[s * cols + c] {
                    value.data[s * cols + c] = v;
                    argmax[s * cols + c] = i;
                }
            }
        }
        for (v, &a) in value.data.iter_mut().zip(&argmax) {
            if a == usize::MAX {
                *v = 0.0;
            }
        }
        self.push(Op::SegmentMax { input: x, argmax }, value)
    }

    /// out row i = Σ weight·input row src over combos[i]; used for
    /// inverse-distance interpolation.
    pub fn row_combine(&mut self, x: NodeId, combos: Vec<Vec<(usize, f64)>>) -> NodeId {
        let input = self.value(x);
        let mut value = FeatureMatrix::zeros(combos.len(), input.cols);
        for (i, combo) in combos.iter().enumerate() {
            for &(src, w) in combo {
                assert!(src < input.rows, "combine index {} out of {} rows", src, input.rows);
                for (v, s) in value.row_mut(i).iter_mut().zip(input.row(src)) {
                    *v += w * s;
                }
            }
        }
        self.push(Op::RowCombine { input: x, combos }, value)
    }

    /// Scalar probe Σ probe∘x, for scalarizing outputs in gradient checks.
    pub fn dot_const(&mut self, x: NodeId, probe: FeatureMatrix) -> NodeId {
        let input = self.value(x);
        assert_eq!((input.rows, input.cols), (probe.rows, probe.cols), "probe shape mismatch");
        let v: f64 = input.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
        self.push(Op::DotConst { input: x, probe }, FeatureMatrix::from_flat(1, 1, vec![v]))
    }

    /// Weighted cross-entropy sum over rows of logits; callers divide by
    /// their normalizer via `scale`. Rows with weight 0 contribute nothing.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> NodeId {
        let input = self.value(logits);
        assert_eq!(targets.len(), input.rows, "one target per row");
        assert_eq!(weights.len(), input.rows, "one weight per row");
        let mut total = 0.0;
        for i in 0..input.rows {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            assert!(t < input.cols, "target class {} out of {}", t, input.cols);
            let row = input.row(i);
            total += weights[i] * (log_sum_exp(row) - row[t]);
        }
        self.push(
            Op::CeSum { logits, targets, weights },
            FeatureMatrix::from_flat(1, 1, vec![total]),
        )
    }

    /// Row-weighted L1 sum: Σ_i w_i Σ_c |pred_ic − target_ic|.
    pub fn l1_sum(&mut self, pred: NodeId, target: FeatureMatrix, row_weights: Vec<f64>) -> NodeId {
        let input = self.value(pred);
        assert_eq!((input.rows, input.cols), (target.rows, target.cols), "target shape mismatch");
        assert_eq!(row_weights.len(), input.rows, "one weight per row");
        let mut total = 0.0;
        for i in 0..input.rows {
            if row_weights[i] == 0.0 {
                continue;
            }
            let diff: f64 =
                input.row(i).iter().zip(target.row(i)).map(|(p, t)| (p - t).abs()).sum();
            total += row_weights[i] * diff;
        }
        self.push(
            Op::L1Sum { pred, target, row_weights },
            FeatureMatrix::from_flat(1, 1, vec![total]),
        )
    }

    /// Entry-weighted binary cross-entropy sum on logits, stable form
    /// max(x,0) − x·t + ln(1 + e^{−|x|}).
    pub fn bce_sum(&mut self, logits: NodeId, target: FeatureMatrix, weights: FeatureMatrix) -> NodeId {
        let input = self.value(logits);
        assert_eq!((input.rows, input.cols), (target.rows, target.cols), "target shape mismatch");
        assert_eq!((input.rows, input.cols), (weights.rows, weights.cols), "weight shape mismatch");
        let mut total = 0.0;
        for ((&x, &t), &w) in input.data.iter().zip(&target.data).zip(&weights.data) {
            if w == 0.0 {
                continue;
            }
            total += w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
        }
        self.push(
            Op::BceSum { logits, target, weights },
            FeatureMatrix::from_flat(1, 1, vec![total]),
        )
    }

    /// Entry-weighted squared-error sum.
    pub fn mse_sum(&mut self, pred: NodeId, target: FeatureMatrix, weights: FeatureMatrix) -> NodeId {
        let input = self.value(pred);
        assert_eq!((input.rows, input.cols), (target.rows, target.cols), "target shape mismatch");
        assert_eq!((input.rows, input.cols), (weights.rows, weights.cols), "weight shape mismatch");
        let mut total = 0.0;
        for ((&p, &t), &w) in input.data.iter().zip(&target.data).zip(&weights.data) {
            total += w * (p - t) * (p - t);
        }
        self.push(
            Op::MseSum { pred, target, weights },
            FeatureMatrix::from_flat(1, 1, vec![total]),
        )
    }

    /// Reverse pass from a scalar node, accumulating parameter gradients.
    pub fn backward(&self, root: NodeId, grads: &mut Gradients) {
        let root_value = self.value(root);
        assert_eq!((root_value.rows, root_value.cols), (1, 1), "backward needs a scalar root");
        let mut adjoint: Vec<Option<FeatureMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[root.0] = Some(FeatureMatrix::from_flat(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(g) = adjoint[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(pid) => add_into(&mut grads.slots[pid.0], &g),
                Op::Matmul(a, b) => {
                    let da = mm_nt(&g, &self.nodes[b.0].value);
                    let db = mm_tn(&self.nodes[a.0].value, &g);
                    accumulate(&mut adjoint, *a, da);
                    accumulate(&mut adjoint, *b, db);
                }
                Op::Transpose(x) => accumulate(&mut adjoint, *x, g.transposed()),
                Op::AddN(terms) => {
                    for &t in terms {
                        accumulate(&mut adjoint, t, g.clone());
                    }
                }
                Op::Scale(x, factor) => {
                    let mut dx = g.clone();
                    for v in &mut dx.data {
                        *v *= factor;
                    }
                    accumulate(&mut adjoint, *x, dx);
                }
                Op::AddRow(matrix, row) => {
                    let mut drow = FeatureMatrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (d, gv) in drow.data.iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut adjoint, *matrix, g.clone());
                    accumulate(&mut adjoint, *row, drow);
                }
                Op::MulRow(matrix, row) => {
                    let m = &self.nodes[matrix.0].value;
                    let r = &self.nodes[row.0].value;
                    let mut dm = g.clone();
                    for i in 0..dm.rows {
                        for (d, rv) in dm.row_mut(i).iter_mut().zip(&r.data) {
                            *d *= rv;
                        }
                    }
                    let mut dr = FeatureMatrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.get(i, c) * m.get(i, c);
                        }
                    }
                    accumulate(&mut adjoint, *matrix, dm);
                    accumulate(&mut adjoint, *row, dr);
                }
                Op::Relu(x) => {
                    let input = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (d, &v) in dx.data.iter_mut().zip(&input.data) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut adjoint, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let out = &self.nodes[idx].value;
                    let mut dx = g.clone();
                    for (d, &s) in dx.data.iter_mut().zip(&out.data) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut adjoint, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let out = &self.nodes[idx].value;
                    let mut dx = FeatureMatrix::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let s = out.row(i);
                        let gr = g.row(i);
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (sv, gv)) in dx.row_mut(i).iter_mut().zip(s.iter().zip(gr)) {
                            *d = sv * (gv - dot);
                        }
                    }
                    accumulate(&mut adjoint, *x, dx);
                }
                Op::LayerNormRows(x, eps) => {
                    let input = &self.nodes[x.0].value;
                    let out = &self.nodes[idx].value;
                    let n = input.cols as f64;
                    let mut dx = FeatureMatrix::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let (_, sd) = row_mean_sd(input.row(i), *eps);
                        let y = out.row(i);
                        let gr = g.row(i);
                        let g_mean: f64 = gr.iter().sum::<f64>() / n;
                        let gy_mean: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (d, (gv, yv)) in dx.row_mut(i).iter_mut().zip(gr.iter().zip(y)) {
                            *d = (gv - g_mean - yv * gy_mean) / sd;
                        }
                    }
                    accumulate(&mut adjoint, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.cols;
                        let mut dp = FeatureMatrix::zeros(g.rows, cols);
                        for i in 0..g.rows {
                            dp.row_mut(i)
                                .copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        accumulate(&mut adjoint, p, dp);
                        offset += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows;
                        let dp = FeatureMatrix::from_flat(
                            rows,
                            g.cols,
                            g.data[offset * g.cols..(offset + rows) * g.cols].to_vec(),
                        );
                        accumulate(&mut adjoint, p, dp);
                        offset += rows;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let src = &self.nodes[x.0].value;
                    let mut dx = FeatureMatrix::zeros(src.rows, src.cols);
                    for (i, &s) in indices.iter().enumerate() {
                        for (d, gv) in dx.row_mut(s).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut adjoint, *x, dx);
                }
                Op::SegmentMax { input, argmax } => {
                    let src = &self.nodes[input.0].value;
                    let mut dx = FeatureMatrix::zeros(src.rows, src.cols);
                    let cols = g.cols;
                    for s in 0..g.rows {
                        for c in 0..cols {
                            let a = argmax[s * cols + c];
                            if a != usize::MAX {
                                dx.data[a * cols + c] += g.data[s * cols + c];
                            }
                        }
                    }
                    accumulate(&mut adjoint, *input, dx);
                }
                Op::RowCombine { input, combos } => {
                    let src = &self.nodes[input.0].value;
                    let mut dx = FeatureMatrix::zeros(src.rows, src.cols);
                    for (i, combo) in combos.iter().enumerate() {
                        for &(s, w) in combo {
                            for (d, gv) in dx.row_mut(s).iter_mut().zip(g.row(i)) {
                                *d += w * gv;
                            }
                        }
                    }
                    accumulate(&mut adjoint, *input, dx);
                }
                Op::DotConst { input, probe } => {
                    let gs = g.data[0];
                    let mut dx = probe.clone();
                    for v in &mut dx.data {
                        *v *= gs;
                    }
                    accumulate(&mut adjoint, *input, dx);
                }
                Op::CeSum { logits, targets, weights } => {
                    let gs = g.data[0];
                    let input = &self.nodes[logits.0].value;
                    let mut dx = FeatureMatrix::zeros(input.rows, input.cols);
                    for i in 0..input.rows {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let row = input.row(i);
                        let mut probs = row.to_vec();
                        softmax_in_place(&mut probs);
                        let d = dx.row_mut(i);
                        for (c, p) in probs.iter().enumerate() {
                            d[c] = gs * weights[i] * p;
                        }
                        d[targets[i]] -= gs * weights[i];
                    }
                    accumulate(&mut adjoint, *logits, dx);
                }
                Op::L1Sum { pred, target, row_weights } => {
                    let gs = g.data[0];
                    let input = &self.nodes[pred.0].value;
                    let mut dx = FeatureMatrix::zeros(input.rows, input.cols);
                    for i in 0..input.rows {
                        if row_weights[i] == 0.0 {
                            continue;
                        }
                        for ((d, &p), &t) in
                            dx.row_mut(i).iter_mut().zip(input.row(i)).zip(target.row(i))
                        {
                            // signum(0.0) is 1.0 in Rust; the subgradient at 0 is 0
                            *d = if p == t { 0.0 } else { gs * row_weights[i] * (p - t).signum() };
                        }
                    }
                    accumulate(&mut adjoint, *pred, dx);
                }
                Op::BceSum { logits, target, weights } => {
                    let gs = g.data[0];
                    let input = &self.nodes[logits.0].value;
                    let mut dx = FeatureMatrix::zeros(input.rows, input.cols);
                    for (d, ((&x, &t), &w)) in dx
                        .data
                        .iter_mut()
                        .zip(input.data.iter().zip(&target.data).zip(&weights.data))
                    {
                        *d = gs * w * (sigmoid(x) - t);
                    }
                    accumulate(&mut adjoint, *logits, dx);
                }
                Op::MseSum { pred, target, weights } => {
                    let gs = g.data[0];
                    let input = &self.nodes[pred.0].value;
                    let mut dx = FeatureMatrix::zeros(input.rows, input.cols);
                    for (d, ((&p, &t), &w)) in dx
                        .data
                        .iter_mut()
                        .zip(input.data.iter().zip(&target.data).zip(&weights.data))
                    {
                        *d = gs * w * 2.0 * (p - t);
                    }
                    accumulate(&mut adjoint, *pred, dx);
                }
            }
        }
    }
}

fn accumulate(adjoint: &mut [Option<FeatureMatrix>], id: NodeId, delta: FeatureMatrix) {
    match &mut adjoint[id.0] {
        Some(acc) => add_into(acc, &delta),
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row_mean_sd(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::from_flat(rows, cols, data)
    }

    /// Central finite differences of a scalar-valued rebuild closure with
    /// respect to one parameter, compared against tape gradients.
    fn check_param_gradient(
        params: &mut ParamSet,
        id: ParamId,
        build: &dyn Fn(&ParamSet, &mut Tape) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(params, &mut tape);
        let mut grads = Gradients::zeros_like(params);
        tape.backward(root, &mut grads);
        let analytic = grads.get(id).clone();

        let step = 1e-5;
        let entries = params.get(id).data().len();
        for e in 0..entries {
            let orig = params.get(id).data()[e];
            params.get_mut(id).data_mut()[e] = orig + step;
            let mut t = Tape::new();
            let root = build(params, &mut t);
            let plus = t.value(root).get(0, 0);
            params.get_mut(id).data_mut()[e] = orig - step;
            let mut t = Tape::new();
            let root = build(params, &mut t);
            let minus = t.value(root).get(0, 0);
            params.get_mut(id).data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let got = analytic.data()[e];
            let rel = (got - numeric).abs() / got.abs().max(numeric.abs()).max(1.0);
            assert!(
                rel <= tol,
                "entry {e}: analytic {got} vs numeric {numeric} (rel {rel:.3e} > {tol:.0e})"
            );
        }
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(2, 3, &mut rng);
        assert_eq!(FeatureMatrix::identity(2).matmul(&m), m);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = FeatureMatrix::from_nested(&[vec![1.0, 2.0]]);
        let b = FeatureMatrix::from_nested(&[vec![3.0], vec![4.0]]);
        assert_eq!(a.matmul(&b), FeatureMatrix::from_nested(&[vec![11.0]]));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let a = params.add("a", random_matrix(3, 4, &mut rng)).unwrap();
        let b_val = random_matrix(4, 2, &mut rng);
        let build = move |ps: &ParamSet, tape: &mut Tape| {
            let an = tape.param(ps, a);
            let bn = tape.constant(b_val.clone());
            let prod = tape.matmul(an, bn);
            tape.dot_const(prod, FeatureMatrix::filled(3, 2, 1.0))
        };
        check_param_gradient(&mut params, a, &build, 1e-6);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(FeatureMatrix::from_nested(&[vec![0.0, 0.0]]));
        let s = tape.softmax_rows(x);
        assert!(tape.value(s).max_abs_diff(&FeatureMatrix::from_nested(&[vec![0.5, 0.5]])) < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(FeatureMatrix::from_nested(&[vec![1000.0, 0.0]]));
        let s = tape.softmax_rows(x);
        let out = tape.value(s);
        assert!(out.is_finite());
        assert!((out.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(out.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(6, 7, &mut rng));
        let s = tape.softmax_rows(x);
        for i in 0..6 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(tape.value(s).row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let x = params.add("x", random_matrix(4, 5, &mut rng)).unwrap();
        let probe = random_matrix(4, 5, &mut rng);
        let build = move |ps: &ParamSet, tape: &mut Tape| {
            let xn = tape.param(ps, x);
            let s = tape.softmax_rows(xn);
            tape.dot_const(s, probe.clone())
        };
        check_param_gradient(&mut params, x, &build, 1e-6);
    }

    #[test]
    fn layer_norm_zeroes_constant_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(FeatureMatrix::from_nested(&[vec![5.0, 5.0, 5.0]]));
        let y = tape.layer_norm_rows(x, 1e-5);
        assert!(tape.value(y).max_abs_diff(&FeatureMatrix::zeros(1, 3)) < 1e-9);
    }

    #[test]
    fn layer_norm_keeps_already_normalized_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(FeatureMatrix::from_nested(&[vec![1.0, -1.0]]));
        let y = tape.layer_norm_rows(x, 1e-5);
        // eps shifts the scale by ~5e-6; anything tighter would test eps, not the op
        assert!(tape.value(y).max_abs_diff(&FeatureMatrix::from_nested(&[vec![1.0, -1.0]])) < 1e-4);
    }

    #[test]
    fn layer_norm_output_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(5, 8, &mut rng));
        let y = tape.layer_norm_rows(x, 1e-5);
        for i in 0..5 {
            let row = tape.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParamSet::new();
        let x = params.add("x", random_matrix(3, 6, &mut rng)).unwrap();
        let probe = random_matrix(3, 6, &mut rng);
        let build = move |ps: &ParamSet, tape: &mut Tape| {
            let xn = tape.param(ps, x);
            let y = tape.layer_norm_rows(xn, 1e-5);
            tape.dot_const(y, probe.clone())
        };
        check_param_gradient(&mut params, x, &build, 1e-5);
    }

    #[test]
    fn broadcast_and_elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let m = params.add("m", random_matrix(4, 3, &mut rng)).unwrap();
        let r = params.add("r", random_matrix(1, 3, &mut rng)).unwrap();
        let probe = random_matrix(4, 3, &mut rng);
        let build = move |ps: &ParamSet, tape: &mut Tape| {
            let mn = tape.param(ps, m);
            let rn = tape.param(ps, r);
            let a = tape.add_row(mn, rn);
            let b = tape.mul_row(a, rn);
            let c = tape.relu(b);
            tape.dot_const(c, probe.clone())
        };
        check_param_gradient(&mut params, m, &build, 1e-5);
        check_param_gradient(&mut params, r, &build, 1e-5);
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::new();
        let x = params.add("x", random_matrix(5, 3, &mut rng)).unwrap();
        let probe_a = random_matrix(4, 3, &mut rng);
        let probe_b = random_matrix(2, 3, &mut rng);
        let probe_c = random_matrix(3, 3, &mut rng);

        let gather = move |ps: &ParamSet, tape: &mut Tape| {
            let xn = tape.param(ps, x);
            let gathered = tape.gather_rows(xn, vec![0, 2, 2, 4]);
            tape.dot_const(gathered, probe_a.clone())
        };
        check_param_gradient(&mut params, x, &gather, 1e-6);

        let segmax = move |ps: &ParamSet, tape: &mut Tape| {
            let xn = tape.param(ps, x);
            let pooled = tape.segment_max(xn, &[0, 0, 1, 1, 1], 2);
            tape.dot_const(pooled, probe_b.clone())
        };
        check_param_gradient(&mut params, x, &segmax, 1e-6);

        let combine = move |ps: &ParamSet, tape: &mut Tape| {
            let xn = tape.param(ps, x);
            let combos = vec![
                vec![(0, 0.5), (1, 0.5)],
                vec![(2, 1.0)],
                vec![(3, 0.25), (4, 0.75)],
            ];
            let mixed = tape.row_combine(xn, combos);
            tape.dot_const(mixed, probe_c.clone())
        };
        check_param_gradient(&mut params, x, &combine, 1e-6);
    }

    #[test]
    fn concat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        let a = params.add("a", random_matrix(3, 2, &mut rng)).unwrap();
        let b = params.add("b", random_matrix(3, 4, &mut rng)).unwrap();
        let probe_cols = random_matrix(3, 6, &mut rng);
        let build = move |ps: &ParamSet, tape: &mut Tape| {
            let an = tape.param(ps, a);
            let bn = tape.param(ps, b);
            let cat = tape.concat_cols(&[an, bn]);
            tape.dot_const(cat, probe_cols.clone())
        };
        check_param_gradient(&mut params, a, &build, 1e-6);
        check_param_gradient(&mut params, b, &build, 1e-6);

        let mut params = ParamSet::new();
        let a = params.add("a", random_matrix(2, 3, &mut rng)).unwrap();
        let b = params.add("b", random_matrix(4, 3, &mut rng)).unwrap();
        let probe_rows = random_matrix(6, 3, &mut rng);
        let build = move |ps: &ParamSet, tape: &mut Tape| {
            let an = tape.param(ps, a);
            let bn = tape.param(ps, b);
            let cat = tape.concat_rows(&[an, bn]);
            tape.dot_const(cat, probe_rows.clone())
        };
        check_param_gradient(&mut params, a, &build, 1e-6);
        check_param_gradient(&mut params, b, &build, 1e-6);
    }

    #[test]
    fn segment_max_handles_empty_segments_and_tie_breaks_low() {
        let mut tape = Tape::new();
        let x = tape.constant(FeatureMatrix::from_nested(&[vec![2.0], vec![2.0], vec![-1.0]]));
        let pooled = tape.segment_max(x, &[0, 0, 2], 3);
        let out = tape.value(pooled);
        assert_eq!(out.get(0, 0), 2.0);
        assert_eq!(out.get(1, 0), 0.0);
        assert_eq!(out.get(2, 0), -1.0);
        // tie between rows 0 and 1 goes to row 0
        let Op::SegmentMax { argmax, .. } = &tape.nodes[pooled.0].op else {
            panic!("expected segment max node");
        };
        assert_eq!(argmax[0], 0);
    }

    #[test]
    fn loss_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = ParamSet::new();
        let logits = params.add("logits", random_matrix(5, 4, &mut rng)).unwrap();

        let targets = vec![0, 3, 1, 2, 0];
        let weights = vec![1.0, 0.5, 0.0, 2.0, 1.0];
        let tgt = targets.clone();
        let wts = weights.clone();
        let ce = move |ps: &ParamSet, tape: &mut Tape| {
            let x = tape.param(ps, logits);
            tape.cross_entropy_sum(x, tgt.clone(), wts.clone())
        };
        check_param_gradient(&mut params, logits, &ce, 1e-6);

        let target = random_matrix(5, 4, &mut rng);
        let t = target.clone();
        let l1 = move |ps: &ParamSet, tape: &mut Tape| {
            let x = tape.param(ps, logits);
            tape.l1_sum(x, t.clone(), vec![1.0, 0.0, 1.0, 1.0, 0.5])
        };
        check_param_gradient(&mut params, logits, &l1, 1e-5);

        let binary =
            FeatureMatrix::from_flat(5, 4, (0..20).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect());
        let mask =
            FeatureMatrix::from_flat(5, 4, (0..20).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect());
        let (bt, bm) = (binary.clone(), mask.clone());
        let bce = move |ps: &ParamSet, tape: &mut Tape| {
            let x = tape.param(ps, logits);
            tape.bce_sum(x, bt.clone(), bm.clone())
        };
        check_param_gradient(&mut params, logits, &bce, 1e-6);

        let (mt, mm_) = (target.clone(), mask.clone());
        let mse = move |ps: &ParamSet, tape: &mut Tape| {
            let x = tape.param(ps, logits);
            let s = tape.sigmoid(x);
            tape.mse_sum(s, mt.clone(), mm_.clone())
        };
        check_param_gradient(&mut params, logits, &mse, 1e-6);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_class_count() {
        let mut tape = Tape::new();
        let x = tape.constant(FeatureMatrix::zeros(3, 2));
        let loss = tape.cross_entropy_sum(x, vec![0, 1, 0], vec![1.0, 1.0, 1.0]);
        let per_row = tape.value(loss).get(0, 0) / 3.0;
        assert!((per_row - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_nodes_accumulate_one_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let w = params.add("w", random_matrix(2, 2, &mut rng)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&params, w);
        let b = tape.param(&params, w);
        assert_eq!(a, b, "leaf must be memoized per parameter");
        // d/dW sum(W·W) gets contributions from both uses
        check_param_gradient(
            &mut params,
            w,
            &|ps, tape| {
                let a = tape.param(ps, w);
                let prod = tape.matmul(a, a);
                tape.dot_const(prod, FeatureMatrix::filled(2, 2, 1.0))
            },
            1e-6,
        );
    }

    #[test]
    fn sgd_leaves_params_unchanged_on_zero_gradient() {
        let mut params = ParamSet::new();
        let p = params.add("p", FeatureMatrix::from_nested(&[vec![1.0]])).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        sgd_step(&mut params, &mut grads, 0.1).unwrap();
        assert_eq!(params.get(p).get(0, 0), 1.0);
    }

    #[test]
    fn sgd_applies_scaled_gradient_and_zeroes_it() {
        let mut params = ParamSet::new();
        let p = params.add("p", FeatureMatrix::from_nested(&[vec![1.0]])).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        grads.slots[0].set(0, 0, 2.0);
        sgd_step(&mut params, &mut grads, 0.1).unwrap();
        assert!((params.get(p).get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(grads.get(p).get(0, 0), 0.0);
    }

    #[test]
    fn sgd_rejects_mismatched_gradient_buffer() {
        let mut params = ParamSet::new();
        params.add("p", FeatureMatrix::zeros(1, 1)).unwrap();
        let mut grads = Gradients::zeros_like(&params);
        params.add("q", FeatureMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            sgd_step(&mut params, &mut grads, 0.1),
            Err(TensorError::MissingGradient(_))
        ));
    }

    #[test]
    fn sgd_descends_a_quadratic_monotonically() {
        let mut params = ParamSet::new();
        let p = params.add("p", FeatureMatrix::from_nested(&[vec![5.0]])).unwrap();
        let target = FeatureMatrix::from_nested(&[vec![3.0]]);
        let ones = FeatureMatrix::filled(1, 1, 1.0);
        let mut last = f64::INFINITY;
        let mut grads = Gradients::zeros_like(&params);
        for _ in 0..30 {
            let mut tape = Tape::new();
            let x = tape.param(&params, p);
            let loss = tape.mse_sum(x, target.clone(), ones.clone());
            let value = tape.value(loss).get(0, 0);
            assert!(value < last, "loss must decrease: {value} !< {last}");
            last = value;
            tape.backward(loss, &mut grads);
            sgd_step(&mut params, &mut grads, 0.1).unwrap();
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn finite_inputs_never_produce_non_finite_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let a = tape.constant(random_matrix(4, 6, &mut rng));
        let b = tape.constant(random_matrix(6, 4, &mut rng));
        let row = tape.constant(random_matrix(1, 4, &mut rng));
        let prod = tape.matmul(a, b);
        let biased = tape.add_row(prod, row);
        let scaled = tape.mul_row(biased, row);
        let act = tape.relu(scaled);
        let sig = tape.sigmoid(act);
        let soft = tape.softmax_rows(sig);
        let normed = tape.layer_norm_rows(soft, 1e-5);
        let pooled = tape.segment_max(normed, &[0, 1, 0, 1], 2);
        let cat = tape.concat_rows(&[pooled, pooled]);
        for node in [prod, biased, scaled, act, sig, soft, normed, pooled, cat] {
            assert!(tape.value(node).is_finite());
        }
    }
}

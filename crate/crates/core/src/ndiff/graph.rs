//! The computation tape: eager forward evaluation with recorded operations,
//! replayed in reverse for gradients.
//!
//! Every op validates its input shapes up front and reports failures through
//! [`NdiffError::Shape`] with the offending op named, so a mis-wired model
//! fails loudly at graph construction rather than deep inside `backward`.
//! Gradients accumulate additively, which makes reuse of a node in several
//! places (shared sub-expressions) just work.

use super::tensor::Tensor;
use super::NdiffError;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// One row of an [`Op::OverrideRows`] patch list.
type RowOverride = (usize, NodeId);

#[derive(Debug, Clone)]
enum Op {
    /// Input or parameter; nothing to backpropagate through.
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[r×c] + [1×c]`, the bias-row broadcast.
    AddRow(NodeId, NodeId),
    /// Element-wise product of same-shape tensors.
    Mul(NodeId, NodeId),
    /// `k·x + c` applied element-wise.
    Affine(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    /// `x^e` element-wise; `e >= 1` keeps the derivative finite at 0.
    PowScalar(NodeId, f64),
    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
    Clamp(NodeId, f64, f64),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    /// Rows `[r0, r1)` of the input.
    SliceRows(NodeId, usize),
    /// Columns `[c0, c1)` of the input.
    SliceCols(NodeId, usize),
    /// Mean of all elements, producing 1×1.
    MeanAll(NodeId),
    /// Column-wise mean over a subset of rows, producing 1×c. The mask has
    /// one flag per row; masked-out rows contribute nothing.
    MeanRowsMasked(NodeId, Vec<bool>),
    /// Softmax down a 1-column tensor with masked entries pinned to 0.
    SoftmaxColMasked(NodeId, Vec<bool>),
    /// Element-wise product with a fixed mask (inverted-dropout scaling baked
    /// into the mask values).
    DropoutMask(NodeId, Tensor),
    /// Stack 1×c nodes into an n×c tensor, in order.
    StackRows(Vec<NodeId>),
    /// A constant base tensor with some rows replaced by 1×c nodes. The same
    /// node may back several rows; its gradient accumulates across them.
    OverrideRows(NodeId, Vec<RowOverride>),
    Transpose(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, if the node required one and was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, defaulting to zeros of the given shape when the
    /// node never influenced the loss.
    pub fn take_or_zeros(&mut self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        self.grads
            .get_mut(id.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

/// An append-only tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable parameter; `backward` will produce its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.push(value, op, requires)
    }

    fn shape_err(op: &'static str, detail: String) -> NdiffError {
        NdiffError::Shape { op, detail }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Self::shape_err("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push_op(value, Op::Matmul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    /// Add a 1×c row to every row of an r×c tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NdiffError> {
        let (_, ac) = self.value(a).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != ac {
            return Err(Self::shape_err(
                "add_row",
                format!("{:?} + {rr}x{rc}", self.value(a).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (j, b) in bias.iter().enumerate() {
                let v = value.get(i, j) + b;
                value.set(i, j, v);
            }
        }
        Ok(self.push_op(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err("mul", format!("{sa:?} * {sb:?}")));
        }
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Element-wise `k·x + c`.
    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let value = self.value(a).map(|x| k * x + c);
        self.push_op(value, Op::Affine(a, k), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(crate::linear::sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    /// Natural log; the caller is responsible for keeping inputs positive
    /// (the focal loss clamps before taking logs).
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push_op(value, Op::Ln(a), &[a])
    }

    /// Element-wise `x^e` for `e >= 0`. The derivative is finite everywhere
    /// for `e == 0` and `e >= 1`; for fractional exponents the caller must
    /// keep inputs strictly positive.
    pub fn pow_scalar(&mut self, a: NodeId, e: f64) -> Result<NodeId, NdiffError> {
        if !(e >= 0.0) {
            return Err(Self::shape_err("pow_scalar", format!("exponent {e} must be >= 0")));
        }
        let value = self.value(a).map(|x| x.powf(e));
        Ok(self.push_op(value, Op::PowScalar(a, e), &[a]))
    }

    /// Clamp into `[lo, hi]`. Logs a warning when any element actually moves,
    /// since that usually means a probability has saturated.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let before = self.value(a);
        if before.data().iter().any(|&x| x < lo || x > hi) {
            log::warn!("clamping values outside [{lo}, {hi}]");
        }
        let value = before.map(|x| x.clamp(lo, hi));
        self.push_op(value, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(Self::shape_err("concat_cols", format!("{ar}x{ac} | {br}x{bc}")));
        }
        let mut value = Tensor::zeros(ar, ac + bc);
        for i in 0..ar {
            for j in 0..ac {
                value.set(i, j, self.value(a).get(i, j));
            }
            for j in 0..bc {
                value.set(i, ac + j, self.value(b).get(i, j));
            }
        }
        Ok(self.push_op(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != bc {
            return Err(Self::shape_err("concat_rows", format!("{ar}x{ac} / {br}x{bc}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_data(ar + br, ac, data)?;
        Ok(self.push_op(value, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId, NdiffError> {
        let (rows, cols) = self.value(a).shape();
        if r0 >= r1 || r1 > rows {
            return Err(Self::shape_err("slice_rows", format!("[{r0}, {r1}) of {rows} rows")));
        }
        let data = self.value(a).data()[r0 * cols..r1 * cols].to_vec();
        let value = Tensor::from_data(r1 - r0, cols, data)?;
        Ok(self.push_op(value, Op::SliceRows(a, r0), &[a]))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId, NdiffError> {
        let (rows, cols) = self.value(a).shape();
        if c0 >= c1 || c1 > cols {
            return Err(Self::shape_err("slice_cols", format!("[{c0}, {c1}) of {cols} cols")));
        }
        let mut value = Tensor::zeros(rows, c1 - c0);
        for i in 0..rows {
            for j in c0..c1 {
                value.set(i, j - c0, self.value(a).get(i, j));
            }
        }
        Ok(self.push_op(value, Op::SliceCols(a, c0), &[a]))
    }

    /// Mean over all elements, producing a 1×1 node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(mean), Op::MeanAll(a), &[a])
    }

    /// Column-wise mean over the rows where `mask` is true, producing 1×c.
    pub fn mean_rows_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, NdiffError> {
        let (rows, cols) = self.value(a).shape();
        if mask.len() != rows {
            return Err(Self::shape_err(
                "mean_rows_masked",
                format!("{} mask flags for {rows} rows", mask.len()),
            ));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(Self::shape_err("mean_rows_masked", "no unmasked rows".into()));
        }
        let mut value = Tensor::zeros(1, cols);
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            for j in 0..cols {
                let v = value.get(0, j) + self.value(a).get(i, j) / kept as f64;
                value.set(0, j, v);
            }
        }
        Ok(self.push_op(value, Op::MeanRowsMasked(a, mask.to_vec()), &[a]))
    }

    /// Softmax down an n×1 column with masked entries pinned to exactly 0.
    /// The unmasked entries sum to 1.
    pub fn softmax_col_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, NdiffError> {
        let (rows, cols) = self.value(a).shape();
        if cols != 1 {
            return Err(Self::shape_err("softmax_col_masked", format!("{rows}x{cols} is not a column")));
        }
        if mask.len() != rows {
            return Err(Self::shape_err(
                "softmax_col_masked",
                format!("{} mask flags for {rows} rows", mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Self::shape_err("softmax_col_masked", "all rows masked".into()));
        }
        let col = self.value(a);
        let max = (0..rows)
            .filter(|&i| mask[i])
            .map(|i| col.get(i, 0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut value = Tensor::zeros(rows, 1);
        let mut total = 0.0;
        for i in 0..rows {
            if mask[i] {
                let e = (col.get(i, 0) - max).exp();
                value.set(i, 0, e);
                total += e;
            }
        }
        for i in 0..rows {
            if mask[i] {
                value.set(i, 0, value.get(i, 0) / total);
            }
        }
        Ok(self.push_op(value, Op::SoftmaxColMasked(a, mask.to_vec()), &[a]))
    }

    /// Element-wise product with a fixed mask tensor. Used by dropout, where
    /// the mask holds 0 or 1/(1−p).
    pub fn dropout_mask(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId, NdiffError> {
        if self.value(a).shape() != mask.shape() {
            return Err(Self::shape_err(
                "dropout_mask",
                format!("{:?} masked by {:?}", self.value(a).shape(), mask.shape()),
            ));
        }
        let value = self.value(a).zip(&mask, |x, m| x * m);
        Ok(self.push_op(value, Op::DropoutMask(a, mask), &[a]))
    }

    /// Stack 1×c nodes into an n×c tensor, preserving order.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, NdiffError> {
        if rows.is_empty() {
            return Err(Self::shape_err("stack_rows", "no rows to stack".into()));
        }
        let cols = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &id in rows {
            let t = self.value(id);
            if t.shape() != (1, cols) {
                return Err(Self::shape_err(
                    "stack_rows",
                    format!("expected 1x{cols} rows, got {:?}", t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_data(rows.len(), cols, data)?;
        Ok(self.push_op(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// A constant base tensor with the listed rows replaced by 1×c nodes.
    /// The same node may appear in several overrides (a shared trainable
    /// embedding); its gradient accumulates across occurrences.
    pub fn override_rows(
        &mut self,
        base: NodeId,
        overrides: &[(usize, NodeId)],
    ) -> Result<NodeId, NdiffError> {
        let (rows, cols) = self.value(base).shape();
        let mut value = self.value(base).clone();
        let mut seen = vec![false; rows];
        for &(row, node) in overrides {
            if row >= rows {
                return Err(Self::shape_err(
                    "override_rows",
                    format!("row {row} out of {rows}"),
                ));
            }
            if std::mem::replace(&mut seen[row], true) {
                return Err(Self::shape_err(
                    "override_rows",
                    format!("row {row} overridden twice"),
                ));
            }
            let t = self.value(node);
            if t.shape() != (1, cols) {
                return Err(Self::shape_err(
                    "override_rows",
                    format!("override must be 1x{cols}, got {:?}", t.shape()),
                ));
            }
            for j in 0..cols {
                value.set(row, j, t.get(0, j));
            }
        }
        let mut inputs = vec![base];
        inputs.extend(overrides.iter().map(|&(_, id)| id));
        Ok(self.push_op(value, Op::OverrideRows(base, overrides.to_vec()), &inputs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    /// Reverse-mode sweep from a scalar loss node. Returns the gradient of
    /// the loss with respect to every grad-requiring node reached.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NdiffError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NdiffError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        // The tape is in construction order, which is topological: walking it
        // backwards visits every node after all of its consumers.
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_input_grads(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Add `d loss / d input` contributions for one node into `grads`.
    fn accumulate_input_grads(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot => *slot = Some(contribution),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let bt = self.value(*b).transpose();
                add_to(grads, *a, g.matmul(&bt));
                let at = self.value(*a).transpose();
                add_to(grads, *b, at.matmul(g));
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let v = dr.get(0, j) + g.get(i, j);
                        dr.set(0, j, v);
                    }
                }
                add_to(grads, *row, dr);
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g.zip(self.value(*b), |gv, bv| gv * bv));
                add_to(grads, *b, g.zip(self.value(*a), |gv, av| gv * av));
            }
            Op::Affine(a, k) => {
                let k = *k;
                add_to(grads, *a, g.map(|gv| k * gv));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.zip(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g.zip(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Ln(a) => {
                add_to(grads, *a, g.zip(self.value(*a), |gv, xv| gv / xv));
            }
            Op::PowScalar(a, e) => {
                let e = *e;
                let dx = self.value(*a).map(|x| match e {
                    0.0 => 0.0, // x^0 is constant
                    1.0 => 1.0,
                    _ => e * x.powf(e - 1.0),
                });
                add_to(grads, *a, g.zip(&dx, |gv, dv| gv * dv));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let pass = self.value(*a).map(|x| f64::from(u8::from(x > lo && x < hi)));
                add_to(grads, *a, g.zip(&pass, |gv, pv| gv * pv));
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let mut da = Tensor::zeros(g.rows(), ac);
                let mut db = Tensor::zeros(g.rows(), g.cols() - ac);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        if j < ac {
                            da.set(i, j, g.get(i, j));
                        } else {
                            db.set(i, j - ac, g.get(i, j));
                        }
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::ConcatRows(a, b) => {
                let ar = self.value(*a).rows();
                let cols = g.cols();
                let da = Tensor::from_data(ar, cols, g.data()[..ar * cols].to_vec())
                    .expect("concat_rows backward split");
                let db = Tensor::from_data(g.rows() - ar, cols, g.data()[ar * cols..].to_vec())
                    .expect("concat_rows backward split");
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::SliceRows(a, r0) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor::zeros(rows, cols);
                for i in 0..g.rows() {
                    for j in 0..cols {
                        da.set(r0 + i, j, g.get(i, j));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SliceCols(a, c0) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    for j in 0..g.cols() {
                        da.set(i, c0 + j, g.get(i, j));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                let scale = g.item() / (rows * cols) as f64;
                add_to(grads, *a, Tensor::filled(rows, cols, scale));
            }
            Op::MeanRowsMasked(a, mask) => {
                let (rows, cols) = self.value(*a).shape();
                let kept = mask.iter().filter(|&&m| m).count() as f64;
                let mut da = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..cols {
                        da.set(i, j, g.get(0, j) / kept);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SoftmaxColMasked(a, mask) => {
                // Standard softmax Jacobian restricted to the unmasked rows:
                // da_i = y_i (g_i − Σ_j g_j y_j). Masked rows get zero.
                let y = &self.nodes[idx].value;
                let dot: f64 = (0..y.rows())
                    .filter(|&i| mask[i])
                    .map(|i| g.get(i, 0) * y.get(i, 0))
                    .sum();
                let mut da = Tensor::zeros(y.rows(), 1);
                for i in 0..y.rows() {
                    if mask[i] {
                        da.set(i, 0, y.get(i, 0) * (g.get(i, 0) - dot));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::DropoutMask(a, mask) => {
                add_to(grads, *a, g.zip(mask, |gv, mv| gv * mv));
            }
            Op::StackRows(rows) => {
                for (i, &id) in rows.iter().enumerate() {
                    add_to(grads, id, Tensor::row(g.row_slice(i)));
                }
            }
            Op::OverrideRows(base, overrides) => {
                // Overridden rows shadow the base completely: their gradient
                // goes to the overriding node, and the base (usually frozen
                // embeddings) sees zeros there.
                for &(row, id) in overrides {
                    add_to(grads, id, Tensor::row(g.row_slice(row)));
                }
                if self.nodes[base.0].requires_grad {
                    let mut db = g.clone();
                    for &(row, _) in overrides {
                        for j in 0..db.cols() {
                            db.set(row, j, 0.0);
                        }
                    }
                    add_to(grads, *base, db);
                }
            }
            Op::Transpose(a) => {
                add_to(grads, *a, g.transpose());
            }
        }
    }
}

//! Operation tape and reverse-mode gradient propagation.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{mm_acc, mm_nt_acc, mm_tn_acc, ParamId, ParamStore, Tensor, TensorError};

/// Forward mode switch; dropout is active only in [`Mode::Train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    /// a * b^T without materializing the transpose.
    MatmulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a 1xN row over every row of the left operand.
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Elementwise multiply by a frozen 0-or-1/(1-rate) mask.
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Scale row r of the left operand by entry r of an Ex1 column.
    ScaleRows(Var, Var),
    /// out[i] = sum of rows segments[i].0..segments[i].1 of the input.
    SegmentSum(Var, Vec<(usize, usize)>),
    /// Softmax over each contiguous segment of an Ex1 column.
    SegmentSoftmax(Var, Vec<(usize, usize)>),
    /// out[i, 0] = x[i, picks[i]].
    Pick(Var, Vec<usize>),
    /// ln(max(x, floor)).
    LogClamped(Var, f64),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// exact reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    staged: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node, when backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a differentiable leaf (an input to differentiate through).
    /// Any gradient buffer on the incoming tensor is discarded; tape nodes
    /// always start from zero.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        let t = t.with_grad();
        self.push(t, Op::Leaf)
    }

    /// Stages a stored parameter onto the tape. Staging the same parameter
    /// twice returns the first node so gradients pool in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.staged.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.grad = None;
        let v = self.push(t.with_grad(), Op::Leaf);
        self.staged.insert(id, v);
        v
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn record(&mut self, mut out: Tensor, op: Op, parents: &[Var]) -> Var {
        out.requires_grad = self.any_grad(parents);
        out.grad = None;
        self.push(out, op)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
        TensorError::DimMismatch {
            op,
            lhs_rows: a.0,
            lhs_cols: a.1,
            rhs_rows: b.0,
            rhs_cols: b.1,
        }
    }

    // ── Recorded operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Self::mismatch("matmul", (m, k), (k2, n)));
        }
        let mut data = vec![0.0; m * n];
        mm_acc(
            &mut data,
            self.nodes[a.0].value.data(),
            m,
            k,
            self.nodes[b.0].value.data(),
            n,
        );
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::Matmul(a, b), &[a, b]))
    }

    /// `a * b^T`; the usual shape for applying an (out x in) weight to
    /// row-major activations.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Self::mismatch("matmul_nt", (m, k), (n, k2)));
        }
        let mut data = vec![0.0; m * n];
        mm_nt_acc(
            &mut data,
            self.nodes[a.0].value.data(),
            m,
            k,
            self.nodes[b.0].value.data(),
            n,
        );
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::MatmulNT(a, b), &[a, b]))
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(Self::mismatch(op_name, self.dims(a), self.dims(b)));
        }
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(r, c, data)?;
        Ok(self.record(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1xN row vector to every row of an MxN matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != n {
            return Err(Self::mismatch("add_row", (m, n), (rr, rc)));
        }
        let rdata = self.nodes[row.0].value.data().to_vec();
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(&rdata).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cl) = self.dims(a);
        let data = self.nodes[a.0].value.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(r, cl, data).expect("same size");
        self.record(out, Op::Scale(a, c), &[a])
    }

    /// max(x, slope * x); the derivative at exactly zero is taken as 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&slope) {
            return Err(TensorError::Slope { slope });
        }
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x < 0.0 { slope * x } else { x })
            .collect();
        let out = Tensor::from_vec(r, c, data)?;
        Ok(self.record(out, Op::LeakyRelu(a, slope), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::from_vec(r, c, data).expect("same size");
        self.record(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].value.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::from_vec(r, c, data).expect("same size");
        self.record(out, Op::Tanh(a), &[a])
    }

    /// Row softmax with optional boolean mask (`true` = keep). Masked entries
    /// come out exactly zero; a fully masked row is an error. Stabilized by
    /// subtracting each row's max before exponentiation.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Self::mismatch(
                    "softmax_rows",
                    (m, n),
                    (1, mk.len()),
                ));
            }
        }
        let xs = self.nodes[x.0].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let keep = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if keep(j) {
                    data[i * n + j] /= sum;
                }
            }
        }
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Row-wise layer normalization with learned gain and bias (both 1xN).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) {
            return Err(Self::mismatch("layer_norm", (m, n), self.dims(gain)));
        }
        if self.dims(bias) != (1, n) {
            return Err(Self::mismatch("layer_norm", (m, n), self.dims(bias)));
        }
        let xs = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut data = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(m, n, data)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean: means,
            inv_std: inv_stds,
        };
        Ok(self.record(out, op, &[x, gain, bias]))
    }

    /// Inverted dropout: training zeroes entries with probability `rate` and
    /// scales survivors by 1/(1-rate); eval is the identity.
    pub fn dropout(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate { rate });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.dims(a);
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::from_vec(r, c, data)?;
        Ok(self.record(out, Op::Dropout(a, mask), &[a]))
    }

    /// Horizontal concatenation; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let m = self.dims(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Self::mismatch("concat_cols", (m, n), (pm, pn)));
            }
            n += pn;
        }
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for &p in parts {
            let (_, pn) = self.dims(p);
            let src = self.nodes[p.0].value.data();
            for i in 0..m {
                data[i * n + col..i * n + col + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            col += pn;
        }
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vertical concatenation; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let n = self.dims(parts[0]).1;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Self::mismatch("concat_rows", (m, n), (pm, pn)));
            }
            m += pm;
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index (repeats allowed); the gradient scatter-adds back.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        for &i in indices {
            if i >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
        }
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec(indices.len(), n, data)?;
        Ok(self.record(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Multiplies row r of an ExN matrix by entry r of an Ex1 column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if self.dims(s) != (m, 1) {
            return Err(Self::mismatch("scale_rows", (m, n), self.dims(s)));
        }
        let sv = self.nodes[s.0].value.data().to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .chunks(n)
            .zip(&sv)
            .flat_map(|(row, &f)| row.iter().map(move |&x| x * f))
            .collect();
        let out = Tensor::from_vec(m, n, data)?;
        Ok(self.record(out, Op::ScaleRows(a, s), &[a, s]))
    }

    /// Sums contiguous row ranges; `segments[i]` are the input rows of output
    /// row i. Empty segments produce zero rows.
    pub fn segment_sum(
        &mut self,
        a: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        for &(s, e) in segments {
            if s > e || e > m {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_sum",
                    index: e,
                    bound: m,
                });
            }
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; segments.len() * n];
        for (i, &(s, e)) in segments.iter().enumerate() {
            let dst = &mut data[i * n..(i + 1) * n];
            for r in s..e {
                for (d, &x) in dst.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                    *d += x;
                }
            }
        }
        let out = Tensor::from_vec(segments.len(), n, data)?;
        Ok(self.record(out, Op::SegmentSum(a, segments.to_vec()), &[a]))
    }

    /// Softmax over each contiguous segment of an Ex1 column of scores.
    /// Rows outside every segment are left untouched (zero gradient).
    pub fn segment_softmax(
        &mut self,
        a: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if n != 1 {
            return Err(Self::mismatch("segment_softmax", (m, n), (m, 1)));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        for &(s, e) in segments {
            if s > e || e > m {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_softmax",
                    index: e,
                    bound: m,
                });
            }
            if s == e {
                continue;
            }
            let mx = data[s..e].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in &mut data[s..e] {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in &mut data[s..e] {
                *v /= sum;
            }
        }
        let out = Tensor::from_vec(m, 1, data)?;
        Ok(self.record(out, Op::SegmentSoftmax(a, segments.to_vec()), &[a]))
    }

    /// Picks one entry per row: out[i] = x[i, picks[i]].
    pub fn pick(&mut self, a: Var, picks: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if picks.len() != m {
            return Err(Self::mismatch("pick", (m, n), (picks.len(), 1)));
        }
        for &p in picks {
            if p >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: p,
                    bound: n,
                });
            }
        }
        let src = self.nodes[a.0].value.data();
        let data = picks
            .iter()
            .enumerate()
            .map(|(i, &p)| src[i * n + p])
            .collect();
        let out = Tensor::from_vec(m, 1, data)?;
        Ok(self.record(out, Op::Pick(a, picks.to_vec()), &[a]))
    }

    /// ln(max(x, floor)); the gradient is zero in the clamped region.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let out = Tensor::from_vec(r, c, data).expect("same size");
        self.record(out, Op::LogClamped(a, floor), &[a])
    }

    /// Sum of all entries as a 1x1 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let out = Tensor::scalar(s);
        self.record(out, Op::SumAll(a), &[a])
    }

    /// Affine layer: x * w^T broadcast-plus bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul_nt(x, w)?;
        self.add_row(xw, b)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagates gradients from a scalar loss back through the tape.
    /// Gradients accumulate; clear the store between steps when fresh
    /// gradients are wanted.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad_mut()[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad || self.nodes[idx].value.grad().is_none() {
                continue;
            }
            let (parents, rest) = self.nodes.split_at_mut(idx);
            backprop(&rest[0], parents);
        }
        Ok(())
    }

    /// Adds gradients of staged parameters back into the store.
    pub fn harvest_grads(&self, store: &mut ParamStore) {
        for (&id, &var) in &self.staged {
            if let Some(g) = self.nodes[var.0].value.grad() {
                let dst = store.get_mut(id).grad_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Applies one node's gradient rule, accumulating into its parents.
/// Every parent index is strictly smaller than the node's, so the caller can
/// hand over the prefix of the tape mutably.
fn backprop(node: &Node, parents: &mut [Node]) {
    let g = match node.value.grad() {
        Some(g) => g,
        None => return,
    };
    let (or, oc) = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = parents[a.0].value.shape();
            let n = oc;
            if parents[a.0].value.requires_grad {
                let bdata = parents[b.0].value.data().to_vec();
                mm_nt_acc(parents[a.0].value.grad_mut(), g, m, n, &bdata, k);
            }
            if parents[b.0].value.requires_grad {
                let adata = parents[a.0].value.data().to_vec();
                mm_tn_acc(parents[b.0].value.grad_mut(), &adata, m, k, g, n);
            }
        }
        Op::MatmulNT(a, b) => {
            let (m, k) = parents[a.0].value.shape();
            let n = oc;
            if parents[a.0].value.requires_grad {
                let bdata = parents[b.0].value.data().to_vec();
                mm_acc(parents[a.0].value.grad_mut(), g, m, n, &bdata, k);
            }
            if parents[b.0].value.requires_grad {
                let adata = parents[a.0].value.data().to_vec();
                mm_tn_acc(parents[b.0].value.grad_mut(), g, m, n, &adata, k);
            }
        }
        Op::Add(a, b) => {
            for &p in &[*a, *b] {
                if parents[p.0].value.requires_grad {
                    add_into(parents[p.0].value.grad_mut(), g);
                }
            }
        }
        Op::Sub(a, b) => {
            if parents[a.0].value.requires_grad {
                add_into(parents[a.0].value.grad_mut(), g);
            }
            if parents[b.0].value.requires_grad {
                for (d, &s) in parents[b.0].value.grad_mut().iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            if parents[a.0].value.requires_grad {
                let bdata = parents[b.0].value.data().to_vec();
                for ((d, &s), &bv) in parents[a.0].value.grad_mut().iter_mut().zip(g).zip(&bdata) {
                    *d += s * bv;
                }
            }
            if parents[b.0].value.requires_grad {
                let adata = parents[a.0].value.data().to_vec();
                for ((d, &s), &av) in parents[b.0].value.grad_mut().iter_mut().zip(g).zip(&adata) {
                    *d += s * av;
                }
            }
        }
        Op::AddRow(a, row) => {
            if parents[a.0].value.requires_grad {
                add_into(parents[a.0].value.grad_mut(), g);
            }
            if parents[row.0].value.requires_grad {
                let n = oc;
                let rg = parents[row.0].value.grad_mut();
                for chunk in g.chunks(n) {
                    add_into(rg, chunk);
                }
            }
        }
        Op::Scale(a, c) => {
            if parents[a.0].value.requires_grad {
                for (d, &s) in parents[a.0].value.grad_mut().iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            if parents[a.0].value.requires_grad {
                let xs = parents[a.0].value.data().to_vec();
                for ((d, &s), &x) in parents[a.0].value.grad_mut().iter_mut().zip(g).zip(&xs) {
                    *d += s * if x < 0.0 { *slope } else { 1.0 };
                }
            }
        }
        Op::Sigmoid(a) => {
            if parents[a.0].value.requires_grad {
                let ys = node.value.data();
                for ((d, &s), &y) in parents[a.0].value.grad_mut().iter_mut().zip(g).zip(ys) {
                    *d += s * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if parents[a.0].value.requires_grad {
                let ys = node.value.data();
                for ((d, &s), &y) in parents[a.0].value.grad_mut().iter_mut().zip(g).zip(ys) {
                    *d += s * (1.0 - y * y);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            if parents[x.0].value.requires_grad {
                let y = node.value.data();
                let n = oc;
                let xg = parents[x.0].value.grad_mut();
                for i in 0..or {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        xg[i * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            inv_std,
        } => {
            let n = oc;
            let xs = parents[x.0].value.data().to_vec();
            let gains = parents[gain.0].value.data().to_vec();
            if parents[bias.0].value.requires_grad {
                let bg = parents[bias.0].value.grad_mut();
                for chunk in g.chunks(n) {
                    add_into(bg, chunk);
                }
            }
            if parents[gain.0].value.requires_grad {
                let gg = parents[gain.0].value.grad_mut();
                for i in 0..or {
                    for j in 0..n {
                        let xhat = (xs[i * n + j] - mean[i]) * inv_std[i];
                        gg[j] += g[i * n + j] * xhat;
                    }
                }
            }
            if parents[x.0].value.requires_grad {
                let xg = parents[x.0].value.grad_mut();
                for i in 0..or {
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xhat = 0.0;
                    for j in 0..n {
                        let gh = g[i * n + j] * gains[j];
                        let xhat = (xs[i * n + j] - mean[i]) * inv_std[i];
                        sum_gh += gh;
                        sum_gh_xhat += gh * xhat;
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let gh = g[i * n + j] * gains[j];
                        let xhat = (xs[i * n + j] - mean[i]) * inv_std[i];
                        xg[i * n + j] +=
                            inv_std[i] * (gh - inv_n * sum_gh - xhat * inv_n * sum_gh_xhat);
                    }
                }
            }
        }
        Op::Dropout(a, mask) => {
            if parents[a.0].value.requires_grad {
                for ((d, &s), &m) in parents[a.0].value.grad_mut().iter_mut().zip(g).zip(mask) {
                    *d += s * m;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = oc;
            let mut col = 0;
            for &p in parts {
                let (pm, pn) = parents[p.0].value.shape();
                if parents[p.0].value.requires_grad {
                    let pg = parents[p.0].value.grad_mut();
                    for i in 0..pm {
                        add_into(
                            &mut pg[i * pn..(i + 1) * pn],
                            &g[i * n + col..i * n + col + pn],
                        );
                    }
                }
                col += pn;
            }
        }
        Op::ConcatRows(parts) => {
            let mut row = 0;
            for &p in parts {
                let (pm, pn) = parents[p.0].value.shape();
                if parents[p.0].value.requires_grad {
                    add_into(
                        parents[p.0].value.grad_mut(),
                        &g[row * pn..(row + pm) * pn],
                    );
                }
                row += pm;
            }
        }
        Op::GatherRows(a, indices) => {
            if parents[a.0].value.requires_grad {
                let n = oc;
                let ag = parents[a.0].value.grad_mut();
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut ag[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
        }
        Op::ScaleRows(a, s) => {
            let n = oc;
            if parents[a.0].value.requires_grad {
                let sv = parents[s.0].value.data().to_vec();
                let ag = parents[a.0].value.grad_mut();
                for i in 0..or {
                    for j in 0..n {
                        ag[i * n + j] += g[i * n + j] * sv[i];
                    }
                }
            }
            if parents[s.0].value.requires_grad {
                let av = parents[a.0].value.data().to_vec();
                let sg = parents[s.0].value.grad_mut();
                for i in 0..or {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[i * n + j] * av[i * n + j];
                    }
                    sg[i] += dot;
                }
            }
        }
        Op::SegmentSum(a, segments) => {
            if parents[a.0].value.requires_grad {
                let n = oc;
                let ag = parents[a.0].value.grad_mut();
                for (i, &(s, e)) in segments.iter().enumerate() {
                    for r in s..e {
                        add_into(&mut ag[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        Op::SegmentSoftmax(a, segments) => {
            if parents[a.0].value.requires_grad {
                let y = node.value.data();
                let ag = parents[a.0].value.grad_mut();
                for &(s, e) in segments {
                    let dot: f64 = (s..e).map(|r| y[r] * g[r]).sum();
                    for r in s..e {
                        ag[r] += y[r] * (g[r] - dot);
                    }
                }
            }
        }
        Op::Pick(a, picks) => {
            if parents[a.0].value.requires_grad {
                let n = parents[a.0].value.cols();
                let ag = parents[a.0].value.grad_mut();
                for (i, &p) in picks.iter().enumerate() {
                    ag[i * n + p] += g[i];
                }
            }
        }
        Op::LogClamped(a, floor) => {
            if parents[a.0].value.requires_grad {
                let xs = parents[a.0].value.data().to_vec();
                for ((d, &s), &x) in parents[a.0].value.grad_mut().iter_mut().zip(g).zip(&xs) {
                    if x > *floor {
                        *d += s / x;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if parents[a.0].value.requires_grad {
                let s = g[0];
                for d in parents[a.0].value.grad_mut() {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grad, rel_err, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Random tensor with entries kept away from kink points of relu-like ops.
    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.random_range(-1.5..1.5);
                if v.abs() < 1e-3 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Max FD error of the gradient wrt `x` for `y = build(tape, x, extras)`,
    /// mixed with a probe so the upstream gradient is non-uniform.
    fn fd_unary(
        build: impl Fn(&mut Tape, Var) -> Var,
        x: &Tensor,
        probe: &Tensor,
    ) -> f64 {
        let run = |xt: &Tensor| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(xt.clone());
            let y = build(&mut tape, xv);
            let p = tape.constant(probe.clone());
            let mixed = tape.mul(y, p).unwrap();
            let loss = tape.sum_all(mixed);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                tape.grad(xv).map(<[f64]>::to_vec),
            )
        };
        let analytic = run(x).1.unwrap();
        check_input_grad(x, |xt| run(xt).0, &analytic, DEFAULT_STEP)
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let l = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let r = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
        let prod = tape.matmul(l, r).unwrap();
        assert_eq!(tape.value(prod).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "message should carry shapes: {err}");
    }

    #[test]
    fn matmul_grad_against_ones_column_is_broadcast() {
        // d/dA sum(A*B) with B a column of ones: every entry of the grad is 1.
        let a = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.constant(b.clone());
        let prod = tape.matmul(av, bv).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(av).unwrap().to_vec();
        for &g in &analytic {
            assert!((g - 1.0).abs() < 1e-12);
        }
        let worst = check_input_grad(
            &a,
            |xt| {
                let mut t = Tape::new();
                let av = t.leaf(xt.clone());
                let bv = t.constant(b.clone());
                let p = t.matmul(av, bv).unwrap();
                let l = t.sum_all(p);
                t.value(l).item()
            },
            &analytic,
            DEFAULT_STEP,
        );
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn softmax_symmetry_and_shift_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(Tensor::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).unwrap());
        let yb = tape.softmax_rows(big, None).unwrap();
        for &v in tape.value(yb).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
            assert!(v.is_finite());
        }
    }

    #[test]
    fn softmax_mask_zeroes_hidden_column() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = tape
            .softmax_rows(x, Some(&[true, true, false]))
            .unwrap();
        let e = 1.0f64.exp();
        let got = tape.value(y).data();
        assert!((got[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((got[1] - e / (1.0 + e)).abs() < 1e-12);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        let err = tape
            .softmax_rows(x, Some(&[true, true, false, false]))
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn leaky_relu_definition_and_grad() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);

        // slope 0 degenerates to plain relu
        let x2 = tape.constant(Tensor::row(vec![-3.0, 3.0]));
        let y2 = tape.leaky_relu(x2, 0.0).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.0, 3.0]);

        let xg = tape.leaf(Tensor::row(vec![-1.0, 2.0]));
        let yg = tape.leaky_relu(xg, 0.2).unwrap();
        let loss = tape.sum_all(yg);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xg).unwrap(), &[0.2, 1.0]);
    }

    #[test]
    fn layer_norm_constant_row_and_normalized_row() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let bias = tape.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let x = tape.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g2 = tape.constant(Tensor::row(vec![1.0, 1.0]));
        let b2 = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let x2 = tape.constant(Tensor::row(vec![-1.0, 1.0]));
        let y2 = tape.layer_norm(x2, g2, b2, 1e-12).unwrap();
        let got = tape.value(y2).data();
        assert!((got[0] + 1.0).abs() < 1e-9);
        assert!((got[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut r = rng(11);
        let x = random_tensor(3, 5, &mut r);
        let gain = random_tensor(1, 5, &mut r);
        let bias = random_tensor(1, 5, &mut r);
        let probe = random_tensor(3, 5, &mut r);
        // check each of x, gain, bias in turn
        let run = |xt: &Tensor, gt: &Tensor, bt: &Tensor| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let xv = tape.leaf(xt.clone());
            let gv = tape.leaf(gt.clone());
            let bv = tape.leaf(bt.clone());
            let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
            let p = tape.constant(probe.clone());
            let mixed = tape.mul(y, p).unwrap();
            let loss = tape.sum_all(mixed);
            tape.backward(loss).unwrap();
            let grads = vec![
                tape.grad(xv).unwrap().to_vec(),
                tape.grad(gv).unwrap().to_vec(),
                tape.grad(bv).unwrap().to_vec(),
            ];
            (tape.value(loss).item(), grads)
        };
        let (_, analytic) = run(&x, &gain, &bias);
        let wx = check_input_grad(&x, |t| run(t, &gain, &bias).0, &analytic[0], DEFAULT_STEP);
        let wg = check_input_grad(&gain, |t| run(&x, t, &bias).0, &analytic[1], DEFAULT_STEP);
        let wb = check_input_grad(&bias, |t| run(&x, &gain, t).0, &analytic[2], DEFAULT_STEP);
        assert!(wx < 1e-4 && wg < 1e-4 && wb < 1e-4, "{wx} {wg} {wb}");
    }

    #[test]
    fn dropout_eval_and_rate_zero_are_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let mut r = rng(0);
        let eval = tape.dropout(x, 0.7, Mode::Eval, &mut r).unwrap();
        assert_eq!(eval, x);
        let zero = tape.dropout(x, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(zero, x);
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0]));
        let mut r = rng(0);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut r).is_err());
        assert!(tape.dropout(x, -0.1, Mode::Train, &mut r).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_mean() {
        let n = 10_000;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(100, 100, 1.0));
        let mut r = rng(7);
        let y = tape.dropout(x, 0.5, Mode::Train, &mut r).unwrap();
        let data = tape.value(y).data();
        let survivors = data.iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "survivor fraction {frac}");
        let mean = data.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn dropout_deterministic_given_seed() {
        let sample = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::filled(4, 4, 2.0));
            let mut r = rng(99);
            let y = tape.dropout(x, 0.3, Mode::Train, &mut r).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(sample(), sample());
    }

    #[test]
    fn backward_square_sum_and_disconnected_param() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::row(vec![1.0, 2.0]));
        let unused = store.add("unused", Tensor::row(vec![5.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        tape.harvest_grads(&mut store);
        assert_eq!(store.get(used).grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(store.get(unused).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { rows: 2, cols: 2 }));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row(vec![3.0]));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let y = tape.mul(x, x).unwrap();
            let loss = tape.sum_all(y);
            tape.backward(loss).unwrap();
            tape.harvest_grads(&mut store);
        }
        assert_eq!(store.get(id).grad().unwrap(), &[12.0]); // 2 * (2*3)
    }

    #[test]
    fn staging_a_param_twice_reuses_the_node() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row(vec![2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        tape.harvest_grads(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[4.0]);
    }

    // Differentiable-op sweep: analytic vs central differences on random
    // small tensors, one hundred seeds each.
    #[test]
    fn all_ops_match_finite_differences_over_seeds() {
        let seeds = 0..100u64;
        for seed in seeds {
            let mut r = rng(seed);
            let x = random_tensor(3, 4, &mut r);
            let probe = random_tensor(3, 4, &mut r);
            let probe_col = random_tensor(3, 1, &mut r);
            let probe_scalar = random_tensor(1, 1, &mut r);
            let other = random_tensor(3, 4, &mut r);
            let w = random_tensor(5, 4, &mut r);
            let probe_tall = random_tensor(3, 5, &mut r);
            let row = random_tensor(1, 4, &mut r);
            let gain = random_tensor(1, 4, &mut r);
            let bias = random_tensor(1, 4, &mut r);
            let seg: Vec<(usize, usize)> = vec![(0, 2), (2, 2), (2, 3)];
            let picks = vec![1, 3, 0];
            let dropout_seed = seed.wrapping_mul(31).wrapping_add(5);

            let checks: Vec<(&str, f64)> = vec![
                ("matmul_nt", {
                    let wv = w.clone();
                    let p = probe_tall.clone();
                    fd_unary(
                        move |t, x| {
                            let wc = t.constant(wv.clone());
                            t.matmul_nt(x, wc).unwrap()
                        },
                        &x,
                        &p,
                    )
                }),
                ("matmul", {
                    let wv = w.clone();
                    fd_unary(
                        move |t, x| {
                            let wc = t.constant(wv.clone());
                            let wt = t.matmul_nt(x, wc).unwrap(); // 3x5
                            let xc = t.constant(Tensor::eye(5));
                            t.matmul(wt, xc).unwrap()
                        },
                        &x,
                        &probe_tall,
                    )
                }),
                ("add", {
                    let o = other.clone();
                    fd_unary(
                        move |t, x| {
                            let oc = t.constant(o.clone());
                            t.add(x, oc).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("sub", {
                    let o = other.clone();
                    fd_unary(
                        move |t, x| {
                            let oc = t.constant(o.clone());
                            t.sub(x, oc).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("mul", {
                    let o = other.clone();
                    fd_unary(
                        move |t, x| {
                            let oc = t.constant(o.clone());
                            t.mul(x, oc).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("mul_self", {
                    fd_unary(|t, x| t.mul(x, x).unwrap(), &x, &probe)
                }),
                ("add_row", {
                    let rv = row.clone();
                    fd_unary(
                        move |t, x| {
                            let rc = t.constant(rv.clone());
                            t.add_row(x, rc).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("scale", fd_unary(|t, x| t.scale(x, -2.5), &x, &probe)),
                ("leaky_relu", {
                    fd_unary(|t, x| t.leaky_relu(x, 0.2).unwrap(), &x, &probe)
                }),
                ("sigmoid", fd_unary(|t, x| t.sigmoid(x), &x, &probe)),
                ("tanh", fd_unary(|t, x| t.tanh(x), &x, &probe)),
                ("softmax_rows", {
                    fd_unary(|t, x| t.softmax_rows(x, None).unwrap(), &x, &probe)
                }),
                ("softmax_rows_masked", {
                    let mask = vec![
                        true, true, false, true, //
                        true, false, true, true, //
                        false, true, true, true,
                    ];
                    fd_unary(
                        move |t, x| t.softmax_rows(x, Some(&mask)).unwrap(),
                        &x,
                        &probe,
                    )
                }),
                ("layer_norm", {
                    let g = gain.clone();
                    let b = bias.clone();
                    fd_unary(
                        move |t, x| {
                            let gc = t.constant(g.clone());
                            let bc = t.constant(b.clone());
                            t.layer_norm(x, gc, bc, 1e-5).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("dropout_frozen_mask", {
                    fd_unary(
                        move |t, x| {
                            let mut r = rng(dropout_seed);
                            t.dropout(x, 0.4, Mode::Train, &mut r).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("concat_cols", {
                    let o = other.clone();
                    let p8 = {
                        let mut r2 = rng(seed + 1000);
                        random_tensor(3, 8, &mut r2)
                    };
                    fd_unary(
                        move |t, x| {
                            let oc = t.constant(o.clone());
                            t.concat_cols(&[x, oc]).unwrap()
                        },
                        &x,
                        &p8,
                    )
                }),
                ("concat_rows", {
                    let o = other.clone();
                    let p6 = {
                        let mut r2 = rng(seed + 2000);
                        random_tensor(6, 4, &mut r2)
                    };
                    fd_unary(
                        move |t, x| {
                            let oc = t.constant(o.clone());
                            t.concat_rows(&[oc, x]).unwrap()
                        },
                        &x,
                        &p6,
                    )
                }),
                ("gather_rows", {
                    let p5 = {
                        let mut r2 = rng(seed + 3000);
                        random_tensor(5, 4, &mut r2)
                    };
                    fd_unary(
                        move |t, x| t.gather_rows(x, &[2, 0, 2, 1, 0]).unwrap(),
                        &x,
                        &p5,
                    )
                }),
                ("scale_rows", {
                    let s = probe_col.clone();
                    fd_unary(
                        move |t, x| {
                            let sc = t.constant(s.clone());
                            t.scale_rows(x, sc).unwrap()
                        },
                        &x,
                        &probe,
                    )
                }),
                ("scale_rows_wrt_scales", {
                    let base = other.clone();
                    let p = probe.clone();
                    fd_unary(
                        move |t, s_in| {
                            let bc = t.constant(base.clone());
                            // s_in is 3x4; reduce to a column through pick
                            let col = t.pick(s_in, &[0, 1, 2]).unwrap();
                            t.scale_rows(bc, col).unwrap()
                        },
                        &x,
                        &p,
                    )
                }),
                ("segment_sum", {
                    let segs = seg.clone();
                    let p3 = {
                        let mut r2 = rng(seed + 4000);
                        random_tensor(3, 4, &mut r2)
                    };
                    fd_unary(
                        move |t, x| t.segment_sum(x, &segs).unwrap(),
                        &x,
                        &p3,
                    )
                }),
                ("segment_softmax", {
                    let segs = seg.clone();
                    let p31 = {
                        let mut r2 = rng(seed + 5000);
                        random_tensor(3, 1, &mut r2)
                    };
                    fd_unary(
                        move |t, x| {
                            let col = t.pick(x, &[0, 1, 2]).unwrap();
                            t.segment_softmax(col, &segs).unwrap()
                        },
                        &x,
                        &p31,
                    )
                }),
                ("pick", {
                    let p31 = {
                        let mut r2 = rng(seed + 6000);
                        random_tensor(3, 1, &mut r2)
                    };
                    let pk = picks.clone();
                    fd_unary(move |t, x| t.pick(x, &pk).unwrap(), &x, &p31)
                }),
                ("log_clamped", {
                    fd_unary(
                        |t, x| {
                            // keep inputs positive and clear of the clamp
                            let s = t.sigmoid(x);
                            t.log_clamped(s, 1e-12)
                        },
                        &x,
                        &probe,
                    )
                }),
                ("sum_all", {
                    fd_unary(|t, x| t.sum_all(x), &x, &probe_scalar)
                }),
            ];
            for (name, worst) in checks {
                assert!(
                    worst < 1e-4,
                    "op {name} seed {seed}: worst rel err {worst}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_property() {
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let x = random_tensor(4, 6, &mut r);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = tape.softmax_rows(xv, None).unwrap();
            let v = tape.value(y);
            for i in 0..4 {
                let s: f64 = v.row_slice(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "seed {seed} row {i} sums to {s}");
                assert!(v.row_slice(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn layer_norm_rows_standardized_property() {
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let x = random_tensor(4, 8, &mut r);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let gain = tape.constant(Tensor::filled(1, 8, 1.0));
            let bias = tape.constant(Tensor::zeros(1, 8));
            let y = tape.layer_norm(xv, gain, bias, 1e-10).unwrap();
            let v = tape.value(y);
            for i in 0..4 {
                let row = v.row_slice(i);
                let mean = row.iter().sum::<f64>() / 8.0;
                let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-10, "seed {seed} mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "seed {seed} var {var}");
            }
        }
    }

    #[test]
    fn rel_err_floors_small_magnitudes() {
        assert!(rel_err(0.0, 1e-9) < 1e-3);
        assert!(rel_err(1.0, 1.1) > 0.05);
    }
}

//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are created
//! with [`Tape::leaf`]; only leaves marked as requiring gradients (and nodes
//! depending on them) take part in [`Tape::backward`]. A tape is single-use:
//! build it, run backward once, read gradients, drop it.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix};

pub type NodeId = usize;

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a + 1·bias, bias is 1×n
    AddRow(NodeId, NodeId),
    /// a ∘ (1·gain), gain is 1×n
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    /// per-row standardization; stores 1/σ per row
    Standardize(NodeId, Vec<f64>),
    SoftmaxRows(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    /// per-row L2 normalization; stores the row norms
    L2Normalize(NodeId, Vec<f64>),
    /// row i scaled by a constant factor
    ScaleRows(NodeId, Vec<f64>),
    /// mean softmax cross-entropy over rows; stores probabilities
    CrossEntropy(NodeId, Vec<usize>, Matrix),
    /// mean Shannon entropy of row softmaxes; stores probabilities
    Entropy(NodeId, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.data[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.cols, vb.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(va.rows, vb.cols);
        gemm(
            va.rows,
            va.cols,
            vb.cols,
            &va.data,
            false,
            &vb.data,
            false,
            &mut out.data,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.cols, vb.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(va.rows, vb.rows);
        gemm(
            va.rows,
            va.cols,
            vb.rows,
            &va.data,
            false,
            &vb.data,
            true,
            &mut out.data,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.shape(), self.nodes[b].value.shape(), "add shapes");
        out.add_assign(&self.nodes[b].value);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.shape(), self.nodes[b].value.shape(), "mul shapes");
        for (x, y) in out.data.iter_mut().zip(&self.nodes[b].value.data) {
            *x *= y;
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let cols = self.nodes[a].value.cols;
        let rows = self.nodes[a].value.rows;
        let m = self.mean_rows(a);
        let ones = self.leaf(Matrix::filled(1, cols, rows as f64), false);
        self.matmul_t(m, ones)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        let b = &self.nodes[bias].value;
        assert_eq!((1, out.cols), b.shape(), "bias shape");
        for r in 0..out.rows {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    pub fn mul_row(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        let g = &self.nodes[gain].value;
        assert_eq!((1, out.cols), g.shape(), "gain shape");
        for r in 0..out.rows {
            for (x, y) in out.row_mut(r).iter_mut().zip(&g.data) {
                *x *= y;
            }
        }
        let rg = self.rg(&[a, gain]);
        self.push(out, Op::MulRow(a, gain), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.scale_assign(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.rows, factors.len(), "row factor count");
        for (r, f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::ScaleRows(a, factors), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        for v in &mut out.data {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn standardize(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        let n = out.cols as f64;
        let mut inv = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Standardize(a, inv), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[a].value;
        assert!(start + len <= v.cols, "slice out of range");
        let mut out = Matrix::zeros(v.rows, len);
        for r in 0..v.rows {
            out.row_mut(r)
                .copy_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.rows, rows, "concat rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let rg = self.rg(&parts);
        self.push(out, Op::ConcatCols(parts), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[a].value;
        assert!(start + len <= v.rows, "row slice out of range");
        let out = Matrix::from_vec(
            len,
            v.cols,
            v.data[start * v.cols..(start + len) * v.cols].to_vec(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.nodes[parts[0]].value.cols;
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in &parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.cols, cols, "concat cols");
            data.extend_from_slice(&v.data);
        }
        let rg = self.rg(&parts);
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts),
            rg,
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let mut out = Matrix::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, x) in out.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / v.rows as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2Normalize(a, norms), rg)
    }

    /// Mean over rows of `−log softmax(logits_r)[target_r]`, as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let v = &self.nodes[logits].value;
        assert_eq!(v.rows, targets.len(), "one target per row");
        let mut probs = v.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v.cols, "target out of range");
            let row = v.row(r);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        loss /= v.rows as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy(logits, targets, probs),
            rg,
        )
    }

    /// Mean over rows of the Shannon entropy of `softmax(logits_r)`.
    pub fn entropy(&mut self, logits: NodeId) -> NodeId {
        let v = &self.nodes[logits].value;
        let mut probs = v.clone();
        let mut total = 0.0;
        for r in 0..v.rows {
            let lse = log_sum_exp(v.row(r));
            softmax_in_place(probs.row_mut(r));
            total += probs
                .row(r)
                .iter()
                .zip(v.row(r))
                .map(|(p, z)| -p * (z - lse))
                .sum::<f64>();
        }
        total /= v.rows as f64;
        let rg = self.rg(&[logits]);
        self.push(Matrix::filled(1, 1, total), Op::Entropy(logits, probs), rg)
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.nodes[output].value.len() != 1 {
            return Err(Error::State("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=output).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward output with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Result<Option<&Matrix>> {
        if !self.backward_done {
            return Err(Error::State("no backward pass has been recorded".into()));
        }
        Ok(self.grads.get(id).and_then(|g| g.as_ref()))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.nodes[a].requires_grad {
                    // dA = G·Bᵀ
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    gemm(
                        g.rows,
                        g.cols,
                        vb.rows,
                        &g.data,
                        false,
                        &vb.data,
                        true,
                        &mut da.data,
                        0.0,
                    );
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = Aᵀ·G
                    let mut db = Matrix::zeros(vb.rows, vb.cols);
                    gemm(
                        va.cols,
                        va.rows,
                        g.cols,
                        &va.data,
                        true,
                        &g.data,
                        false,
                        &mut db.data,
                        0.0,
                    );
                    self.accumulate(grads, b, db);
                }
            }
            &Op::MatMulT(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.nodes[a].requires_grad {
                    // out = A·Bᵀ → dA = G·B
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    gemm(
                        g.rows,
                        g.cols,
                        vb.cols,
                        &g.data,
                        false,
                        &vb.data,
                        false,
                        &mut da.data,
                        0.0,
                    );
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = Gᵀ·A
                    let mut db = Matrix::zeros(vb.rows, vb.cols);
                    gemm(
                        g.cols,
                        g.rows,
                        va.cols,
                        &g.data,
                        true,
                        &va.data,
                        false,
                        &mut db.data,
                        0.0,
                    );
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.nodes[a].requires_grad {
                    let mut da = g.clone();
                    da.data.iter_mut().zip(&vb.data).for_each(|(d, y)| *d *= y);
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = g.clone();
                    db.data.iter_mut().zip(&va.data).for_each(|(d, x)| *d *= x);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::AddRow(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.nodes[bias].requires_grad {
                    self.accumulate(grads, bias, column_sums(g));
                }
            }
            &Op::MulRow(a, gain) => {
                let va = &self.nodes[a].value;
                let vg = &self.nodes[gain].value;
                if self.nodes[a].requires_grad {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        for (x, y) in da.row_mut(r).iter_mut().zip(&vg.data) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.nodes[gain].requires_grad {
                    let mut dg = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((d, x), y) in dg.data.iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *d += x * y;
                        }
                    }
                    self.accumulate(grads, gain, dg);
                }
            }
            &Op::Scale(a, s) => {
                let mut da = g.clone();
                da.scale_assign(s);
                self.accumulate(grads, a, da);
            }
            Op::ScaleRows(a, factors) => {
                let mut da = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    da.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(grads, *a, da);
            }
            &Op::Gelu(a) => {
                let va = &self.nodes[a].value;
                let mut da = g.clone();
                for (d, &x) in da.data.iter_mut().zip(&va.data) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                }
                self.accumulate(grads, a, da);
            }
            Op::Standardize(a, inv) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut da = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv[r] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, a, da);
            }
            &Op::SliceCols(a, start) => {
                let va = &self.nodes[a].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                for r in 0..g.rows {
                    da.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.cols;
                    if self.nodes[p].requires_grad {
                        let mut dp = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += cols;
                }
            }
            &Op::SliceRows(a, start) => {
                let va = &self.nodes[a].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                da.data[start * va.cols..start * va.cols + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, a, da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.nodes[p].requires_grad {
                        let (r, c) = self.nodes[p].value.shape();
                        self.accumulate(
                            grads,
                            p,
                            Matrix::from_vec(r, c, g.data[off..off + n].to_vec()),
                        );
                    }
                    off += n;
                }
            }
            &Op::MeanRows(a) => {
                let va = &self.nodes[a].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                let inv = 1.0 / va.rows as f64;
                for r in 0..va.rows {
                    for (d, gv) in da.row_mut(r).iter_mut().zip(&g.data) {
                        *d = gv * inv;
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::L2Normalize(a, norms) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.data[0] / probs.rows as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dl.row_mut(r)[t] -= 1.0;
                }
                dl.scale_assign(scale);
                self.accumulate(grads, *logits, dl);
            }
            Op::Entropy(logits, probs) => {
                // H = −Σ p log p ; dH/dz_j = −p_j (log p_j + H_row)
                let scale = g.data[0] / probs.rows as f64;
                let mut dl = Matrix::zeros(probs.rows, probs.cols);
                for r in 0..probs.rows {
                    let pr = probs.row(r);
                    let h: f64 = pr.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
                    for (d, &p) in dl.row_mut(r).iter_mut().zip(pr) {
                        let lp = if p > 0.0 { p.ln() } else { 0.0 };
                        *d = -scale * p * (lp + h);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let eps = 1e-6;
        let mut g = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn pseudo(rows: usize, cols: usize, salt: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * 0.7 + salt).sin())
                .collect(),
        )
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    /// Run a graph builder with `x` as a gradient leaf, return (loss, dloss/dx).
    fn check(x: Matrix, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let analytic = {
            let mut t = Tape::new();
            let id = t.leaf(x.clone(), true);
            let out = build(&mut t, id);
            t.backward(out).unwrap();
            t.grad(id)
                .unwrap()
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(x.rows, x.cols))
        };
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let id = t.leaf(m.clone(), false);
            let out = build(&mut t, id);
            t.scalar(out)
        };
        assert_close(&analytic, &numeric_grad(&x, &f), 1e-6);
    }

    fn weighted_sum(t: &mut Tape, y: NodeId) -> NodeId {
        // contract with fixed weights so every entry matters
        let (r, c) = t.value(y).shape();
        let w = t.leaf(pseudo(r, c, 0.3), false);
        let prod = t.mul(y, w);
        t.sum(prod)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = pseudo(3, 5, 0.1);
        check(x.clone(), |t, x| {
            let y = t.gelu(x);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let y = t.standardize(x);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let y = t.softmax_rows(x);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let y = t.l2_normalize(x);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let y = t.scale_rows(x, vec![0.5, -2.0, 3.0]);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let a = t.slice_rows(x, 1, 2);
            let b = t.slice_rows(x, 0, 2);
            // the same node twice exercises gradient accumulation
            let c = t.concat_rows(vec![b, a, b]);
            weighted_sum(t, c)
        });
        check(x, |t, x| {
            let a = t.slice_cols(x, 1, 3);
            let b = t.slice_cols(x, 0, 2);
            let c = t.concat_cols(vec![b, a]);
            weighted_sum(t, c)
        });
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let x = pseudo(4, 3, 0.2);
        let w = pseudo(3, 5, 0.9);
        let bias = pseudo(1, 5, 1.7);
        check(x.clone(), |t, x| {
            let w = t.leaf(w.clone(), false);
            let y = t.matmul(x, w);
            weighted_sum(t, y)
        });
        // gradient with respect to the right operand and the bias
        check(w.clone(), |t, w| {
            let x = t.leaf(x.clone(), false);
            let y = t.matmul(x, w);
            let b = t.leaf(bias.clone(), false);
            let y = t.add_row(y, b);
            weighted_sum(t, y)
        });
        check(bias.clone(), |t, b| {
            let x = t.leaf(x.clone(), false);
            let w = t.leaf(w.clone(), false);
            let y = t.matmul(x, w);
            let y = t.mul_row(y, b);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let y = t.matmul_t(x, x);
            weighted_sum(t, y)
        });
        check(x.clone(), |t, x| {
            let y = t.mul(x, x);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn losses_match_finite_differences() {
        let x = pseudo(3, 4, 0.4);
        check(x.clone(), |t, x| t.cross_entropy(x, vec![0, 3, 1]));
        check(x.clone(), |t, x| t.entropy(x));
        check(x, |t, x| {
            let m = t.mean_rows(x);
            let s = t.scale(m, 3.0);
            t.cross_entropy(s, vec![2])
        });
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::filled(1, 1, 1.0), true);
        assert!(matches!(t.grad(x), Err(Error::State(_))));
    }

    #[test]
    fn leaves_without_grad_receive_none() {
        let mut t = Tape::new();
        let x = t.leaf(pseudo(2, 2, 0.0), true);
        let c = t.leaf(pseudo(2, 2, 1.0), false);
        let y = t.matmul(x, c);
        let s = t.cross_entropy(y, vec![0, 1]);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().is_some());
        assert!(t.grad(c).unwrap().is_none());
    }
}

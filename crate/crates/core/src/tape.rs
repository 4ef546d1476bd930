//! Reverse-mode differentiation tape over dense tensors.
//!
//! A [`Tape`] records every primitive op in execution order; [`Tape::backward`]
//! replays the record once, in reverse, accumulating exact adjoints. Each tape
//! belongs to a single evaluation and is never shared.
//!
//! The op set is exactly what the toy multimodal model needs: matmul (which
//! also serves as embedding lookup over relaxed one-hot coefficients),
//! elementwise add/mul, row bias, scaling, tanh, row layer norm, row softmax /
//! log-softmax, fused causal self-attention, row concat/gather, and the
//! teacher-forced NLL reduction.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddRowBias { a: ValueId, bias: ValueId },
    Scale { a: ValueId, factor: f64 },
    Tanh { a: ValueId },
    LayerNormRows { x: ValueId, gamma: ValueId, beta: ValueId, eps: f64 },
    SoftmaxRows { a: ValueId },
    LogSoftmaxRows { a: ValueId },
    CausalAttention { q: ValueId, k: ValueId, v: ValueId },
    ConcatRows { a: ValueId, b: ValueId },
    GatherRows { a: ValueId, indices: Vec<usize> },
    NllLoss { logprobs: ValueId, targets: Vec<usize> },
}

struct Node<E: Element> {
    op: Op,
    value: Tensor<E>,
    needs_grad: bool,
}

/// Ordered record of executed primitive ops.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Adjoints produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Adjoint of the given value, if it required gradients and was reached.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<E>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { op, value, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record an input that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<E>) -> ValueId {
        self.push(Op::Leaf, value, true)
    }

    /// Record an input that is held constant.
    pub fn constant(&mut self, value: Tensor<E>) -> ValueId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, ka) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_into(ta, tb, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, out, needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, out, needs))
    }

    /// Broadcast a bias row over every row of `a`.
    pub fn add_row_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.cols() != tb.len() {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x = *x + b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRowBias { a, bias }, out, needs))
    }

    /// Affine layer: `x * w + bias`, as two recorded primitives.
    pub fn affine(&mut self, x: ValueId, w: ValueId, bias: ValueId) -> Result<ValueId> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, bias)
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let f = E::from_f64_lossy(factor);
        let out = self.value(a).map(|v| v * f);
        let needs = self.needs(a);
        self.push(Op::Scale { a, factor }, out, needs)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(|v| v.tanh());
        let needs = self.needs(a);
        self.push(Op::Tanh { a }, out, needs)
    }

    pub fn layer_norm_rows(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let epsv = E::from_f64_lossy(eps);
        let inv_n = E::from_f64_lossy(1.0 / n as f64);
        let mut out = Tensor::zeros(tx.shape().to_vec());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean: E = row.iter().copied().sum::<E>() * inv_n;
            let var: E = row
                .iter()
                .map(|&v| {
                    let d = v - mean;
                    d * d
                })
                .sum::<E>()
                * inv_n;
            let inv_std = (var + epsv).sqrt().recip();
            let orow = out.row_mut(r);
            for c in 0..n {
                orow[c] = tg.data()[c] * (row[c] - mean) * inv_std + tb.data()[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNormRows { x, gamma, beta, eps }, out, needs))
    }

    /// Numerically stabilized row softmax.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(Error::BadDimension {
                op: "softmax_rows",
                expected: "last extent >= 1".to_string(),
                actual: format!("{:?}", ta.shape()),
            });
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, out, needs))
    }

    /// Row log-softmax, stabilized by max subtraction.
    pub fn log_softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(Error::BadDimension {
                op: "log_softmax_rows",
                expected: "last extent >= 1".to_string(),
                actual: format!("{:?}", ta.shape()),
            });
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        let needs = self.needs(a);
        Ok(self.push(Op::LogSoftmaxRows { a }, out, needs))
    }

    /// Single-head causal self-attention: row `i` attends to rows `0..=i`.
    /// Scores are scaled by `1/sqrt(d)` and softmaxed with max subtraction.
    pub fn causal_attention(&mut self, q: ValueId, k: ValueId, v: ValueId) -> Result<ValueId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let (s, d) = (tq.rows(), tq.cols());
        let scale = E::from_f64_lossy(1.0 / (d as f64).sqrt());
        let mut out = Tensor::zeros(vec![s, d]);
        let mut scores = vec![E::zero(); s];
        for i in 0..s {
            let qi = tq.row(i);
            for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                *sc = dot(qi, tk.row(j)) * scale;
            }
            softmax_in_place(&mut scores[..i + 1]);
            let orow = out.row_mut(i);
            for j in 0..=i {
                let w = scores[j];
                for (o, &vv) in orow.iter_mut().zip(tv.row(j)) {
                    *o = *o + w * vv;
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Op::CausalAttention { q, k, v }, out, needs))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows { a, b }, out, needs))
    }

    pub fn gather_rows(&mut self, a: ValueId, indices: Vec<usize>) -> Result<ValueId> {
        let ta = self.value(a);
        let rows = ta.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::BadDimension {
                op: "gather_rows",
                expected: format!("row index < {rows}"),
                actual: bad.to_string(),
            });
        }
        let cols = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::GatherRows { a, indices }, out, needs))
    }

    /// Teacher-forced NLL: `-(1/n) * sum_i logprobs[i, targets[i]]`.
    /// One distribution row per target position.
    pub fn nll_loss(&mut self, logprobs: ValueId, targets: &[usize]) -> Result<ValueId> {
        let t = self.value(logprobs);
        let vocab = t.cols();
        if t.rows() != targets.len() {
            return Err(Error::BadDimension {
                op: "nll_loss",
                expected: format!("{} rows (one per target)", targets.len()),
                actual: t.rows().to_string(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let inv_n = E::from_f64_lossy(1.0 / targets.len().max(1) as f64);
        let total: E = targets
            .iter()
            .enumerate()
            .map(|(i, &tok)| t.get2(i, tok))
            .sum();
        let out = Tensor::scalar(-total * inv_n);
        let needs = self.needs(logprobs);
        Ok(self.push(
            Op::NllLoss { logprobs, targets: targets.to_vec() },
            out,
            needs,
        ))
    }

    /// Replay the tape backward from `root`, visiting each op exactly once in
    /// reverse execution order. `root` must be a scalar.
    pub fn backward(&self, root: ValueId) -> Result<Gradients<E>> {
        if self.value(root).len() != 1 {
            return Err(Error::BadDimension {
                op: "backward",
                expected: "scalar root".to_string(),
                actual: format!("{:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(E::one()));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_op(idx, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<E>>],
        id: ValueId,
        contribution: Tensor<E>,
    ) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_op(&self, idx: usize, gout: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // dA = dC * B^T, i.e. dA[i][p] = dot(dC[i], B[p])
                    let (m, k) = (ta.rows(), ta.cols());
                    let mut da = Tensor::zeros(vec![m, k]);
                    for i in 0..m {
                        let grow = gout.row(i);
                        let darow = da.row_mut(i);
                        for (p, d) in darow.iter_mut().enumerate().take(k) {
                            *d = dot(grow, tb.row(p));
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let (m, n, k) = (ta.rows(), tb.cols(), ta.cols());
                    let mut db = Tensor::zeros(vec![k, n]);
                    for i in 0..m {
                        let arow = ta.row(i);
                        let grow = gout.row(i);
                        for (p, &av) in arow.iter().enumerate() {
                            let dbrow = db.row_mut(p);
                            for (q, &gv) in grow.iter().enumerate().take(n) {
                                dbrow[q] = dbrow[q] + av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let data = gout
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
                }
                if self.needs(*b) {
                    let data = gout
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), data).unwrap());
                }
            }
            Op::AddRowBias { a, bias } => {
                self.accumulate(grads, *a, gout.clone());
                if self.needs(*bias) {
                    let cols = self.value(*bias).len();
                    let mut db = Tensor::zeros(vec![cols]);
                    for r in 0..gout.rows() {
                        for (d, &g) in db.data_mut().iter_mut().zip(gout.row(r)) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale { a, factor } => {
                let f = E::from_f64_lossy(*factor);
                self.accumulate(grads, *a, gout.map(|g| g * f));
            }
            Op::Tanh { a } => {
                let y = &self.nodes[idx].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &yv)| g * (E::one() - yv * yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                self.backprop_layer_norm(idx, *x, *gamma, *beta, *eps, gout, grads);
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let grow = gout.row(r);
                    let s: E = yrow.iter().zip(grow).map(|(&yv, &g)| yv * g).sum();
                    let drow = dx.row_mut(r);
                    for c in 0..yrow.len() {
                        drow[c] = yrow[c] * (grow[c] - s);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows { a } => {
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let grow = gout.row(r);
                    let gsum: E = grow.iter().copied().sum();
                    let drow = dx.row_mut(r);
                    for c in 0..yrow.len() {
                        drow[c] = grow[c] - yrow[c].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::CausalAttention { q, k, v } => {
                self.backprop_attention(*q, *k, *v, gout, grads);
            }
            Op::ConcatRows { a, b } => {
                let ra = self.value(*a).rows();
                let cols = self.value(*a).cols();
                if self.needs(*a) {
                    let da =
                        Tensor::new(vec![ra, cols], gout.data()[..ra * cols].to_vec()).unwrap();
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let rb = self.value(*b).rows();
                    let db =
                        Tensor::new(vec![rb, cols], gout.data()[ra * cols..].to_vec()).unwrap();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GatherRows { a, indices } => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.shape().to_vec());
                for (out_row, &src) in indices.iter().enumerate() {
                    let grow = gout.row(out_row);
                    let drow = da.row_mut(src);
                    for (d, &g) in drow.iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::NllLoss { logprobs, targets } => {
                let t = self.value(*logprobs);
                let g = gout.item();
                let inv_n = E::from_f64_lossy(1.0 / targets.len().max(1) as f64);
                let mut dlp = Tensor::zeros(t.shape().to_vec());
                for (i, &tok) in targets.iter().enumerate() {
                    dlp.set2(i, tok, -g * inv_n);
                }
                self.accumulate(grads, *logprobs, dlp);
            }
        }
    }

    fn backprop_layer_norm(
        &self,
        _idx: usize,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        gout: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) {
        let tx = self.value(x);
        let tg = self.value(gamma);
        let n = tx.cols();
        let epsv = E::from_f64_lossy(eps);
        let inv_n = E::from_f64_lossy(1.0 / n as f64);
        let two = E::from_f64_lossy(2.0);
        let half = E::from_f64_lossy(0.5);

        let mut dx = Tensor::zeros(tx.shape().to_vec());
        let mut dgamma = Tensor::zeros(vec![n]);
        let mut dbeta = Tensor::zeros(vec![n]);

        for r in 0..tx.rows() {
            let row = tx.row(r);
            let grow = gout.row(r);
            let mean: E = row.iter().copied().sum::<E>() * inv_n;
            let var: E = row
                .iter()
                .map(|&v| {
                    let d = v - mean;
                    d * d
                })
                .sum::<E>()
                * inv_n;
            let inv_std = (var + epsv).sqrt().recip();

            // dxhat, and the two reduction terms of the layer-norm backward
            let mut sum_dxhat = E::zero();
            let mut sum_dxhat_c = E::zero(); // sum of dxhat * (x - mean)
            let mut sum_centered = E::zero();
            for c in 0..n {
                let dxhat = grow[c] * tg.data()[c];
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_c = sum_dxhat_c + dxhat * (row[c] - mean);
                sum_centered = sum_centered + (row[c] - mean);
            }
            let dvar = -half * sum_dxhat_c * inv_std * inv_std * inv_std;
            let dmean = -inv_std * sum_dxhat - two * inv_n * dvar * sum_centered;
            let drow = dx.row_mut(r);
            for c in 0..n {
                let centered = row[c] - mean;
                let dxhat = grow[c] * tg.data()[c];
                drow[c] = dxhat * inv_std + dvar * two * centered * inv_n + dmean * inv_n;
            }
            if self.needs(gamma) || self.needs(beta) {
                for c in 0..n {
                    let xhat = (row[c] - mean) * inv_std;
                    dgamma.data_mut()[c] = dgamma.data_mut()[c] + grow[c] * xhat;
                    dbeta.data_mut()[c] = dbeta.data_mut()[c] + grow[c];
                }
            }
        }
        self.accumulate(grads, x, dx);
        if self.needs(gamma) {
            self.accumulate(grads, gamma, dgamma);
        }
        if self.needs(beta) {
            self.accumulate(grads, beta, dbeta);
        }
    }

    fn backprop_attention(
        &self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        gout: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (s, d) = (tq.rows(), tq.cols());
        let scale = E::from_f64_lossy(1.0 / (d as f64).sqrt());

        let mut dq = Tensor::zeros(vec![s, d]);
        let mut dk = Tensor::zeros(vec![s, d]);
        let mut dv = Tensor::zeros(vec![s, d]);
        let mut attn = vec![E::zero(); s];
        let mut da = vec![E::zero(); s];
        let mut ds = vec![E::zero(); s];

        for i in 0..s {
            let qi = tq.row(i);
            for (j, sc) in attn.iter_mut().enumerate().take(i + 1) {
                *sc = dot(qi, tk.row(j)) * scale;
            }
            softmax_in_place(&mut attn[..i + 1]);
            let grow = gout.row(i);

            // da[j] = gout_i . v_j ; dv_j += attn[j] * gout_i
            for j in 0..=i {
                da[j] = dot(grow, tv.row(j));
                let dvrow = dv.row_mut(j);
                for (o, &g) in dvrow.iter_mut().zip(grow) {
                    *o = *o + attn[j] * g;
                }
            }
            // softmax backward within the causal window
            let sdot: E = (0..=i).map(|j| attn[j] * da[j]).sum();
            for j in 0..=i {
                ds[j] = attn[j] * (da[j] - sdot);
            }
            // score backward: s_ij = scale * q_i . k_j
            let dqrow = dq.row_mut(i);
            for j in 0..=i {
                let c = ds[j] * scale;
                let krow = tk.row(j);
                for (o, &kv) in dqrow.iter_mut().zip(krow) {
                    *o = *o + c * kv;
                }
                let dkrow = dk.row_mut(j);
                for (o, &qv) in dkrow.iter_mut().zip(qi) {
                    *o = *o + c * qv;
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Stabilized softmax over a slice, in place.
pub fn softmax_in_place<E: Element>(row: &mut [E]) {
    let max = row
        .iter()
        .copied()
        .fold(E::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut sum = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Stabilized log-softmax over a slice, in place.
pub fn log_softmax_in_place<E: Element>(row: &mut [E]) {
    let max = row
        .iter()
        .copied()
        .fold(E::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut sum = E::zero();
    for &v in row.iter() {
        sum = sum + (v - max).exp();
    }
    let log_z = max + sum.ln();
    for v in row.iter_mut() {
        *v = *v - log_z;
    }
}

pub(crate) fn matmul_into<E: Element>(a: &Tensor<E>, b: &Tensor<E>, out: &mut Tensor<E>) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == E::zero() {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow).take(n) {
                *o = *o + av * bv;
            }
        }
    }
}

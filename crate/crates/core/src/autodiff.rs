//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every op records its inputs and whatever forward intermediates its
//! backward rule needs. The op set is exactly what the encoders and the
//! training objective use; attention and layer normalization are fused
//! kernels rather than compositions of primitives.

use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    MulConst {
        a: Var,
        factor: Vec<f64>,
    },
    Relu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_valid: Vec<bool>,
        probs: Vec<f64>,
    },
    CausalMean {
        x: Var,
        seq_len: usize,
        valid: Vec<bool>,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn gather(&mut self, src: Var, index: Vec<usize>) -> Var {
        let s = self.value(src);
        let mut out = Matrix::zeros(index.len(), s.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(out, Op::Gather { src, index })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, out.cols()), "bias must be a row vector");
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow { a, bias })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.push(out, Op::Scale { a, factor })
    }

    /// Elementwise product with a constant of the same shape (dropout masks,
    /// padding masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.data().len(), factor.len());
        for (o, f) in out.data_mut().iter_mut().zip(&factor) {
            *o *= f;
        }
        self.push(out, Op::MulConst { a, factor })
    }

    /// Scales every row by a per-row constant.
    pub fn mul_rows(&mut self, a: Var, row_factor: &[f64]) -> Var {
        let cols = self.value(a).cols();
        let factor = row_factor
            .iter()
            .flat_map(|&f| std::iter::repeat(f).take(cols))
            .collect();
        self.mul_const(a, factor)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu { a })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq_len` rows each, stacked row-wise. Query `i` attends to keys
    /// `j <= i` whose `key_valid` flag is set; a query with no admissible key
    /// produces a zero row.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_valid: Vec<bool>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(rows % seq_len, 0);
        assert_eq!(d % heads, 0);
        assert_eq!(key_valid.len(), rows);
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = Matrix::zeros(rows, d);
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            let base = b * seq_len;
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..seq_len {
                    let qi = &qv.row(base + i)[cs.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if key_valid[base + j] {
                            let s = dot(qi, &kv.row(base + j)[cs.clone()]) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p_off = ((b * heads + h) * seq_len + i) * seq_len;
                    let mut z = 0.0;
                    for j in 0..=i {
                        if key_valid[base + j] {
                            let e = (scores[j] - max).exp();
                            probs[p_off + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.row_mut(base + i)[cs.clone()];
                    for j in 0..=i {
                        if key_valid[base + j] {
                            let p = probs[p_off + j] / z;
                            probs[p_off + j] = p;
                            for (o, &x) in orow.iter_mut().zip(&vv.row(base + j)[cs.clone()]) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                key_valid,
                probs,
            },
        )
    }

    /// Row `(b, t)` becomes the mean of valid rows `(b, j)`, `j <= t`; rows
    /// flagged invalid become zero.
    pub fn causal_mean(&mut self, x: Var, seq_len: usize, valid: Vec<bool>) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        assert_eq!(rows % seq_len, 0);
        let mut out = Matrix::zeros(rows, d);
        let mut acc = vec![0.0; d];
        for b in 0..rows / seq_len {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut count = 0usize;
            for t in 0..seq_len {
                let r = b * seq_len + t;
                if !valid[r] {
                    continue;
                }
                count += 1;
                for (a, &x) in acc.iter_mut().zip(xv.row(r)) {
                    *a += x;
                }
                let inv = 1.0 / count as f64;
                for (o, &a) in out.row_mut(r).iter_mut().zip(&acc) {
                    *o = a * inv;
                }
            }
        }
        self.push(out, Op::CausalMean { x, seq_len, valid })
    }

    /// Row-wise inner products of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let out = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        let out = Matrix::from_vec(av.rows(), 1, out);
        self.push(out, Op::RowDot { a, b })
    }

    /// Weighted sum of binary cross entropies of a logit column against
    /// (possibly soft) targets. Produces a `1×1` value.
    pub fn bce(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.cols(), 1);
        assert_eq!(x.rows(), targets.len());
        assert_eq!(x.rows(), weights.len());
        let total: f64 = x
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&l, &y), &w)| w * crate::encoder::bce_loss(l, y))
            .sum();
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::Bce {
                logits,
                targets,
                weights,
            },
        )
    }

    /// Gradients of the `1×1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Gather { src, index } => {
                let acc = slot(grads, *src, self.value(*src));
                for (r, &i) in index.iter().enumerate() {
                    for (a, &x) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += x;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let ga = g.matmul_bt(self.value(*b));
                slot(grads, *a, self.value(*a)).add_assign(&ga);
                let gb = self.value(*a).matmul_at(g);
                slot(grads, *b, self.value(*b)).add_assign(&gb);
            }
            Op::Add { a, b } => {
                slot(grads, *a, self.value(*a)).add_assign(g);
                slot(grads, *b, self.value(*b)).add_assign(g);
            }
            Op::AddRow { a, bias } => {
                slot(grads, *a, self.value(*a)).add_assign(g);
                let acc = slot(grads, *bias, self.value(*bias));
                for r in 0..g.rows() {
                    for (o, &x) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                let acc = slot(grads, *a, self.value(*a));
                for (o, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *o += factor * x;
                }
            }
            Op::MulConst { a, factor } => {
                let acc = slot(grads, *a, self.value(*a));
                for ((o, &x), f) in acc.data_mut().iter_mut().zip(g.data()).zip(factor) {
                    *o += f * x;
                }
            }
            Op::Relu { a } => {
                let input = self.value(*a).data().to_vec();
                let acc = slot(grads, *a, self.value(*a));
                for ((o, &x), &inp) in acc.data_mut().iter_mut().zip(g.data()).zip(&input) {
                    if inp > 0.0 {
                        *o += x;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).row(0).to_vec();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = Matrix::zeros(rows, cols);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    for c in 0..cols {
                        dgamma[c] += gr[c] * xh[c];
                        dbeta[c] += gr[c];
                        dxhat[c] = gr[c] * gam[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = inv_std[r] / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                    }
                }
                slot(grads, *x, self.value(*x)).add_assign(&dx);
                let acc = slot(grads, *gamma, self.value(*gamma));
                for (o, d) in acc.data_mut().iter_mut().zip(&dgamma) {
                    *o += d;
                }
                let acc = slot(grads, *beta, self.value(*beta));
                for (o, d) in acc.data_mut().iter_mut().zip(&dbeta) {
                    *o += d;
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
                key_valid,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = qv.shape();
                let (heads, seq_len) = (*heads, *seq_len);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(rows, d);
                let mut dk = Matrix::zeros(rows, d);
                let mut dv = Matrix::zeros(rows, d);
                let mut dp = vec![0.0; seq_len];
                for b in 0..rows / seq_len {
                    let base = b * seq_len;
                    for h in 0..heads {
                        let cs = h * dh..(h + 1) * dh;
                        for i in 0..seq_len {
                            let p_off = ((b * heads + h) * seq_len + i) * seq_len;
                            let gi = &g.row(base + i)[cs.clone()];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                if !key_valid[base + j] {
                                    continue;
                                }
                                let p = probs[p_off + j];
                                if p == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                dp[j] = dot(gi, &vv.row(base + j)[cs.clone()]);
                                weighted += p * dp[j];
                                for (o, &x) in dv.row_mut(base + j)[cs.clone()].iter_mut().zip(gi) {
                                    *o += p * x;
                                }
                            }
                            for j in 0..=i {
                                if !key_valid[base + j] {
                                    continue;
                                }
                                let p = probs[p_off + j];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[j] - weighted) * scale;
                                let krow = &kv.row(base + j)[cs.clone()];
                                for (o, &x) in dq.row_mut(base + i)[cs.clone()].iter_mut().zip(krow) {
                                    *o += ds * x;
                                }
                                let qrow = &qv.row(base + i)[cs.clone()];
                                for (o, &x) in dk.row_mut(base + j)[cs.clone()].iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                slot(grads, *q, qv).add_assign(&dq);
                slot(grads, *k, kv).add_assign(&dk);
                slot(grads, *v, vv).add_assign(&dv);
            }
            Op::CausalMean { x, seq_len, valid } => {
                let (rows, d) = g.shape();
                let seq_len = *seq_len;
                let mut dx = Matrix::zeros(rows, d);
                let mut acc = vec![0.0; d];
                for b in 0..rows / seq_len {
                    let counts: Vec<usize> = {
                        let mut c = 0;
                        (0..seq_len)
                            .map(|t| {
                                if valid[b * seq_len + t] {
                                    c += 1;
                                }
                                c
                            })
                            .collect()
                    };
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for t in (0..seq_len).rev() {
                        let r = b * seq_len + t;
                        if !valid[r] {
                            continue;
                        }
                        let inv = 1.0 / counts[t] as f64;
                        for (a, &x) in acc.iter_mut().zip(g.row(r)) {
                            *a += x * inv;
                        }
                        dx.row_mut(r).copy_from_slice(&acc);
                    }
                }
                slot(grads, *x, self.value(*x)).add_assign(&dx);
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros_like(av);
                let mut db = Matrix::zeros_like(bv);
                for r in 0..av.rows() {
                    let s = g.get(r, 0);
                    for (o, &x) in da.row_mut(r).iter_mut().zip(bv.row(r)) {
                        *o = s * x;
                    }
                    for (o, &x) in db.row_mut(r).iter_mut().zip(av.row(r)) {
                        *o = s * x;
                    }
                }
                slot(grads, *a, av).add_assign(&da);
                slot(grads, *b, bv).add_assign(&db);
            }
            Op::Bce {
                logits,
                targets,
                weights,
            } => {
                let s = g.get(0, 0);
                let x = self.value(*logits);
                let acc = slot(grads, *logits, x);
                for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                    let l = x.get(r, 0);
                    acc.data_mut()[r] += s * w * (crate::encoder::sigmoid(l) - y);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros_like(like))
}

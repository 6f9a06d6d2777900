//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every op records its output value; `backward` walks the tape in reverse
//! and accumulates gradients. Only first-order derivatives are supported.

use std::ops::Range;
use std::rc::Rc;

use super::{NumericsError, ParamStore, Result, SparseMatrix, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    Gather(Var, Rc<Vec<usize>>),
    SpMM(Rc<SparseMatrix>, Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<Vec<Range<usize>>>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    GateCombine {
        gate: Var,
        a: Var,
        b: Var,
        mask: Rc<Vec<bool>>,
    },
    BceWithLogits { logits: Var, labels: Rc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

/// Row-wise layer normalization without gain/bias. Returns normalized rows
/// and the per-row inverse standard deviation.
fn layer_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let cols = x.cols();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

/// Multi-head scaled dot-product attention restricted to each segment.
/// Returns the output and, per (segment, head), the row-major `L x L`
/// probability matrix.
fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    segments: &[Range<usize>],
    heads: usize,
) -> (Tensor, Vec<Vec<f64>>) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        let len = seg.len();
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let qi = &q.row(seg.start + i)[cols.clone()];
                let prow = &mut p[i * len..(i + 1) * len];
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = &k.row(seg.start + j)[cols.clone()];
                    *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = prow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for pj in prow.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in prow.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out.row_mut(seg.start + i)[cols.clone()];
                for (j, &pj) in prow.iter().enumerate() {
                    let vj = &v.row(seg.start + j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

/// Attention probabilities for inspection: one `L x L` row-major matrix per
/// (segment, head), in segment-major order.
pub fn attention_probs(
    q: &Tensor,
    k: &Tensor,
    segments: &[Range<usize>],
    heads: usize,
) -> Result<Vec<Vec<f64>>> {
    validate_segments(q.rows(), segments)?;
    if heads == 0 || !q.cols().is_multiple_of(heads) || !q.same_shape(k) {
        return Err(shape_err("attention", q, k));
    }
    Ok(attention_forward(q, k, k, segments, heads).1)
}

fn validate_segments(rows: usize, segments: &[Range<usize>]) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start < next || s.end > rows || s.is_empty() {
            return Err(NumericsError::Invalid {
                op: "attention",
                msg: format!("bad segment {s:?} for {rows} rows"),
            });
        }
        next = s.end;
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input (gradient is still computed but usually ignored).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Trainable input bound to slot `idx` of `store`.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> Var {
        self.push(store.value(idx).clone(), Op::Param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err(name, tx, tr));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, tr.data()[i % c]);
        }
        Ok(out)
    }

    /// `x + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x * gain` with a `1 x c` gain broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let out = self.row_broadcast(x, gain, "mul_row", |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, gain)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(NumericsError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?);
        let rows = first.rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(NumericsError::Invalid {
                op: "gather",
                msg: format!("row {bad} out of {}", t.rows()),
            });
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::Gather(table, idx)))
    }

    /// Constant sparse operator applied on the left.
    pub fn spmm(&mut self, mat: Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let out = mat.matmul(self.value(x))?;
        Ok(self.push(out, Op::SpMM(mat, x)))
    }

    /// Row-wise normalization to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (out, inv_std) = layer_norm_forward(self.value(x), eps);
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Multi-head self-attention where token `i` only attends to tokens of
    /// its own segment. `q`, `k`, `v` are `N x d`, `d` divisible by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<Vec<Range<usize>>>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if !tq.same_shape(tk) || !tq.same_shape(tv) {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || tq.cols() % heads != 0 {
            return Err(NumericsError::Invalid {
                op: "attention",
                msg: format!("model dim {} not divisible by {heads} heads", tq.cols()),
            });
        }
        validate_segments(tq.rows(), &segments)?;
        let (out, probs) = attention_forward(tq, tk, tv, &segments, heads);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
        ))
    }

    /// Element-wise gate: `b + gate * (a - b)` on rows where `mask` is set,
    /// `a` unchanged elsewhere.
    pub fn gate_combine(&mut self, gate: Var, a: Var, b: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (tg, ta, tb) = (self.value(gate), self.value(a), self.value(b));
        if !tg.same_shape(ta) || !ta.same_shape(tb) {
            return Err(shape_err("gate_combine", ta, tb));
        }
        if mask.len() != ta.rows() {
            return Err(NumericsError::Invalid {
                op: "gate_combine",
                msg: format!("mask length {} for {} rows", mask.len(), ta.rows()),
            });
        }
        let mut out = ta.clone();
        for (r, &on) in mask.iter().enumerate() {
            if on {
                let (g, x, y) = (tg.row(r), ta.row(r), tb.row(r));
                for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = y[c] + g[c] * (x[c] - y[c]);
                }
            }
        }
        Ok(self.push(out, Op::GateCombine { gate, a, b, mask }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Rc<Vec<f64>>) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || labels.is_empty() {
            return Err(NumericsError::Invalid {
                op: "bce",
                msg: format!("{} logits vs {} labels", z.len(), labels.len()),
            });
        }
        let total: f64 = z.data().iter().zip(labels.iter()).map(|(&z, &y)| bce_term(z, y)).sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(out, Op::BceWithLogits { logits, labels }))
    }

    /// Reverse pass seeded with ones on `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_nt(self.value(*b)).expect("shapes checked in forward");
                let gb = self.value(*a).matmul_tn(g).expect("shapes checked in forward");
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, hadamard(g, tb));
                acc(grads, *b, hadamard(g, ta));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::AddRow(x, bias) => {
                acc(grads, *x, g.clone());
                acc(grads, *bias, column_sums(g));
            }
            Op::MulRow(x, gain) => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let c = tx.cols();
                let mut gx = g.clone();
                let mut gg = vec![0.0; c];
                for (idx, v) in gx.data_mut().iter_mut().enumerate() {
                    gg[idx % c] += *v * tx.data()[idx];
                    *v *= tg.data()[idx % c];
                }
                acc(grads, *x, gx);
                acc(grads, *gain, Tensor::row_vector(gg));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                acc(grads, *a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (o, &s) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = s * (*o - dot);
                    }
                }
                acc(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut part = Tensor::zeros(&[g.rows(), c]);
                    for r in 0..g.rows() {
                        part.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    off += c;
                    acc(grads, *p, part);
                }
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let mut out = Tensor::zeros(ta.shape());
                for r in 0..ta.rows() {
                    out.row_mut(r).copy_from_slice(g.row(0));
                }
                acc(grads, *a, out);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                acc(grads, *a, Tensor::full(ta.shape(), g.data()[0]));
            }
            Op::Gather(table, idx) => {
                let tt = self.value(*table);
                let mut out = Tensor::zeros(tt.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *table, out);
            }
            Op::SpMM(mat, x) => {
                acc(grads, *x, mat.matmul_t(g).expect("shapes checked in forward"));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (gr[k] - mean_g - yr[k] * mean_gy);
                    }
                }
                acc(grads, *x, out);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    g,
                    segments,
                    *heads,
                    probs,
                );
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::GateCombine { gate, a, b, mask } => {
                let (tg, ta, tb) = (self.value(*gate), self.value(*a), self.value(*b));
                let mut ggate = Tensor::zeros(tg.shape());
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(tb.shape());
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let (gr, w, x, y) = (g.row(r), tg.row(r), ta.row(r), tb.row(r));
                    for c in 0..gr.len() {
                        ggate.row_mut(r)[c] = gr[c] * (x[c] - y[c]);
                        ga.row_mut(r)[c] = gr[c] * w[c];
                        gb.row_mut(r)[c] = gr[c] * (1.0 - w[c]);
                    }
                }
                acc(grads, *gate, ggate);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits);
                let n = labels.len() as f64;
                let up = g.data()[0];
                let data = z
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&zv, &y)| up * (sigmoid(zv) - y) / n)
                    .collect();
                acc(grads, *logits, Tensor::new(z.shape().to_vec(), data).unwrap());
            }
        }
    }
}

fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    segments: &[Range<usize>],
    heads: usize,
    probs: &[Vec<f64>],
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    let mut pi = 0;
    for seg in segments {
        let len = seg.len();
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let p = &probs[pi];
            pi += 1;
            // dP[i][j] = g_i . v_j ; dS = P * (dP - rowdot)
            let mut ds = vec![0.0; len * len];
            for i in 0..len {
                let gi = &g.row(seg.start + i)[cols.clone()];
                let mut dot = 0.0;
                for j in 0..len {
                    let vj = &v.row(seg.start + j)[cols.clone()];
                    let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[i * len + j] = dp;
                    dot += dp * p[i * len + j];
                }
                for j in 0..len {
                    ds[i * len + j] = p[i * len + j] * (ds[i * len + j] - dot) * scale;
                }
            }
            for i in 0..len {
                let gi = &g.row(seg.start + i)[cols.clone()];
                let qi = &q.row(seg.start + i)[cols.clone()];
                for j in 0..len {
                    let pij = p[i * len + j];
                    let dsij = ds[i * len + j];
                    let kj = &k.row(seg.start + j)[cols.clone()];
                    for (o, x) in gv.row_mut(seg.start + j)[cols.clone()].iter_mut().zip(gi) {
                        *o += pij * x;
                    }
                    for (o, x) in gq.row_mut(seg.start + i)[cols.clone()].iter_mut().zip(kj) {
                        *o += dsij * x;
                    }
                    for (o, x) in gk.row_mut(seg.start + j)[cols.clone()].iter_mut().zip(qi) {
                        *o += dsij * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter slot of `store`, zeros for slots the tape
    /// never touched. Multiple bindings of one slot are summed.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..store.len()).map(|i| Tensor::zeros(store.value(i).shape())).collect();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &self.grads[i]) {
                out[*p].add_assign(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for a unary builder.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor, h: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out_shape = {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            t.value(y).shape().to_vec()
        };
        let wt = Tensor::new(out_shape.clone(), (0..out_shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eval = |x: &Tensor| -> (f64, Tensor) {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            let w = t.leaf(wt.clone());
            let m = t.mul(y, w).unwrap();
            let s = t.sum(m);
            let g = t.backward(s);
            (t.value(s).data()[0], g.get(v).unwrap().clone())
        };
        let (_, analytic) = eval(&x);
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn relu_forward_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(vec![-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
        // subgradient at zero is 0
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(vec![0.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        assert_eq!(t.backward(s).get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn softmax_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 1, 5);
        let err = check_unary(|t, v| t.softmax_rows(v), x, 1e-6);
        assert!(err < 1e-6, "softmax rel err {err}");
    }

    #[test]
    fn primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, 4, 3);
        let bias = rand_tensor(&mut rng, 1, 3);
        let other = rand_tensor(&mut rng, 3, 3);
        let x = rand_tensor(&mut rng, 3, 4);
        let h = 1e-5;
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("matmul", Box::new(move |t, v| { let w = t.leaf(w.clone()); t.matmul(v, w).unwrap() })),
            ("sigmoid", Box::new(|t, v| t.sigmoid(v))),
            ("relu", Box::new(|t, v| t.relu(v))),
            ("scale", Box::new(|t, v| t.scale(v, -2.5))),
            ("layer_norm", Box::new(|t, v| t.layer_norm(v, 1e-5))),
            ("sum_rows", Box::new(|t, v| t.sum_rows(v))),
            ("concat", Box::new(|t, v| { let s = t.sigmoid(v); t.concat_cols(&[v, s]).unwrap() })),
            ("gather", Box::new(|t, v| t.gather(v, Rc::new(vec![2, 0, 2])).unwrap())),
            ("mul_self", Box::new(|t, v| t.mul(v, v).unwrap())),
        ];
        for (name, f) in cases {
            let err = check_unary(f, x.clone(), h);
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
        let b2 = bias.clone();
        let err = check_unary(move |t, v| { let b = t.leaf(b2.clone()); let w = t_leaf_id(t); let m = t.matmul(v, w).unwrap(); t.add_row(m, b).unwrap() }, x.clone(), h);
        assert!(err < 1e-5, "add_row: {err}");
        // gradient w.r.t. the broadcast operand itself
        let xx = x.clone();
        let err = check_unary(move |t, b| { let xv = t.leaf(xx.clone()); let w = t_leaf_id(t); let m = t.matmul(xv, w).unwrap(); let y = t.mul_row(m, b).unwrap(); t.add_row(y, b).unwrap() }, bias, h);
        assert!(err < 1e-5, "row broadcast operand: {err}");
        let sp = Rc::new(SparseMatrix::from_triplets(2, 3, &[(0, 0, 0.5), (1, 2, -1.0), (1, 1, 2.0)]).unwrap());
        let err = check_unary(move |t, v| t.spmm(sp.clone(), v).unwrap(), x.clone(), h);
        assert!(err < 1e-5, "spmm: {err}");
        let o2 = other.clone();
        let err = check_unary(move |t, v| { let o = t.leaf(o2.clone()); let g = t.sigmoid(o); t.gate_combine(g, v, v, Rc::new(vec![true, false, true])).unwrap() }, other.clone(), h);
        assert!(err < 1e-5, "gate_combine: {err}");
    }

    // 4x3 constant used by the add_row case
    fn t_leaf_id(t: &mut Tape) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        t.leaf(rand_tensor(&mut rng, 4, 3))
    }

    #[test]
    fn attention_gradients_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 7, 4);
        let segs = Rc::new(vec![0..3, 3..7]);
        let wq = rand_tensor(&mut rng, 4, 4);
        let wk = rand_tensor(&mut rng, 4, 4);
        let s2 = segs.clone();
        let err = check_unary(
            move |t, v| {
                let a = t.leaf(wq.clone());
                let b = t.leaf(wk.clone());
                let q = t.matmul(v, a).unwrap();
                let k = t.matmul(v, b).unwrap();
                t.attention(q, k, v, s2.clone(), 2).unwrap()
            },
            x.clone(),
            1e-5,
        );
        assert!(err < 1e-5, "attention rel err {err}");
        let probs = attention_probs(&x, &x, &segs, 2).unwrap();
        assert_eq!(probs.len(), 4);
        for (p, len) in probs.iter().zip([3, 3, 4, 4]) {
            for i in 0..len {
                let s: f64 = p[i * len..(i + 1) * len].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_gradient() {
        let labels = Rc::new(vec![1.0, 0.0, 1.0]);
        let err = check_unary(
            move |t, v| t.bce_with_logits(v, labels.clone()).unwrap(),
            Tensor::matrix(3, 1, vec![0.3, -2.0, 4.0]).unwrap(),
            1e-5,
        );
        assert!(err < 1e-6, "bce rel err {err}");
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        let e = t.add(a, b).unwrap_err().to_string();
        assert!(e.contains("add") && e.contains("[2, 2]") && e.contains("[3, 2]"), "{e}");
    }
}

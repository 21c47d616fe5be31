//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Each operation appends a node holding its output value and enough saved
//! state for the backward rule. Inputs always have smaller indices than the
//! node that consumes them, so walking the arena backwards is a valid
//! topological order and touches every node once.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::kernels;
use crate::math;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys a query row of an attention segment may look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    /// Every key in the segment.
    All,
    /// Query `t` (0-based) sees keys `0..=t + delay - 1`, clipped to the
    /// segment. `Delayed(1)` is the ordinary causal mask.
    Delayed(usize),
}

/// One independent attention problem inside packed query/key matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub visibility: Visibility,
}

impl AttnSegment {
    /// Number of keys visible to query row `t`.
    pub fn visible(&self, t: usize) -> usize {
        match self.visibility {
            Visibility::All => self.k_len,
            Visibility::Delayed(delay) => (t + delay).min(self.k_len),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<f64>,
    },
    Custom {
        x: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `b` may equal `a` or match a trailing part of `a`'s shape.
fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf tensor; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf sharing storage with the caller (no copy of large parameters).
    pub fn leaf_shared(&mut self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_rank("matmul", 2)?;
        tb.expect_rank("matmul", 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        ta.expect_rank("transpose", 2)?;
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::transpose(ta.data(), m, n, &mut out);
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta, tb) {
            return Err(mismatch(op, ta, tb));
        }
        let nb = tb.numel().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Element-wise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("multiply", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.binary("divide", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), math::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), math::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    fn rowwise(&mut self, a: Var, op: Op, f: fn(&[f64], &mut [f64])) -> Var {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut out = vec![0.0; ta.numel()];
        if c > 0 {
            for (src, dst) in ta.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                f(src, dst);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, Op::Softmax(a), kernels::softmax_row)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, Op::LogSoftmax(a), kernels::log_softmax_row)
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.last_dim();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut out = vec![0.0; tx.numel()];
        let mut stats = Vec::with_capacity(tx.rows());
        for (src, dst) in tx.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            stats.push(kernels::layer_norm_row(src, tg.data(), tb.data(), eps, dst));
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Gathers rows of a `(vocab, dim)` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        tt.expect_rank("embedding_lookup", 2)?;
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::invalid(
                    "embedding_lookup",
                    alloc::format!("id {id} outside table of {vocab} rows"),
                ));
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is set by `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = tx
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.value(*first), t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = (*self.nodes[a.0].value).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        tx.expect_rank("slice_rows", 2)?;
        let (rows, c) = (tx.shape()[0], tx.shape()[1]);
        if start + len > rows {
            return Err(TensorError::invalid(
                "slice_rows",
                alloc::format!("rows {start}..{} out of {rows}", start + len),
            ));
        }
        let value = Tensor::new(
            vec![len, c],
            tx.data()[start * c..(start + len) * c].to_vec(),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_last(&mut self, a: Var, mean: bool) -> Var {
        let t = self.value(a);
        let c = t.last_dim();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let data = t
            .data()
            .chunks_exact(c)
            .map(|r| {
                let s: f64 = r.iter().sum();
                if mean {
                    s / c as f64
                } else {
                    s
                }
            })
            .collect();
        let value = Tensor::new(shape, data).expect("reduced shape");
        let rg = self.rg(a);
        let op = if mean {
            Op::MeanLast(a)
        } else {
            Op::SumLast(a)
        };
        self.push(value, op, rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, false)
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, true)
    }

    /// Inverted dropout; the identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid(
                "dropout",
                alloc::format!("rate {rate} outside [0, 1)"),
            ));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let scale: Vec<f64> = (0..tx.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, scale }, rg))
    }

    /// Multi-head scaled dot-product attention over packed segments.
    ///
    /// `q` is `(rows_q, d)`, `k` and `v` are `(rows_k, d)`; heads split the
    /// columns evenly. Rows outside every segment are left at zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        tq.expect_rank("attention", 2)?;
        tk.expect_rank("attention", 2)?;
        if tk.shape() != tv.shape() {
            return Err(mismatch("attention", tk, tv));
        }
        let d = tq.shape()[1];
        if tk.shape()[1] != d {
            return Err(mismatch("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                alloc::format!("{d} columns do not split into {heads} heads"),
            ));
        }
        let hd = d / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut out = vec![0.0; tq.numel()];
        let total: usize = segments.iter().map(|s| heads * s.q_len * s.k_len).sum();
        let mut probs = vec![0.0; total];
        let mut off = 0;
        for seg in segments {
            if seg.q_start + seg.q_len > tq.shape()[0] || seg.k_start + seg.k_len > tk.shape()[0] {
                return Err(TensorError::invalid("attention", "segment outside input"));
            }
            let keys = &tk.data()[seg.k_start * d..(seg.k_start + seg.k_len) * d];
            let vals = &tv.data()[seg.k_start * d..(seg.k_start + seg.k_len) * d];
            for h in 0..heads {
                for t in 0..seg.q_len {
                    let vis = seg.visible(t);
                    let row = (seg.q_start + t) * d + h * hd;
                    let p = &mut probs[off..off + seg.k_len];
                    kernels::attention_row(
                        &tq.data()[row..row + hd],
                        keys,
                        vals,
                        d,
                        h * hd,
                        vis,
                        scale,
                        p,
                        &mut out[row..row + hd],
                    );
                    off += seg.k_len;
                }
            }
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scalar node whose value and input gradient were computed externally
    /// (used for the CTC loss).
    pub fn custom_scalar(
        &mut self,
        x: Var,
        value: f64,
        grad: Vec<f64>,
    ) -> Result<Var, TensorError> {
        if grad.len() != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "custom_scalar",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }, rg))
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    let mut bt = vec![0.0; k * n];
                    kernels::transpose(tb.data(), k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &bt, m, n, k, &mut da);
                    for (d, s) in acc(grads, *a, m * k).iter_mut().zip(&da) {
                        *d += s;
                    }
                }
                if rg(*b) {
                    let mut at = vec![0.0; m * k];
                    kernels::transpose(ta.data(), m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&at, g, k, m, n, &mut db);
                    for (d, s) in acc(grads, *b, k * n).iter_mut().zip(&db) {
                        *d += s;
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut t = vec![0.0; m * n];
                kernels::transpose(g, n, m, &mut t);
                for (d, s) in acc(grads, *a, m * n).iter_mut().zip(&t) {
                    *d += s;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if rg(*a) {
                    for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if rg(*b) {
                    let nb = val(*b).numel();
                    let db = acc(grads, *b, nb);
                    for (j, s) in g.iter().enumerate() {
                        db[j % nb] += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nb = tb.numel();
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * tb.data()[j % nb];
                    }
                }
                if rg(*b) {
                    let db = acc(grads, *b, nb);
                    for j in 0..g.len() {
                        db[j % nb] += g[j] * ta.data()[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let nb = tb.numel();
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] / tb.data()[j % nb];
                    }
                }
                if rg(*b) {
                    let db = acc(grads, *b, nb);
                    for j in 0..g.len() {
                        let y = tb.data()[j % nb];
                        db[j % nb] -= g[j] * ta.data()[j] / (y * y);
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += c * s;
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                let da = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    da[j] += g[j] * out[j];
                }
            }
            Op::Log(a) => {
                let x = val(*a).data();
                let da = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    da[j] += g[j] / x[j];
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let da = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let da = acc(grads, *a, g.len());
                for r in 0..y.len() / c.max(1) {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[r * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let y = node.value.data();
                let da = acc(grads, *a, g.len());
                for r in 0..y.len() / c.max(1) {
                    let gs = &g[r * c..(r + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        da[r * c + j] += gs[j] - math::exp(y[r * c + j]) * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let tx = val(*x);
                let c = tx.last_dim();
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; tx.numel()];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xs = &tx.data()[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xs[j] - mean) * rstd;
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                        dxhat[j] = gs[j] * gm[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if rg(*x) {
                    for (d, s) in acc(grads, *x, dx.len()).iter_mut().zip(&dx) {
                        *d += s;
                    }
                }
                if rg(*gamma) {
                    for (d, s) in acc(grads, *gamma, c).iter_mut().zip(&dgamma) {
                        *d += s;
                    }
                }
                if rg(*beta) {
                    for (d, s) in acc(grads, *beta, c).iter_mut().zip(&dbeta) {
                        *d += s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let dt = acc(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    if !mask[j] {
                        dx[j] += g[j];
                    }
                }
            }
            Op::Concat(inputs) => {
                let mut off = 0;
                for &v in inputs {
                    let n = val(v).numel();
                    if rg(v) {
                        for (d, s) in acc(grads, v, n).iter_mut().zip(&g[off..off + n]) {
                            *d += s;
                        }
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(*a).numel();
                let s = if matches!(node.op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                for d in acc(grads, *a, n).iter_mut() {
                    *d += s;
                }
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                let ta = val(*a);
                let c = ta.last_dim();
                let div = if matches!(node.op, Op::MeanLast(_)) {
                    c as f64
                } else {
                    1.0
                };
                let da = acc(grads, *a, ta.numel());
                for (j, d) in da.iter_mut().enumerate() {
                    *d += g[j / c] / div;
                }
            }
            Op::Dropout { x, scale } => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * scale[j];
                }
            }
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let c = tx.shape()[1];
                let dx = acc(grads, *x, tx.numel());
                for (d, s) in dx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let d = tq.shape()[1];
                let hd = d / heads;
                let scale = 1.0 / math::sqrt(hd as f64);
                let mut dq = vec![0.0; tq.numel()];
                let mut dk = vec![0.0; tk.numel()];
                let mut dv = vec![0.0; tv.numel()];
                let mut dp = Vec::new();
                let mut off = 0;
                for seg in segments {
                    for h in 0..*heads {
                        for t in 0..seg.q_len {
                            let vis = seg.visible(t);
                            let p = &probs[off..off + vis];
                            off += seg.k_len;
                            let row = (seg.q_start + t) * d + h * hd;
                            let go = &g[row..row + hd];
                            dp.clear();
                            let mut dot = 0.0;
                            for (j, &pj) in p.iter().enumerate() {
                                let kr = (seg.k_start + j) * d + h * hd;
                                let vr = &tv.data()[kr..kr + hd];
                                let mut s = 0.0;
                                for c in 0..hd {
                                    s += go[c] * vr[c];
                                    dv[kr + c] += pj * go[c];
                                }
                                dp.push(s);
                                dot += pj * s;
                            }
                            let qr = &tq.data()[row..row + hd];
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - dot) * scale;
                                let kr = (seg.k_start + j) * d + h * hd;
                                for c in 0..hd {
                                    dq[row + c] += ds * tk.data()[kr + c];
                                    dk[kr + c] += ds * qr[c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(var) {
                        for (d, s) in acc(grads, var, buf.len()).iter_mut().zip(&buf) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Custom { x, grad } => {
                let dx = acc(grads, *x, grad.len());
                for (d, s) in dx.iter_mut().zip(grad) {
                    *d += g[0] * s;
                }
            }
        }
    }
}

/// Largest relative deviation between analytic and central-difference
/// gradients of `f` at `x`, measured as
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    grad_check_many(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        core::slice::from_ref(x),
        eps,
    )
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check"));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(TensorError::NonFinite("grad_check"));
    }
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(var) {
            Some(d) => d.to_vec(),
            None => vec![0.0; inputs[which].numel()],
        };
        for j in 0..inputs[which].numel() {
            let orig = inputs[which].data()[j];
            probe[which].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            if !a.is_finite() {
                return Err(TensorError::NonFinite("grad_check"));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in creation order, so reverse iteration
//! is a valid topological order. Parameters can be borrowed into the tape
//! without copying. With tracing off the tape only evaluates; forward values
//! are identical either way because both paths share the same kernels.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnDims};
use crate::scalar::Scalar;
use crate::tensor::{matmul_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Silu(Var),
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    AddRow { x: Var, b: Var },
    /// Constant additive offset; gradient passes straight through.
    AddConst(Var),
    RmsNorm { x: Var, w: Var, inv: Vec<F> },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, cos: Vec<F>, sin: Vec<F>, positions: Vec<usize>, n_heads: usize },
    Attention { q: Var, k: Var, v: Var, probs: Vec<F>, dims: AttnDims },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<F>, count: usize },
    TokenLogProbs { logits: Var, targets: Vec<u32>, probs: Vec<F>, inv_temp: F },
    /// Scalar `Σ_t f_t(x_t)` whose per-element derivative was fixed at forward time.
    Weighted { x: Var, coeffs: Vec<F> },
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    lens: Vec<usize>,
    tracked: Vec<bool>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`; zeros for a tracked node the loss did not reach.
    /// `None` for nodes that were never tracked.
    pub fn get(&self, v: Var) -> Option<Cow<'_, [F]>> {
        if !self.tracked.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        Some(match &self.grads[v.0] {
            Some(g) => Cow::Borrowed(g.as_slice()),
            None => Cow::Owned(vec![F::zero(); self.lens[v.0]]),
        })
    }

    /// Gradient for `v`, or zeros of length `len` if untracked.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v).map(|g| g.into_owned()).unwrap_or_else(|| vec![F::zero(); len])
    }
}

pub struct Tape<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
    tracing: bool,
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new(tracing: bool) -> Self {
        Self {
            nodes: Vec::new(),
            tracing,
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn result(&mut self, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Var {
        let rg = self.tracing && inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor<F>) -> Var {
        let rg = self.tracing;
        self.push(Cow::Borrowed(t), Op::Leaf, rg)
    }

    pub fn param_owned(&mut self, t: Tensor<F>) -> Var {
        let rg = self.tracing;
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    /// Non-trainable leaf borrowed from the caller.
    pub fn constant(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.result(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.result(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| p * s).collect())
            .expect("same shape");
        self.result(out, &[a], Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.result(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = F::from_usize(x.len().max(1)).unwrap();
        let s: F = x.data().iter().copied().sum::<F>() / n;
        self.result(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect())
            .expect("same shape");
        self.result(out, &[a], Op::Exp(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| kernels::silu(v)).collect())
            .expect("same shape");
        self.result(out, &[a], Op::Silu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.result(out, &[a, b], Op::MatMul { a, b }))
    }

    /// `x[..., din] · w[dout×din]ᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 || wt.shape()[1] != xt.cols() {
            return Err(Error::Dimension(format!(
                "linear: input {:?} vs weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        let (rows, din, dout) = (xt.rows(), xt.cols(), wt.shape()[0]);
        let data = kernels::linear(xt.data(), wt.data(), rows, din, dout);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        Ok(self.result(out, &[x, w], Op::Linear { x, w }))
    }

    /// Adds the row vector `b[d]` to every row of `x[..., d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        let d = xt.cols();
        if bt.len() != d {
            return Err(Error::Dimension(format!("add_row: bias {} for width {d}", bt.len())));
        }
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(bt.data()).for_each(|(v, &o)| *v = *v + o);
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.result(out, &[x, b], Op::AddRow { x, b }))
    }

    /// Adds a constant `offset[B×d]` to `x[B, T, d]`, broadcasting along T.
    pub fn add_batch_offset(&mut self, x: Var, offset: &Tensor<F>, batch: usize) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if batch == 0 || offset.len() != batch * d || xt.rows() % batch != 0 {
            return Err(Error::Dimension(format!(
                "offset of shape {:?} for input {:?} with batch {batch}",
                offset.shape(),
                xt.shape()
            )));
        }
        let t = xt.rows() / batch;
        let mut data = xt.data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let o = &offset.data()[(r / t) * d..(r / t + 1) * d];
            row.iter_mut().zip(o).for_each(|(v, &z)| *v = *v + z);
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.result(out, &[x], Op::AddConst(x)))
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: F) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let d = xt.cols();
        if wt.len() != d || d == 0 {
            return Err(Error::Dimension(format!("rms_norm: weight {} for width {d}", wt.len())));
        }
        let (data, inv) = kernels::rms_norm(xt.data(), wt.data(), xt.rows(), d, eps);
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.result(out, &[x, w], Op::RmsNorm { x, w, inv }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = crate::tensor::softmax(self.value(x))?;
        Ok(self.result(out, &[x], Op::Softmax(x)))
    }

    /// Gathers rows of `table[V×d]`; output shape is `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.shape()[0], tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index(format!("token id {id} outside vocabulary of size {v}")));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let mut s = shape.to_vec();
        s.push(d);
        let out = Tensor::new(s, data)?;
        let ids = ids.iter().map(|&i| i as usize).collect();
        Ok(self.result(out, &[table], Op::Embedding { table, ids }))
    }

    /// Rotary position encoding; row `r` of `x` sits at `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let xt = self.value(x);
        let (rows, d) = (xt.rows(), xt.cols());
        if positions.len() != rows || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rope: {} positions for {rows} rows, width {d}, {n_heads} heads",
                positions.len()
            )));
        }
        let start = positions.iter().copied().min().unwrap_or(0);
        let end = positions.iter().copied().max().map_or(0, |m| m + 1);
        let (cos, sin) = kernels::rope_tables::<F>(start, end - start, d / n_heads, base);
        let data = kernels::rope(xt.data(), rows, d, n_heads, &cos, &sin, |r| positions[r] - start, false);
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        let positions = positions.iter().map(|p| p - start).collect();
        Ok(self.result(out, &[x], Op::Rope { x, cos, sin, positions, n_heads }))
    }

    /// Causal self-attention over `q, k, v` of shape `[B, T, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, n_heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        if kt.shape() != qt.shape() || vt.shape() != qt.shape() || batch == 0 || qt.rows() % batch != 0 {
            return Err(Error::Dimension("attention: q, k, v shapes differ".into()));
        }
        let t = qt.rows() / batch;
        let dims = AttnDims { batch, tq: t, tk: t, n_heads, d, kv_batch_stride: t * d };
        let (data, probs) = kernels::attention(qt.data(), kt.data(), vt.data(), dims);
        let out = Tensor::new(qt.shape().to_vec(), data)?;
        Ok(self.result(out, &[q, k, v], Op::Attention { q, k, v, probs, dims }))
    }

    /// Attention against externally held key/value buffers (KV cache). The
    /// buffers are constants, so this is only valid with tracing off.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attention_cached(
        &mut self,
        q: Var,
        k: &[F],
        v: &[F],
        batch: usize,
        tk: usize,
        kv_batch_stride: usize,
        n_heads: usize,
    ) -> Result<Var> {
        if self.tracing {
            return Err(Error::Contract("cached attention cannot be traced".into()));
        }
        let qt = self.value(q);
        let d = qt.cols();
        let tq = qt.rows() / batch;
        let dims = AttnDims { batch, tq, tk, n_heads, d, kv_batch_stride };
        let (data, _) = kernels::attention(qt.data(), k, v, dims);
        let out = Tensor::new(qt.shape().to_vec(), data)?;
        Ok(self.result(out, &[q], Op::Leaf))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: Option<&[bool]>) -> Result<Var> {
        let lt = self.value(logits);
        let (loss, probs) = kernels::cross_entropy(lt.data(), lt.rows(), lt.cols(), targets, mask)?;
        let mask = mask.map_or_else(|| vec![true; targets.len()], |m| m.to_vec());
        let count = mask.iter().filter(|&&m| m).count();
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask, probs, count };
        Ok(self.result(Tensor::scalar(loss), &[logits], op))
    }

    /// Log-probability of each row's target under `softmax(logits / temperature)`.
    pub fn token_logprobs(&mut self, logits: Var, targets: &[u32], temperature: F) -> Result<Var> {
        let lt = self.value(logits);
        let inv_temp = F::one() / temperature;
        let (lp, probs) = kernels::token_logprobs(lt.data(), lt.rows(), lt.cols(), targets, inv_temp)?;
        let out = Tensor::new(vec![lp.len()], lp)?;
        let op = Op::TokenLogProbs { logits, targets: targets.to_vec(), probs, inv_temp };
        Ok(self.result(out, &[logits], op))
    }

    /// Scalar node with value `value` and fixed derivative `coeffs` w.r.t. `x`.
    /// Used for fused objectives whose per-element gradient is known in closed form.
    pub fn weighted_scalar(&mut self, x: Var, value: F, coeffs: Vec<F>) -> Result<Var> {
        if coeffs.len() != self.value(x).len() {
            return Err(Error::Dimension("weighted_scalar: coefficient length".into()));
        }
        Ok(self.result(Tensor::scalar(value), &[x], Op::Weighted { x, coeffs }))
    }

    /// Accumulates gradients of the scalar `loss` into every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.tracing {
            return Err(Error::Contract("backward on an untraced tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        let tracked = self
            .nodes
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients { grads, lens, tracked })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let send = |v: Var, contrib: Vec<F>, grads: &mut [Option<Vec<F>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                send(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect(), grads);
                send(*b, g.iter().zip(x).map(|(&g, &x)| g * x).collect(), grads);
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&v| v * *s).collect(), grads),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()], grads),
            Op::Mean(a) => {
                let len = val(*a).len();
                let share = g[0] / F::from_usize(len.max(1)).unwrap();
                send(*a, vec![share; len], grads);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect(), grads);
            }
            Op::Silu(a) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(&g, &x)| g * kernels::silu_grad(x)).collect(), grads);
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, F::one(), g, (n, 1), bt.data(), (1, n), F::zero(), &mut da, (k, 1));
                    send(*a, da, grads);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, F::one(), at.data(), (1, k), g, (n, 1), F::zero(), &mut db, (n, 1));
                    send(*b, db, grads);
                }
            }
            Op::Linear { x, w } => {
                let (xt, wt) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (rows, din, dout) = (xt.rows(), xt.cols(), wt.shape()[0]);
                let (dx, dw) = kernels::linear_backward(
                    xt.data(),
                    wt.data(),
                    g,
                    rows,
                    din,
                    dout,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                );
                if let Some(dx) = dx {
                    send(*x, dx, grads);
                }
                if let Some(dw) = dw {
                    send(*w, dw, grads);
                }
            }
            Op::AddRow { x, b } => {
                send(*x, g.to_vec(), grads);
                let d = val(*b).len();
                let mut db = vec![F::zero(); d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                send(*b, db, grads);
            }
            Op::AddConst(x) => send(*x, g.to_vec(), grads),
            Op::RmsNorm { x, w, inv } => {
                let xt = &self.nodes[x.0].value;
                let (gx, gw) = kernels::rms_norm_backward(xt.data(), val(*w), inv, g, xt.rows(), xt.cols());
                send(*x, gx, grads);
                send(*w, gw, grads);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                send(*x, kernels::softmax_backward(y.data(), g, y.rows(), y.cols()), grads);
            }
            Op::Embedding { table, ids } => {
                let tt = &self.nodes[table.0].value;
                let d = tt.cols();
                let mut dt = vec![F::zero(); tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &v)| *a = *a + v);
                }
                send(*table, dt, grads);
            }
            Op::Rope { x, cos, sin, positions, n_heads } => {
                let xt = &self.nodes[x.0].value;
                let gx = kernels::rope(g, xt.rows(), xt.cols(), *n_heads, cos, sin, |r| positions[r], true);
                send(*x, gx, grads);
            }
            Op::Attention { q, k, v, probs, dims } => {
                let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, *dims);
                send(*q, dq, grads);
                send(*k, dk, grads);
                send(*v, dv, grads);
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let lt = &self.nodes[logits.0].value;
                let v = lt.cols();
                let mut dl = vec![F::zero(); lt.len()];
                if *count > 0 {
                    let share = g[0] / F::from_usize(*count).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * share;
                        }
                        dl[r * v + t as usize] = dl[r * v + t as usize] - share;
                    }
                }
                send(*logits, dl, grads);
            }
            Op::TokenLogProbs { logits, targets, probs, inv_temp } => {
                let lt = &self.nodes[logits.0].value;
                let v = lt.cols();
                let mut dl = vec![F::zero(); lt.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g[r] * *inv_temp;
                    if gr == F::zero() {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = -probs[r * v + j] * gr;
                    }
                    dl[r * v + t as usize] = dl[r * v + t as usize] + gr;
                }
                send(*logits, dl, grads);
            }
            Op::Weighted { x, coeffs } => {
                send(*x, coeffs.iter().map(|&c| c * g[0]).collect(), grads);
            }
        }
        Ok(())
    }
}

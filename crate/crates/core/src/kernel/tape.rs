//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op evaluates eagerly, checks its output for non-finite values and
//! appends one node. `backward` walks the nodes in exact reverse append order.
//! Sequence-model kernels (gated recurrence, attention, masked pooling,
//! softmax cross-entropy) are fused into single nodes with analytic
//! gradients to keep the tape short.

use crate::error::{Error, Result};
use crate::kernel::params::{ParamId, ParamStore};
use crate::kernel::tensor::Tensor;
use crate::scalar::Scalar;

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Max(Var, Var),
    Sum(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Gru {
        gx: Var,
        gh: Var,
        h: Var,
        active: Vec<bool>,
        r: Vec<S>,
        z: Vec<S>,
        n: Vec<S>,
    },
    Stack(Vec<Var>),
    MaxOverTime {
        memory: Var,
        argmax: Vec<usize>,
    },
    Attention {
        query: Var,
        memory: Var,
        lengths: Vec<usize>,
        weights: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norm_a: Vec<S>,
        norm_b: Vec<S>,
    },
    LogSoftmaxRows {
        x: Var,
        scale: S,
    },
    SoftmaxRows {
        x: Var,
        scale: S,
    },
    WeightedSum {
        x: Var,
        weights: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient tape. Parameters are read from a [`ParamStore`] on first use and
/// only the ids marked trainable at construction receive gradients.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    trainable: Vec<bool>,
    param_vars: Vec<Option<Var>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<S> {
    leaf_grads: Vec<Option<Tensor<S>>>,
    visited: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf; `None` if the leaf did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Gradients of every trainable parameter loaded on `tape`, in id order.
    /// Parameters that did not reach the loss get explicit zeros.
    pub fn params(&self, tape: &Tape<S>) -> Vec<(ParamId, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, var) in tape.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            if !tape.nodes[var.0].requires_grad {
                continue;
            }
            let g = match self.wrt(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.nodes[var.0].value.shape()),
            };
            out.push((ParamId(i), g));
        }
        out
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn log_sum_exp<S: Scalar>(xs: impl Iterator<Item = S> + Clone) -> S {
    let m = xs.clone().fold(S::neg_infinity(), S::max);
    let s: S = xs.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            trainable: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_trainable(ids: &[ParamId]) -> Self {
        let mut tape = Self::new();
        for id in ids {
            if tape.trainable.len() <= id.0 {
                tape.trainable.resize(id.0 + 1, false);
            }
            tape.trainable[id.0] = true;
        }
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Trainable marks survive; parameters are reloaded on next use.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Loads a parameter (once per tape) as a leaf.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return Ok(*v);
        }
        let trainable = self.trainable.get(id.0).copied().unwrap_or(false);
        let v = self.leaf(store.get(id).clone(), trainable)?;
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            S::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, op, rg)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise maximum; the subgradient of a tie goes to `a`.
    pub fn elementwise_max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("elementwise_max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = tx.dims2()?;
        if tb.len() != c {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in 0..r {
            for (v, &b) in data[row * c..(row + 1) * c].iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_row", value, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Row lookup `table[ids[i]]` into an `ids.len() x d` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_impl("embedding", table, ids, true)
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        self.gather_impl("gather_rows", src, idx, false)
    }

    fn gather_impl(&mut self, name: &'static str, src: Var, idx: &[usize], embed: bool) -> Result<Var> {
        let t = self.value(src);
        let (rows, d) = t.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(name, format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(&[src]);
        let op = if embed {
            Op::Embedding {
                table: src,
                ids: idx.to_vec(),
            }
        } else {
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            }
        };
        self.push(name, value, op, rg)
    }

    /// Gated recurrent update from pre-activations.
    ///
    /// `gx` and `gh` are `b x 3h` input and hidden projections (biases
    /// included) laid out as `[reset | update | candidate]`:
    /// `r = σ(xr + hr)`, `z = σ(xz + hz)`, `n = tanh(xn + r·hn)`,
    /// `h' = (1 - z)·n + z·h`. Rows with `active[i] == false` carry `h` through.
    pub fn gru(&mut self, gx: Var, gh: Var, h: Var, active: &[bool]) -> Result<Var> {
        let (b, hd) = self.value(h).dims2()?;
        same_shape("gru", self.value(gx), self.value(gh))?;
        let (b2, three_h) = self.value(gx).dims2()?;
        if b2 != b || three_h != 3 * hd || active.len() != b {
            return Err(Error::dim(
                "gru",
                format!(
                    "gx {:?}, h {:?}, {} activity flags",
                    self.value(gx).shape(),
                    self.value(h).shape(),
                    active.len()
                ),
            ));
        }
        let (xs, hs, hv) = (self.value(gx).data(), self.value(gh).data(), self.value(h).data());
        let mut r = vec![S::zero(); b * hd];
        let mut z = vec![S::zero(); b * hd];
        let mut n = vec![S::zero(); b * hd];
        let mut out = vec![S::zero(); b * hd];
        for row in 0..b {
            let g = row * three_h;
            for j in 0..hd {
                let o = row * hd + j;
                if !active[row] {
                    out[o] = hv[o];
                    continue;
                }
                let rj = sigmoid(xs[g + j] + hs[g + j]);
                let zj = sigmoid(xs[g + hd + j] + hs[g + hd + j]);
                let nj = (xs[g + 2 * hd + j] + rj * hs[g + 2 * hd + j]).tanh();
                r[o] = rj;
                z[o] = zj;
                n[o] = nj;
                out[o] = (S::one() - zj) * nj + zj * hv[o];
            }
        }
        let value = Tensor::new(vec![b, hd], out)?;
        let rg = self.rg(&[gx, gh, h]);
        self.push(
            "gru",
            value,
            Op::Gru {
                gx,
                gh,
                h,
                active: active.to_vec(),
                r,
                z,
                n,
            },
            rg,
        )
    }

    /// Stacks `l` matrices of shape `b x h` into a `b x l x h` tensor.
    pub fn stack(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::dim("stack", "no inputs"))?;
        let (b, hd) = self.value(*first).dims2()?;
        let l = steps.len();
        let mut data = vec![S::zero(); b * l * hd];
        for (t, v) in steps.iter().enumerate() {
            let tv = self.value(*v);
            if tv.shape() != [b, hd] {
                return Err(Error::dim("stack", format!("step {t} has shape {:?}", tv.shape())));
            }
            for row in 0..b {
                let dst = (row * l + t) * hd;
                data[dst..dst + hd].copy_from_slice(tv.row(row));
            }
        }
        let value = Tensor::new(vec![b, l, hd], data)?;
        let rg = self.rg(steps);
        self.push("stack", value, Op::Stack(steps.to_vec()), rg)
    }

    fn memory_dims(&self, name: &'static str, memory: Var, lengths: &[usize]) -> Result<(usize, usize, usize)> {
        let shape = self.value(memory).shape();
        let [b, l, hd] = *shape else {
            return Err(Error::dim(name, format!("memory must be b x l x h, got {shape:?}")));
        };
        if lengths.len() != b || lengths.iter().any(|&n| n == 0 || n > l) {
            return Err(Error::dim(name, format!("lengths {lengths:?} invalid for {shape:?}")));
        }
        Ok((b, l, hd))
    }

    /// Element-wise max over the first `lengths[i]` time steps of row `i`.
    /// Ties resolve to the earliest step.
    pub fn max_over_time(&mut self, memory: Var, lengths: &[usize]) -> Result<Var> {
        let (b, l, hd) = self.memory_dims("max_over_time", memory, lengths)?;
        let m = self.value(memory).data();
        let mut out = vec![S::zero(); b * hd];
        let mut argmax = vec![0usize; b * hd];
        for row in 0..b {
            for j in 0..hd {
                let mut best = (row * l) * hd + j;
                for t in 1..lengths[row] {
                    let idx = (row * l + t) * hd + j;
                    if m[idx] > m[best] {
                        best = idx;
                    }
                }
                out[row * hd + j] = m[best];
                argmax[row * hd + j] = best;
            }
        }
        let value = Tensor::new(vec![b, hd], out)?;
        let rg = self.rg(&[memory]);
        self.push("max_over_time", value, Op::MaxOverTime { memory, argmax }, rg)
    }

    /// Dot-product attention of `query` (`b x h`) over the valid prefix of
    /// `memory` (`b x l x h`); returns the `b x h` context.
    pub fn attention(&mut self, query: Var, memory: Var, lengths: &[usize]) -> Result<Var> {
        let (b, l, hd) = self.memory_dims("attention", memory, lengths)?;
        if self.value(query).shape() != [b, hd] {
            return Err(Error::dim("attention", format!("query {:?}", self.value(query).shape())));
        }
        let (q, m) = (self.value(query).data(), self.value(memory).data());
        let mut weights = vec![S::zero(); b * l];
        let mut ctx = vec![S::zero(); b * hd];
        for row in 0..b {
            let qr = &q[row * hd..(row + 1) * hd];
            let w = &mut weights[row * l..(row + 1) * l];
            for (t, wt) in w.iter_mut().enumerate().take(lengths[row]) {
                let mr = &m[(row * l + t) * hd..(row * l + t + 1) * hd];
                *wt = qr.iter().zip(mr).map(|(&x, &y)| x * y).sum();
            }
            let mx = w[..lengths[row]].iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for wt in w[..lengths[row]].iter_mut() {
                *wt = (*wt - mx).exp();
                total = total + *wt;
            }
            for wt in w[..lengths[row]].iter_mut() {
                *wt = *wt / total;
            }
            let c = &mut ctx[row * hd..(row + 1) * hd];
            for (t, &wt) in w.iter().enumerate().take(lengths[row]) {
                let mr = &m[(row * l + t) * hd..(row * l + t + 1) * hd];
                for (cj, &mj) in c.iter_mut().zip(mr) {
                    *cj = *cj + wt * mj;
                }
            }
        }
        let value = Tensor::new(vec![b, hd], ctx)?;
        let rg = self.rg(&[query, memory]);
        self.push(
            "attention",
            value,
            Op::Attention {
                query,
                memory,
                lengths: lengths.to_vec(),
                weights,
            },
            rg,
        )
    }

    /// `Σ_i weights[i] · -log softmax(logits_i)[targets[i]]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Result<Var> {
        let t = self.value(logits);
        let (b, v) = t.dims2()?;
        if targets.len() != b || weights.len() != b || targets.iter().any(|&y| y >= v) {
            return Err(Error::dim("cross_entropy", format!("{b} rows, {} targets", targets.len())));
        }
        let mut probs = vec![S::zero(); b * v];
        let mut loss = S::zero();
        for row in 0..b {
            let lr = t.row(row);
            let lse = log_sum_exp(lr.iter().copied());
            for (p, &x) in probs[row * v..(row + 1) * v].iter_mut().zip(lr) {
                *p = (x - lse).exp();
            }
            loss = loss + weights[row] * (lse - lr[targets[row]]);
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Row-wise cosine similarity of two `m x d` matrices, shape `[m]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("cosine", ta, tb)?;
        let (m, _) = ta.dims2()?;
        let mut out = Vec::with_capacity(m);
        let mut norm_a = Vec::with_capacity(m);
        let mut norm_b = Vec::with_capacity(m);
        for row in 0..m {
            let (ra, rb) = (ta.row(row), tb.row(row));
            let na = ra.iter().map(|&x| x * x).sum::<S>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<S>().sqrt();
            if na == S::zero() || nb == S::zero() {
                return Err(Error::degenerate("cosine", format!("zero-norm vector in row {row}")));
            }
            let dot: S = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "cosine",
            Tensor::vector(out),
            Op::CosineRows { a, b, norm_a, norm_b },
            rg,
        )
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).len();
        let ra = self.reshape(a, &[1, d])?;
        let rb = self.reshape(b, &[1, self.value(b).len()])?;
        self.cosine_rows(ra, rb)
    }

    /// Row-wise `log softmax(scale · x)`.
    pub fn log_softmax_rows(&mut self, x: Var, scale: S) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            let xs = t.row(row);
            let lse = log_sum_exp(xs.iter().map(|&v| scale * v));
            out.extend(xs.iter().map(|&v| scale * v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("log_softmax", value, Op::LogSoftmaxRows { x, scale }, rg)
    }

    /// Row-wise `exp(λ·xᵢ) / Σⱼ exp(λ·xⱼ)` with max subtraction.
    pub fn softmax_scaled(&mut self, x: Var, lambda: S) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if c == 0 {
            return Err(Error::dim("softmax_scaled", "empty score vector"));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            let xs = t.row(row);
            let mx = xs.iter().map(|&v| lambda * v).fold(S::neg_infinity(), S::max);
            let start = out.len();
            out.extend(xs.iter().map(|&v| (lambda * v - mx).exp()));
            let total: S = out[start..].iter().copied().sum();
            for p in out[start..].iter_mut() {
                *p = *p / total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax_scaled", value, Op::SoftmaxRows { x, scale: lambda }, rg)
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.len() {
            return Err(Error::dim("weighted_sum", format!("{} weights for {:?}", weights.len(), t.shape())));
        }
        let s: S = t.data().iter().zip(weights).map(|(&v, &w)| v * w).sum();
        let rg = self.rg(&[x]);
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), S::one()));
        let mut visited = 0;
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { leaf_grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<S>>],
        v: Var,
        f: impl FnOnce(&mut [S]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("checked in forward");
                let n = tb.dims2().expect("checked in forward").1;
                // dA = dC · Bᵀ
                self.accumulate_with(grads, *a, |da| {
                    S::gemm(m, n, k, S::one(), gd, (n as isize, 1), tb.data(), (1, n as isize), S::one(), da, (k as isize, 1));
                });
                // dB = Aᵀ · dC
                self.accumulate_with(grads, *b, |db| {
                    S::gemm(k, m, n, S::one(), ta.data(), (1, k as isize), gd, (n as isize, 1), S::one(), db, (n as isize, 1));
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *b, |db| {
                    for (d, &x) in db.iter_mut().zip(gd) {
                        *d = *d - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(gd).zip(tb) {
                        *d = *d + x * y;
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(gd).zip(ta) {
                        *d = *d + x * y;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let c = self.value(*bias).len();
                self.accumulate_with(grads, *bias, |db| {
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate_with(grads, *a, |da| {
                    for (d, &x) in da.iter_mut().zip(gd) {
                        *d = *d + x * *c;
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate_with(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                        *d = *d + x * y * (S::one() - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate_with(grads, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                        *d = *d + x * (S::one() - y * y);
                    }
                });
            }
            Op::Max(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        if ta[j] >= tb[j] {
                            *d = *d + gd[j];
                        }
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for (j, d) in db.iter_mut().enumerate() {
                        if ta[j] < tb[j] {
                            *d = *d + gd[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate_with(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d = *d + s;
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate_with(grads, *a, |da| {
                    for (d, &x) in da.iter_mut().zip(gd) {
                        *d = *d + x;
                    }
                });
            }
            Op::Embedding { table: src, ids: idx } | Op::GatherRows { src, idx } => {
                let d = out.dims2().expect("matrix").1;
                self.accumulate_with(grads, *src, |ds| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (dst, &v) in ds[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *dst = *dst + v;
                        }
                    }
                });
            }
            Op::Gru {
                gx,
                gh,
                h,
                active,
                r,
                z,
                n,
            } => {
                let (b, hd) = out.dims2().expect("matrix");
                let hv = self.value(*h).data();
                let ghv = self.value(*gh).data();
                let mut dgx = vec![S::zero(); b * 3 * hd];
                let mut dgh = vec![S::zero(); b * 3 * hd];
                let mut dh = vec![S::zero(); b * hd];
                for row in 0..b {
                    let gbase = row * 3 * hd;
                    for j in 0..hd {
                        let o = row * hd + j;
                        let dout = gd[o];
                        if !active[row] {
                            dh[o] = dout;
                            continue;
                        }
                        let (rj, zj, nj) = (r[o], z[o], n[o]);
                        let dn = dout * (S::one() - zj);
                        let dz = dout * (hv[o] - nj);
                        dh[o] = dout * zj;
                        let dn_pre = dn * (S::one() - nj * nj);
                        let hn = ghv[gbase + 2 * hd + j];
                        let dr_pre = dn_pre * hn * rj * (S::one() - rj);
                        let dz_pre = dz * zj * (S::one() - zj);
                        dgx[gbase + j] = dr_pre;
                        dgh[gbase + j] = dr_pre;
                        dgx[gbase + hd + j] = dz_pre;
                        dgh[gbase + hd + j] = dz_pre;
                        dgx[gbase + 2 * hd + j] = dn_pre;
                        dgh[gbase + 2 * hd + j] = dn_pre * rj;
                    }
                }
                let shape3 = vec![b, 3 * hd];
                self.accumulate(grads, *gx, Tensor::new(shape3.clone(), dgx).expect("shape"));
                self.accumulate(grads, *gh, Tensor::new(shape3, dgh).expect("shape"));
                self.accumulate(grads, *h, Tensor::new(vec![b, hd], dh).expect("shape"));
            }
            Op::Stack(steps) => {
                let [b, l, hd] = *out.shape() else { unreachable!() };
                for (t, v) in steps.iter().enumerate() {
                    self.accumulate_with(grads, *v, |dv| {
                        for row in 0..b {
                            let src = (row * l + t) * hd;
                            for (d, &x) in dv[row * hd..(row + 1) * hd].iter_mut().zip(&gd[src..src + hd]) {
                                *d = *d + x;
                            }
                        }
                    });
                }
            }
            Op::MaxOverTime { memory, argmax } => {
                self.accumulate_with(grads, *memory, |dm| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dm[src] = dm[src] + gd[o];
                    }
                });
            }
            Op::Attention {
                query,
                memory,
                lengths,
                weights,
            } => {
                let [b, l, hd] = *self.value(*memory).shape() else { unreachable!() };
                let (q, m) = (self.value(*query).data(), self.value(*memory).data());
                let mut dq = vec![S::zero(); b * hd];
                let mut dm = vec![S::zero(); b * l * hd];
                for row in 0..b {
                    let dc = &gd[row * hd..(row + 1) * hd];
                    let w = &weights[row * l..(row + 1) * l];
                    let len = lengths[row];
                    let mut da = vec![S::zero(); len];
                    for t in 0..len {
                        let base = (row * l + t) * hd;
                        da[t] = dc.iter().zip(&m[base..base + hd]).map(|(&x, &y)| x * y).sum();
                        for j in 0..hd {
                            dm[base + j] = dm[base + j] + w[t] * dc[j];
                        }
                    }
                    let mean: S = (0..len).map(|t| w[t] * da[t]).sum();
                    for t in 0..len {
                        let ds = w[t] * (da[t] - mean);
                        let base = (row * l + t) * hd;
                        for j in 0..hd {
                            dq[row * hd + j] = dq[row * hd + j] + ds * m[base + j];
                            dm[base + j] = dm[base + j] + ds * q[row * hd + j];
                        }
                    }
                }
                self.accumulate(grads, *query, Tensor::new(vec![b, hd], dq).expect("shape"));
                self.accumulate(grads, *memory, Tensor::new(vec![b, l, hd], dm).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).dims2().expect("matrix").1;
                let s = gd[0];
                self.accumulate_with(grads, *logits, |dl| {
                    for (row, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = s * w;
                        for c in 0..v {
                            let onehot = if c == y { S::one() } else { S::zero() };
                            dl[row * v + c] = dl[row * v + c] + scale * (probs[row * v + c] - onehot);
                        }
                    }
                });
            }
            Op::CosineRows { a, b, norm_a, norm_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, d) = ta.dims2().expect("matrix");
                let cos = out.data();
                let mut da = vec![S::zero(); m * d];
                let mut db = vec![S::zero(); m * d];
                for row in 0..m {
                    let (ra, rb) = (ta.row(row), tb.row(row));
                    let (na, nb, c, go) = (norm_a[row], norm_b[row], cos[row], gd[row]);
                    for j in 0..d {
                        da[row * d + j] = go * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        db[row * d + j] = go * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).expect("shape"));
            }
            Op::LogSoftmaxRows { x, scale } => {
                let (r, c) = out.dims2().expect("matrix");
                self.accumulate_with(grads, *x, |dx| {
                    for row in 0..r {
                        let gs = &gd[row * c..(row + 1) * c];
                        let total: S = gs.iter().copied().sum();
                        for j in 0..c {
                            let p = out.data()[row * c + j].exp();
                            dx[row * c + j] = dx[row * c + j] + *scale * (gs[j] - p * total);
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, scale } => {
                let (r, c) = out.dims2().expect("matrix");
                self.accumulate_with(grads, *x, |dx| {
                    for row in 0..r {
                        let ps = &out.data()[row * c..(row + 1) * c];
                        let gs = &gd[row * c..(row + 1) * c];
                        let inner: S = ps.iter().zip(gs).map(|(&p, &g)| p * g).sum();
                        for j in 0..c {
                            dx[row * c + j] = dx[row * c + j] + *scale * ps[j] * (gs[j] - inner);
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |dx| {
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d = *d + s * w;
                    }
                });
            }
        }
    }
}

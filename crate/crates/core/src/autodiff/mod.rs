//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every kernel applied during the forward pass. Nodes are
//! appended in execution order, so the node list is already a topological
//! order of the computation DAG; [`Tape::backward`] walks it once in reverse.
//!
//! All reductions sum left to right in index order. Nothing is reassociated,
//! so identical inputs give bitwise-identical outputs and gradients.

mod gradcheck;
mod kernels;

use std::borrow::Cow;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Layer-norm epsilon, added to the variance inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis a reduction collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `[m × n] → [1 × n]`.
    Rows,
    /// Collapse columns: `[m × n] → [m × 1]`.
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
    },
    MaskedMean {
        x: Var,
        axis: Axis,
        mask: Vec<bool>,
        count: usize,
    },
    MaskedMax {
        x: Var,
        axis: Axis,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Transpose(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

struct Node<'p, T: Element> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and replays it backward.
///
/// Leaves may borrow parameter tensors for `'p` to avoid copying weight
/// matrices into every per-document tape.
pub struct Tape<'p, T: Element> {
    nodes: Vec<Node<'p, T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<'p, T: Element> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Element> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Returns `None` before backward has run or when `v` does not require a
    /// gradient; a requires-grad node the loss never reached gets zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        })
    }

    /// Borrowed gradient buffer; `None` if unreached or not tracked.
    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.as_ref()?[v.0].as_deref()
    }

    /// Clears gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    fn push_raw(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, kernel: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { kernel });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(Cow::Owned(value), op, requires_grad))
    }

    fn dims2(&self, kernel: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| Error::shape(kernel, t.shape(), &[0, 0]))
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(kernel, sa, sb));
        }
        Ok(())
    }

    // ---- forward kernels ------------------------------------------------

    /// `[m × k] · [k × n] → [m × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1 × n]` (or `[n]`) bias to every row of `[m × n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", x)?;
        let vb = self.value(bias);
        if vb.numel() != n || vb.shape().len() > 2 || (vb.shape().len() == 2 && vb.shape()[0] != 1) {
            return Err(Error::shape("add_bias", self.value(x).shape(), vb.shape()));
        }
        let b = vb.data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect())?;
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, kernel: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.push(kernel, t, op, &[x])
    }

    /// Gelu, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |a| if a > T::zero() { a } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |a| a.tanh(), Op::Tanh(x))
    }

    /// Row-wise softmax over the last dim, subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax where columns with `key_mask[j] == false` get probability
    /// exactly zero (equivalent to an additive −∞ bias on those logits).
    pub fn masked_softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2("softmax", x)?;
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::shape("softmax", &[m, n], &[mask.len()]));
            }
            if !mask.iter().any(|&b| b) {
                return Err(Error::invalid("softmax: every key is masked"));
            }
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            kernels::softmax_row(&mut out[r * n..(r + 1) * n], key_mask);
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Layer norm over the last dim with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return Err(Error::shape("layer_norm", &[m, n], g.shape()));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Gathers rows of a `[V × H]` table: `ids → [len × H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding: id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(tv.row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), h], out)?;
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// 1-D convolution along the row (sequence) axis with zero same-padding.
    ///
    /// `x: [T × Cin]`, `weight: [K × Cin × Cout]` with odd `K`,
    /// `bias: [1 × Cout]` → `[T × Cout]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (len, cin) = self.dims2("conv1d", x)?;
        let w = self.value(weight);
        let (k, wc, cout) = match w.shape() {
            [k, c, o] => (*k, *c, *o),
            s => return Err(Error::shape("conv1d", &[len, cin], s)),
        };
        if wc != cin || k % 2 == 0 || self.value(bias).numel() != cout {
            return Err(Error::shape("conv1d", &[len, cin], w.shape()));
        }
        let mut out = vec![T::zero(); len * cout];
        kernels::conv1d_forward(
            self.value(x).data(),
            w.data(),
            self.value(bias).data(),
            &mut out,
            len,
            cin,
            cout,
            k,
        );
        let t = Tensor::new(vec![len, cout], out)?;
        self.push("conv1d", t, Op::Conv1d { x, weight, bias }, &[x, weight, bias])
    }

    /// Mean over the entries of `axis` whose mask is set.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool], axis: Axis) -> Result<Var> {
        let (m, n) = self.dims2("masked_mean", x)?;
        let along = if axis == Axis::Rows { m } else { n };
        if mask.len() != along {
            return Err(Error::shape("masked_mean", &[m, n], &[mask.len()]));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::invalid("masked_mean: mask selects nothing"));
        }
        let xs = self.value(x).data();
        let cf = T::from_f64(count as f64);
        let (shape, out) = match axis {
            Axis::Rows => {
                let mut acc = vec![T::zero(); n];
                for r in (0..m).filter(|&r| mask[r]) {
                    for (a, &v) in acc.iter_mut().zip(&xs[r * n..(r + 1) * n]) {
                        *a = *a + v;
                    }
                }
                (vec![1, n], acc.into_iter().map(|a| a / cf).collect())
            }
            Axis::Cols => {
                let mut acc = vec![T::zero(); m];
                for (r, a) in acc.iter_mut().enumerate() {
                    for c in (0..n).filter(|&c| mask[c]) {
                        *a = *a + xs[r * n + c];
                    }
                }
                (vec![m, 1], acc.into_iter().map(|a| a / cf).collect())
            }
        };
        let t = Tensor::new(shape, out)?;
        self.push(
            "masked_mean",
            t,
            Op::MaskedMean {
                x,
                axis,
                mask: mask.to_vec(),
                count,
            },
            &[x],
        )
    }

    /// Max over the entries of `axis` whose mask is set; ties pick the
    /// lowest index.
    pub fn masked_max(&mut self, x: Var, mask: &[bool], axis: Axis) -> Result<Var> {
        let (m, n) = self.dims2("masked_max", x)?;
        let along = if axis == Axis::Rows { m } else { n };
        if mask.len() != along {
            return Err(Error::shape("masked_max", &[m, n], &[mask.len()]));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::invalid("masked_max: mask selects nothing"));
        }
        let xs = self.value(x).data();
        let (outer, shape) = match axis {
            Axis::Rows => (n, vec![1, n]),
            Axis::Cols => (m, vec![m, 1]),
        };
        let mut out = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best: Option<(usize, T)> = None;
            for i in (0..along).filter(|&i| mask[i]) {
                let v = match axis {
                    Axis::Rows => xs[i * n + o],
                    Axis::Cols => xs[o * n + i],
                };
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let (i, v) = best.expect("mask non-empty");
            out.push(v);
            argmax.push(i);
        }
        let t = Tensor::new(shape, out)?;
        self.push("masked_max", t, Op::MaskedMax { x, axis, argmax }, &[x])
    }

    /// Concatenates matrices: `Rows` stacks vertically, `Cols` side by side.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let (m0, n0) = self.dims2("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, n) = self.dims2("concat", p)?;
            let ok = match axis {
                Axis::Rows => n == n0,
                Axis::Cols => m == m0,
            };
            if !ok {
                return Err(Error::shape("concat", &[m0, n0], &[m, n]));
            }
            dims.push((m, n));
        }
        let (shape, data) = match axis {
            Axis::Rows => {
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * n0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                (vec![rows, n0], data)
            }
            Axis::Cols => {
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m0 * cols);
                for r in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                (vec![m0, cols], data)
            }
        };
        let t = Tensor::new(shape, data)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Half-open range `start..end` along `axis` (rows or columns).
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice", x)?;
        let limit = if axis == Axis::Rows { m } else { n };
        if start >= end || end > limit {
            return Err(Error::shape("slice", &[m, n], &[start, end]));
        }
        let v = self.value(x);
        let (shape, data) = match axis {
            Axis::Rows => (vec![end - start, n], v.data()[start * n..end * n].to_vec()),
            Axis::Cols => {
                let w = end - start;
                let mut data = Vec::with_capacity(m * w);
                for r in 0..m {
                    data.extend_from_slice(&v.row_slice(r)[start..end]);
                }
                (vec![m, w], data)
            }
        };
        let t = Tensor::new(shape, data)?;
        self.push("slice", t, Op::Slice { x, axis, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let out = kernels::transpose(self.value(x).data(), m, n);
        let t = Tensor::new(vec![n, m], out)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push("sum_all", Tensor::new(vec![1, 1], vec![s])?, Op::SumAll(x), &[x])
    }

    /// `−log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.numel();
        if n < 2 || lv.shape().len() > 2 || (lv.shape().len() == 2 && lv.shape()[0] != 1) {
            return Err(Error::shape("cross_entropy", lv.shape(), &[1, 2]));
        }
        if target >= n {
            return Err(Error::invalid(format!("cross_entropy: target {target} out of range for {n} classes")));
        }
        let mut probs = lv.data().to_vec();
        kernels::softmax_row(&mut probs, None);
        let loss = kernels::log_sum_exp(lv.data()) - lv.data()[target];
        let t = Tensor::new(vec![1, 1], vec![loss])?;
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every
    /// requires-grad node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = node.value.as_ref();
        // Lazily allocates the parent's gradient buffer and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let p = &nodes[v.0];
            if !p.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); p.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = out.dims2().unwrap().1;
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    let bt = kernels::transpose(bv, k, n);
                    kernels::matmul_acc(g, &bt, ga, m, n, k);
                });
                acc(*b, &mut |gb| kernels::matmul_tn_acc(av, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |ga| kernels::add_into(ga, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let (m, n) = out.dims2().unwrap();
                acc(*x, &mut |gx| kernels::add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for r in 0..m {
                        kernels::add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o = *o + gi * *c;
                }
            }),
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, &gi), &a) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gi * kernels::gelu_grad(a);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, &gi), &a) in gx.iter_mut().zip(g).zip(xv) {
                        if a > T::zero() {
                            *o = *o + gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o = *o + gi * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((o, &gi), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *o = *o + gi * (T::one() - y * y);
                }
            }),
            Op::Softmax(x) => {
                let (m, n) = out.dims2().unwrap();
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        let y = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = T::zero();
                        for (&gi, &yi) in gr.iter().zip(y) {
                            dot = dot + gi * yi;
                        }
                        for j in 0..n {
                            gx[r * n + j] = gx[r * n + j] + y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = out.dims2().unwrap();
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |gg| {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] = gg[j] + g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..m {
                        kernels::add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = T::from_f64(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            dxhat[j] = d;
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * n + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            let v = rstd[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
                            gx[r * n + j] = gx[r * n + j] + v;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let h = out.dims2().unwrap().1;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_into(&mut gt[id * h..(id + 1) * h], &g[r * h..(r + 1) * h]);
                    }
                });
            }
            Op::Conv1d { x, weight, bias } => {
                let (len, cin) = nodes[x.0].value.dims2().unwrap();
                let wt = &nodes[weight.0].value;
                let (k, cout) = (wt.shape()[0], wt.shape()[2]);
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| kernels::conv1d_grad_input(g, wt.data(), gx, len, cin, cout, k));
                acc(*weight, &mut |gw| kernels::conv1d_grad_weight(g, xv, gw, len, cin, cout, k));
                acc(*bias, &mut |gb| {
                    for t in 0..len {
                        kernels::add_into(gb, &g[t * cout..(t + 1) * cout]);
                    }
                });
            }
            Op::MaskedMean { x, axis, mask, count } => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                let cf = T::from_f64(*count as f64);
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            let (sel, gi) = match axis {
                                Axis::Rows => (mask[r], g[c]),
                                Axis::Cols => (mask[c], g[r]),
                            };
                            if sel {
                                gx[r * n + c] = gx[r * n + c] + gi / cf;
                            }
                        }
                    }
                });
            }
            Op::MaskedMax { x, axis, argmax } => {
                let n = nodes[x.0].value.dims2().unwrap().1;
                acc(*x, &mut |gx| {
                    for (o, &i) in argmax.iter().enumerate() {
                        let idx = match axis {
                            Axis::Rows => i * n + o,
                            Axis::Cols => o * n + i,
                        };
                        gx[idx] = gx[idx] + g[o];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (_, total_cols) = out.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let (pm, pn) = nodes[p.0].value.dims2().unwrap();
                    acc(*p, &mut |gp| match axis {
                        Axis::Rows => kernels::add_into(gp, &g[offset * pn..(offset + pm) * pn]),
                        Axis::Cols => {
                            for r in 0..pm {
                                let src = &g[r * total_cols + offset..r * total_cols + offset + pn];
                                kernels::add_into(&mut gp[r * pn..(r + 1) * pn], src);
                            }
                        }
                    });
                    offset += if *axis == Axis::Rows { pm } else { pn };
                }
            }
            Op::Slice { x, axis, start } => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                let (om, on) = out.dims2().unwrap();
                acc(*x, &mut |gx| match axis {
                    Axis::Rows => kernels::add_into(&mut gx[start * n..(start + om) * n], g),
                    Axis::Cols => {
                        for r in 0..m {
                            let dst = &mut gx[r * n + start..r * n + start + on];
                            kernels::add_into(dst, &g[r * on..(r + 1) * on]);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                acc(*x, &mut |gx| {
                    let gt = kernels::transpose(g, n, m);
                    kernels::add_into(gx, &gt);
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |gl| {
                for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let d = if j == *target { p - T::one() } else { p };
                    *o = *o + g[0] * d;
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests;

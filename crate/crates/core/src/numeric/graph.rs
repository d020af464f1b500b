//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node that depends on a parameter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::functional::{self, MaskLayout};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    SwapMiddle(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Tensor<T>,
        count: usize,
    },
    BiKl {
        p: Var,
        q: Var,
        parts: Box<functional::KlParts<T>>,
        include: Vec<bool>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let err = || Error::shape("matmul", a.shape(), b.shape());
    let (ar, br) = (a.shape().len(), b.shape().len());
    if ar < 2 || br < 2 {
        return Err(err());
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (bk, n) = if trans_b {
        (b.shape()[br - 1], b.shape()[br - 2])
    } else {
        (b.shape()[br - 2], b.shape()[br - 1])
    };
    if k != bk {
        return Err(err());
    }
    let batch = &a.shape()[..ar - 2];
    let mut shape = batch.to_vec();
    shape.extend([m, n]);
    let batches: usize = batch.iter().product();
    let mut out = Tensor::zeros(&shape);
    if br == 2 {
        T::gemm(
            batches * m,
            k,
            n,
            a.data(),
            false,
            b.data(),
            trans_b,
            T::zero(),
            out.data_mut(),
        );
    } else if &b.shape()[..br - 2] == batch {
        for i in 0..batches {
            T::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                trans_b,
                T::zero(),
                &mut out.data_mut()[i * m * n..],
            );
        }
    } else {
        return Err(err());
    }
    Ok(out)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// See [`Tensor::matmul`]; `trans_b` multiplies by the transpose of the
    /// last two dimensions of `b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        add_into(out.data_mut(), vb.data());
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.len() != d {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            add_into(row, vb.data());
        }
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(functional::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, normed, rstd) = functional::layer_norm_with_stats(
            self.value(x),
            self.value(gain),
            self.value(bias),
            T::of(functional::LAYER_NORM_EPS),
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Row-wise softmax of `x + mask`; the mask is a constant (no gradient).
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let out = functional::masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Inverted dropout. Identity when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            *o = *o * k;
        }
        self.push(out, Op::Dropout { x, keep }, &[x])
    }

    /// Rows of a `[rows, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_middle(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let &[a, b, c, d] = v.shape() else {
            return Err(Error::shape("swap_middle", v.shape(), &[4]));
        };
        let out = Tensor::new(&[a, c, b, d], swap_middle_data(v.data(), a, b, c, d))?;
        Ok(self.push(out, Op::SwapMiddle(x), &[x]))
    }

    /// Slice `[start, start + len)` along axis 1 of a `[B, T, D]` tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let &[b, t, d] = v.shape() else {
            return Err(Error::shape("narrow", v.shape(), &[start, len]));
        };
        if start + len > t {
            return Err(Error::shape("narrow", v.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(b * len * d);
        for i in 0..b {
            data.extend_from_slice(&v.data()[(i * t + start) * d..(i * t + start + len) * d]);
        }
        let out = Tensor::new(&[b, len, d], data)?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    /// Joins two `[B, T, D]` tensors along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[n, ta, d], &[nb, tb, db]) = (av.shape(), bv.shape()) else {
            return Err(Error::shape("concat", av.shape(), bv.shape()));
        };
        if n != nb || d != db {
            return Err(Error::shape("concat", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ta * d..(i + 1) * ta * d]);
            data.extend_from_slice(&bv.data()[i * tb * d..(i + 1) * tb * d]);
        }
        let out = Tensor::new(&[n, ta + tb, d], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Mean cross-entropy over rows of `logits` (viewed as `[rows, V]`)
    /// whose label is present.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let (loss, probs, count) = functional::cross_entropy_with_probs(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Symmetric KL between row-wise softmaxes, averaged over included rows.
    /// Gradients flow to both arguments.
    pub fn bidirectional_kl(&mut self, p: Var, q: Var, include: &[bool]) -> Result<Var> {
        let parts = functional::bidirectional_kl_parts(self.value(p), self.value(q), Some(include))?;
        Ok(self.push(
            Tensor::scalar(parts.value),
            Op::BiKl {
                p,
                q,
                parts: Box::new(parts),
                include: include.to_vec(),
            },
            &[p, q],
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes, summed left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(Error::shape("weighted_sum", val.shape(), &[]));
            }
            total = total + w * val.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[]));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())))
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, g, grads),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.accum(grads, v) {
                        add_into(ga.data_mut(), g.data());
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx.data_mut(), g.data());
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for row in g.rows() {
                        add_into(gb.data_mut(), row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (d, &s) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + s * *factor;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &s), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d = *d + s * functional::gelu_derivative(xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = g.last_dim();
                let gamma = self.value(*gain).data().to_vec();
                if let Some(gg) = self.accum(grads, *gain) {
                    for (row, nrow) in g.rows().zip(normed.chunks(d)) {
                        for j in 0..d {
                            gg.data_mut()[j] = gg.data_mut()[j] + row[j] * nrow[j];
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for row in g.rows() {
                        add_into(gb.data_mut(), row);
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    let dn = T::of(d as f64);
                    for (r, (row, nrow)) in g.rows().zip(normed.chunks(d)).enumerate() {
                        let mut mean_g = T::zero();
                        let mut mean_gn = T::zero();
                        for j in 0..d {
                            let gy = row[j] * gamma[j];
                            mean_g = mean_g + gy;
                            mean_gn = mean_gn + gy * nrow[j];
                        }
                        mean_g = mean_g / dn;
                        mean_gn = mean_gn / dn;
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let gy = row[j] * gamma[j];
                            out[j] = out[j] + rstd[r] * (gy - mean_g - nrow[j] * mean_gn);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                if let Some(gx) = self.accum(grads, *x) {
                    for (r, (yrow, grow)) in y.rows().zip(g.rows()).enumerate() {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &s), &k) in gx.data_mut().iter_mut().zip(g.data()).zip(keep) {
                        *d = *d + s * k;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.accum(grads, *table) {
                    let d = gt.last_dim();
                    for (row, &id) in g.rows().zip(ids) {
                        add_into(&mut gt.data_mut()[id * d..(id + 1) * d], row);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx.data_mut(), g.data());
                }
            }
            Op::SwapMiddle(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    let &[a, c, b, d] = g.shape() else { unreachable!() };
                    add_into(gx.data_mut(), &swap_middle_data(g.data(), a, c, b, d));
                }
            }
            Op::Narrow { x, start } => {
                if let Some(gx) = self.accum(grads, *x) {
                    let &[b, len, d] = g.shape() else { unreachable!() };
                    let t = gx.shape()[1];
                    for i in 0..b {
                        let dst = (i * t + start) * d;
                        add_into(
                            &mut gx.data_mut()[dst..dst + len * d],
                            &g.data()[i * len * d..(i + 1) * len * d],
                        );
                    }
                }
            }
            Op::Concat(a, b) => {
                let &[n, t, d] = g.shape() else { unreachable!() };
                let ta = self.value(*a).shape()[1];
                for (v, start, len) in [(*a, 0, ta), (*b, ta, t - ta)] {
                    if let Some(gv) = self.accum(grads, v) {
                        for i in 0..n {
                            let src = (i * t + start) * d;
                            add_into(
                                &mut gv.data_mut()[i * len * d..(i + 1) * len * d],
                                &g.data()[src..src + len * d],
                            );
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if let Some(gl) = self.accum(grads, *logits) {
                    let v = probs.last_dim();
                    let s = g.item() / T::of(*count as f64);
                    for (r, label) in labels.iter().enumerate() {
                        let Some(label) = *label else { continue };
                        let out = &mut gl.data_mut()[r * v..(r + 1) * v];
                        for (j, (o, &p)) in out.iter_mut().zip(probs.row(r)).enumerate() {
                            let target = if j == label { T::one() } else { T::zero() };
                            *o = *o + s * (p - target);
                        }
                    }
                }
            }
            Op::BiKl { p, q, parts, include } => {
                if parts.count == 0 {
                    return Ok(());
                }
                let v = self.value(*p).last_dim();
                let s = g.item() * T::of(0.5) / T::of(parts.count as f64);
                // d/dp_j = ½[P_j (logP_j − logQ_j − KL(P‖Q)) + P_j − Q_j], symmetric for q.
                for (target, first) in [(*p, true), (*q, false)] {
                    let Some(gt) = self.accum(grads, target) else { continue };
                    for (r, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        let out = &mut gt.data_mut()[r * v..(r + 1) * v];
                        for (j, o) in out.iter_mut().enumerate() {
                            let k = r * v + j;
                            let (a, b, la, lb, kl) = if first {
                                (parts.p[k], parts.q[k], parts.logp[k], parts.logq[k], parts.kl_pq[r])
                            } else {
                                (parts.q[k], parts.p[k], parts.logq[k], parts.logp[k], parts.kl_qp[r])
                            };
                            *o = *o + s * (a * (la - lb - kl) + a - b);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(gv) = self.accum(grads, v) {
                        gv.data_mut()[0] = gv.data_mut()[0] + w * g.item();
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(&self, a: Var, b: Var, trans_b: bool, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let ar = av.shape().len();
        let br = bv.shape().len();
        let (m, k) = (av.shape()[ar - 2], av.shape()[ar - 1]);
        let n = g.last_dim();
        let batches: usize = av.shape()[..ar - 2].iter().product();
        let broadcast = br == 2;

        if let Some(ga) = self.accum(grads, a) {
            // dA = G · op(B)ᵀ
            if broadcast {
                T::gemm(
                    batches * m,
                    n,
                    k,
                    g.data(),
                    false,
                    bv.data(),
                    !trans_b,
                    T::one(),
                    ga.data_mut(),
                );
            } else {
                for i in 0..batches {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..],
                        false,
                        &bv.data()[i * k * n..],
                        !trans_b,
                        T::one(),
                        &mut ga.data_mut()[i * m * k..],
                    );
                }
            }
        }
        if let Some(gb) = self.accum(grads, b) {
            // dB = Aᵀ · G, or (dB)ᵀ = Gᵀ · A when B is used transposed.
            let rows = if broadcast { batches * m } else { m };
            let steps = if broadcast { 1 } else { batches };
            for i in 0..steps {
                let (ad, gd) = (&av.data()[i * m * k..], &g.data()[i * m * n..]);
                let out = &mut gb.data_mut()[i * k * n..];
                if trans_b {
                    T::gemm(n, rows, k, gd, true, ad, false, T::one(), out);
                } else {
                    T::gemm(k, rows, n, ad, true, gd, false, T::one(), out);
                }
            }
        }
    }
}

fn swap_middle_data<T: Scalar>(src: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for l in 0..c {
                let s = ((i * b + j) * c + l) * d;
                let t = ((i * c + l) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

/// Exposed so callers can validate a mask against logits without running
/// the softmax.
pub fn check_mask<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    MaskLayout::new(logits, mask).map(|_| ())
}

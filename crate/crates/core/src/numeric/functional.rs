//! Forward kernels shared by the autodiff graph and plain tensor code.

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// How an additive mask lines up with the rows of a logits tensor.
///
/// The mask is `[Tk]`, `[Tq, Tk]` or `[B, Tq, Tk]`; logits are
/// `[B, ..., Tq, Tk]` (any number of middle dimensions, e.g. heads).
#[derive(Debug, Clone, Copy)]
pub(crate) struct MaskLayout {
    tq: usize,
    batches: usize,
    rows_per_batch: usize,
}

impl MaskLayout {
    pub(crate) fn new<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Self> {
        let tk = logits.last_dim();
        let ms = mask.shape();
        let (batches, tq) = match ms.len() {
            1 => (1, 1),
            2 => (1, ms[0]),
            3 => (ms[0], ms[1]),
            _ => return Err(Error::shape("masked_softmax", logits.shape(), ms)),
        };
        let rows = logits.len() / tk.max(1);
        if mask.last_dim() != tk || !rows.is_multiple_of(batches * tq) {
            return Err(Error::shape("masked_softmax", logits.shape(), ms));
        }
        if ms.len() >= 2 && logits.shape().len() >= 2 && logits.shape()[logits.shape().len() - 2] != tq {
            return Err(Error::shape("masked_softmax", logits.shape(), ms));
        }
        Ok(MaskLayout {
            tq,
            batches,
            rows_per_batch: rows / batches,
        })
    }

    pub(crate) fn mask_row(&self, row: usize) -> usize {
        (row / self.rows_per_batch) * self.tq + row % self.tq
    }

    fn mask_rows(&self) -> usize {
        self.batches * self.tq
    }
}

fn is_masked<T: Scalar>(v: T) -> bool {
    v <= T::mask_value() * T::of(0.5)
}

/// Row-wise `softmax(logits + mask)` over the last dimension.
///
/// Entries carrying the mask surrogate get weight exactly zero. A row with
/// every entry masked cannot be normalized and is an error.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let tk = logits.last_dim();
    let layout = mask.map(|m| MaskLayout::new(logits, m)).transpose()?;
    if let (Some(layout), Some(mask)) = (layout, mask) {
        for mr in 0..layout.mask_rows() {
            if mask.row(mr).iter().all(|&v| is_masked(v)) {
                return Err(Error::FullyMasked { row: mr });
            }
        }
    }
    let mut out = logits.clone();
    for (r, row) in out.data_mut().chunks_mut(tk.max(1)).enumerate() {
        if let (Some(layout), Some(mask)) = (layout, mask) {
            for (x, &m) in row.iter_mut().zip(mask.row(layout.mask_row(r))) {
                *x = *x + m;
            }
        }
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub(crate) fn log_softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_SCALE) * (x + T::of(GELU_COEF) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_SCALE) * (x + T::of(GELU_COEF) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_SCALE) * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// Layer normalization over the last dimension.
///
/// Returns the output plus the normalized input and reciprocal standard
/// deviation per row (needed for the backward pass).
pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let dn = T::of(d as f64);
    let mut out = x.clone();
    let mut normed = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(x.len() / d.max(1));
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, v) in row.iter_mut().enumerate() {
            let n = (*v - mean) * rstd;
            normed[r * d + j] = n;
            *v = n * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, normed, rstds))
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(out, _, _)| out)
}

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[Option<usize>]) -> Result<usize> {
    let v = logits.last_dim();
    let rows = logits.len() / v.max(1);
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut count = 0;
    for &label in labels.iter().flatten() {
        if label >= v {
            return Err(Error::OutOfRange {
                what: "label",
                index: label,
                size: v,
            });
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoTargets);
    }
    Ok(count)
}

/// Mean of `-log softmax(row)[label]` over rows whose label is present.
///
/// Also returns the softmax of every row (rows without a label included).
pub(crate) fn cross_entropy_with_probs<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[Option<usize>],
) -> Result<(T, Tensor<T>, usize)> {
    let count = check_labels(logits, labels)?;
    let v = logits.last_dim();
    let mut logp = logits.clone();
    let mut total = 0.0f64;
    for (r, row) in logp.data_mut().chunks_mut(v).enumerate() {
        let src = logits.row(r);
        log_softmax_into(src, row);
        if let Some(label) = labels[r] {
            total -= row[label].as_f64();
        }
        for x in row.iter_mut() {
            *x = x.exp();
        }
    }
    Ok((T::of(total / count as f64), logp, count))
}

/// Mean negative log-likelihood over rows with a label (`None` = ignored).
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[Option<usize>]) -> Result<T> {
    cross_entropy_with_probs(logits, labels).map(|(loss, _, _)| loss)
}

pub(crate) struct KlParts<T> {
    pub value: T,
    pub p: Vec<T>,
    pub q: Vec<T>,
    pub logp: Vec<T>,
    pub logq: Vec<T>,
    pub kl_pq: Vec<T>,
    pub kl_qp: Vec<T>,
    pub count: usize,
}

pub(crate) fn bidirectional_kl_parts<T: Scalar>(
    p_logits: &Tensor<T>,
    q_logits: &Tensor<T>,
    include: Option<&[bool]>,
) -> Result<KlParts<T>> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::shape("bidirectional_kl", p_logits.shape(), q_logits.shape()));
    }
    let v = p_logits.last_dim();
    let rows = p_logits.len() / v.max(1);
    if let Some(inc) = include {
        if inc.len() != rows {
            return Err(Error::shape("bidirectional_kl", p_logits.shape(), &[inc.len()]));
        }
    }
    let mut logp = vec![T::zero(); p_logits.len()];
    let mut logq = vec![T::zero(); q_logits.len()];
    let mut kl_pq = vec![T::zero(); rows];
    let mut kl_qp = vec![T::zero(); rows];
    let mut total = 0.0f64;
    let mut count = 0;
    for r in 0..rows {
        let span = r * v..(r + 1) * v;
        log_softmax_into(p_logits.row(r), &mut logp[span.clone()]);
        log_softmax_into(q_logits.row(r), &mut logq[span.clone()]);
        if include.is_some_and(|inc| !inc[r]) {
            continue;
        }
        let (mut a, mut b) = (T::zero(), T::zero());
        for j in span {
            let d = logp[j] - logq[j];
            a = a + logp[j].exp() * d;
            b = b - logq[j].exp() * d;
        }
        kl_pq[r] = a;
        kl_qp[r] = b;
        total += (T::of(0.5) * (a + b)).as_f64();
        count += 1;
    }
    let p = logp.iter().map(|x| x.exp()).collect();
    let q = logq.iter().map(|x| x.exp()).collect();
    let value = if count == 0 {
        T::zero()
    } else {
        T::of(total / count as f64)
    };
    Ok(KlParts {
        value,
        p,
        q,
        logp,
        logq,
        kl_pq,
        kl_qp,
        count,
    })
}

/// `½(KL(P‖Q) + KL(Q‖P))` averaged over rows, with `P`, `Q` the row-wise
/// softmax of the inputs. `include` selects rows (all rows when `None`).
pub fn bidirectional_kl<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>, include: Option<&[bool]>) -> Result<T> {
    bidirectional_kl_parts(p_logits, q_logits, include).map(|k| k.value)
}

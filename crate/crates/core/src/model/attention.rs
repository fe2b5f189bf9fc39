//! Scaled dot-product attention with key masking.
//!
//! Activations are row-major `rows x width` buffers where a sample's tokens
//! occupy `tokens` consecutive rows and head `h` owns columns
//! `h*head_dim..(h+1)*head_dim`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnShape {
    pub samples: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn probs_len(&self) -> usize {
        self.samples * self.heads * self.tokens * self.tokens
    }
}

/// Fills `probs` (`samples x heads x tokens x tokens`) and `out`.
///
/// Absent keys get probability exactly zero; `presence` is per row.
pub(crate) fn attention_forward<T: Scalar>(
    shape: AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    presence: &[bool],
    probs: &mut [T],
    out: &mut [T],
) {
    let AttnShape {
        samples,
        tokens: t,
        heads,
        head_dim: dh,
    } = shape;
    let w = shape.width();
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut scores = vec![T::zero(); t];
    for b in 0..samples {
        let base = b * t;
        let present = &presence[base..base + t];
        for h in 0..heads {
            let col = h * dh;
            let p_block = &mut probs[((b * heads + h) * t) * t..((b * heads + h) * t + t) * t];
            for i in 0..t {
                let qi = &q[(base + i) * w + col..(base + i) * w + col + dh];
                let mut max = T::neg_infinity();
                for j in 0..t {
                    if !present[j] {
                        continue;
                    }
                    let kj = &k[(base + j) * w + col..(base + j) * w + col + dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = T::zero();
                let row = &mut p_block[i * t..(i + 1) * t];
                for j in 0..t {
                    row[j] = if present[j] {
                        let e = (scores[j] - max).exp();
                        sum += e;
                        e
                    } else {
                        T::zero()
                    };
                }
                let inv = T::one() / sum;
                for p in row.iter_mut() {
                    *p *= inv;
                }
                let oi = &mut out[(base + i) * w + col..(base + i) * w + col + dh];
                oi.fill(T::zero());
                for j in 0..t {
                    let p = row[j];
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &v[(base + j) * w + col..(base + j) * w + col + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
}

/// Accumulates gradients of `q`, `k`, `v` given the upstream gradient `d_out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    shape: AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    d_q: &mut [T],
    d_k: &mut [T],
    d_v: &mut [T],
) {
    let AttnShape {
        samples,
        tokens: t,
        heads,
        head_dim: dh,
    } = shape;
    let w = shape.width();
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut d_p = vec![T::zero(); t];
    for b in 0..samples {
        let base = b * t;
        for h in 0..heads {
            let col = h * dh;
            let p_block = &probs[((b * heads + h) * t) * t..((b * heads + h) * t + t) * t];
            for i in 0..t {
                let row = &p_block[i * t..(i + 1) * t];
                let doi = &d_out[(base + i) * w + col..(base + i) * w + col + dh];
                let mut weighted = T::zero();
                for j in 0..t {
                    let p = row[j];
                    if p == T::zero() {
                        d_p[j] = T::zero();
                        continue;
                    }
                    let vj = &v[(base + j) * w + col..(base + j) * w + col + dh];
                    let g = dot(doi, vj);
                    d_p[j] = g;
                    weighted += p * g;
                    let dvj = &mut d_v[(base + j) * w + col..(base + j) * w + col + dh];
                    for (dv, &go) in dvj.iter_mut().zip(doi) {
                        *dv += p * go;
                    }
                }
                let qi_off = (base + i) * w + col;
                for j in 0..t {
                    let p = row[j];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (d_p[j] - weighted) * scale;
                    let kj_off = (base + j) * w + col;
                    let (qi, kj) = (&q[qi_off..qi_off + dh], &k[kj_off..kj_off + dh]);
                    for (dq, &x) in d_q[qi_off..qi_off + dh].iter_mut().zip(kj) {
                        *dq += ds * x;
                    }
                    for (dk, &x) in d_k[kj_off..kj_off + dh].iter_mut().zip(qi) {
                        *dk += ds * x;
                    }
                }
            }
        }
    }
}

/// Single-head attention `softmax(q k^T / sqrt(d_h)) v` over `t` tokens, with
/// absent tokens excluded as keys.
pub fn attention<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    presence: &[bool],
) -> Result<Array2<T>> {
    let (t, dh) = q.dim();
    if k.dim() != (t, dh) || v.dim() != (t, dh) || presence.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "attention inputs q {:?}, k {:?}, v {:?}, presence {}",
            q.dim(),
            k.dim(),
            v.dim(),
            presence.len()
        )));
    }
    if !presence.iter().any(|&p| p) {
        return Err(Error::InvalidArgument("no present tokens".into()));
    }
    let shape = AttnShape {
        samples: 1,
        tokens: t,
        heads: 1,
        head_dim: dh,
    };
    let (q, k, v) = (
        q.as_standard_layout(),
        k.as_standard_layout(),
        v.as_standard_layout(),
    );
    let mut probs = vec![T::zero(); shape.probs_len()];
    let mut out = vec![T::zero(); t * dh];
    attention_forward(
        shape,
        q.as_slice().expect("standard layout"),
        k.as_slice().expect("standard layout"),
        v.as_slice().expect("standard layout"),
        presence,
        &mut probs,
        &mut out,
    );
    Ok(Array2::from_shape_vec((t, dh), out).expect("shape"))
}

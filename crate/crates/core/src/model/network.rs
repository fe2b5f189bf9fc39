//! Forward pass, loss and backpropagation.
//!
//! A batch stacks the tokens of all samples row-wise: token `c` of sample
//! `b` is row `b * tokens + c`, and each row holds one spot's `g` genes
//! (a column of the expression block). Every encoder layer is pre-norm:
//!
//! ```text
//! x = x + W_o * MultiHeadAttention(LN_1(x))
//! x = x + FFN(LN_2(x)),   FFN(h) = W_2 * gelu(W_1 * h)
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::attention::{attention_backward, attention_forward, AttnShape};
use super::params::{LayerNormSlot, LinearSlot, ModelParameters};
use crate::error::{Error, Result};
use crate::masking::{mask_values, MaskSpec};
use crate::neighborhoods::{ExpressionBlock, TOKEN_RING};
use crate::scalar::{lit, Scalar};

const NORM_EPS: f64 = 1e-5;

/// Stacked network inputs and reconstruction targets.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub inputs: Array2<T>,
    pub targets: Array2<T>,
    pub presence: Vec<bool>,
    pub tokens: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn zeros(samples: usize, tokens: usize, genes: usize) -> Self {
        Batch {
            inputs: Array2::zeros((samples * tokens, genes)),
            targets: Array2::zeros((samples * tokens, genes)),
            presence: vec![false; samples * tokens],
            tokens,
        }
    }

    pub fn samples(&self) -> usize {
        self.presence.len() / self.tokens
    }

    /// Writes one sample from `g x tokens` masked input and target matrices.
    pub fn set_sample(
        &mut self,
        sample: usize,
        masked: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        presence: &[bool],
    ) {
        let base = sample * self.tokens;
        for c in 0..self.tokens {
            self.presence[base + c] = presence[c];
            for j in 0..masked.nrows() {
                self.inputs[[base + c, j]] = T::from_f64_lossy(masked[[j, c]]);
                self.targets[[base + c, j]] = T::from_f64_lossy(target[[j, c]]);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    norm_attn: NormCache<T>,
    h_attn: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<T>,
    mixed: Array2<T>,
    norm_ffn: NormCache<T>,
    h_ffn: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    layers: Vec<LayerCache<T>>,
    last_hidden: Array2<T>,
    /// Reconstruction, one row per token.
    pub output: Array2<T>,
}

fn linear<T: Scalar>(p: &ModelParameters<T>, slot: &LinearSlot, x: &Array2<T>) -> Array2<T> {
    let mut y = x.dot(&p.weight(slot));
    y += &p.vector(slot.bias, slot.fan_out);
    y
}

fn linear_backward<T: Scalar>(
    p: &ModelParameters<T>,
    grads: &mut ModelParameters<T>,
    slot: &LinearSlot,
    x: &Array2<T>,
    dy: &Array2<T>,
    need_input_grad: bool,
) -> Option<Array2<T>> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grads.weight_mut(slot));
    let mut db = grads.vector_mut(slot.bias, slot.fan_out);
    db += &dy.sum_axis(Axis(0));
    need_input_grad.then(|| dy.dot(&p.weight(slot).t()))
}

fn layer_norm<T: Scalar>(
    p: &ModelParameters<T>,
    slot: &LayerNormSlot,
    x: &Array2<T>,
) -> (Array2<T>, NormCache<T>) {
    let d = T::from_usize(slot.dim).expect("dim");
    let eps: T = lit(NORM_EPS);
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        *s = inv;
    }
    let mut y = &normalized * &p.vector(slot.gain, slot.dim);
    y += &p.vector(slot.bias, slot.dim);
    (
        y,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

fn layer_norm_backward<T: Scalar>(
    p: &ModelParameters<T>,
    grads: &mut ModelParameters<T>,
    slot: &LayerNormSlot,
    cache: &NormCache<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    {
        let mut dg = grads.vector_mut(slot.gain, slot.dim);
        dg += &(dy * &cache.normalized).sum_axis(Axis(0));
    }
    {
        let mut db = grads.vector_mut(slot.bias, slot.dim);
        db += &dy.sum_axis(Axis(0));
    }
    let d = T::from_usize(slot.dim).expect("dim");
    let mut dx = dy * &p.vector(slot.gain, slot.dim);
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.normalized.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / d;
        for (v, &xh) in row.iter_mut().zip(xhat) {
            *v = inv * (*v - mean_d - xh * mean_dx);
        }
    }
    dx
}

/// Tanh-approximated GELU, written as `z * sigmoid(2u)` with
/// `u = sqrt(2/pi) * (z + 0.044715 z^3)`, which equals `0.5 z (1 + tanh(u))`.
fn gelu<T: Scalar>(z: T) -> T {
    z * gelu_gate(z)
}

fn gelu_gate<T: Scalar>(z: T) -> T {
    let c: T = lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let a: T = lit(0.044715);
    T::one() / (T::one() + (-(c * (z + a * z * z * z))).exp())
}

fn gelu_grad<T: Scalar>(z: T) -> T {
    let c: T = lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let a: T = lit(0.044715);
    let three: T = lit(3.0);
    let s = gelu_gate(z);
    s + z * s * (T::one() - s) * c * (T::one() + three * a * z * z)
}

fn check_finite<T: Scalar>(x: &Array2<T>, what: impl FnOnce() -> String) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

impl<T: Scalar> ModelParameters<T> {
    fn attn_shape(&self, batch: &Batch<T>) -> AttnShape {
        let c = self.config();
        AttnShape {
            samples: batch.samples(),
            tokens: batch.tokens,
            heads: c.num_heads,
            head_dim: c.head_dim(),
        }
    }

    /// Runs the network on a batch and keeps the activations.
    pub fn forward_batch(&self, batch: &Batch<T>) -> Result<ForwardCache<T>> {
        let config = self.config();
        if batch.inputs.ncols() != config.genes {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} genes, input has {}",
                config.genes,
                batch.inputs.ncols()
            )));
        }
        if batch.tokens == 0 || !batch.presence.len().is_multiple_of(batch.tokens) {
            return Err(Error::ShapeMismatch("ragged token batch".into()));
        }
        let layout = self.layout();
        let mut x = linear(self, &layout.adapter_in, &batch.inputs);
        if let Some(off) = layout.ring_embedding {
            let d = config.d_k;
            for (r, mut row) in x.rows_mut().into_iter().enumerate() {
                let ring = TOKEN_RING[(r % batch.tokens).min(TOKEN_RING.len() - 1)];
                row += &self.vector(off + ring * d, d);
            }
        }
        check_finite(&x, || "input adapter output".into())?;

        let shape = self.attn_shape(batch);
        let mut layers = Vec::with_capacity(layout.layers.len());
        for (l, slots) in layout.layers.iter().enumerate() {
            let (h_attn, norm_attn) = layer_norm(self, &slots.norm_attn, &x);
            let q = linear(self, &slots.query, &h_attn);
            let k = linear(self, &slots.key, &h_attn);
            let v = linear(self, &slots.value, &h_attn);
            let mut probs = vec![T::zero(); shape.probs_len()];
            let mut mixed = Array2::zeros(q.dim());
            attention_forward(
                shape,
                q.as_slice().expect("standard layout"),
                k.as_slice().expect("standard layout"),
                v.as_slice().expect("standard layout"),
                &batch.presence,
                &mut probs,
                mixed.as_slice_mut().expect("standard layout"),
            );
            x += &linear(self, &slots.output, &mixed);

            let (h_ffn, norm_ffn) = layer_norm(self, &slots.norm_ffn, &x);
            let pre_act = linear(self, &slots.ffn_in, &h_ffn);
            let act = pre_act.mapv(gelu);
            x += &linear(self, &slots.ffn_out, &act);
            check_finite(&x, || format!("encoder layer {l} output"))?;

            layers.push(LayerCache {
                norm_attn,
                h_attn,
                q,
                k,
                v,
                probs,
                mixed,
                norm_ffn,
                h_ffn,
                pre_act,
                act,
            });
        }
        let output = linear(self, &layout.adapter_out, &x);
        check_finite(&output, || "output adapter".into())?;
        Ok(ForwardCache {
            layers,
            last_hidden: x,
            output,
        })
    }

    /// Per-sample mean squared error over present tokens, and its gradient
    /// with respect to the output (scaled by `scale`).
    fn output_loss(&self, batch: &Batch<T>, output: &Array2<T>, scale: T) -> (Vec<f64>, Array2<T>) {
        let g = output.ncols();
        let two: T = lit(2.0);
        let mut losses = Vec::with_capacity(batch.samples());
        let mut d_out = Array2::zeros(output.dim());
        for b in 0..batch.samples() {
            let rows = b * batch.tokens..(b + 1) * batch.tokens;
            let present = batch.presence[rows.clone()].iter().filter(|&&p| p).count();
            let denom = (present * g) as f64;
            let mut sum = 0.0;
            let coef = two * scale / T::from_f64_lossy(denom);
            for r in rows {
                if !batch.presence[r] {
                    continue;
                }
                for j in 0..g {
                    let diff = output[[r, j]] - batch.targets[[r, j]];
                    sum += diff.to_f64_lossy().powi(2);
                    d_out[[r, j]] = coef * diff;
                }
            }
            losses.push(sum / denom);
        }
        (losses, d_out)
    }

    /// Sum of per-sample losses and `scale` times the gradient of that sum.
    pub fn batch_gradients(
        &self,
        batch: &Batch<T>,
        scale: T,
    ) -> Result<(Vec<f64>, ModelParameters<T>)> {
        let cache = self.forward_batch(batch)?;
        let (losses, d_out) = self.output_loss(batch, &cache.output, scale);
        let layout = self.layout();
        let mut grads = self.zeros_like();
        let shape = self.attn_shape(batch);

        let mut dx = linear_backward(
            self,
            &mut grads,
            &layout.adapter_out,
            &cache.last_hidden,
            &d_out,
            true,
        )
        .expect("input grad");
        for (slots, lc) in layout.layers.iter().zip(&cache.layers).rev() {
            let d_act = linear_backward(self, &mut grads, &slots.ffn_out, &lc.act, &dx, true)
                .expect("input grad");
            let mut d_pre = d_act;
            ndarray::Zip::from(&mut d_pre)
                .and(&lc.pre_act)
                .for_each(|d, &z| *d *= gelu_grad(z));
            let d_h = linear_backward(self, &mut grads, &slots.ffn_in, &lc.h_ffn, &d_pre, true)
                .expect("input grad");
            dx += &layer_norm_backward(self, &mut grads, &slots.norm_ffn, &lc.norm_ffn, &d_h);

            let d_mixed = linear_backward(self, &mut grads, &slots.output, &lc.mixed, &dx, true)
                .expect("input grad");
            let mut d_q = Array2::zeros(lc.q.dim());
            let mut d_k = Array2::zeros(lc.k.dim());
            let mut d_v = Array2::zeros(lc.v.dim());
            attention_backward(
                shape,
                lc.q.as_slice().expect("standard layout"),
                lc.k.as_slice().expect("standard layout"),
                lc.v.as_slice().expect("standard layout"),
                &lc.probs,
                d_mixed.as_slice().expect("standard layout"),
                d_q.as_slice_mut().expect("standard layout"),
                d_k.as_slice_mut().expect("standard layout"),
                d_v.as_slice_mut().expect("standard layout"),
            );
            let mut d_h = linear_backward(self, &mut grads, &slots.query, &lc.h_attn, &d_q, true)
                .expect("input grad");
            d_h += &linear_backward(self, &mut grads, &slots.key, &lc.h_attn, &d_k, true)
                .expect("input grad");
            d_h += &linear_backward(self, &mut grads, &slots.value, &lc.h_attn, &d_v, true)
                .expect("input grad");
            dx += &layer_norm_backward(self, &mut grads, &slots.norm_attn, &lc.norm_attn, &d_h);
        }
        if let Some(off) = layout.ring_embedding {
            let d = self.config().d_k;
            for (r, row) in dx.rows().into_iter().enumerate() {
                let ring = TOKEN_RING[(r % batch.tokens).min(TOKEN_RING.len() - 1)];
                let mut e = grads.vector_mut(off + ring * d, d);
                e += &row;
            }
        }
        linear_backward(
            self,
            &mut grads,
            &layout.adapter_in,
            &batch.inputs,
            &dx,
            false,
        );
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((losses, grads))
    }
}

fn single_batch<T: Scalar>(
    genes: usize,
    masked: ArrayView2<'_, T>,
    target: ArrayView2<'_, T>,
    presence: &[bool],
) -> Result<Batch<T>> {
    let (g, t) = masked.dim();
    if g != genes {
        return Err(Error::ShapeMismatch(format!(
            "model expects {genes} genes, input has {g}"
        )));
    }
    if target.dim() != (g, t) || presence.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "input {:?}, target {:?}, presence {}",
            masked.dim(),
            target.dim(),
            presence.len()
        )));
    }
    if !presence.first().copied().unwrap_or(false) {
        return Err(Error::InvalidArgument(
            "the centre token must be present".into(),
        ));
    }
    Ok(Batch {
        inputs: masked.t().to_owned(),
        targets: target.t().to_owned(),
        presence: presence.to_vec(),
        tokens: t,
    })
}

/// Reconstruction of a masked `g x t` block: input adapter, encoder, output adapter.
pub fn forward<T: Scalar>(
    params: &ModelParameters<T>,
    masked: ArrayView2<'_, T>,
    presence: &[bool],
) -> Result<Array2<T>> {
    let batch = single_batch(params.config().genes, masked, masked, presence)?;
    let cache = params.forward_batch(&batch)?;
    Ok(cache.output.t().to_owned())
}

/// Mean squared error over the present columns of two `g x t` matrices.
pub fn loss<T: Scalar>(
    target: ArrayView2<'_, T>,
    recon: ArrayView2<'_, T>,
    presence: &[bool],
) -> Result<f64> {
    if target.dim() != recon.dim() || presence.len() != target.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs {:?} and {:?}, presence {}",
            target.dim(),
            recon.dim(),
            presence.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (c, &present) in presence.iter().enumerate() {
        if !present {
            continue;
        }
        for (a, b) in target.column(c).iter().zip(recon.column(c)) {
            sum += (*a - *b).to_f64_lossy().powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no present columns".into()));
    }
    Ok(sum / count as f64)
}

/// Loss of one block and its exact gradient with respect to every parameter.
pub fn gradients<T: Scalar>(
    params: &ModelParameters<T>,
    target: ArrayView2<'_, T>,
    masked: ArrayView2<'_, T>,
    presence: &[bool],
) -> Result<(f64, ModelParameters<T>)> {
    let batch = single_batch(params.config().genes, masked, target, presence)?;
    let (losses, grads) = params.batch_gradients(&batch, T::one())?;
    Ok((losses[0], grads))
}

/// Completed centre vector: observed entries kept by the mask are returned
/// unchanged, masked ones take the model's reconstruction.
pub fn complete_spot<T: Scalar>(
    block: &ExpressionBlock,
    mask: &MaskSpec,
    params: &ModelParameters<T>,
) -> Result<Array1<f64>> {
    let masked = mask_values(&block.values, mask)?;
    let center_kept = mask.keep.column(0);
    let mut out = block.values.column(0).to_owned();
    if center_kept.iter().all(|&k| k) {
        return Ok(out);
    }
    let masked = masked.mapv(T::from_f64_lossy);
    let recon = forward(params, masked.view(), &block.presence)?;
    for (j, &kept) in center_kept.iter().enumerate() {
        if !kept {
            out[j] = recon[[j, 0]].to_f64_lossy();
        }
    }
    Ok(out)
}

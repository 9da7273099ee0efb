//! Forward and backward passes of the building blocks. Activations are
//! `frames x channels` matrices throughout.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Attention, Conv1d, LayerNorm, Linear};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn linear(x: ArrayView2<'_, f64>, l: &Linear) -> Array2<f64> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    l: &Linear,
    dy: ArrayView2<'_, f64>,
    grad: &mut Linear,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct ConvTrace {
    patches: Array2<f64>,
    pre_activation: Array2<f64>,
    input_rows: usize,
}

/// Number of output frames of a strided convolution.
pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel).then(|| (len - kernel) / stride + 1)
}

fn im2col(x: ArrayView2<'_, f64>, kernel: usize, stride: usize, out_len: usize) -> Array2<f64> {
    let c = x.ncols();
    let width = kernel * c;
    let flat = x.as_slice().expect("standard layout activations");
    let mut patches = Array2::zeros((out_len, width));
    for (t, mut row) in patches.axis_iter_mut(Axis(0)).enumerate() {
        let start = t * stride * c;
        row.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&flat[start..start + width]);
    }
    patches
}

/// Strided convolution followed by GELU.
pub(crate) fn conv_gelu(
    x: ArrayView2<'_, f64>,
    conv: &Conv1d,
    kernel: usize,
    stride: usize,
) -> (Array2<f64>, ConvTrace) {
    let out_len = conv_out_len(x.nrows(), kernel, stride).expect("caller checked length");
    let x = x.as_standard_layout();
    let patches = im2col(x.view(), kernel, stride, out_len);
    let mut pre = patches.dot(&conv.weight);
    pre += &conv.bias;
    let out = pre.mapv(gelu);
    (
        out,
        ConvTrace {
            patches,
            pre_activation: pre,
            input_rows: x.nrows(),
        },
    )
}

/// Backward through [`conv_gelu`]. Returns the input gradient when
/// `need_input_grad` is set.
pub(crate) fn conv_gelu_backward(
    trace: &ConvTrace,
    conv: &Conv1d,
    kernel: usize,
    stride: usize,
    d_out: ArrayView2<'_, f64>,
    grad: &mut Conv1d,
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    let mut dy = d_out.to_owned();
    Zip::from(&mut dy)
        .and(&trace.pre_activation)
        .for_each(|d, &p| *d *= gelu_grad(p));
    general_mat_mul(1.0, &trace.patches.t(), &dy, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    if !need_input_grad {
        return None;
    }
    let d_patches = dy.dot(&conv.weight.t());
    let c = conv.weight.nrows() / kernel;
    let mut dx = Array2::<f64>::zeros((trace.input_rows, c));
    let flat = dx.as_slice_mut().expect("fresh array");
    for (t, row) in d_patches.axis_iter(Axis(0)).enumerate() {
        let start = t * stride * c;
        for (d, v) in flat[start..start + kernel * c].iter_mut().zip(row.iter()) {
            *d += v;
        }
    }
    Some(dx)
}

pub(crate) struct NormTrace {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: ArrayView2<'_, f64>, ln: &LayerNorm) -> (Array2<f64>, NormTrace) {
    let n = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let mut y = &normalized * &ln.gamma;
    y += &ln.beta;
    (y, NormTrace { normalized, inv_std })
}

pub(crate) fn layer_norm_backward(
    trace: &NormTrace,
    ln: &LayerNorm,
    dy: ArrayView2<'_, f64>,
    grad: &mut LayerNorm,
) -> Array2<f64> {
    grad.gamma += &(&dy * &trace.normalized).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = &dy * &ln.gamma;
    for ((mut row, xhat), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(trace.normalized.axis_iter(Axis(0)))
        .zip(&trace.inv_std)
    {
        let sum = row.sum();
        let dot = row.dot(&xhat);
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|d, &xh| *d = inv / n * (n * *d - sum - xh * dot));
    }
    dx
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(crate) struct AttentionTrace {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
}

/// Multi-head scaled dot-product self-attention over all frames.
pub(crate) fn attention(
    x: ArrayView2<'_, f64>,
    attn: &Attention,
    n_heads: usize,
) -> (Array2<f64>, AttentionTrace) {
    let d = x.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, &attn.query);
    let k = linear(x, &attn.key);
    let v = linear(x, &attn.value);
    let mut heads_out = Array2::zeros((x.nrows(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p *= scale;
        softmax_rows(&mut p);
        heads_out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let out = linear(heads_out.view(), &attn.output);
    (
        out,
        AttentionTrace {
            input: x.to_owned(),
            q,
            k,
            v,
            probs,
            heads_out,
        },
    )
}

pub(crate) fn attention_backward(
    trace: &AttentionTrace,
    attn: &Attention,
    d_out: ArrayView2<'_, f64>,
    grad: &mut Attention,
) -> Array2<f64> {
    let n_heads = trace.probs.len();
    let d = trace.q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_heads = linear_backward(trace.heads_out.view(), &attn.output, d_out, &mut grad.output);
    let mut dq = Array2::zeros(trace.q.raw_dim());
    let mut dk = Array2::zeros(trace.k.raw_dim());
    let mut dv = Array2::zeros(trace.v.raw_dim());
    for (h, p) in trace.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_head = d_heads.slice(cols);
        let mut dp = d_head.dot(&trace.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_head));
        // softmax backward, row by row
        for (mut dp_row, p_row) in dp.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let dot = dp_row.dot(&p_row);
            Zip::from(&mut dp_row)
                .and(&p_row)
                .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&dp.dot(&trace.k.slice(cols)));
        dk.slice_mut(cols).assign(&dp.t().dot(&trace.q.slice(cols)));
    }
    let x = trace.input.view();
    let mut dx = linear_backward(x, &attn.query, dq.view(), &mut grad.query);
    dx += &linear_backward(x, &attn.key, dk.view(), &mut grad.key);
    dx += &linear_backward(x, &attn.value, dv.view(), &mut grad.value);
    dx
}

/// Sinusoidal position table, `frames x width`.
pub(crate) fn sinusoidal_positions(frames: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, width), |(t, j)| {
        let pair = (j / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * pair / width as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

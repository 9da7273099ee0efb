//! Traced forward passes and their backward counterparts.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::layers::{
    attention, attention_backward, conv_gelu, conv_gelu_backward, conv_out_len, gelu, gelu_grad,
    layer_norm, layer_norm_backward, linear, linear_backward, sinusoidal_positions,
    AttentionTrace, ConvTrace, NormTrace,
};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub(crate) struct CnnTrace {
    convs: Vec<ConvTrace>,
}

pub(crate) fn cnn_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[f64],
) -> Result<(Array2<f64>, CnnTrace)> {
    let receptive = cfg.receptive_field();
    if samples.len() < receptive {
        return Err(Error::TooShort {
            len: samples.len(),
            frame: receptive,
        });
    }
    let mut h = Array2::from_shape_vec((samples.len(), 1), samples.to_vec()).expect("column");
    let mut convs = Vec::with_capacity(cfg.conv_layers.len());
    for (spec, conv) in cfg.conv_layers.iter().zip(&params.convs) {
        debug_assert!(conv_out_len(h.nrows(), spec.kernel, spec.stride).is_some());
        let (out, trace) = conv_gelu(h.view(), conv, spec.kernel, spec.stride);
        convs.push(trace);
        h = out;
    }
    Ok((h, CnnTrace { convs }))
}

pub(crate) fn cnn_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    trace: &CnnTrace,
    d_out: ArrayView2<'_, f64>,
    grads: &mut ModelParams,
) {
    let mut d = d_out.to_owned();
    for i in (0..trace.convs.len()).rev() {
        let spec = cfg.conv_layers[i];
        let dx = conv_gelu_backward(
            &trace.convs[i],
            &params.convs[i],
            spec.kernel,
            spec.stride,
            d.view(),
            &mut grads.convs[i],
            i > 0,
        );
        match dx {
            Some(dx) => d = dx,
            None => break,
        }
    }
}

struct BlockTrace {
    norm1: NormTrace,
    attn: AttentionTrace,
    norm2: NormTrace,
    normed2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

pub(crate) struct ContextTrace {
    masked: Vec<bool>,
    blocks: Vec<BlockTrace>,
}

/// Runs the first `layers` context blocks over `x`. Masked rows are
/// replaced by the mask embedding; positions are added only when at least
/// one block runs.
pub(crate) fn context_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    x: ArrayView2<'_, f64>,
    masked: &[bool],
    layers: usize,
) -> (Array2<f64>, ContextTrace) {
    let mut h = x.to_owned();
    for (mut row, &m) in h.axis_iter_mut(Axis(0)).zip(masked) {
        if m {
            row.assign(&params.mask_embedding);
        }
    }
    if layers > 0 {
        h += &sinusoidal_positions(h.nrows(), h.ncols());
    }
    let mut blocks = Vec::with_capacity(layers);
    for block in &params.blocks[..layers] {
        let (normed1, norm1) = layer_norm(h.view(), &block.norm1);
        let (attn_out, attn) = attention(normed1.view(), &block.attn, cfg.n_heads);
        h += &attn_out;
        let (normed2, norm2) = layer_norm(h.view(), &block.norm2);
        let ff_pre = linear(normed2.view(), &block.ff_in);
        let ff_act = ff_pre.mapv(gelu);
        h += &linear(ff_act.view(), &block.ff_out);
        blocks.push(BlockTrace {
            norm1,
            attn,
            norm2,
            normed2,
            ff_pre,
            ff_act,
        });
    }
    (
        h,
        ContextTrace {
            masked: masked.to_vec(),
            blocks,
        },
    )
}

/// Backward through [`context_forward`]; returns `dL/dx` (zero on masked
/// rows, whose gradient goes to the mask embedding instead).
pub(crate) fn context_backward(
    params: &ModelParams,
    trace: &ContextTrace,
    d_out: ArrayView2<'_, f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let mut dh = d_out.to_owned();
    for (i, bt) in trace.blocks.iter().enumerate().rev() {
        let block = &params.blocks[i];
        let g = &mut grads.blocks[i];
        let mut d_act = linear_backward(bt.ff_act.view(), &block.ff_out, dh.view(), &mut g.ff_out);
        Zip::from(&mut d_act)
            .and(&bt.ff_pre)
            .for_each(|d, &p| *d *= gelu_grad(p));
        let d_normed2 = linear_backward(bt.normed2.view(), &block.ff_in, d_act.view(), &mut g.ff_in);
        dh += &layer_norm_backward(&bt.norm2, &block.norm2, d_normed2.view(), &mut g.norm2);
        let d_normed1 = attention_backward(&bt.attn, &block.attn, dh.view(), &mut g.attn);
        dh += &layer_norm_backward(&bt.norm1, &block.norm1, d_normed1.view(), &mut g.norm1);
    }
    for (mut row, &m) in dh.axis_iter_mut(Axis(0)).zip(&trace.masked) {
        if m {
            grads.mask_embedding += &row;
            row.fill(0.0);
        }
    }
    dh
}

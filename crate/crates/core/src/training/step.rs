//! Forward and backward pass of the combined objective over one batch.

use ndarray::{Array2, ArrayView2};

use super::PreparedBatch;
use crate::config::TrainConfig;
use crate::correlation::{
    cross_correlation_grad, self_correlation_grad, total_loss, CorrelationKind, CorrelationMatrix,
    LossBreakdown,
};
use crate::error::{Error, Result};
use crate::model::layers::{linear, linear_backward};
use crate::model::{
    cnn_backward, cnn_forward, context_backward, context_forward, masked_nll, CnnTrace,
    ContextTrace, Model, ModelParams,
};

pub struct BatchOutput {
    pub breakdown: LossBreakdown,
    pub cc: CorrelationMatrix,
    pub sc: CorrelationMatrix,
    pub grads: Option<ModelParams>,
}

struct ContextPass {
    trace: ContextTrace,
    z: Array2<f64>,
    d_logits: Array2<f64>,
}

struct UtterancePass {
    x_a: Array2<f64>,
    cnn_a: CnnTrace,
    x_b: Array2<f64>,
    cnn_b: CnnTrace,
    ctx_a: ContextPass,
    ctx_b: Option<ContextPass>,
}

fn gather(rows: &[Array2<f64>], at: &[(usize, usize)]) -> Array2<f64> {
    let width = rows[0].ncols();
    let mut out = Array2::zeros((at.len(), width));
    for (k, &(u, t)) in at.iter().enumerate() {
        out.row_mut(k).assign(&rows[u].row(t));
    }
    out
}

fn scatter(into: &mut [Array2<f64>], at: &[(usize, usize)], d: ArrayView2<'_, f64>, scale: f64) {
    for (k, &(u, t)) in at.iter().enumerate() {
        into[u].row_mut(t).scaled_add(scale, &d.row(k));
    }
}

/// Evaluates `l_hb + alpha * l_cc + beta * l_sc` on a prepared batch and,
/// if asked, its gradient. A correlation term with zero weight is still
/// evaluated for reporting (unless `skip_unweighted` is set) but never
/// contributes to the gradient.
pub fn loss_and_grad(
    model: &Model,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<BatchOutput> {
    let params = model.params();
    let mcfg = model.config();
    let depth = mcfg.n_transformer_layers;
    let opts = cfg.correlation_options();
    let use_cc = cfg.alpha > 0.0;
    let use_sc = cfg.beta > 0.0;
    let eval_cc = use_cc || !cfg.skip_unweighted;
    let eval_sc = use_sc || !cfg.skip_unweighted;

    let mut nll = 0.0;
    let mut scored = 0usize;
    let mut passes = Vec::with_capacity(batch.utterances.len());
    for u in &batch.utterances {
        let (x_a, cnn_a) = cnn_forward(params, mcfg, u.noisy_a.samples())?;
        let (x_b, cnn_b) = cnn_forward(params, mcfg, u.noisy_b.samples())?;
        if x_a.nrows() != u.codes.valid_frames() || x_b.nrows() != x_a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} codes for {} / {} encoder frames",
                u.id,
                u.codes.valid_frames(),
                x_a.nrows(),
                x_b.nrows()
            )));
        }
        let mut context = |x: &Array2<f64>, mask: &crate::model::MaskSet| -> Result<ContextPass> {
            let (z, trace) = context_forward(params, mcfg, x.view(), mask.masked(), depth);
            let logits = linear(z.view(), &params.head);
            let (sum, count, d_logits) = masked_nll(logits.view(), &u.codes, mask)?;
            nll += sum;
            scored += count;
            Ok(ContextPass { trace, z, d_logits })
        };
        let ctx_a = context(&x_a, &u.mask_a)?;
        let ctx_b = match &u.mask_b {
            Some(mask) => Some(context(&x_b, mask)?),
            None => None,
        };
        passes.push(UtterancePass {
            x_a,
            cnn_a,
            x_b,
            cnn_b,
            ctx_a,
            ctx_b,
        });
    }
    if scored == 0 {
        return Err(Error::EmptyMask);
    }
    let l_hb = nll / scored as f64;

    let lengths = batch.valid_lengths();
    let cc_at = batch.cc_frames.locate(&lengths);
    let sc_at = batch.sc_frames.locate(&lengths);

    let cc = if eval_cc {
        let y_a: Vec<_> = passes.iter().map(|p| linear(p.x_a.view(), &params.proj_cc)).collect();
        let y_b: Vec<_> = passes.iter().map(|p| linear(p.x_b.view(), &params.proj_cc)).collect();
        Some(cross_correlation_grad(
            gather(&y_a, &cc_at).view(),
            gather(&y_b, &cc_at).view(),
            &opts,
        )?)
    } else {
        None
    };
    let sc = if eval_sc {
        let p: Vec<_> = passes
            .iter()
            .map(|p| linear(p.ctx_a.z.view(), &params.proj_sc))
            .collect();
        Some(self_correlation_grad(gather(&p, &sc_at).view(), &opts)?)
    } else {
        None
    };
    let l_cc = cc.as_ref().map_or(0.0, |g| g.loss);
    let l_sc = sc.as_ref().map_or(0.0, |g| g.loss);
    let breakdown = total_loss(l_hb, l_cc, l_sc, cfg.alpha, cfg.beta, cfg.lambda)?;

    let grads = want_grad.then(|| {
        let mut g = params.zeros_like();
        let zeros = |w: usize| -> Vec<Array2<f64>> {
            lengths.iter().map(|&t| Array2::zeros((t, w))).collect()
        };
        let mut d_ya = zeros(mcfg.proj_cc_dim);
        let mut d_yb = zeros(mcfg.proj_cc_dim);
        let mut d_p = zeros(mcfg.proj_sc_dim);
        if let (true, Some(cc)) = (use_cc, &cc) {
            scatter(&mut d_ya, &cc_at, cc.d_y.view(), cfg.alpha);
            scatter(&mut d_yb, &cc_at, cc.d_yt.view(), cfg.alpha);
        }
        if let (true, Some(sc)) = (use_sc, &sc) {
            scatter(&mut d_p, &sc_at, sc.d_y.view(), cfg.beta);
        }
        let inv = 1.0 / scored as f64;
        for (i, p) in passes.iter().enumerate() {
            let d_logits = &p.ctx_a.d_logits * inv;
            let mut d_z = linear_backward(p.ctx_a.z.view(), &params.head, d_logits.view(), &mut g.head);
            if use_sc {
                d_z += &linear_backward(p.ctx_a.z.view(), &params.proj_sc, d_p[i].view(), &mut g.proj_sc);
            }
            let mut d_xa = context_backward(params, &p.ctx_a.trace, d_z.view(), &mut g);
            if use_cc {
                d_xa += &linear_backward(p.x_a.view(), &params.proj_cc, d_ya[i].view(), &mut g.proj_cc);
            }
            cnn_backward(params, mcfg, &p.cnn_a, d_xa.view(), &mut g);

            let mut d_xb: Option<Array2<f64>> = None;
            if use_cc {
                d_xb = Some(linear_backward(p.x_b.view(), &params.proj_cc, d_yb[i].view(), &mut g.proj_cc));
            }
            if let Some(ctx) = &p.ctx_b {
                let d_logits = &ctx.d_logits * inv;
                let d_z = linear_backward(ctx.z.view(), &params.head, d_logits.view(), &mut g.head);
                let d = context_backward(params, &ctx.trace, d_z.view(), &mut g);
                d_xb = Some(match d_xb {
                    Some(acc) => acc + d,
                    None => d,
                });
            }
            if let Some(d) = d_xb {
                cnn_backward(params, mcfg, &p.cnn_b, d.view(), &mut g);
            }
        }
        g
    });

    let placeholder = |kind| {
        CorrelationMatrix::from_matrix(Array2::zeros((1, 1)), kind).expect("1x1 matrix")
    };
    Ok(BatchOutput {
        breakdown,
        cc: cc.map_or_else(|| placeholder(CorrelationKind::Cross), |g| g.matrix),
        sc: sc.map_or_else(|| placeholder(CorrelationKind::SelfCorrelation), |g| g.matrix),
        grads,
    })
}

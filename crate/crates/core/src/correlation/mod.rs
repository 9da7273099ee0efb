//! Correlation regularizers.
//!
//! For two `n x d` matrices `Y` and `Ỹ` whose rows are frames,
//!
//! ```text
//! C_ij = Σ_n y_ni ỹ_nj / (‖y_·i‖ ‖ỹ_·j‖ + eps)
//! L    = Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij²
//! ```
//!
//! The same function serves the cross-correlation between the two noisy
//! branches and the self-correlation of the bottleneck projection (pass the
//! same matrix twice). No mean is subtracted unless `center` is set.

mod gradcheck;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

pub use gradcheck::{
    grad_check, relative_error, sample_probes, write_report, GradCheckReport, NamedArrays,
    ParamSet, ProbeRecord,
};

pub const DEFAULT_EPS: f64 = 1e-9;
pub const DEFAULT_LAMBDA: f64 = 0.005;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_SAMPLE_SIZE: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    Cross,
    /// Both arguments were the same matrix.
    SelfCorrelation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    c: Array2<f64>,
    kind: CorrelationKind,
}

impl CorrelationMatrix {
    /// Wraps an arbitrary square matrix, e.g. for evaluating the loss on
    /// hand-built cases.
    pub fn from_matrix(c: Array2<f64>, kind: CorrelationKind) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "correlation matrix must be square, got {:?}",
                c.dim()
            )));
        }
        Ok(Self { c, kind })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// Largest `|1 - C_ii|`.
    pub fn max_diagonal_deviation(&self) -> f64 {
        self.c
            .diag()
            .iter()
            .fold(0.0, |m, &v| f64::max(m, (1.0 - v).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationOptions {
    pub eps: f64,
    pub lambda: f64,
    /// Subtract the per-dimension mean over the sampled frames first.
    pub center: bool,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            lambda: DEFAULT_LAMBDA,
            center: false,
        }
    }
}

/// Frame positions drawn from the flattened pool of valid frames of a
/// minibatch. The same positions index both branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledFrames {
    indices: Vec<usize>,
    pool_size: usize,
}

impl SampledFrames {
    pub fn from_indices(indices: Vec<usize>, pool_size: usize) -> Result<Self> {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() || sorted.last().is_some_and(|&i| i >= pool_size) {
            return Err(Error::DimensionMismatch(
                "sample indices must be unique and inside the pool".into(),
            ));
        }
        Ok(Self { indices, pool_size })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    /// `(utterance, frame)` for each sampled pool index.
    pub fn locate(&self, valid_lengths: &[usize]) -> Vec<(usize, usize)> {
        let mut starts = Vec::with_capacity(valid_lengths.len());
        let mut acc = 0;
        for &len in valid_lengths {
            starts.push(acc);
            acc += len;
        }
        self.indices
            .iter()
            .map(|&i| {
                let utt = starts.partition_point(|&s| s <= i) - 1;
                (utt, i - starts[utt])
            })
            .collect()
    }

    /// Row positions in a `batch x max_frames` padded layout.
    pub fn padded_positions(&self, valid_lengths: &[usize], max_frames: usize) -> Vec<usize> {
        self.locate(valid_lengths)
            .into_iter()
            .map(|(u, t)| u * max_frames + t)
            .collect()
    }
}

/// Uniform sample without replacement of `min(n, pool)` valid frames.
pub fn sample_frames<R: Rng + ?Sized>(
    valid_lengths: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<SampledFrames> {
    let pool: usize = valid_lengths.iter().sum();
    if pool == 0 {
        return Err(Error::EmptyPool);
    }
    let indices = index::sample(rng, pool, n.min(pool)).into_vec();
    Ok(SampledFrames {
        indices,
        pool_size: pool,
    })
}

fn column_norms(y: ArrayView2<'_, f64>) -> Array1<f64> {
    y.map_axis(Axis(0), |c| c.dot(&c).sqrt())
}

fn centered(y: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = y.mean_axis(Axis(0)).expect("n >= 2");
    &y - &mean
}

fn check_pair(y: ArrayView2<'_, f64>, yt: ArrayView2<'_, f64>) -> Result<()> {
    if y.dim() != yt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "correlation inputs {:?} vs {:?}",
            y.dim(),
            yt.dim()
        )));
    }
    if y.nrows() < 2 {
        return Err(Error::TooFewFrames(y.nrows()));
    }
    Ok(())
}

fn raw_correlation(
    y: ArrayView2<'_, f64>,
    yt: ArrayView2<'_, f64>,
    eps: f64,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>) {
    let a = column_norms(y);
    let b = column_norms(yt);
    let s = y.t().dot(&yt);
    let d = Array2::from_shape_fn(s.raw_dim(), |(i, j)| a[i] * b[j] + eps);
    let c = &s / &d;
    (c, s, d, a, b)
}

/// Empirical correlation matrix of two equally shaped frame matrices.
pub fn correlation_matrix(
    y: ArrayView2<'_, f64>,
    yt: ArrayView2<'_, f64>,
    eps: f64,
) -> Result<CorrelationMatrix> {
    check_pair(y, yt)?;
    let same = y.as_ptr() == yt.as_ptr() && y.strides() == yt.strides();
    let (c, ..) = raw_correlation(y, yt, eps);
    Ok(CorrelationMatrix {
        c,
        kind: if same {
            CorrelationKind::SelfCorrelation
        } else {
            CorrelationKind::Cross
        },
    })
}

/// Invariance plus λ-weighted disentangling term.
pub fn correlation_loss(c: &CorrelationMatrix, lambda: f64) -> f64 {
    let (inv, dis) = loss_terms(c.matrix());
    inv + lambda * dis
}

/// `(Σ_i (1 - C_ii)², Σ_{i≠j} C_ij²)`.
pub fn loss_terms(c: &Array2<f64>) -> (f64, f64) {
    let mut invariance = 0.0;
    let mut off = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            invariance += (1.0 - v) * (1.0 - v);
        } else {
            off += v * v;
        }
    }
    (invariance, off)
}

/// Loss value, matrix, and gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct CorrelationGrad {
    pub loss: f64,
    pub matrix: CorrelationMatrix,
    pub d_y: Array2<f64>,
    pub d_yt: Array2<f64>,
}

/// Cross-correlation loss and its analytic gradient.
pub fn cross_correlation_grad(
    y: ArrayView2<'_, f64>,
    yt: ArrayView2<'_, f64>,
    opts: &CorrelationOptions,
) -> Result<CorrelationGrad> {
    check_pair(y, yt)?;
    if !opts.center {
        return Ok(grad_uncentered(y, yt, opts, CorrelationKind::Cross));
    }
    let (yc, ytc) = (centered(y), centered(yt));
    let mut g = grad_uncentered(yc.view(), ytc.view(), opts, CorrelationKind::Cross);
    uncenter_grad(&mut g.d_y);
    uncenter_grad(&mut g.d_yt);
    Ok(g)
}

/// Self-correlation loss `L(C(P, P))` and its gradient with respect to `P`
/// (returned in `d_y`; `d_yt` is zero).
pub fn self_correlation_grad(
    p: ArrayView2<'_, f64>,
    opts: &CorrelationOptions,
) -> Result<CorrelationGrad> {
    check_pair(p, p)?;
    let owned;
    let p = if opts.center {
        owned = centered(p);
        owned.view()
    } else {
        p
    };
    let mut g = grad_uncentered(p, p, opts, CorrelationKind::SelfCorrelation);
    g.d_y += &g.d_yt;
    g.d_yt.fill(0.0);
    if opts.center {
        uncenter_grad(&mut g.d_y);
    }
    Ok(g)
}

fn uncenter_grad(d: &mut Array2<f64>) {
    let mean = d.mean_axis(Axis(0)).expect("n >= 2");
    *d -= &mean;
}

fn grad_uncentered(
    y: ArrayView2<'_, f64>,
    yt: ArrayView2<'_, f64>,
    opts: &CorrelationOptions,
    kind: CorrelationKind,
) -> CorrelationGrad {
    let (c, s, d, a, b) = raw_correlation(y, yt, opts.eps);
    let (inv, dis) = loss_terms(&c);
    let loss = inv + opts.lambda * dis;

    // dL/dC
    let g = Array2::from_shape_fn(c.raw_dim(), |(i, j)| {
        if i == j {
            -2.0 * (1.0 - c[[i, i]])
        } else {
            2.0 * opts.lambda * c[[i, j]]
        }
    });
    let h = &g / &d;
    // Through the column norms: dC_ij/da_i = -S_ij b_j / D_ij², da_i/dy_ni = y_ni / a_i.
    let mut gsd = &g * &s;
    Zip::from(&mut gsd).and(&d).for_each(|v, &dd| *v /= dd * dd);
    let u = Array1::from_shape_fn(a.len(), |i| {
        if a[i] > 0.0 {
            gsd.row(i).dot(&b) / a[i]
        } else {
            0.0
        }
    });
    let v = Array1::from_shape_fn(b.len(), |j| {
        if b[j] > 0.0 {
            gsd.column(j).dot(&a) / b[j]
        } else {
            0.0
        }
    });
    let mut d_y = yt.dot(&h.t());
    d_y -= &(&y * &u);
    let mut d_yt = y.dot(&h);
    d_yt -= &(&yt * &v);
    CorrelationGrad {
        loss,
        matrix: CorrelationMatrix { c, kind },
        d_y,
        d_yt,
    }
}

/// One step's loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_hb: f64,
    pub l_cc: f64,
    pub l_sc: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// `l_hb + alpha * l_cc + beta * l_sc`, evaluated left to right.
    pub fn combine(l_hb: f64, l_cc: f64, l_sc: f64, alpha: f64, beta: f64) -> f64 {
        l_hb + alpha * l_cc + beta * l_sc
    }

    pub fn identity_holds(&self) -> bool {
        Self::combine(self.l_hb, self.l_cc, self.l_sc, self.alpha, self.beta).to_bits()
            == self.total.to_bits()
    }
}

pub fn total_loss(
    l_hb: f64,
    l_cc: f64,
    l_sc: f64,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_hb", l_hb),
        ("l_cc", l_cc),
        ("l_sc", l_sc),
        ("alpha", alpha),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_hb,
        l_cc,
        l_sc,
        total: LossBreakdown::combine(l_hb, l_cc, l_sc, alpha, beta),
        lambda,
        alpha,
        beta,
    })
}

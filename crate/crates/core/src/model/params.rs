use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            weight: Array2::eye(width),
            bias: Array1::zeros(width),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// 1-D convolution as a matmul over flattened `kernel x in_channels`
/// patches. Kernel size and stride live in [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Every learned array of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub convs: Vec<Conv1d>,
    pub mask_embedding: Array1<f64>,
    pub blocks: Vec<Block>,
    /// Code prediction head, `d_model -> K`.
    pub head: Linear,
    /// Shared projector applied to both CNN branches.
    pub proj_cc: Linear,
    /// Projector applied to the bottleneck.
    pub proj_sc: Linear,
}

/// Read-only view of one named parameter array.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

trait Visit {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>);
}

impl Visit for Array1<f64> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("contiguous parameter"),
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((
            prefix.to_string(),
            self.as_slice_mut().expect("contiguous parameter"),
        ));
    }
}

impl Visit for Array2<f64> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("standard-layout parameter"),
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((
            prefix.to_string(),
            self.as_slice_mut().expect("standard-layout parameter"),
        ));
    }
}

macro_rules! impl_visit {
    ($ty:ty { $($field:ident),+ }) => {
        impl Visit for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
                $( self.$field.visit(&format!("{prefix}.{}", stringify!($field)), out); )+
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
                $( self.$field.visit_mut(&format!("{prefix}.{}", stringify!($field)), out); )+
            }
        }
    };
}

impl_visit!(Linear { weight, bias });
impl_visit!(Conv1d { weight, bias });
impl_visit!(LayerNorm { gamma, beta });
impl_visit!(Attention { query, key, value, output });
impl_visit!(Block { norm1, attn, norm2, ff_in, ff_out });

impl ModelParams {
    /// Random initialization: He-style for the convolutions, `1/sqrt(fan_in)`
    /// for affine maps, unit layer-norm gains and zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut in_channels = 1;
        let mut convs = Vec::with_capacity(cfg.conv_layers.len());
        for spec in &cfg.conv_layers {
            let fan_in = spec.kernel * in_channels;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            convs.push(Conv1d {
                weight: Array2::from_shape_simple_fn((fan_in, spec.channels), || normal.sample(rng)),
                bias: Array1::zeros(spec.channels),
            });
            in_channels = spec.channels;
        }
        let d = cfg.d_model;
        let mask_normal = Normal::new(0.0, 1.0).expect("positive std");
        let mask_embedding = Array1::from_shape_simple_fn(d, || mask_normal.sample(rng));
        let blocks = (0..cfg.n_transformer_layers)
            .map(|_| Block {
                norm1: LayerNorm::new(d),
                attn: Attention {
                    query: Linear::init(d, d, rng),
                    key: Linear::init(d, d, rng),
                    value: Linear::init(d, d, rng),
                    output: Linear::init(d, d, rng),
                },
                norm2: LayerNorm::new(d),
                ff_in: Linear::init(d, cfg.ff_width, rng),
                ff_out: Linear::init(cfg.ff_width, d, rng),
            })
            .collect();
        Self {
            convs,
            mask_embedding,
            blocks,
            head: Linear::init(d, cfg.num_codes, rng),
            proj_cc: Linear::init(d, cfg.proj_cc_dim, rng),
            proj_sc: Linear::init(d, cfg.proj_sc_dim, rng),
        }
    }

    /// Named arrays in a fixed order; names look like `blocks.1.attn.query.weight`.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("convs.{i}"), &mut out);
        }
        self.mask_embedding.visit("mask_embedding", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), &mut out);
        }
        self.head.visit("head", &mut out);
        self.proj_cc.visit("proj_cc", &mut out);
        self.proj_sc.visit("proj_sc", &mut out);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("convs.{i}"), &mut out);
        }
        self.mask_embedding.visit_mut("mask_embedding", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), &mut out);
        }
        self.head.visit_mut("head", &mut out);
        self.proj_cc.visit_mut("proj_cc", &mut out);
        self.proj_sc.visit_mut("proj_sc", &mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }
}

//! Desk-scale encoder: strided conv front end, pre-norm transformer context
//! network, code prediction head and the two correlation projectors.

mod encoder;
pub(crate) mod layers;
mod mask;
mod params;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FrameFeatures};
use crate::units::CodeSequence;

pub(crate) use encoder::{cnn_backward, cnn_forward, context_backward, context_forward, CnnTrace, ContextTrace};
pub use mask::{sample_mask_spans, MaskSet};
pub use params::{Attention, Block, Conv1d, LayerNorm, Linear, ModelParams, NamedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// The last layer's channel count must equal `d_model`.
    pub conv_layers: Vec<ConvSpec>,
    pub d_model: usize,
    pub n_transformer_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    /// Probability that a frame starts a masked span.
    pub mask_prob: f64,
    pub mask_span: usize,
    /// Number of discrete units K.
    pub num_codes: usize,
    pub proj_cc_dim: usize,
    pub proj_sc_dim: usize,
    /// Also run the second noisy branch through the context network and
    /// score its masked frames.
    pub dual_branch_hb: bool,
}

impl Default for ModelConfig {
    /// Desk-scale model. The conv stack has a 400-sample receptive field
    /// (25 ms at 16 kHz) and stride 4, matching the default MFCC framing.
    fn default() -> Self {
        Self {
            conv_layers: vec![
                ConvSpec {
                    channels: 8,
                    kernel: 200,
                    stride: 2,
                },
                ConvSpec {
                    channels: 64,
                    kernel: 101,
                    stride: 2,
                },
            ],
            d_model: 64,
            n_transformer_layers: 2,
            n_heads: 4,
            ff_width: 256,
            mask_prob: 0.08,
            mask_span: 4,
            num_codes: 8,
            proj_cc_dim: 64,
            proj_sc_dim: 128,
            dual_branch_hb: false,
        }
    }
}

impl ModelConfig {
    /// Base-size reference values: a 7-layer conv stack (25 ms receptive
    /// field, 20 ms stride), 12 transformer layers, K = 100 first-iteration
    /// units and 2048/4096-wide CC/SC projectors. Documented, not trained
    /// here.
    pub fn full_scale() -> Self {
        let mut conv_layers = vec![ConvSpec {
            channels: 512,
            kernel: 10,
            stride: 5,
        }];
        conv_layers.extend((0..4).map(|_| ConvSpec {
            channels: 512,
            kernel: 3,
            stride: 2,
        }));
        conv_layers.push(ConvSpec {
            channels: 512,
            kernel: 2,
            stride: 2,
        });
        conv_layers.push(ConvSpec {
            channels: 768,
            kernel: 2,
            stride: 2,
        });
        Self {
            conv_layers,
            d_model: 768,
            n_transformer_layers: 12,
            n_heads: 12,
            ff_width: 3072,
            mask_prob: 0.08,
            mask_span: 10,
            num_codes: 100,
            proj_cc_dim: 2048,
            proj_sc_dim: 4096,
            dual_branch_hb: false,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|c| c.stride).product()
    }

    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for c in &self.conv_layers {
            field += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        field
    }

    /// Output frames for `len` input samples.
    pub fn frames_for(&self, len: usize) -> Result<usize> {
        crate::features::frame_count(len, self.receptive_field(), self.total_stride())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.conv_layers.is_empty() {
            return fail("at least one conv layer is required".into());
        }
        if self
            .conv_layers
            .iter()
            .any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0)
        {
            return fail("conv channels, kernels and strides must be positive".into());
        }
        if self.conv_layers.last().map(|c| c.channels) != Some(self.d_model) {
            return fail("last conv layer must output d_model channels".into());
        }
        if self.d_model == 0 || self.ff_width == 0 || self.n_heads == 0 {
            return fail("d_model, ff_width and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return fail("mask_prob must lie in [0, 1] and mask_span be >= 1".into());
        }
        if self.num_codes < 2 {
            return fail("need at least 2 codes".into());
        }
        if self.proj_cc_dim == 0 || self.proj_sc_dim == 0 {
            return fail("projector widths must be positive".into());
        }
        Ok(())
    }

    /// Checks that encoder frames line up one-to-one with feature frames.
    pub fn check_alignment(&self, features: &FeatureConfig) -> Result<()> {
        if features.hop_samples != self.total_stride()
            || features.frame_samples() != self.receptive_field()
        {
            return Err(Error::Config(format!(
                "encoder frames (receptive {}, stride {}) do not align with feature frames \
                 (frame {}, hop {})",
                self.receptive_field(),
                self.total_stride(),
                features.frame_samples(),
                features.hop_samples
            )));
        }
        Ok(())
    }
}

/// Where to read hidden states from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapPoint {
    /// Conv front-end output.
    Cnn,
    /// Output of context layer `l` (1-based).
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Pairs a config with existing parameters after checking every shape.
    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let template = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let want = template.tensors();
        let got = params.tensors();
        if want.len() != got.len()
            || want
                .iter()
                .zip(&got)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::DimensionMismatch(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams) {
        (self.config, self.params)
    }

    /// Conv front end: `T x d_model` with
    /// `T = floor((len - receptive) / stride) + 1`.
    pub fn encode_cnn(&self, w: &Waveform) -> Result<FrameFeatures> {
        let (x, _) = cnn_forward(&self.params, &self.config, w.samples())?;
        FrameFeatures::dense(x, self.config.total_stride(), self.config.receptive_field())
    }

    /// Context network over the valid frames of `x`. Returns the bottleneck
    /// `Z` and the `T x K` code logits; padding rows stay zero in both.
    pub fn encode_context(
        &self,
        x: &FrameFeatures,
        mask: &MaskSet,
    ) -> Result<(FrameFeatures, Array2<f64>)> {
        if x.dim() != self.config.d_model {
            return Err(Error::DimensionMismatch(format!(
                "context input has {} dims, model expects {}",
                x.dim(),
                self.config.d_model
            )));
        }
        if mask.len() != x.num_frames() {
            return Err(Error::DimensionMismatch(format!(
                "mask covers {} frames, input has {}",
                mask.len(),
                x.num_frames()
            )));
        }
        let valid = x.valid_frames();
        let (z, _) = context_forward(
            &self.params,
            &self.config,
            x.valid(),
            &mask.masked()[..valid],
            self.config.n_transformer_layers,
        );
        let logits = layers::linear(z.view(), &self.params.head);
        let mut z_full = Array2::zeros((x.num_frames(), self.config.d_model));
        z_full.slice_mut(s![..valid, ..]).assign(&z);
        let mut logits_full = Array2::zeros((x.num_frames(), self.config.num_codes));
        logits_full.slice_mut(s![..valid, ..]).assign(&logits);
        Ok((
            FrameFeatures::new(z_full, valid, x.hop_samples, x.frame_samples)?,
            logits_full,
        ))
    }

    /// Unmasked hidden states of clean audio at a tap point.
    pub fn tap(&self, w: &Waveform, point: TapPoint) -> Result<FrameFeatures> {
        let x = self.encode_cnn(w)?;
        let layer = match point {
            TapPoint::Cnn => return Ok(x),
            TapPoint::Layer(l) if l >= 1 && l <= self.config.n_transformer_layers => l,
            TapPoint::Layer(l) => {
                return Err(Error::LayerOutOfRange {
                    index: l,
                    depth: self.config.n_transformer_layers,
                })
            }
        };
        let no_mask = vec![false; x.num_frames()];
        let (h, _) = context_forward(&self.params, &self.config, x.valid(), &no_mask, layer);
        FrameFeatures::dense(h, x.hop_samples, x.frame_samples)
    }
}

/// Applies a projector frame by frame; padding rows stay zero.
pub fn project(block: &Linear, f: &FrameFeatures) -> Result<FrameFeatures> {
    if f.dim() != block.inputs() {
        return Err(Error::DimensionMismatch(format!(
            "projector expects {} inputs, features have {}",
            block.inputs(),
            f.dim()
        )));
    }
    let mut out = Array2::zeros((f.num_frames(), block.outputs()));
    out.slice_mut(s![..f.valid_frames(), ..])
        .assign(&layers::linear(f.valid(), block));
    FrameFeatures::new(out, f.valid_frames(), f.hop_samples, f.frame_samples)
}

/// Summed negative log-likelihood over masked valid frames, the number of
/// such frames, and the unnormalized logit gradient (softmax minus one-hot
/// on scored rows, zero elsewhere).
pub(crate) fn masked_nll(
    logits: ArrayView2<'_, f64>,
    codes: &CodeSequence,
    mask: &MaskSet,
) -> Result<(f64, usize, Array2<f64>)> {
    let valid = codes.valid_frames();
    if logits.nrows() < valid || mask.len() < valid {
        return Err(Error::DimensionMismatch(format!(
            "{} codes for {} logit rows and {} mask entries",
            valid,
            logits.nrows(),
            mask.len()
        )));
    }
    if let Some(&c) = codes.codes.iter().find(|&&c| c >= logits.ncols()) {
        return Err(Error::DimensionMismatch(format!(
            "code {c} out of range for {} classes",
            logits.ncols()
        )));
    }
    let log_probs = layers::log_softmax_rows(logits);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    let mut count = 0;
    for t in 0..valid {
        if !mask.masked()[t] {
            continue;
        }
        let code = codes.codes[t];
        total -= log_probs[[t, code]];
        count += 1;
        let mut g = grad.row_mut(t);
        g.assign(&log_probs.row(t).mapv(f64::exp));
        g[code] -= 1.0;
    }
    Ok((total, count, grad))
}

/// Mean cross-entropy of the clean-audio codes over masked valid frames.
pub fn hubert_loss(
    logits: ArrayView2<'_, f64>,
    codes: &CodeSequence,
    mask: &MaskSet,
) -> Result<f64> {
    let (total, count, _) = masked_nll(logits, codes, mask)?;
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Row-wise softmax, exposed for inspecting code posteriors.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    layers::log_softmax_rows(logits).mapv(f64::exp)
}

/// Predicted code per row (lowest index on ties).
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;

    fn small_config(layers: usize) -> ModelConfig {
        ModelConfig {
            conv_layers: vec![
                ConvSpec {
                    channels: 4,
                    kernel: 6,
                    stride: 2,
                },
                ConvSpec {
                    channels: 8,
                    kernel: 3,
                    stride: 2,
                },
            ],
            d_model: 8,
            n_transformer_layers: layers,
            n_heads: 2,
            ff_width: 16,
            mask_prob: 0.2,
            mask_span: 2,
            num_codes: 5,
            proj_cc_dim: 6,
            proj_sc_dim: 7,
            dual_branch_hb: false,
        }
    }

    fn wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            CANONICAL_SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn default_stack_matches_mfcc_framing() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.receptive_field(), 400);
        assert_eq!(cfg.total_stride(), 4);
        cfg.check_alignment(&FeatureConfig::default()).unwrap();
        let full = ModelConfig::full_scale();
        assert_eq!(full.receptive_field(), 400);
        assert_eq!(full.total_stride(), 320);
        full.validate().unwrap();
    }

    #[test]
    fn cnn_frame_count_follows_framing_rule() {
        let cfg = small_config(1);
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (r, s) = (cfg.receptive_field(), cfg.total_stride());
        let x = model.encode_cnn(&wave(s * 10 + r - 1, 2)).unwrap();
        assert_eq!(x.num_frames(), 10);
        assert_eq!(x.dim(), 8);
        assert!(matches!(
            model.encode_cnn(&wave(r - 1, 2)),
            Err(Error::TooShort { .. })
        ));
        let w = wave(97, 3);
        assert_eq!(model.encode_cnn(&w).unwrap(), model.encode_cnn(&w).unwrap());
    }

    #[test]
    fn zero_depth_context_is_mask_substitution() {
        let model = Model::new(small_config(0), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = model.encode_cnn(&wave(120, 5)).unwrap();
        let mut masked = vec![false; x.num_frames()];
        masked[1] = true;
        masked[4] = true;
        let mask = MaskSet::from_flags(masked.clone());
        let (z, logits) = model.encode_context(&x, &mask).unwrap();
        for t in 0..x.num_frames() {
            let want = if masked[t] {
                model.params().mask_embedding.view()
            } else {
                x.data().row(t)
            };
            assert_eq!(z.data().row(t), want);
        }
        let probs = softmax(logits.view());
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn utterances_do_not_interact() {
        let model = Model::new(small_config(2), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let a = model.encode_cnn(&wave(150, 7)).unwrap();
        let b = model.encode_cnn(&wave(90, 8)).unwrap();
        let ma = MaskSet::from_flags(vec![false; a.num_frames()]);
        let mb = MaskSet::from_flags(vec![false; b.num_frames()]);
        let first = [model.encode_context(&a, &ma).unwrap(), model.encode_context(&b, &mb).unwrap()];
        let second = [model.encode_context(&b, &mb).unwrap(), model.encode_context(&a, &ma).unwrap()];
        assert_eq!(first[0], second[1]);
        assert_eq!(first[1], second[0]);
    }

    #[test]
    fn padded_context_input_keeps_padding_zero() {
        let model = Model::new(small_config(1), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let x = model.encode_cnn(&wave(120, 9)).unwrap();
        let padded = x.padded_to(x.num_frames() + 3).unwrap();
        let mask = MaskSet::from_flags(vec![false; padded.num_frames()]);
        let (z, logits) = model.encode_context(&padded, &mask).unwrap();
        let (z0, l0) = model
            .encode_context(&x, &MaskSet::from_flags(vec![false; x.num_frames()]))
            .unwrap();
        assert_eq!(z.valid(), z0.data().view());
        assert_eq!(logits.slice(s![..x.num_frames(), ..]), l0.view());
        assert!(logits.slice(s![x.num_frames().., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_taps() {
        let model = Model::new(small_config(2), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let w = wave(120, 10);
        assert_eq!(model.tap(&w, TapPoint::Layer(2)).unwrap().dim(), 8);
        let z = model
            .encode_context(
                &model.encode_cnn(&w).unwrap(),
                &MaskSet::from_flags(vec![false; model.config().frames_for(120).unwrap()]),
            )
            .unwrap()
            .0;
        assert_eq!(model.tap(&w, TapPoint::Layer(2)).unwrap(), z);
        assert!(matches!(
            model.tap(&w, TapPoint::Layer(3)),
            Err(Error::LayerOutOfRange { index: 3, depth: 2 })
        ));
    }

    #[test]
    fn projector_cases() {
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.25 - 1.0);
        let f = FrameFeatures::dense(x.clone(), 4, 400).unwrap().padded_to(6).unwrap();

        let out = project(&Linear::identity(3), &f).unwrap();
        assert_eq!(out, f);

        let zero = Linear {
            weight: Array2::zeros((3, 2)),
            bias: ndarray::Array1::zeros(2),
        };
        assert!(project(&zero, &f).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Linear {
            weight: Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0)),
            bias: ndarray::Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0)),
        };
        let got = project(&block, &f).unwrap();
        for n in 0..4 {
            for j in 0..5 {
                let mut want = block.bias[j];
                for i in 0..3 {
                    want += x[[n, i]] * block.weight[[i, j]];
                }
                assert!((got.data()[[n, j]] - want).abs() < 1e-12);
            }
        }
        assert!(got.data().slice(s![4.., ..]).iter().all(|&v| v == 0.0));
        assert!(project(&Linear::identity(4), &f).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Array2::zeros((5, 8));
        let codes = CodeSequence {
            codes: vec![0, 3, 7, 2, 5],
        };
        let mask = MaskSet::from_flags(vec![true, false, true, true, false]);
        let l = hubert_loss(logits.view(), &codes, &mask).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut logits = Array2::zeros((3, 4));
        let codes = CodeSequence {
            codes: vec![1, 2, 3],
        };
        for (t, &c) in codes.codes.iter().enumerate() {
            logits[[t, c]] = 1e3;
        }
        let mask = MaskSet::from_flags(vec![true; 3]);
        assert!(hubert_loss(logits.view(), &codes, &mask).unwrap() < 1e-12);
    }

    #[test]
    fn hand_built_three_frame_loss() {
        let logits = Array2::from_shape_vec(
            (3, 3),
            vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 0.2, 0.2, 0.9],
        )
        .unwrap();
        let codes = CodeSequence {
            codes: vec![1, 0, 2],
        };
        let mask = MaskSet::from_flags(vec![true, true, true]);
        // Oracle: direct -log softmax per frame.
        let nll = |row: [f64; 3], c: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[c].exp() / z).ln()
        };
        let want = (nll([1.0, 2.0, 0.5], 1) + nll([-1.0, 0.0, 3.0], 0) + nll([0.2, 0.2, 0.9], 2)) / 3.0;
        let got = hubert_loss(logits.view(), &codes, &mask).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn unmasked_or_padding_only_is_an_error() {
        let logits = Array2::zeros((4, 3));
        let codes = CodeSequence { codes: vec![0, 1] };
        // Only padding frames (index >= 2) are masked.
        let mask = MaskSet::from_flags(vec![false, false, true, true]);
        assert!(matches!(
            hubert_loss(logits.view(), &codes, &mask),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let cfg = small_config(1);
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, params) = model.into_parts();
        let mut bigger = cfg.clone();
        bigger.proj_sc_dim += 1;
        assert!(Model::from_parts(bigger, params.clone()).is_err());
        assert!(Model::from_parts(cfg, params).is_ok());
    }
}

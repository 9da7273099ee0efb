//! Run configuration as canonical `key=value` text.
//!
//! Every field of the model, feature and training configs has a key.
//! Parsing rejects unknown keys and duplicates; omitted keys keep their
//! defaults. [`RunConfig::to_text`] writes every key in a fixed order, so
//! parse/print round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::correlation::{CorrelationOptions, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPS, DEFAULT_LAMBDA, DEFAULT_SAMPLE_SIZE};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{ConvSpec, ModelConfig};
use crate::units::{DEFAULT_MAX_ITERS, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub snr_lo: f64,
    pub snr_hi: f64,
    /// Frames sampled for the cross-correlation estimate.
    pub n_cc: usize,
    /// Frames sampled for the self-correlation estimate.
    pub n_sc: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub corr_eps: f64,
    pub center_features: bool,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Record elapsed wall time in metrics rows (makes them run-dependent).
    pub log_wall_time: bool,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Skip the correlation branches entirely when their weight is zero;
    /// the skipped terms are then reported as 0.
    pub skip_unweighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 7e-5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            steps: 1000,
            batch_size: 8,
            snr_lo: 0.0,
            snr_hi: 25.0,
            n_cc: DEFAULT_SAMPLE_SIZE,
            n_sc: DEFAULT_SAMPLE_SIZE,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            corr_eps: DEFAULT_EPS,
            center_features: false,
            seed: 0,
            checkpoint_every: 100,
            log_wall_time: false,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
            kmeans_tol: DEFAULT_TOL,
            skip_unweighted: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("corr_eps", self.corr_eps),
            ("kmeans_tol", self.kmeans_tol),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        for (k, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.n_cc < 2 || self.n_sc < 2 || self.kmeans_max_iters == 0 {
            return Err(Error::Config(
                "batch_size and kmeans_max_iters must be positive, n_cc and n_sc at least 2".into(),
            ));
        }
        if !(self.snr_lo.is_finite() && self.snr_hi.is_finite()) || self.snr_lo > self.snr_hi {
            return Err(Error::InvalidSnrRange {
                lo: self.snr_lo,
                hi: self.snr_hi,
            });
        }
        Ok(())
    }

    pub fn correlation_options(&self) -> CorrelationOptions {
        CorrelationOptions {
            eps: self.corr_eps,
            lambda: self.lambda,
            center: self.center_features,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(ModelConfig::default(), TrainConfig::default())
    }
}

impl RunConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        let f = FeatureConfig::default();
        Self {
            model,
            train,
            sample_rate: f.sample_rate,
            frame_ms: f.frame_ms,
            n_mels: f.n_mels,
            n_ceps: f.n_ceps,
        }
    }

    /// Smallest encoder compatible with the default MFCC framing: one
    /// context block, width 8. Used for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        let model = ModelConfig {
            conv_layers: vec![
                ConvSpec {
                    channels: 4,
                    kernel: 200,
                    stride: 2,
                },
                ConvSpec {
                    channels: 8,
                    kernel: 101,
                    stride: 2,
                },
            ],
            d_model: 8,
            n_transformer_layers: 1,
            n_heads: 2,
            ff_width: 16,
            mask_prob: 0.1,
            mask_span: 4,
            num_codes: 4,
            proj_cc_dim: 8,
            proj_sc_dim: 12,
            dual_branch_hb: false,
        };
        let train = TrainConfig {
            lr: 1e-3,
            batch_size: 3,
            n_cc: 64,
            n_sc: 64,
            steps: 6,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        Self::new(model, train)
    }

    /// MFCC settings whose hop is the encoder stride.
    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            sample_rate: self.sample_rate,
            frame_ms: self.frame_ms,
            hop_samples: self.model.total_stride(),
            n_mels: self.n_mels,
            n_ceps: self.n_ceps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let features = self.features();
        features.validate()?;
        self.model.check_alignment(&features)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let conv = m
            .conv_layers
            .iter()
            .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.stride))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("conv_layers", conv);
        put("d_model", m.d_model.to_string());
        put("n_transformer_layers", m.n_transformer_layers.to_string());
        put("n_heads", m.n_heads.to_string());
        put("ff_width", m.ff_width.to_string());
        put("mask_prob", m.mask_prob.to_string());
        put("mask_span", m.mask_span.to_string());
        put("num_codes", m.num_codes.to_string());
        put("proj_cc_dim", m.proj_cc_dim.to_string());
        put("proj_sc_dim", m.proj_sc_dim.to_string());
        put("dual_branch_hb", m.dual_branch_hb.to_string());
        put("sample_rate", self.sample_rate.to_string());
        put("frame_ms", self.frame_ms.to_string());
        put("n_mels", self.n_mels.to_string());
        put("n_ceps", self.n_ceps.to_string());
        put("lr", t.lr.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("adam_eps", t.adam_eps.to_string());
        put("steps", t.steps.to_string());
        put("batch_size", t.batch_size.to_string());
        put("snr_lo", t.snr_lo.to_string());
        put("snr_hi", t.snr_hi.to_string());
        put("n_cc", t.n_cc.to_string());
        put("n_sc", t.n_sc.to_string());
        put("lambda", t.lambda.to_string());
        put("alpha", t.alpha.to_string());
        put("beta", t.beta.to_string());
        put("corr_eps", t.corr_eps.to_string());
        put("center_features", t.center_features.to_string());
        put("seed", t.seed.to_string());
        put("checkpoint_every", t.checkpoint_every.to_string());
        put("log_wall_time", t.log_wall_time.to_string());
        put("kmeans_max_iters", t.kmeans_max_iters.to_string());
        put("kmeans_tol", t.kmeans_tol.to_string());
        put("skip_unweighted", t.skip_unweighted.to_string());
        s
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value '{v}' for {key}"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "conv_layers" => m.conv_layers = parse_conv_layers(value)?,
            "d_model" => m.d_model = p(key, value)?,
            "n_transformer_layers" => m.n_transformer_layers = p(key, value)?,
            "n_heads" => m.n_heads = p(key, value)?,
            "ff_width" => m.ff_width = p(key, value)?,
            "mask_prob" => m.mask_prob = p(key, value)?,
            "mask_span" => m.mask_span = p(key, value)?,
            "num_codes" => m.num_codes = p(key, value)?,
            "proj_cc_dim" => m.proj_cc_dim = p(key, value)?,
            "proj_sc_dim" => m.proj_sc_dim = p(key, value)?,
            "dual_branch_hb" => m.dual_branch_hb = p(key, value)?,
            "sample_rate" => self.sample_rate = p(key, value)?,
            "frame_ms" => self.frame_ms = p(key, value)?,
            "n_mels" => self.n_mels = p(key, value)?,
            "n_ceps" => self.n_ceps = p(key, value)?,
            "lr" => t.lr = p(key, value)?,
            "beta1" => t.beta1 = p(key, value)?,
            "beta2" => t.beta2 = p(key, value)?,
            "adam_eps" => t.adam_eps = p(key, value)?,
            "steps" => t.steps = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "snr_lo" => t.snr_lo = p(key, value)?,
            "snr_hi" => t.snr_hi = p(key, value)?,
            "n_cc" => t.n_cc = p(key, value)?,
            "n_sc" => t.n_sc = p(key, value)?,
            "lambda" => t.lambda = p(key, value)?,
            "alpha" => t.alpha = p(key, value)?,
            "beta" => t.beta = p(key, value)?,
            "corr_eps" => t.corr_eps = p(key, value)?,
            "center_features" => t.center_features = p(key, value)?,
            "seed" => t.seed = p(key, value)?,
            "checkpoint_every" => t.checkpoint_every = p(key, value)?,
            "log_wall_time" => t.log_wall_time = p(key, value)?,
            "kmeans_max_iters" => t.kmeans_max_iters = p(key, value)?,
            "kmeans_tol" => t.kmeans_tol = p(key, value)?,
            "skip_unweighted" => t.skip_unweighted = p(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }
}

/// `channels:kernel:stride` triples separated by commas.
fn parse_conv_layers(value: &str) -> std::result::Result<Vec<ConvSpec>, String> {
    value
        .split(',')
        .map(|part| {
            let nums: Vec<usize> = part
                .trim()
                .split(':')
                .map(|x| x.parse().map_err(|_| format!("bad conv layer '{part}'")))
                .collect::<std::result::Result<_, _>>()?;
            match nums[..] {
                [channels, kernel, stride] => Ok(ConvSpec {
                    channels,
                    kernel,
                    stride,
                }),
                _ => Err(format!("conv layer '{part}' must be channels:kernel:stride")),
            }
        })
        .collect()
}

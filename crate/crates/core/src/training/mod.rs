//! Pre-training: batch preparation, the combined loss and its gradient,
//! Adam updates, checkpoints and the training loop.

mod checkpoint;
mod step;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{make_augmented_pair, NoiseBank, Waveform};
use crate::config::{RunConfig, TrainConfig};
use crate::correlation::{
    grad_check, sample_probes, sample_frames, GradCheckReport, LossBreakdown, SampledFrames,
};
use crate::error::{Error, Result};
use crate::evaluation::diagonality;
use crate::features::{mfcc, FeatureConfig};
use crate::model::{sample_mask_spans, MaskSet, Model, ModelParams, TapPoint};
use crate::units::{assign_codes, CodeSequence, Codebook, CodebookSource};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use step::{loss_and_grad, BatchOutput};

/// A clean utterance and its frame-level target codes.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub clean: Waveform,
    pub codes: CodeSequence,
}

/// Labels every utterance with `codebook`. Encoder-layer codebooks need the
/// model whose layer they were fitted on.
pub fn prepare_examples(
    corpus: &[(String, Waveform)],
    codebook: &Codebook,
    features: &FeatureConfig,
    model: Option<&Model>,
) -> Result<Vec<TrainingExample>> {
    corpus
        .iter()
        .map(|(id, w)| {
            let f = match codebook.source() {
                CodebookSource::Mfcc => mfcc(w, features)?,
                CodebookSource::EncoderLayer(l) => {
                    let model = model.ok_or_else(|| {
                        Error::Config("encoder-layer codebook requires a model".into())
                    })?;
                    model.tap(w, TapPoint::Layer(l))?
                }
            };
            Ok(TrainingExample {
                id: id.clone(),
                clean: w.clone(),
                codes: assign_codes(&f, codebook)?,
            })
        })
        .collect()
}

/// Independent generators for each source of randomness in a step.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub augment: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub cc_sample: ChaCha8Rng,
    pub sc_sample: ChaCha8Rng,
}

pub(crate) const STREAM_INIT: u64 = 0;
const STREAM_AUGMENT: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_CC: u64 = 3;
const STREAM_SC: u64 = 4;
const STREAM_SHUFFLE_BASE: u64 = 1 << 32;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            augment: stream(seed, STREAM_AUGMENT),
            mask: stream(seed, STREAM_MASK),
            cc_sample: stream(seed, STREAM_CC),
            sc_sample: stream(seed, STREAM_SC),
        }
    }
}

/// Sums of per-step losses since the start of training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningLoss {
    pub l_hb: f64,
    pub l_cc: f64,
    pub l_sc: f64,
    pub total: f64,
    pub count: u64,
}

impl RunningLoss {
    pub fn add(&mut self, b: &LossBreakdown) {
        self.l_hb += b.l_hb;
        self.l_cc += b.l_cc;
        self.l_sc += b.l_sc;
        self.total += b.total;
        self.count += 1;
    }

    /// Mean `(l_hb, l_cc, l_sc, total)`, or `None` before the first step.
    pub fn mean(&self) -> Option<[f64; 4]> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            [self.l_hb / n, self.l_cc / n, self.l_sc / n, self.total / n]
        })
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Update number `t` (1-based).
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, t: u64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        let g = grads.tensors();
        let p = params.tensors_mut();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((g, (_, p)), (_, m)), (_, v)) in g.iter().zip(p).zip(m).zip(v) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub rngs: RngStreams,
    pub running: RunningLoss,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.train.seed, STREAM_INIT);
        let model = Model::new(config.model.clone(), &mut init)?;
        let adam = Adam::new(model.params());
        let rngs = RngStreams::from_seed(config.train.seed);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            rngs,
            running: RunningLoss::default(),
        })
    }
}

/// One utterance after augmentation and masking.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: String,
    pub noisy_a: Waveform,
    pub noisy_b: Waveform,
    pub noise_a: String,
    pub noise_b: String,
    pub snr_a_db: f64,
    pub snr_b_db: f64,
    pub mask_a: MaskSet,
    /// Present only when both branches are scored.
    pub mask_b: Option<MaskSet>,
    pub codes: CodeSequence,
}

#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub utterances: Vec<PreparedUtterance>,
    /// Over the concatenated valid frames of the batch.
    pub cc_frames: SampledFrames,
    pub sc_frames: SampledFrames,
}

impl PreparedBatch {
    pub fn valid_lengths(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.codes.valid_frames()).collect()
    }

    pub fn masked_frames(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.mask_a.count() + u.mask_b.as_ref().map_or(0, MaskSet::count))
            .sum()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.id.as_str()).collect()
    }
}

/// Draws augmentations, masks and correlation samples for one step. Each
/// draw uses its own stream.
pub fn prepare_batch(
    examples: &[&TrainingExample],
    bank: &NoiseBank,
    config: &RunConfig,
    rngs: &mut RngStreams,
) -> Result<PreparedBatch> {
    if examples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let t = &config.train;
    let m = &config.model;
    let mut utterances = Vec::with_capacity(examples.len());
    for ex in examples {
        let frames = m.frames_for(ex.clean.len())?;
        if frames != ex.codes.valid_frames() {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} codes for {} encoder frames",
                ex.id,
                ex.codes.valid_frames(),
                frames
            )));
        }
        let mut aug = ChaCha8Rng::seed_from_u64(rngs.augment.random());
        let pair = make_augmented_pair(&ex.clean, bank, (t.snr_lo, t.snr_hi), &mut aug)?;
        utterances.push(PreparedUtterance {
            id: ex.id.clone(),
            noisy_a: pair.noisy_a.waveform,
            noisy_b: pair.noisy_b.waveform,
            noise_a: pair.noise_a_id,
            noise_b: pair.noise_b_id,
            snr_a_db: pair.snr_a_db,
            snr_b_db: pair.snr_b_db,
            mask_a: MaskSet::none(0),
            mask_b: None,
            codes: ex.codes.clone(),
        });
    }
    let draw_masks = |utterances: &mut [PreparedUtterance], rng: &mut ChaCha8Rng| {
        for u in utterances.iter_mut() {
            let frames = u.codes.valid_frames();
            u.mask_a = sample_mask_spans(frames, m.mask_prob, m.mask_span, rng);
            u.mask_b = m
                .dual_branch_hb
                .then(|| sample_mask_spans(frames, m.mask_prob, m.mask_span, rng));
        }
    };
    let mut batch_masked = 0;
    for _ in 0..2 {
        draw_masks(&mut utterances, &mut rngs.mask);
        batch_masked = utterances.iter().map(|u| u.mask_a.count()).sum::<usize>();
        if batch_masked > 0 {
            break;
        }
    }
    if batch_masked == 0 {
        return Err(Error::EmptyMask);
    }
    let lengths: Vec<usize> = utterances.iter().map(|u| u.codes.valid_frames()).collect();
    let cc_frames = sample_frames(&lengths, t.n_cc, &mut rngs.cc_sample)?;
    let sc_frames = sample_frames(&lengths, t.n_sc, &mut rngs.sc_sample)?;
    Ok(PreparedBatch {
        utterances,
        cc_frames,
        sc_frames,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub cc_diagonality: f64,
    /// Largest `|C_ii - 1|` of the self-correlation matrix.
    pub sc_max_diag_dev: f64,
    pub masked_frames: usize,
    pub batch_ids: Vec<String>,
}

/// Prepares a batch, evaluates the combined loss and applies one update.
/// Parameters are checked for finiteness after the update; on any
/// non-finite value the state is left unchanged.
pub fn train_step(
    state: &mut TrainState,
    examples: &[&TrainingExample],
    bank: &NoiseBank,
) -> Result<StepReport> {
    let mut rngs = state.rngs.clone();
    let batch = prepare_batch(examples, bank, &state.config, &mut rngs)?;
    let ids: Vec<String> = batch.ids().iter().map(|s| s.to_string()).collect();
    let step = state.step + 1;
    let nonfinite = |what: String| Error::NonFinite(format!("step {step}, batch {ids:?}: {what}"));
    let out = loss_and_grad(&state.model, &batch, &state.config.train, true).map_err(|e| match e {
        Error::NonFinite(msg) => nonfinite(msg),
        other => other,
    })?;
    let grads = out.grads.expect("gradient requested");
    if !grads.all_finite() {
        return Err(nonfinite("gradient".into()));
    }
    let mut params = state.model.params().clone();
    let mut adam = state.adam.clone();
    adam.update(&mut params, &grads, step, &state.config.train);
    if !params.all_finite() || !adam.m.all_finite() || !adam.v.all_finite() {
        return Err(nonfinite("parameters after update".into()));
    }
    *state.model.params_mut() = params;
    state.adam = adam;
    state.rngs = rngs;
    state.step = step;
    state.running.add(&out.breakdown);
    Ok(StepReport {
        step,
        breakdown: out.breakdown,
        cc_diagonality: diagonality(&out.cc),
        sc_max_diag_dev: out.sc.max_diagonal_deviation(),
        masked_frames: batch.masked_frames(),
        batch_ids: ids,
    })
}

/// Example indices for step `step` (0-based): consecutive slices of
/// per-epoch permutations that depend only on `(seed, epoch)`.
pub fn batch_indices(seed: u64, n: usize, batch_size: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut pos = step as u128 * batch_size as u128;
    let mut cached: Option<(u128, Vec<usize>)> = None;
    while out.len() < batch_size {
        let epoch = pos / n as u128;
        let perm = match &cached {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut stream(seed, STREAM_SHUFFLE_BASE + epoch as u64));
                &cached.insert((epoch, p)).1
            }
        };
        out.push(perm[(pos % n as u128) as usize]);
        pos += 1;
    }
    out
}

/// One metrics row as a JSON object.
pub fn metrics_line(report: &StepReport, wall_ms: Option<f64>) -> String {
    let b = &report.breakdown;
    serde_json::json!({
        "step": report.step,
        "l_hb": b.l_hb,
        "l_cc": b.l_cc,
        "l_sc": b.l_sc,
        "total": b.total,
        "wall_ms": wall_ms,
    })
    .to_string()
}

/// Finite-difference check of the combined-loss gradient of `state.model`
/// on one augmented batch, at `probes` random parameter entries. `state`
/// itself is left untouched.
pub fn check_model_gradient<R: Rng + ?Sized>(
    state: &TrainState,
    batch: &[&TrainingExample],
    bank: &NoiseBank,
    probes: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut rngs = state.rngs.clone();
    let prepared = prepare_batch(batch, bank, &state.config, &mut rngs)?;
    let train = &state.config.train;
    let mut analytic = loss_and_grad(&state.model, &prepared, train, true)?
        .grads
        .ok_or_else(|| Error::Config("no gradient returned".into()))?;
    let mut params = state.model.params().clone();
    let picks = sample_probes(&mut params, probes, rng);
    let mcfg = state.model.config().clone();
    grad_check(
        |p: &mut ModelParams| {
            Model::from_parts(mcfg.clone(), p.clone())
                .and_then(|m| loss_and_grad(&m, &prepared, train, false))
                .map_or(f64::NAN, |o| o.breakdown.total)
        },
        &mut params,
        &mut analytic,
        &picks,
        step,
    )
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.dhck"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join("final.dhck")
}

/// Trains from scratch into `out_dir` (metrics file plus checkpoints) and
/// returns the final checkpoint path.
pub fn pretrain(
    config: &RunConfig,
    corpus: &[(String, Waveform)],
    bank: &NoiseBank,
    codebook: &Codebook,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let mut state = TrainState::new(config.clone())?;
    let examples = prepare_examples(corpus, codebook, &config.features(), Some(&state.model))?;
    let target = config.train.steps;
    run(&mut state, &examples, bank, out_dir.as_ref(), target, false)
}

/// Continues a checkpointed run up to `steps` total steps (default: the
/// configured count), appending to the existing metrics file.
pub fn resume(
    checkpoint: impl AsRef<Path>,
    corpus: &[(String, Waveform)],
    bank: &NoiseBank,
    codebook: &Codebook,
    out_dir: impl AsRef<Path>,
    steps: Option<u64>,
) -> Result<PathBuf> {
    let mut state = load_checkpoint(checkpoint)?;
    let target = steps.unwrap_or(state.config.train.steps);
    let examples = prepare_examples(corpus, codebook, &state.config.features(), Some(&state.model))?;
    run(&mut state, &examples, bank, out_dir.as_ref(), target, true)
}

/// Runs `state` up to `target` steps with metrics and checkpoints under
/// `out_dir`.
pub fn run(
    state: &mut TrainState,
    examples: &[TrainingExample],
    bank: &NoiseBank,
    out_dir: &Path,
    target: u64,
    append: bool,
) -> Result<PathBuf> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = if append {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let t = state.config.train.clone();
    let started = Instant::now();
    while state.step < target {
        let idx = batch_indices(t.seed, examples.len(), t.batch_size.min(examples.len()), state.step);
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        let report = match train_step(state, &batch, bank) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                let dump = out_dir.join(format!("nonfinite_step_{:08}.txt", state.step + 1));
                let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
                let _ = fs::write(&dump, format!("{e}\n{}\n", ids.join("\n")));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let wall = t
            .log_wall_time
            .then(|| started.elapsed().as_secs_f64() * 1e3);
        writeln!(metrics, "{}", metrics_line(&report, wall)).map_err(|e| Error::io(&metrics_path, e))?;
        if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save_checkpoint(state, checkpoint_path(out_dir, state.step))?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let last = final_checkpoint_path(out_dir);
    save_checkpoint(state, &last)?;
    Ok(last)
}

//! Synthetic toy data: band-limited pseudo-speech and three noise types.
//!
//! Pseudo-speech is a sequence of short "phones": harmonic vowels shaped by
//! two formants, a band-noise fricative and a near-silent closure, with
//! raised-cosine transitions. Everything stays below 4 kHz. Samples are
//! quantized to the 16-bit grid so that writing and re-reading WAV files
//! is lossless.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{
    save_wav, write_corpus_manifest, write_noise_manifest, NoiseBank, NoiseCategory, NoiseEntry,
    Waveform, CANONICAL_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

const SR: f64 = CANONICAL_SAMPLE_RATE as f64;
const BAND_TOP_HZ: f64 = 3800.0;
const FORMANT_BW_HZ: f64 = 90.0;
const TARGET_RMS: f64 = 0.1;

/// Formant pairs (F1, F2) of the vowel-like phones.
const VOWELS: [(f64, f64); 6] = [
    (300.0, 2300.0),
    (400.0, 2000.0),
    (600.0, 1700.0),
    (750.0, 1200.0),
    (500.0, 900.0),
    (350.0, 800.0),
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phone {
    Vowel(usize),
    Fricative,
    Closure,
}

fn random_phone<R: Rng + ?Sized>(rng: &mut R) -> Phone {
    match rng.random_range(0..8) {
        6 => Phone::Fricative,
        7 => Phone::Closure,
        v => Phone::Vowel(v),
    }
}

fn quantize(x: &mut [f64]) {
    for s in x {
        *s = ((*s * 32768.0).round() / 32768.0).clamp(-1.0, 32767.0 / 32768.0);
    }
}

/// Rescales to `rms`, backing off if the peak would exceed 0.95.
fn normalize(x: &mut [f64], rms: f64) {
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if power <= 0.0 {
        return;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = (rms / power.sqrt()).min(0.95 / peak);
    x.iter_mut().for_each(|v| *v *= gain);
}

fn finish(mut x: Vec<f64>, rms: f64) -> Result<Waveform> {
    normalize(&mut x, rms);
    quantize(&mut x);
    Waveform::new(x, CANONICAL_SAMPLE_RATE)
}

/// Sum of random-phase sinusoids spread over `[lo, hi)` Hz.
fn band_noise<R: Rng + ?Sized>(len: usize, lo: f64, hi: f64, partials: usize, rng: &mut R) -> Vec<f64> {
    let comps: Vec<(f64, f64)> = (0..partials)
        .map(|_| (rng.random_range(lo..hi), rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..len)
        .map(|n| {
            comps
                .iter()
                .map(|&(f, ph)| (2.0 * PI * f * n as f64 / SR + ph).sin())
                .sum()
        })
        .collect()
}

/// Pseudo-speech of `len` samples from one synthetic speaker.
fn speech_samples<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let f0 = rng.random_range(100.0..220.0);
    let harmonics = (BAND_TOP_HZ / f0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let vowel_amps: Vec<Vec<f64>> = VOWELS
        .iter()
        .map(|&(f1, f2)| {
            let mut a: Vec<f64> = (1..=harmonics)
                .map(|h| {
                    let f = h as f64 * f0;
                    let r = |c: f64| 1.0 / (1.0 + ((f - c) / FORMANT_BW_HZ).powi(2));
                    r(f1) + 0.6 * r(f2)
                })
                .collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter_mut().for_each(|v| *v /= norm);
            a
        })
        .collect();
    let fricative = band_noise(len, 2500.0, BAND_TOP_HZ, 24, rng);
    let fric_norm = (fricative.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);

    // Phone boundaries and identities.
    let mut segments = Vec::new();
    let mut start = 0;
    while start < len {
        let dur = rng.random_range(160..=320);
        segments.push((start, random_phone(rng)));
        start += dur;
    }
    let transition = 48.0;
    let phone_value = |p: Phone, n: usize| -> f64 {
        match p {
            Phone::Vowel(v) => {
                let t = n as f64 / SR;
                vowel_amps[v]
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(h, (a, ph))| a * (2.0 * PI * (h + 1) as f64 * f0 * t + ph).sin())
                    .sum::<f64>()
                    * std::f64::consts::SQRT_2
            }
            Phone::Fricative => 0.5 * fricative[n] / fric_norm,
            Phone::Closure => 0.03 * fricative[n] / fric_norm,
        }
    };
    let mut out = vec![0.0; len];
    for (k, &(s, p)) in segments.iter().enumerate() {
        let next_start = segments.get(k + 1).map_or(len, |x| x.0);
        // Weight of phone k: ramps up around its start, down around the next boundary.
        let lo = (s as f64 - transition / 2.0).max(0.0) as usize;
        let hi = ((next_start as f64 + transition / 2.0) as usize).min(len);
        for (n, slot) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let ramp = |edge: f64| -> f64 {
                let x = ((n as f64 - edge) / transition + 0.5).clamp(0.0, 1.0);
                0.5 - 0.5 * (PI * x).cos()
            };
            let up = if k == 0 { 1.0 } else { ramp(s as f64) };
            let down = if k + 1 == segments.len() { 1.0 } else { 1.0 - ramp(next_start as f64) };
            *slot += up * down * phone_value(p, n);
        }
    }
    out
}

/// Pseudo-speech long enough for exactly `frames` frames of the default
/// feature geometry.
pub fn pseudo_speech<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Result<Waveform> {
    if frames == 0 {
        return Err(Error::Config("utterance needs at least one frame".into()));
    }
    let f = FeatureConfig::default();
    let len = f.frame_samples() + (frames - 1) * f.hop_samples;
    finish(speech_samples(len, rng), TARGET_RMS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthNoise {
    /// Low-band rumble (60-800 Hz) with a 100 Hz tone.
    Hum,
    /// Broadband white noise.
    Hiss,
    /// Several overlapping pseudo-speakers.
    Babble,
}

impl SynthNoise {
    pub const ALL: [SynthNoise; 3] = [SynthNoise::Hum, SynthNoise::Hiss, SynthNoise::Babble];

    pub fn id(self) -> &'static str {
        match self {
            SynthNoise::Hum => "hum",
            SynthNoise::Hiss => "hiss",
            SynthNoise::Babble => "babble",
        }
    }

    pub fn category(self) -> NoiseCategory {
        match self {
            SynthNoise::Hum | SynthNoise::Hiss => NoiseCategory::TypeA,
            SynthNoise::Babble => NoiseCategory::TypeB,
        }
    }
}

pub fn synth_noise<R: Rng + ?Sized>(kind: SynthNoise, len: usize, rng: &mut R) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::EmptyPayload);
    }
    let x = match kind {
        SynthNoise::Hum => {
            let mut x = band_noise(len, 60.0, 800.0, 40, rng);
            let t0: f64 = rng.random_range(0.0..2.0 * PI);
            x.iter_mut()
                .enumerate()
                .for_each(|(n, v)| *v += 3.0 * (2.0 * PI * 100.0 * n as f64 / SR + t0).sin());
            x
        }
        SynthNoise::Hiss => (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect(),
        SynthNoise::Babble => {
            let mut sum = vec![0.0; len];
            for _ in 0..3 {
                let mut voice = speech_samples(len, rng);
                normalize(&mut voice, 1.0);
                sum.iter_mut().zip(&voice).for_each(|(s, v)| *s += v);
            }
            sum
        }
    };
    finish(x, TARGET_RMS)
}

/// `n` pseudo-speech utterances named `utt0000`, ... with frame counts
/// drawn uniformly from `[min_frames, max_frames]`.
pub fn toy_corpus<R: Rng + ?Sized>(
    n: usize,
    min_frames: usize,
    max_frames: usize,
    rng: &mut R,
) -> Result<Vec<(String, Waveform)>> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if min_frames == 0 || min_frames > max_frames {
        return Err(Error::Config(format!("bad frame range [{min_frames}, {max_frames}]")));
    }
    (0..n)
        .map(|i| {
            let frames = rng.random_range(min_frames..=max_frames);
            Ok((format!("utt{i:04}"), pseudo_speech(frames, rng)?))
        })
        .collect()
}

/// One second of each [`SynthNoise`] type.
pub fn toy_noise_bank<R: Rng + ?Sized>(rng: &mut R) -> Result<NoiseBank> {
    let entries = SynthNoise::ALL
        .iter()
        .map(|&kind| {
            Ok(NoiseEntry {
                id: kind.id().to_string(),
                waveform: synth_noise(kind, CANONICAL_SAMPLE_RATE as usize, rng)?,
                category: kind.category(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NoiseBank::new(entries)
}

/// Writes WAV files plus `corpus.tsv` and `noise.tsv` manifests into `dir`
/// and returns the two manifest paths.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    corpus: &[(String, Waveform)],
    bank: &NoiseBank,
) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    for sub in ["speech", "noise"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for (id, w) in corpus {
        let rel = format!("speech/{id}.wav");
        save_wav(dir.join(&rel), w)?;
        rows.push((id.clone(), rel, w.len()));
    }
    let mut noise_rows = Vec::new();
    for e in bank.entries() {
        let rel = format!("noise/{}.wav", e.id);
        save_wav(dir.join(&rel), &e.waveform)?;
        noise_rows.push((e.id.clone(), rel, e.category));
    }
    let corpus_manifest = dir.join("corpus.tsv");
    let noise_manifest = dir.join("noise.tsv");
    write_corpus_manifest(&corpus_manifest, &rows)?;
    write_noise_manifest(&noise_manifest, &noise_rows)?;
    Ok((corpus_manifest, noise_manifest))
}

//! Waveform I/O and noise augmentation.
//!
//! SNR here is always full-clip mean-squared power: the speech power over
//! the whole utterance against the power of the noise segment actually
//! added to it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Canonical sample rate of every waveform in the pipeline.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidWaveform(format!(
                "sample {i} = {s} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude over the whole clip.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub(crate) fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Reads a RIFF/WAVE file holding 16-bit integer mono PCM.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::MalformedHeader(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        let format = match spec.sample_format {
            hound::SampleFormat::Int => "integer",
            hound::SampleFormat::Float => "float",
        };
        return Err(Error::UnsupportedBitDepth {
            bits: spec.bits_per_sample,
            format,
        });
    }
    if reader.duration() == 0 {
        return Err(Error::EmptyPayload);
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM. Samples are scaled by 32768 and saturated to
/// the i16 range, so `load_wav(save_wav(w))` is exact for any waveform that
/// came from `load_wav`.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseCategory {
    /// Stationary noise.
    TypeA,
    /// Non-stationary noise.
    TypeB,
    Other,
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseCategory::TypeA => "TypeA",
            NoiseCategory::TypeB => "TypeB",
            NoiseCategory::Other => "Other",
        })
    }
}

impl std::str::FromStr for NoiseCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "TypeA" => Ok(NoiseCategory::TypeA),
            "TypeB" => Ok(NoiseCategory::TypeB),
            "Other" => Ok(NoiseCategory::Other),
            other => Err(format!("unknown noise category '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEntry {
    pub id: String,
    pub waveform: Waveform,
    pub category: NoiseCategory,
}

/// A pool of noise clips to draw distortions from.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    entries: Vec<NoiseEntry>,
}

impl NoiseBank {
    pub fn new(entries: Vec<NoiseEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::BankTooSmall(entries.len()));
        }
        for e in &entries {
            if e.waveform.power() <= 0.0 {
                return Err(Error::ZeroPower("noise bank entry"));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[NoiseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&NoiseEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// A noisy mixture together with the exact components that were summed.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub waveform: Waveform,
    /// Clean speech after any joint peak normalization.
    pub speech_component: Vec<f64>,
    /// Scaled noise segment after any joint peak normalization.
    pub noise_component: Vec<f64>,
    /// Effective noise gain, including the normalization factor.
    pub gain: f64,
    pub requested_snr_db: f64,
}

impl Mixture {
    /// SNR recomputed from the stored components.
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (mean_power(&self.speech_component) / mean_power(&self.noise_component)).log10()
    }
}

/// Adds `noise` to `speech` at the requested SNR.
///
/// A random segment of the noise (tiled end-to-end when shorter than the
/// speech) is scaled by `sqrt(P_speech / (P_noise * 10^(snr/10)))`. If the
/// sum would leave `[-1, 1]`, mixture and components are divided by the
/// peak together, which leaves the SNR untouched.
pub fn mix_at_snr<R: Rng + ?Sized>(
    speech: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    if speech.sample_rate != noise.sample_rate {
        return Err(Error::SampleRateMismatch(speech.sample_rate, noise.sample_rate));
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite(format!("snr_db = {snr_db}")));
    }
    let speech_power = speech.power();
    if speech_power <= 0.0 {
        return Err(Error::ZeroPower("speech"));
    }
    if noise.power() <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }

    let segment = crop_noise(noise.samples(), speech.len(), rng);
    let noise_power = mean_power(&segment);
    if noise_power <= 0.0 {
        return Err(Error::ZeroPower("noise segment"));
    }
    let gain = (speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();

    let mut speech_component = speech.samples().to_vec();
    let mut noise_component: Vec<f64> = segment.iter().map(|n| gain * n).collect();
    let mut mixed: Vec<f64> = speech_component
        .iter()
        .zip(&noise_component)
        .map(|(s, n)| s + n)
        .collect();

    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut effective_gain = gain;
    if peak > 1.0 {
        for v in mixed
            .iter_mut()
            .chain(speech_component.iter_mut())
            .chain(noise_component.iter_mut())
        {
            *v /= peak;
        }
        effective_gain /= peak;
    }

    Ok(Mixture {
        waveform: Waveform::new(mixed, speech.sample_rate)?,
        speech_component,
        noise_component,
        gain: effective_gain,
        requested_snr_db: snr_db,
    })
}

fn crop_noise<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if noise.len() >= len {
        let offset = rng.random_range(0..=noise.len() - len);
        noise[offset..offset + len].to_vec()
    } else {
        let offset = rng.random_range(0..noise.len());
        (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
    }
}

/// One clean utterance and two independently distorted copies of it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub clean: Waveform,
    pub noisy_a: Mixture,
    pub noisy_b: Mixture,
    pub snr_a_db: f64,
    pub snr_b_db: f64,
    pub noise_a_id: String,
    pub noise_b_id: String,
}

/// Draws two distinct noises and two SNRs from `snr_range` and mixes both.
pub fn make_augmented_pair<R: Rng + ?Sized>(
    speech: &Waveform,
    bank: &NoiseBank,
    snr_range: (f64, f64),
    rng: &mut R,
) -> Result<AugmentedPair> {
    let (lo, hi) = snr_range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::InvalidSnrRange { lo, hi });
    }
    if bank.len() < 2 {
        return Err(Error::BankTooSmall(bank.len()));
    }
    let picks = index::sample(rng, bank.len(), 2);
    let (a, b) = (&bank.entries[picks.index(0)], &bank.entries[picks.index(1)]);
    let snr_a_db = draw_snr(lo, hi, rng);
    let snr_b_db = draw_snr(lo, hi, rng);
    let noisy_a = mix_at_snr(speech, &a.waveform, snr_a_db, rng)?;
    let noisy_b = mix_at_snr(speech, &b.waveform, snr_b_db, rng)?;
    Ok(AugmentedPair {
        clean: speech.clone(),
        noisy_a,
        noisy_b,
        snr_a_db,
        snr_b_db,
        noise_a_id: a.id.clone(),
        noise_b_id: b.id.clone(),
    })
}

fn draw_snr<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One row of a corpus manifest, with the path resolved against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub path: PathBuf,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub category: NoiseCategory,
}

fn read_rows(path: &Path) -> Result<Vec<(usize, [String; 3])>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push((
            i + 1,
            [fields[0].to_string(), fields[1].to_string(), fields[2].to_string()],
        ));
    }
    Ok(rows)
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parses `utterance_id<TAB>relative_path<TAB>num_samples` rows.
pub fn read_corpus_manifest(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    read_rows(path)?
        .into_iter()
        .map(|(line, [id, rel, n])| {
            let num_samples = n.parse().map_err(|_| Error::Manifest {
                path: path.to_path_buf(),
                line,
                reason: format!("bad sample count '{n}'"),
            })?;
            Ok(CorpusEntry {
                id,
                path: dir.join(rel),
                num_samples,
            })
        })
        .collect()
}

/// Parses `noise_id<TAB>relative_path<TAB>category` rows.
pub fn read_noise_manifest(path: impl AsRef<Path>) -> Result<Vec<NoiseManifestEntry>> {
    let path = path.as_ref();
    let dir = manifest_dir(path);
    read_rows(path)?
        .into_iter()
        .map(|(line, [id, rel, cat])| {
            let category = cat.parse().map_err(|reason| Error::Manifest {
                path: path.to_path_buf(),
                line,
                reason,
            })?;
            Ok(NoiseManifestEntry {
                id,
                path: dir.join(rel),
                category,
            })
        })
        .collect()
}

pub fn write_corpus_manifest(path: impl AsRef<Path>, rows: &[(String, String, usize)]) -> Result<()> {
    let text: String = rows
        .iter()
        .map(|(id, rel, n)| format!("{id}\t{rel}\t{n}\n"))
        .collect();
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_noise_manifest(
    path: impl AsRef<Path>,
    rows: &[(String, String, NoiseCategory)],
) -> Result<()> {
    let text: String = rows
        .iter()
        .map(|(id, rel, cat)| format!("{id}\t{rel}\t{cat}\n"))
        .collect();
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

/// Loads every utterance of a corpus manifest, checking the recorded length.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<Vec<(String, Waveform)>> {
    let manifest = manifest.as_ref();
    let entries = read_corpus_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let w = load_wav(&e.path)?;
            if w.len() != e.num_samples {
                return Err(Error::Manifest {
                    path: manifest.to_path_buf(),
                    line: i + 1,
                    reason: format!(
                        "{} has {} samples, manifest says {}",
                        e.path.display(),
                        w.len(),
                        e.num_samples
                    ),
                });
            }
            Ok((e.id, w))
        })
        .collect()
}

pub fn load_noise_bank(manifest: impl AsRef<Path>) -> Result<NoiseBank> {
    let entries = read_noise_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(NoiseEntry {
                waveform: load_wav(&e.path)?,
                id: e.id,
                category: e.category,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NoiseBank::new(entries)
}

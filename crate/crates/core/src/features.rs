//! Frame-level features: MFCC + deltas, and the `T x F` container shared
//! with the encoder outputs.

use std::f64::consts::PI;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;
const DELTA_WINDOW: usize = 2;

/// A `T x F` matrix of per-frame features. Rows at or beyond `valid_frames`
/// are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    data: Array2<f64>,
    valid_frames: usize,
    pub hop_samples: usize,
    pub frame_samples: usize,
}

impl FrameFeatures {
    pub fn new(
        data: Array2<f64>,
        valid_frames: usize,
        hop_samples: usize,
        frame_samples: usize,
    ) -> Result<Self> {
        if valid_frames > data.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "valid_frames {valid_frames} exceeds {} rows",
                data.nrows()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame features".into()));
        }
        if data.slice(s![valid_frames.., ..]).iter().any(|&v| v != 0.0) {
            return Err(Error::DimensionMismatch("padding rows must be zero".into()));
        }
        Ok(Self {
            data,
            valid_frames,
            hop_samples,
            frame_samples,
        })
    }

    /// Wraps a matrix in which every row is valid.
    pub fn dense(data: Array2<f64>, hop_samples: usize, frame_samples: usize) -> Result<Self> {
        let t = data.nrows();
        Self::new(data, t, hop_samples, frame_samples)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// The valid (non-padding) rows.
    pub fn valid(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![..self.valid_frames, ..])
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Zero-pads to `frames` rows.
    pub fn padded_to(&self, frames: usize) -> Result<Self> {
        if frames < self.num_frames() {
            return Err(Error::DimensionMismatch(format!(
                "cannot pad {} frames down to {frames}",
                self.num_frames()
            )));
        }
        let mut data = Array2::zeros((frames, self.dim()));
        data.slice_mut(s![..self.num_frames(), ..]).assign(&self.data);
        Self::new(data, self.valid_frames, self.hop_samples, self.frame_samples)
    }
}

/// Number of frames for `len` samples: `floor((len - frame) / hop) + 1`.
pub fn frame_count(len: usize, frame_samples: usize, hop_samples: usize) -> Result<usize> {
    if len < frame_samples {
        return Err(Error::TooShort {
            len,
            frame: frame_samples,
        });
    }
    Ok((len - frame_samples) / hop_samples + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    /// Must equal the encoder's total conv stride for frame alignment.
    pub hop_samples: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::audio::CANONICAL_SAMPLE_RATE,
            frame_ms: 25.0,
            hop_samples: 4,
            n_mels: 26,
            n_ceps: 13,
        }
    }
}

impl FeatureConfig {
    pub fn frame_samples(&self) -> usize {
        (f64::from(self.sample_rate) * self.frame_ms / 1000.0).round() as usize
    }

    /// Width of the MFCC + delta + delta-delta vector.
    pub fn feature_dim(&self) -> usize {
        3 * self.n_ceps
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0
            || self.frame_samples() == 0
            || self.hop_samples == 0
            || self.n_mels == 0
            || self.n_ceps == 0
        {
            return Err(Error::Config("feature parameters must be positive".into()));
        }
        if self.n_ceps > self.n_mels {
            return Err(Error::Config(format!(
                "n_ceps {} exceeds n_mels {}",
                self.n_ceps, self.n_mels
            )));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist,
/// as an `n_mels x (n_fft/2 + 1)` matrix.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Pre-log mel filterbank energies, `T x n_mels`.
pub fn mel_energies(w: &Waveform, cfg: &FeatureConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::SampleRateMismatch(w.sample_rate(), cfg.sample_rate));
    }
    let frame = cfg.frame_samples();
    let t = frame_count(w.len(), frame, cfg.hop_samples)?;
    let n_fft = frame.next_power_of_two();
    let window = hann(frame);
    let fb = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let n_bins = n_fft / 2 + 1;
    let mut power = Array2::zeros((t, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let samples = w.samples();
    for (f, mut row) in power.axis_iter_mut(Axis(0)).enumerate() {
        let start = f * cfg.hop_samples;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (c, win)) in buf.iter_mut().zip(&window).enumerate() {
            c.re = samples[start + i] * win;
        }
        fft.process(&mut buf);
        for (p, c) in row.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
    }
    Ok(power.dot(&fb.t()))
}

/// Orthonormal DCT-II of each row, keeping the first `keep` coefficients.
fn dct2(x: &Array2<f64>, keep: usize) -> Array2<f64> {
    let m = x.ncols();
    let mut basis = Array2::zeros((m, keep));
    for k in 0..keep {
        let scale = if k == 0 {
            (1.0 / m as f64).sqrt()
        } else {
            (2.0 / m as f64).sqrt()
        };
        for n in 0..m {
            basis[[n, k]] = scale * (PI * k as f64 * (n as f64 + 0.5) / m as f64).cos();
        }
    }
    x.dot(&basis)
}

/// Regression deltas over +/-2 frames with edge replication.
pub fn deltas(x: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows();
    let denom = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..t {
        let mut row = out.row_mut(i);
        for n in 1..=DELTA_WINDOW {
            let ahead = x.row((i + n).min(t - 1));
            let behind = x.row(i.saturating_sub(n));
            row.scaled_add(n as f64 / denom, &(&ahead - &behind));
        }
    }
    out
}

/// MFCCs with first- and second-order deltas, `T x 3*n_ceps`.
pub fn mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FrameFeatures> {
    let energies = mel_energies(w, cfg)?;
    let log_mel = energies.mapv(|e| e.max(LOG_FLOOR).ln());
    let ceps = dct2(&log_mel, cfg.n_ceps);
    let d1 = deltas(&ceps);
    let d2 = deltas(&d1);
    let data = ndarray::concatenate(Axis(1), &[ceps.view(), d1.view(), d2.view()])
        .expect("equal row counts");
    FrameFeatures::dense(data, cfg.hop_samples, cfg.frame_samples())
}

const FEATURE_MAGIC: &[u8; 4] = b"DHFT";
const FEATURE_VERSION: u32 = 1;

/// Little-endian dump: magic, version, T, F, valid, then row-major f64s.
pub fn write_features(path: impl AsRef<Path>, f: &FrameFeatures) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 8 * f.data.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        f.num_frames() as u32,
        f.dim() as u32,
        f.valid_frames as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.as_ref(), buf).map_err(|e| Error::io(path.as_ref(), e))
}

/// Reads a feature dump. Framing parameters are not stored in the file and
/// come from `cfg`.
pub fn read_features(path: impl AsRef<Path>, cfg: &FeatureConfig) -> Result<FrameFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32s = [0u32; 4];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *v = u32::from_le_bytes(b);
    }
    let [version, t, f, valid] = u32s;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let (t, f) = (t as usize, f as usize);
    let body = &bytes[20..];
    if body.len() != 8 * t * f {
        return Err(bad("payload length does not match header"));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let data = Array2::from_shape_vec((t, f), data).map_err(|_| bad("shape"))?;
    FrameFeatures::new(data, valid as usize, cfg.hop_samples, cfg.frame_samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::CANONICAL_SAMPLE_RATE;

    fn noise_wave(len: usize, amp: f64, seed: u64) -> Waveform {
        // xorshift keeps this test free of the rand API
        let mut x = seed.max(1);
        let s = (0..len)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                amp * ((x % 2001) as f64 / 1000.0 - 1.0)
            })
            .collect();
        Waveform::new(s, CANONICAL_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn thirteen_ceps_give_thirty_nine_dims() {
        let cfg = FeatureConfig::default();
        let f = mfcc(&noise_wave(1200, 0.3, 3), &cfg).unwrap();
        assert_eq!(f.dim(), 39);
        assert_eq!(f.num_frames(), (1200 - 400) / 4 + 1);
        assert_eq!(f.valid_frames(), f.num_frames());
    }

    #[test]
    fn exactly_one_frame() {
        let cfg = FeatureConfig::default();
        let f = mfcc(&noise_wave(400, 0.3, 5), &cfg).unwrap();
        assert_eq!(f.num_frames(), 1);
        assert!(matches!(
            mfcc(&noise_wave(399, 0.3, 5), &cfg),
            Err(Error::TooShort { len: 399, frame: 400 })
        ));
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = FeatureConfig::default();
        let w = Waveform::new(vec![0.0; 480], CANONICAL_SAMPLE_RATE).unwrap();
        let f = mfcc(&w, &cfg).unwrap();
        let c0 = (cfg.n_mels as f64).sqrt() * LOG_FLOOR.ln();
        for row in f.data().rows() {
            assert!((row[0] - c0).abs() < 1e-9);
            for &v in row.iter().skip(1) {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deltas_of_constant_sequence_vanish() {
        let x = Array2::from_shape_fn((7, 3), |(_, j)| j as f64 * 1.5 - 2.0);
        assert!(deltas(&x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deltas_of_a_ramp_are_its_slope_in_the_interior() {
        let x = Array2::from_shape_fn((9, 1), |(i, _)| 3.0 * i as f64);
        let d = deltas(&x);
        for i in 2..7 {
            assert!((d[[i, 0]] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_amplitude_never_lowers_filterbank_energy() {
        let cfg = FeatureConfig::default();
        let w = noise_wave(900, 0.2, 11);
        let loud = Waveform::new(w.samples().iter().map(|v| 2.0 * v).collect(), 16000).unwrap();
        let a = mel_energies(&w, &cfg).unwrap();
        let b = mel_energies(&loud, &cfg).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn mfcc_is_deterministic() {
        let cfg = FeatureConfig::default();
        let w = noise_wave(1000, 0.4, 8);
        assert_eq!(mfcc(&w, &cfg).unwrap(), mfcc(&w, &cfg).unwrap());
    }

    #[test]
    fn filterbank_covers_zero_to_nyquist() {
        let fb = mel_filterbank(26, 512, 16000);
        assert_eq!(fb.dim(), (26, 257));
        // Every interior bin is covered by some filter.
        for b in 1..256 {
            assert!(fb.column(b).sum() > 0.0, "bin {b} uncovered");
        }
    }

    #[test]
    fn dump_roundtrip_and_padding_rule() {
        let cfg = FeatureConfig::default();
        let f = mfcc(&noise_wave(700, 0.3, 2), &cfg).unwrap().padded_to(90).unwrap();
        assert_eq!(f.valid_frames(), 76);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.dhft");
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p, &cfg).unwrap(), f);

        let mut bad = f.data().clone();
        bad[[80, 0]] = 1.0;
        assert!(FrameFeatures::new(bad, 76, 4, 400).is_err());
    }
}

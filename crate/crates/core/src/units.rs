//! Discrete hidden units: k-means codebooks over frame features and
//! per-frame code assignment.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::features::FrameFeatures;
use crate::model::{Model, TapPoint};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookSource {
    Mfcc,
    /// Output of the given context-network layer (1-based).
    EncoderLayer(usize),
}

impl CodebookSource {
    fn tag(self) -> u8 {
        match self {
            CodebookSource::Mfcc => 0,
            CodebookSource::EncoderLayer(l) => u8::try_from(l + 1).unwrap_or(u8::MAX),
        }
    }

    fn from_tag(tag: u8) -> Self {
        match tag {
            0 => CodebookSource::Mfcc,
            t => CodebookSource::EncoderLayer(usize::from(t) - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Array2<f64>,
    source: CodebookSource,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>, source: CodebookSource) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(Error::Config(format!(
                "a codebook needs K >= 2 centroids, got {}",
                centroids.nrows()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook centroid".into()));
        }
        let distinct = count_distinct(centroids.view());
        if distinct != centroids.nrows() {
            return Err(Error::Config("codebook has duplicate centroids".into()));
        }
        Ok(Self { centroids, source })
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn source(&self) -> CodebookSource {
        self.source
    }
}

/// Per-frame unit labels for the valid frames of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
}

impl CodeSequence {
    pub fn valid_frames(&self) -> usize {
        self.codes.len()
    }
}

/// Result of a k-means run, including the per-iteration inertia.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    /// Sum of squared distances after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn row_key(row: ArrayView1<'_, f64>) -> Vec<u64> {
    // +0.0 and -0.0 are the same point
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn count_distinct(x: ArrayView2<'_, f64>) -> usize {
    x.rows().into_iter().map(row_key).collect::<HashSet<_>>().len()
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp_init<R: Rng + ?Sized>(x: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let pick = pick.expect("enough distinct frames to seed every centroid");
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops once the largest centroid displacement drops below `tol` or after
/// `max_iters` iterations. A cluster that ends up empty is re-seeded at the
/// point currently farthest from its own centroid.
pub fn fit_kmeans_traced<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    let distinct = count_distinct(x);
    if distinct < k {
        return Err(Error::TooFewDistinctFrames { distinct, k });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let n = x.nrows();
    let mut centroids = kmeans_pp_init(x, k, rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut inertia: Vec<f64> = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut total = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let (l, d) = nearest(row, &centroids);
            labels[i] = l;
            dists[i] = d;
            total += d;
        }
        if let Some(&prev) = inertia.last() {
            assert!(
                total <= prev + 1e-12 * prev.abs(),
                "k-means inertia increased: {prev} -> {total}"
            );
        }
        inertia.push(total);

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, row) in x.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &row);
            counts[labels[i]] += 1;
        }
        let mut updated = centroids.clone();
        let mut taken = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                updated.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty data");
                taken.insert(far);
                dists[far] = 0.0;
                updated.row_mut(c).assign(&x.row(far));
            }
        }
        let shift = updated
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < tol {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        inertia,
        iterations,
    })
}

/// Fits a codebook on a pooled `N x F` frame matrix.
pub fn fit_kmeans<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
    source: CodebookSource,
) -> Result<Codebook> {
    let fit = fit_kmeans_traced(x, k, rng, max_iters, tol)?;
    Codebook::new(fit.centroids, source)
}

/// Maps each valid frame to its nearest centroid (lowest index on ties).
pub fn assign_codes(features: &FrameFeatures, cb: &Codebook) -> Result<CodeSequence> {
    if features.dim() != cb.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} dims, codebook has {}",
            features.dim(),
            cb.feature_dim()
        )));
    }
    let codes = features
        .valid()
        .rows()
        .into_iter()
        .map(|r| nearest(r, &cb.centroids).0)
        .collect();
    Ok(CodeSequence { codes })
}

/// Stacks the valid frames of several feature matrices into one pool.
pub fn pool_frames<'a>(features: impl IntoIterator<Item = &'a FrameFeatures>) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<'_, f64>> = features.into_iter().map(|f| f.valid()).collect();
    if views.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::DimensionMismatch(format!("pooling frames: {e}")))
}

/// Second-iteration units: clusters the clean-audio outputs of context
/// layer `layer_index` (1-based) of a trained encoder.
pub fn refresh_units<R: Rng + ?Sized>(
    model: &Model,
    layer_index: usize,
    corpus: &[Waveform],
    k: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
) -> Result<Codebook> {
    let depth = model.config().n_transformer_layers;
    if layer_index == 0 || layer_index > depth {
        return Err(Error::LayerOutOfRange {
            index: layer_index,
            depth,
        });
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tapped = corpus
        .iter()
        .map(|w| model.tap(w, TapPoint::Layer(layer_index)))
        .collect::<Result<Vec<_>>>()?;
    let pooled = pool_frames(tapped.iter())?;
    fit_kmeans(
        pooled.view(),
        k,
        rng,
        max_iters,
        tol,
        CodebookSource::EncoderLayer(layer_index),
    )
}

const CODEBOOK_MAGIC: &[u8; 4] = b"DHCB";

/// Binary codebook: magic, K u32, F u32, source tag u8 (0 = MFCC,
/// 1 + layer for encoder taps), then row-major little-endian f64s.
pub fn write_codebook(path: impl AsRef<Path>, cb: &Codebook) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + 8 * cb.centroids.len());
    buf.extend_from_slice(CODEBOOK_MAGIC);
    buf.extend_from_slice(&(cb.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(cb.feature_dim() as u32).to_le_bytes());
    buf.push(cb.source.tag());
    for v in cb.centroids.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.as_ref(), buf).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 13 || &bytes[..4] != CODEBOOK_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let source = CodebookSource::from_tag(bytes[12]);
    let body = &bytes[13..];
    if body.len() != 8 * k * f {
        return Err(bad("payload length does not match header"));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Codebook::new(
        Array2::from_shape_vec((k, f), data).map_err(|_| bad("shape"))?,
        source,
    )
}

/// Mean of the rows, the K = 1 closed form.
pub fn mean_row(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("non-empty")
}

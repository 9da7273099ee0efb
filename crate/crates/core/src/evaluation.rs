//! Noise-invariance measurements on pooled bottleneck features, and
//! embedding export for external plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{mix_at_snr, NoiseBank, Waveform};
use crate::correlation::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::features::FrameFeatures;
use crate::model::{argmax_rows, sample_mask_spans, MaskSet, Model};
use crate::training::TrainingExample;

/// Label used for embeddings of unmixed audio.
pub const CLEAN_LABEL: &str = "clean";

/// Mean diagonal minus the RMS of the off-diagonal entries.
pub fn diagonality(c: &CorrelationMatrix) -> f64 {
    let m = c.matrix();
    let d = m.nrows();
    let diag = m.diag().sum() / d as f64;
    if d < 2 {
        return diag;
    }
    let off: f64 = m
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &v)| v * v)
        .sum();
    diag - (off / (d * (d - 1)) as f64).sqrt()
}

/// Mean over the valid frames.
pub fn pool_embeddings(z: &FrameFeatures) -> Result<Array1<f64>> {
    z.valid()
        .mean_axis(Axis(0))
        .ok_or(Error::TooFewFrames(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub utterance_id: String,
    /// Noise id, or [`CLEAN_LABEL`].
    pub noise_label: String,
    /// NaN for clean audio.
    pub snr_db: f64,
    pub vector: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Leave-one-out k-nearest-neighbour accuracy at predicting `noise_label`.
///
/// Distance ties are broken by label name and vote ties by the smaller
/// summed neighbour distance, so the result does not depend on input
/// order.
pub fn noise_probe(embeddings: &[PooledEmbedding], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("probe needs k >= 1".into()));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for e in embeddings {
        *sizes.entry(e.noise_label.as_str()).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::TooFewClasses(sizes.len()));
    }
    if let Some((label, &size)) = sizes.iter().find(|(_, &n)| n < k + 1) {
        return Err(Error::ClassTooSmall {
            label: label.to_string(),
            size,
            k,
        });
    }
    if let Some(dim) = embeddings.first().map(|e| e.vector.len()) {
        if embeddings.iter().any(|e| e.vector.len() != dim) {
            return Err(Error::DimensionMismatch("embeddings differ in width".into()));
        }
    }
    let label_index: BTreeMap<&str, usize> = sizes.keys().enumerate().map(|(i, &l)| (l, i)).collect();
    let labels: Vec<usize> = embeddings
        .iter()
        .map(|e| label_index[e.noise_label.as_str()])
        .collect();
    let mut correct = 0usize;
    let mut neighbours = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        neighbours.clear();
        neighbours.extend(
            embeddings
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, o)| (squared_distance(&e.vector, &o.vector), labels[j])),
        );
        neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![(0usize, 0.0f64); sizes.len()];
        for &(d, l) in &neighbours[..k] {
            votes[l].0 += 1;
            votes[l].1 += d.sqrt();
        }
        let predicted = (0..votes.len())
            .filter(|&l| votes[l].0 > 0)
            .min_by(|&a, &b| {
                votes[b].0
                    .cmp(&votes[a].0)
                    .then(votes[a].1.total_cmp(&votes[b].1))
                    .then(a.cmp(&b))
            })
            .expect("k >= 1");
        correct += usize::from(predicted == labels[i]);
    }
    Ok(correct as f64 / embeddings.len() as f64)
}

/// Summary written next to a probe run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub n: usize,
    pub classes: usize,
    pub k: usize,
    pub accuracy: f64,
}

impl ProbeReport {
    pub fn evaluate(embeddings: &[PooledEmbedding], k: usize) -> Result<Self> {
        let accuracy = noise_probe(embeddings, k)?;
        let mut labels: Vec<&str> = embeddings.iter().map(|e| e.noise_label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        Ok(Self {
            n: embeddings.len(),
            classes: labels.len(),
            k,
            accuracy,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "n": self.n,
            "classes": self.classes,
            "k": self.k,
            "accuracy": self.accuracy,
        })
        .to_string()
    }
}

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r', '"']) {
        return Err(Error::Config(format!("field '{s}' cannot be written to CSV")));
    }
    Ok(())
}

/// CSV with header `utterance_id,noise_label,snr_db,dim_0,...`. Numbers use
/// the shortest representation that parses back to the same value.
pub fn export_embeddings(embeddings: &[PooledEmbedding], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = embeddings.first().ok_or(Error::EmptyCorpus)?;
    let dim = first.vector.len();
    let mut out = String::from("utterance_id,noise_label,snr_db");
    for i in 0..dim {
        let _ = write!(out, ",dim_{i}");
    }
    out.push('\n');
    for e in embeddings {
        check_field(&e.utterance_id)?;
        check_field(&e.noise_label)?;
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch("embeddings differ in width".into()));
        }
        let _ = write!(out, "{},{},{}", e.utterance_id, e.noise_label, e.snr_db);
        for v in &e.vector {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn import_embeddings(path: impl AsRef<Path>) -> Result<Vec<PooledEmbedding>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[..3] != ["utterance_id", "noise_label", "snr_db"] {
        return Err(bad(1, "unexpected header".into()));
    }
    let dim = columns.len() - 3;
    lines
        .enumerate()
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 3 {
                return Err(bad(n + 2, format!("{} fields, expected {}", fields.len(), dim + 3)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 2, format!("bad number '{s}'")));
            Ok(PooledEmbedding {
                utterance_id: fields[0].to_string(),
                noise_label: fields[1].to_string(),
                snr_db: num(fields[2])?,
                vector: fields[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Pooled bottleneck features of unmasked input.
pub fn embed(model: &Model, w: &Waveform) -> Result<Array1<f64>> {
    let x = model.encode_cnn(w)?;
    let (z, _) = model.encode_context(&x, &MaskSet::none(x.num_frames()))?;
    pool_embeddings(&z)
}

/// Which noises each utterance is mixed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseAssignment {
    /// Every utterance with every noise of the bank.
    All,
    /// Utterance `i` with noise `i mod bank size` only.
    RoundRobin,
}

/// Embeds mixtures of the corpus with the bank at `snr_db`. Each mixture
/// draws its noise offset from its own seed taken from `rng`.
pub fn embed_noisy_corpus<R: Rng + ?Sized>(
    model: &Model,
    corpus: &[(String, Waveform)],
    bank: &NoiseBank,
    snr_db: f64,
    assignment: NoiseAssignment,
    rng: &mut R,
) -> Result<Vec<PooledEmbedding>> {
    let noises = bank.entries();
    let mut out = Vec::with_capacity(corpus.len() * noises.len());
    for (i, (id, w)) in corpus.iter().enumerate() {
        let chosen = match assignment {
            NoiseAssignment::All => &noises[..],
            NoiseAssignment::RoundRobin => std::slice::from_ref(&noises[i % noises.len()]),
        };
        for noise in chosen {
            let mut mix_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mix = mix_at_snr(w, &noise.waveform, snr_db, &mut mix_rng)?;
            out.push(PooledEmbedding {
                utterance_id: id.clone(),
                noise_label: noise.id.clone(),
                snr_db,
                vector: embed(model, &mix.waveform)?.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Fraction of masked frames of clean input whose predicted code matches
/// the target code.
pub fn masked_code_accuracy<R: Rng + ?Sized>(
    model: &Model,
    examples: &[TrainingExample],
    rng: &mut R,
) -> Result<f64> {
    let cfg = model.config();
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let x = model.encode_cnn(&ex.clean)?;
        let mask = sample_mask_spans(x.num_frames(), cfg.mask_prob, cfg.mask_span, rng);
        let (_, logits) = model.encode_context(&x, &mask)?;
        let predicted = argmax_rows(logits.view());
        for t in 0..ex.codes.valid_frames().min(x.valid_frames()) {
            if mask.masked()[t] {
                total += 1;
                hits += usize::from(predicted[t] == ex.codes.codes[t]);
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrelationKind;
    use ndarray::{array, Array2};
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn emb(label: &str, vector: Vec<f64>) -> PooledEmbedding {
        PooledEmbedding {
            utterance_id: format!("u{}", vector.len()),
            noise_label: label.into(),
            snr_db: 0.0,
            vector,
        }
    }

    #[test]
    fn diagonality_reference_values() {
        let eye = CorrelationMatrix::from_matrix(Array2::eye(4), CorrelationKind::Cross).unwrap();
        assert_eq!(diagonality(&eye), 1.0);
        let ones = CorrelationMatrix::from_matrix(Array2::ones((4, 4)), CorrelationKind::Cross).unwrap();
        assert_eq!(diagonality(&ones), 0.0);
    }

    #[test]
    fn diagonality_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let d = rng.random_range(2..7);
            let c = Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0));
            let mut diag = 0.0;
            let mut off = 0.0;
            for i in 0..d {
                for j in 0..d {
                    if i == j {
                        diag += c[[i, j]];
                    } else {
                        off += c[[i, j]] * c[[i, j]];
                    }
                }
            }
            let want = diag / d as f64 - (off / (d * d - d) as f64).sqrt();
            let m = CorrelationMatrix::from_matrix(c, CorrelationKind::Cross).unwrap();
            assert!((diagonality(&m) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn pooling_averages_valid_frames_only() {
        let z = FrameFeatures::new(array![[1.0, 2.0], [3.0, 6.0], [0.0, 0.0]], 2, 4, 400).unwrap();
        assert_eq!(pool_embeddings(&z).unwrap().to_vec(), vec![2.0, 4.0]);
        let one = FrameFeatures::new(array![[5.0, -1.0], [0.0, 0.0]], 1, 4, 400).unwrap();
        assert_eq!(pool_embeddings(&one).unwrap().to_vec(), vec![5.0, -1.0]);
        let constant = FrameFeatures::dense(Array2::from_elem((7, 3), 0.25), 4, 400).unwrap();
        assert_eq!(pool_embeddings(&constant).unwrap().to_vec(), vec![0.25; 3]);
        let empty = FrameFeatures::new(Array2::zeros((2, 2)), 0, 4, 400).unwrap();
        assert!(pool_embeddings(&empty).is_err());
    }

    fn clusters(rng: &mut ChaCha8Rng, per_class: usize, spread: f64) -> Vec<PooledEmbedding> {
        let centres = [[10.0, 0.0], [0.0, 10.0], [-10.0, -10.0]];
        let mut out = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..per_class {
                let v = centre
                    .iter()
                    .map(|m| m + { let z: f64 = StandardNormal.sample(rng); spread * z })
                    .collect();
                out.push(emb(&format!("n{c}"), v));
            }
        }
        out
    }

    #[test]
    fn separated_clusters_are_perfectly_identified() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = clusters(&mut rng, 20, 0.5);
        assert_eq!(noise_probe(&e, 5).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut accs = Vec::new();
        for _ in 0..5 {
            let mut e = clusters(&mut rng, 334, 3.0);
            let mut labels: Vec<String> = e.iter().map(|x| x.noise_label.clone()).collect();
            labels.shuffle(&mut rng);
            for (x, l) in e.iter_mut().zip(labels) {
                x.noise_label = l;
            }
            accs.push(noise_probe(&e, 5).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn probe_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut e = clusters(&mut rng, 15, 8.0);
        let a = noise_probe(&e, 5).unwrap();
        e.shuffle(&mut rng);
        assert_eq!(noise_probe(&e, 5).unwrap(), a);
    }

    #[test]
    fn probe_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = clusters(&mut rng, 5, 1.0);
        assert!(matches!(noise_probe(&e, 5), Err(Error::ClassTooSmall { size: 5, k: 5, .. })));
        assert!(noise_probe(&e, 4).is_ok());
        let one: Vec<_> = e.into_iter().filter(|x| x.noise_label == "n0").collect();
        assert!(matches!(noise_probe(&one, 1), Err(Error::TooFewClasses(1))));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let single = vec![emb("hum", vec![0.1, -2.5e-300])];
        export_embeddings(&single, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), "utterance_id,noise_label,snr_db,dim_0,dim_1");

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut many = clusters(&mut rng, 4, 1.0);
        many[0].noise_label = CLEAN_LABEL.into();
        many[0].snr_db = f64::NAN;
        export_embeddings(&many, &path).unwrap();
        let back = import_embeddings(&path).unwrap();
        assert_eq!(back.len(), many.len());
        for (a, b) in back.iter().zip(&many) {
            assert_eq!(a.vector, b.vector);
            assert_eq!(a.noise_label, b.noise_label);
            assert_eq!(a.snr_db.to_bits(), b.snr_db.to_bits());
        }
        assert!(export_embeddings(&[], &path).is_err());
    }

    #[test]
    fn probe_report_json_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = clusters(&mut rng, 10, 0.1);
        let report = ProbeReport::evaluate(&e, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["n"], 30);
        assert_eq!(v["classes"], 3);
        assert_eq!(v["k"], 3);
        assert_eq!(v["accuracy"], 1.0);
    }
}

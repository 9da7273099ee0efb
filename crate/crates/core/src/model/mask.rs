use rand::Rng;

/// Frames hidden from the context network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    masked: Vec<bool>,
}

impl MaskSet {
    pub fn from_flags(masked: Vec<bool>) -> Self {
        Self { masked }
    }

    pub fn none(frames: usize) -> Self {
        Self {
            masked: vec![false; frames],
        }
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Span masking: every frame independently starts a span with probability
/// `mask_prob`; each span covers `[start, start + mask_span)` clipped to
/// `frames`, and overlapping spans merge.
pub fn sample_mask_spans<R: Rng + ?Sized>(
    frames: usize,
    mask_prob: f64,
    mask_span: usize,
    rng: &mut R,
) -> MaskSet {
    let mut masked = vec![false; frames];
    for start in 0..frames {
        if rng.random::<f64>() < mask_prob {
            let end = (start + mask_span).min(frames);
            masked[start..end].iter_mut().for_each(|m| *m = true);
        }
    }
    MaskSet { masked }
}

//! Binary checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! "DHCK" | version u32 | config length u32 | config text (key=value)
//! record count u32 | records: name length u32, name, rank u32, dims u64*rank, f64 data
//! step u64 | rng count u32 | rngs: name length u32, name, seed [u8; 32], stream u64, word pos u128
//! running sums: l_hb, l_cc, l_sc, total f64 | running count u64
//! SHA-256 of everything above
//! ```
//!
//! Records are the model parameters (`param.*`) and Adam moments
//! (`adam_m.*`, `adam_v.*`), in parameter order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{Adam, RngStreams, RunningLoss, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DHCK";
const DIGEST_LEN: usize = 32;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_rng(buf: &mut Vec<u8>, name: &str, rng: &ChaCha8Rng) {
    put_str(buf, name);
    buf.extend_from_slice(&rng.get_seed());
    put_u64(buf, rng.get_stream());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
}

fn put_params(buf: &mut Vec<u8>, prefix: &str, params: &ModelParams) {
    for t in params.tensors() {
        put_str(buf, &format!("{prefix}.{}", t.name));
        put_u32(buf, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(buf, d as u64);
        }
        for &x in t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let text = state.config.to_text();
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    let params = state.model.params();
    put_u32(&mut buf, 3 * params.tensors().len() as u32);
    put_params(&mut buf, "param", params);
    put_params(&mut buf, "adam_m", &state.adam.m);
    put_params(&mut buf, "adam_v", &state.adam.v);
    put_u64(&mut buf, state.step);
    let r = &state.rngs;
    put_u32(&mut buf, 4);
    put_rng(&mut buf, "augment", &r.augment);
    put_rng(&mut buf, "mask", &r.mask);
    put_rng(&mut buf, "cc_sample", &r.cc_sample);
    put_rng(&mut buf, "sc_sample", &r.sc_sample);
    let run = &state.running;
    for v in [run.l_hb, run.l_cc, run.l_sc, run.total] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut buf, run.count);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn u128(&mut self) -> Option<u128> {
        Some(u128::from_le_bytes(self.take(16)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Reads a checkpoint. The digest is verified before anything is parsed,
/// so a damaged file never yields a partial state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupted = || Error::Corrupted(path.to_path_buf());
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(corrupted());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupted());
    }
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(format("not a checkpoint file".into()));
    }
    let version = r.u32().ok_or_else(corrupted)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text_len = r.u32().ok_or_else(corrupted)? as usize;
    let text = std::str::from_utf8(r.take(text_len).ok_or_else(corrupted)?)
        .map_err(|_| format("config text is not UTF-8".into()))?;
    let config = RunConfig::from_text(text)?;
    config.validate()?;

    let template = ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(0));
    let mut params = template.zeros_like();
    let mut m = template.zeros_like();
    let mut v = template.zeros_like();
    let expected = template.tensors();
    let count = r.u32().ok_or_else(corrupted)? as usize;
    if count != 3 * expected.len() {
        return Err(format(format!("{count} records, expected {}", 3 * expected.len())));
    }
    for (prefix, target) in [("param", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
        for (t, (name, slot)) in expected.iter().zip(target.tensors_mut()) {
            let want = format!("{prefix}.{name}");
            let got = r.string().ok_or_else(corrupted)?;
            if got != want {
                return Err(format(format!("record '{got}' where '{want}' was expected")));
            }
            let rank = r.u32().ok_or_else(corrupted)? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(corrupted)?;
            if dims != t.shape {
                return Err(format(format!("{want} has shape {dims:?}, expected {:?}", t.shape)));
            }
            for x in slot.iter_mut() {
                *x = r.f64().ok_or_else(corrupted)?;
            }
        }
    }
    let step = r.u64().ok_or_else(corrupted)?;
    let n_rngs = r.u32().ok_or_else(corrupted)?;
    if n_rngs != 4 {
        return Err(format(format!("{n_rngs} rng streams, expected 4")));
    }
    let mut rngs = RngStreams::from_seed(config.train.seed);
    for _ in 0..4 {
        let name = r.string().ok_or_else(corrupted)?;
        let seed: [u8; 32] = r.take(32).ok_or_else(corrupted)?.try_into().expect("32 bytes");
        let stream = r.u64().ok_or_else(corrupted)?;
        let word_pos = r.u128().ok_or_else(corrupted)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        match name.as_str() {
            "augment" => rngs.augment = rng,
            "mask" => rngs.mask = rng,
            "cc_sample" => rngs.cc_sample = rng,
            "sc_sample" => rngs.sc_sample = rng,
            other => return Err(format(format!("unknown rng stream '{other}'"))),
        }
    }
    let mut sums = [0.0; 4];
    for s in &mut sums {
        *s = r.f64().ok_or_else(corrupted)?;
    }
    let running_count = r.u64().ok_or_else(corrupted)?;
    if r.pos != body.len() {
        return Err(format("trailing bytes after state".into()));
    }
    let model = Model::from_parts(config.model.clone(), params)?;
    Ok(TrainState {
        config,
        model,
        adam: Adam { m, v },
        step,
        rngs,
        running: RunningLoss {
            l_hb: sums[0],
            l_cc: sums[1],
            l_sc: sums[2],
            total: sums[3],
            count: running_count,
        },
    })
}

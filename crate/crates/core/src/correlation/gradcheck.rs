//! Central finite-difference gradient verification.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Anything exposing its scalars as named flat arrays, in a stable order.
pub trait ParamSet {
    fn named_arrays_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

impl ParamSet for ModelParams {
    fn named_arrays_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.tensors_mut()
    }
}

/// Plain named arrays, for checking functions of raw matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArrays(pub Vec<(String, Vec<f64>)>);

impl ParamSet for NamedArrays {
    fn named_arrays_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0
            .iter_mut()
            .map(|(n, v)| (n.clone(), v.as_mut_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub records: Vec<ProbeRecord>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.records.iter().fold(0.0, |m, r| m.max(r.rel_err))
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.records.iter().all(|r| r.rel_err < tol)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "index": r.index,
                    "analytic": r.analytic,
                    "numeric": r.numeric,
                    "rel_err": r.rel_err,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    }
}

pub fn write_report(path: impl AsRef<Path>, report: &GradCheckReport) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(report.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// `|a - g| / max(|a|, |g|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Draws `count` `(array, index)` probes: an array uniformly, then an
/// element uniformly, so small arrays get probed as often as large ones.
pub fn sample_probes<P: ParamSet, R: Rng + ?Sized>(
    params: &mut P,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params
        .named_arrays_mut()
        .iter()
        .map(|(_, a)| a.len())
        .collect();
    let nonempty: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] > 0).collect();
    (0..count)
        .map(|_| {
            let a = nonempty[rng.random_range(0..nonempty.len())];
            (a, rng.random_range(0..sizes[a]))
        })
        .collect()
}

/// Compares `analytic` against `(f(θ+h) - f(θ-h)) / 2h` at each probe.
/// `params` is restored bit-for-bit afterwards.
pub fn grad_check<P, F>(
    mut loss: F,
    params: &mut P,
    analytic: &mut P,
    probes: &[(usize, usize)],
    step: f64,
) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: FnMut(&mut P) -> f64,
{
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss at probe point = {base}")));
    }
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .named_arrays_mut()
        .into_iter()
        .map(|(n, a)| (n, a.to_vec()))
        .collect();
    let mut records = Vec::with_capacity(probes.len());
    for &(array, index) in probes {
        let original = params.named_arrays_mut()[array].1[index];
        let mut eval_at = |value: f64, params: &mut P| {
            params.named_arrays_mut()[array].1[index] = value;
            loss(params)
        };
        let plus = eval_at(original + step, params);
        let minus = eval_at(original - step, params);
        params.named_arrays_mut()[array].1[index] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss near {}[{index}]",
                analytic[array].0
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[array].1[index];
        records.push(ProbeRecord {
            name: analytic[array].0.clone(),
            index,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport { records })
}

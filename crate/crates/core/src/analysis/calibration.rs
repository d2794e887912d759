//! Reliability binning, expected calibration error, overconfidence error
//! and the Brier score.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction correct in the bin (0 when empty).
    pub acc: f64,
    /// Mean confidence in the bin (0 when empty).
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub oe: f64,
    pub brier: f64,
    pub samples: usize,
}

/// Bin of confidence `c` among `m` equal-width bins `[i/m, (i+1)/m)`, the
/// last one closed.
pub fn bin_index(c: f64, m: usize) -> usize {
    let lo = |i: usize| i as f64 / m as f64;
    let mut i = (Float::floor(c * m as f64).max(0.0) as usize).min(m - 1);
    while i > 0 && c < lo(i) {
        i -= 1;
    }
    while i + 1 < m && c >= lo(i + 1) {
        i += 1;
    }
    i
}

/// Confidence is the largest class probability; the prediction is its index
/// (lowest index on ties).
pub fn calibration<T: Real>(probs: &Tensor<T>, labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    let (n, k) = match *probs.shape() {
        [n, k] => (n, k),
        ref s => return Err(Error::shape("calibration", format!("expected [N,K], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape("calibration", format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("calibration", format!("label {l} exceeds {k} classes")));
    }
    if bins == 0 {
        return Err(Error::invalid("calibration", "need at least one bin"));
    }
    let mut count = alloc::vec![0usize; bins];
    let mut correct = alloc::vec![0usize; bins];
    let mut conf_sum = alloc::vec![0.0f64; bins];
    let mut brier = 0.0;
    for (row, &y) in probs.rows().zip(labels) {
        let pred = argmax(row);
        let c = row[pred].to_f64_lossy();
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        if pred == y {
            correct[b] += 1;
        }
        for (j, p) in row.iter().enumerate() {
            let t = if j == y { 1.0 } else { 0.0 };
            let d = p.to_f64_lossy() - t;
            brier += d * d;
        }
    }
    let nf = n as f64;
    let (mut ece, mut oe) = (0.0, 0.0);
    let mut out = Vec::with_capacity(bins);
    for i in 0..bins {
        let (acc, conf) = if count[i] > 0 {
            (correct[i] as f64 / count[i] as f64, conf_sum[i] / count[i] as f64)
        } else {
            (0.0, 0.0)
        };
        let weight = count[i] as f64 / nf;
        ece += weight * (acc - conf).abs();
        oe += weight * conf * (conf - acc).max(0.0);
        out.push(CalibrationBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: count[i],
            acc,
            conf,
        });
    }
    Ok(CalibrationReport { bins: out, ece, oe, brier: if n > 0 { brier / nf } else { 0.0 }, samples: n })
}

//! Pearson correlation between the channels of a feature map.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// How off-diagonal coefficients are gathered across images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    /// One `m x m` matrix per image; coefficients from every image are pooled.
    #[default]
    PerImage,
    /// Spatial positions of all images concatenated into one sample per channel.
    Pooled,
}

/// Histogram of off-diagonal channel correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub layer: String,
    /// `bins + 1` equal-width edges over `[-1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Mean absolute off-diagonal coefficient.
    pub mean_abs: f64,
    /// Number of channel pairs, i.e. the sum of `counts`.
    pub pairs: u64,
    /// Pairs involving a constant channel, counted as `r = 0`.
    pub zero_variance: u64,
    pub images: usize,
}

/// Pearson coefficient of two equally long samples; `None` when either is
/// constant. Clamped to `[-1, 1]` against round-off.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0) || !(sbb > 0.0) {
        return None;
    }
    Some((sab / Float::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Centers each channel and returns `(centered rows, norms)`.
fn centered(channels: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows = Vec::with_capacity(channels.len());
    let mut norms = Vec::with_capacity(channels.len());
    for ch in channels {
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        let row: Vec<f64> = ch.iter().map(|&v| v - mean).collect();
        norms.push(Float::sqrt(row.iter().map(|v| v * v).sum::<f64>()));
        rows.push(row);
    }
    (rows, norms)
}

struct Accum {
    counts: Vec<u64>,
    abs_sum: f64,
    pairs: u64,
    zero_variance: u64,
}

impl Accum {
    fn push(&mut self, r: f64) {
        let bins = self.counts.len();
        let idx = (Float::floor((r + 1.0) / 2.0 * bins as f64) as isize).clamp(0, bins as isize - 1) as usize;
        self.counts[idx] += 1;
        self.abs_sum += r.abs();
        self.pairs += 1;
    }

    fn add_matrix(&mut self, channels: &[Vec<f64>]) {
        let (rows, norms) = centered(channels);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                if !(norms[i] > 0.0) || !(norms[j] > 0.0) {
                    self.zero_variance += 1;
                    self.push(0.0);
                    continue;
                }
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                self.push((dot / (norms[i] * norms[j])).clamp(-1.0, 1.0));
            }
        }
    }
}

/// Correlation histogram over `bins` equal-width bins for feature maps
/// `[N, m, h, w]`. Every unordered channel pair contributes once per image
/// (or once in total in [`CorrelationMode::Pooled`]).
pub fn channel_correlation<T: Real>(
    maps: &Tensor<T>,
    bins: usize,
    mode: CorrelationMode,
    layer: &str,
) -> Result<CorrelationStats> {
    let [n, m, h, w] = match *maps.shape() {
        [n, m, h, w] => [n, m, h, w],
        ref s => return Err(Error::shape("channel_correlation", format!("expected [N,m,h,w], got {s:?}"))),
    };
    let p = h * w;
    if p < 2 {
        return Err(Error::invalid("channel_correlation", "need at least two spatial positions"));
    }
    if bins == 0 {
        return Err(Error::invalid("channel_correlation", "need at least one bin"));
    }
    let mut acc = Accum { counts: vec![0; bins], abs_sum: 0.0, pairs: 0, zero_variance: 0 };
    let data = maps.data();
    match mode {
        CorrelationMode::PerImage => {
            for img in data.chunks_exact(m * p) {
                let channels: Vec<Vec<f64>> =
                    img.chunks_exact(p).map(|c| c.iter().map(|v| v.to_f64_lossy()).collect()).collect();
                acc.add_matrix(&channels);
            }
        }
        CorrelationMode::Pooled => {
            let mut channels = vec![Vec::with_capacity(n * p); m];
            for img in data.chunks_exact(m * p) {
                for (dst, c) in channels.iter_mut().zip(img.chunks_exact(p)) {
                    dst.extend(c.iter().map(|v| v.to_f64_lossy()));
                }
            }
            acc.add_matrix(&channels);
        }
    }
    if acc.zero_variance > 0 {
        log::warn!("{layer}: {} channel pairs involve a constant channel; counted as r = 0", acc.zero_variance);
    }
    let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    Ok(CorrelationStats {
        layer: layer.to_string(),
        edges,
        counts: acc.counts,
        mean_abs: if acc.pairs > 0 { acc.abs_sum / acc.pairs as f64 } else { 0.0 },
        pairs: acc.pairs,
        zero_variance: acc.zero_variance,
        images: n,
    })
}

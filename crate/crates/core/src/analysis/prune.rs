//! Magnitude-based channel pruning without retraining.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, PruneMask};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::train::evaluate;

/// Stream label for [`split_halves`].
pub const HALVES_STREAM: u64 = 3;

/// Channel magnitudes of one layer and the ascending order they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRanking {
    pub layer: String,
    pub magnitude: Vec<f64>,
    /// Channel indices, weakest first; ties keep index order.
    pub order: Vec<usize>,
}

/// One row of a pruning sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub rate_pct: f64,
    pub n: usize,
    pub accuracy: f64,
}

/// Sums of per-image spatial means of `[N, m, h, w]` maps, per channel.
fn spatial_mean_sums<T: Real>(maps: &Tensor<T>, sums: &mut [f64]) -> Result<usize> {
    let [n, m, h, w] = match *maps.shape() {
        [n, m, h, w] => [n, m, h, w],
        ref s => return Err(Error::shape("prune_rank", format!("expected [N,m,h,w], got {s:?}"))),
    };
    if sums.len() != m {
        return Err(Error::shape("prune_rank", format!("{m} channels, {} accumulators", sums.len())));
    }
    let p = h * w;
    for img in maps.data().chunks_exact(m * p) {
        for (s, plane) in sums.iter_mut().zip(img.chunks_exact(p)) {
            *s += plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / p as f64;
        }
    }
    Ok(n)
}

fn ranking_from_sums(layer: &str, sums: Vec<f64>, images: usize) -> ChannelRanking {
    let magnitude: Vec<f64> = sums.iter().map(|s| (s / images as f64).abs()).collect();
    let mut order: Vec<usize> = (0..magnitude.len()).collect();
    order.sort_by(|&a, &b| magnitude[a].total_cmp(&magnitude[b]).then(a.cmp(&b)));
    ChannelRanking { layer: layer.to_string(), magnitude, order }
}

/// Magnitude of each channel: the absolute value of the cross-image mean of
/// per-image spatial means.
pub fn channel_magnitudes<T: Real>(maps: &Tensor<T>, layer: &str) -> Result<ChannelRanking> {
    let m = maps.shape().get(1).copied().unwrap_or(0);
    let mut sums = vec![0.0; m];
    let n = spatial_mean_sums(maps, &mut sums)?;
    if n == 0 {
        return Err(Error::invalid("prune_rank", "no images"));
    }
    Ok(ranking_from_sums(layer, sums, n))
}

/// Ranks the channels of `layer` on the listed images, evaluated in chunks.
pub fn prune_rank<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    layer: &str,
    chunk: usize,
) -> Result<ChannelRanking> {
    let m = model
        .config()
        .layer_channels(layer)
        .ok_or_else(|| Error::invalid("prune_rank", format!("unknown layer {layer:?}")))?;
    if indices.is_empty() {
        return Err(Error::invalid("prune_rank", "no images"));
    }
    let mut sums = vec![0.0; m];
    for c in indices.chunks(chunk.max(1)) {
        let out = model.infer(&data.batch::<T>(c))?;
        spatial_mean_sums(&out.feature_maps[layer], &mut sums)?;
    }
    Ok(ranking_from_sums(layer, sums, indices.len()))
}

/// Mask dropping the `n` weakest channels; `n` must leave one channel.
pub fn apply_prune(ranking: &ChannelRanking, n: usize) -> Result<PruneMask> {
    let m = ranking.order.len();
    if n >= m {
        return Err(Error::invalid("prune", format!("cannot drop {n} of {m} channels")));
    }
    let mut keep = vec![true; m];
    for &c in &ranking.order[..n] {
        keep[c] = false;
    }
    Ok(PruneMask { layer: ranking.layer.clone(), keep })
}

/// `n * 100 / m`.
pub fn prune_rate(n: usize, m: usize) -> f64 {
    n as f64 * 100.0 / m as f64
}

/// Channels dropped at `rate_pct` percent of `m`, rounded down.
pub fn n_from_rate(rate_pct: f64, m: usize) -> Result<usize> {
    if !(0.0..100.0).contains(&rate_pct) {
        return Err(Error::invalid("prune", format!("rate {rate_pct}% must lie in [0, 100)")));
    }
    let n = Float::floor(rate_pct * m as f64 / 100.0 + 1e-9) as usize;
    if n >= m {
        return Err(Error::invalid("prune", format!("rate {rate_pct}% drops every channel of {m}")));
    }
    Ok(n)
}

/// Seeded split of `0..n` into a validation half and a test half, each sorted.
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, &[HALVES_STREAM]).shuffle(&mut idx);
    let (a, b) = idx.split_at(n / 2);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Ranks on `validation`, then reports test accuracy at every rate.
pub fn prune_sweep<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    validation: &[usize],
    test: &[usize],
    layer: &str,
    rates_pct: &[f64],
    chunk: usize,
) -> Result<Vec<PruneRow>> {
    let mut seen = vec![false; data.len()];
    for &i in validation {
        seen[i] = true;
    }
    if test.iter().any(|&i| seen[i]) {
        return Err(Error::invalid("prune_sweep", "validation and test halves overlap"));
    }
    let ranking = prune_rank(model, data, validation, layer, chunk)?;
    let m = ranking.order.len();
    let test_set = data.subset(test);
    let mut rows = Vec::with_capacity(rates_pct.len());
    for &rate in rates_pct {
        let n = n_from_rate(rate, m)?;
        let mut pruned = model.clone();
        if n > 0 {
            pruned.set_prune_mask(&apply_prune(&ranking, n)?)?;
        }
        let acc = evaluate(&pruned, &test_set, chunk)?.accuracy;
        rows.push(PruneRow { rate_pct: rate, n, accuracy: acc });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_round_trip() {
        assert_eq!(n_from_rate(77.0, 128).unwrap(), 98);
        for m in [1usize, 7, 64, 128] {
            for n in 0..m {
                assert_eq!(n_from_rate(prune_rate(n, m), m).unwrap(), n);
            }
        }
        assert!(n_from_rate(100.0, 128).is_err());
        assert_eq!(n_from_rate(99.9, 4).unwrap(), 3);
        assert!(n_from_rate(-1.0, 4).is_err());
    }

    #[test]
    fn magnitudes_and_order() {
        // two images, three 1x2 channels; channel 1 is dead
        let maps =
            Tensor::<f64>::from_f64(&[2, 3, 1, 2], &[1.0, 3.0, 0.0, 0.0, -4.0, -2.0, 3.0, 1.0, 0.0, 0.0, -1.0, -1.0])
                .unwrap();
        let r = channel_magnitudes(&maps, "l").unwrap();
        assert_eq!(r.magnitude, vec![2.0, 0.0, 2.0]);
        assert_eq!(r.order, vec![1, 0, 2]);
        let mask = apply_prune(&r, 1).unwrap();
        assert_eq!(mask.keep, vec![true, false, true]);
        assert!(apply_prune(&r, 3).is_err());
    }

    #[test]
    fn halves_disjoint_and_deterministic() {
        let (a, b) = split_halves(101, 5);
        assert_eq!(a.len(), 50);
        assert_eq!(b.len(), 51);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!((a, b), split_halves(101, 5));
    }
}

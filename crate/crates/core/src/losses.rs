//! Loss terms, latent partitioning and epoch schedules.
//!
//! The free functions here operate on plain slices and are what the graph
//! nodes in [`crate::autodiff`] evaluate in their forward pass. [`total_loss`]
//! assembles the full mini-batch objective on a [`Graph`]:
//!
//! ```text
//! L = CE + w(t) * [ lambda  * mean_B d(f~, f)
//!                 + lambda1 * mean_S L_aux
//!                 + lambda2 * sum_taps mean_B L_OS(Z) ]
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Probabilities below this are clamped inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;
/// Tolerance on `| ||z|| - 1 |` for inputs of the angular loss.
pub const UNIT_TOLERANCE: f64 = 1e-4;

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn l2_norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub(crate) fn l2_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

// ---- cross-entropy and consistency ---------------------------------------

/// Value plus which rows were clamped at [`PROB_FLOOR`].
pub(crate) fn ce_rows<T: Real>(probs: &[T], k: usize, labels: &[usize], mask: &[bool]) -> (T, Vec<bool>) {
    let floor = T::of(PROB_FLOOR);
    let n = labels.len();
    let mut clamped = vec![false; n];
    let mut total = T::zero();
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let p = probs[i * k + labels[i]];
        if p < floor {
            clamped[i] = true;
            total += floor.ln();
        } else {
            total += p.ln();
        }
    }
    (-total / T::of(n as f64), clamped)
}

pub(crate) fn consistency_rows<T: Real>(student: &[T], teacher: &[T], k: usize) -> T {
    let n = student.len() / k;
    let total: T = student.iter().zip(teacher).map(|(&s, &t)| (s - t) * (s - t)).sum();
    total / T::of(n as f64)
}

/// Masked cross-entropy on a probability matrix, divided by the full batch
/// size. Returns the value and the number of clamped targets.
pub fn cross_entropy_masked<T: Real>(probs: &Tensor<T>, labels: &[usize], mask: &[bool]) -> Result<(T, usize)> {
    let &[n, k] = probs.shape() else {
        return Err(Error::shape("cross_entropy", format!("expected [N,K], got {:?}", probs.shape())));
    };
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape("cross_entropy", "labels and mask must match the row count"));
    }
    if let Some(i) = (0..n).find(|&i| mask[i] && labels[i] >= k) {
        return Err(Error::invalid("cross_entropy", format!("label {} of row {i} exceeds {k} classes", labels[i])));
    }
    let (v, clamped) = ce_rows(probs.data(), k, labels, mask);
    Ok((v, clamped.iter().filter(|&&c| c).count()))
}

/// Mean over rows of the squared Euclidean distance between probability rows.
pub fn consistency<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::shape("consistency", format!("{:?} vs {:?}", student.shape(), teacher.shape())));
    }
    Ok(consistency_rows(student.data(), teacher.data(), student.shape()[1]))
}

// ---- teacher-graph pairs -------------------------------------------------

/// Neighbor flags over a list of within-batch pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSimilarity {
    pub pairs: Vec<(usize, usize)>,
    pub similar: Vec<bool>,
}

impl PairSimilarity {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `s_ij = 1` iff the teacher's predicted classes of rows `i` and `j` agree.
pub fn build_similarity<T: Real>(teacher_probs: &Tensor<T>, pairs: &[(usize, usize)]) -> Result<PairSimilarity> {
    let &[n, k] = teacher_probs.shape() else {
        return Err(Error::shape("build_similarity", format!("expected [N,K], got {:?}", teacher_probs.shape())));
    };
    let labels: Vec<usize> = teacher_probs.data().chunks_exact(k).map(argmax).collect();
    let mut similar = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= n || j >= n || i == j {
            return Err(Error::invalid("build_similarity", format!("pair ({i}, {j}) invalid for a batch of {n}")));
        }
        similar.push(labels[i] == labels[j]);
    }
    Ok(PairSimilarity { pairs: pairs.to_vec(), similar })
}

/// `batch / 2` disjoint pairs from a shuffle of the batch indices.
pub fn disjoint_pairs(batch: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..batch).collect();
    rng.shuffle(&mut idx);
    idx.chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

/// SNTG pair term: `||a-b||^2` for neighbors, `max(0, m - ||a-b||)^2` otherwise.
pub fn sntg_pair<T: Real>(a: &[T], b: &[T], similar: bool, margin: T) -> T {
    let dist = l2_distance(a, b);
    if similar {
        dist * dist
    } else {
        let h = (margin - dist).max(T::zero());
        h * h
    }
}

/// AMC pair term on unit vectors with geodesic distance `acos(<a,b>)`.
pub fn amc_pair<T: Real>(a: &[T], b: &[T], similar: bool, margin: T) -> Result<T> {
    check_unit(a)?;
    check_unit(b)?;
    let theta = dot(a, b).max(-T::one()).min(T::one()).acos();
    Ok(if similar {
        theta * theta
    } else {
        let h = (margin - theta).max(T::zero());
        h * h
    })
}

fn check_unit<T: Real>(v: &[T]) -> Result<()> {
    let norm = l2_norm(v);
    if (norm - T::one()).abs() > T::of(UNIT_TOLERANCE) {
        return Err(Error::invalid("amc", format!("expected a unit vector, norm is {norm}")));
    }
    Ok(())
}

// ---- orthogonal sphere ---------------------------------------------------

/// `s * z / ||z||`.
pub fn sphere_project<T: Real>(z: &[T], radius: T) -> Result<Vec<T>> {
    let norm = l2_norm(z);
    if !(norm > T::zero()) {
        return Err(Error::ZeroNorm { row: 0 });
    }
    Ok(z.iter().map(|&v| radius * v / norm).collect())
}

/// A latent vector arranged as `d x k` contiguous column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlockMatrix<T> {
    d: usize,
    k: usize,
    /// Column-major: column `j` is `entries[j*d .. (j+1)*d]`.
    entries: Vec<T>,
}

impl<T: Real> LatentBlockMatrix<T> {
    pub fn block_len(&self) -> usize {
        self.d
    }

    pub fn blocks(&self) -> usize {
        self.k
    }

    pub fn column(&self, j: usize) -> &[T] {
        &self.entries[j * self.d..(j + 1) * self.d]
    }

    /// Entry at row `i`, column `j`.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[j * self.d + i]
    }

    /// Builds the matrix from a column-major buffer.
    pub fn from_columns(d: usize, k: usize, entries: Vec<T>) -> Result<Self> {
        if d == 0 || k == 0 || entries.len() != d * k {
            return Err(Error::shape("latent_blocks", format!("{} entries for {d}x{k}", entries.len())));
        }
        Ok(Self { d, k, entries })
    }
}

pub(crate) fn check_partition(dim: usize, blocks: usize) -> Result<()> {
    if blocks == 0 || !dim.is_multiple_of(blocks) {
        let valid = (1..=dim).filter(|&b| dim.is_multiple_of(b)).collect();
        return Err(Error::Partition { dim, blocks, valid });
    }
    Ok(())
}

/// Splits `z` into `k` contiguous blocks of length `len(z) / k`.
pub fn partition_latent<T: Real>(z: &[T], k: usize) -> Result<LatentBlockMatrix<T>> {
    check_partition(z.len(), k)?;
    Ok(LatentBlockMatrix { d: z.len() / k, k, entries: z.to_vec() })
}

/// `||Z^T Z - I_k||_F^2`.
pub fn os_loss<T: Real>(z: &LatentBlockMatrix<T>) -> T {
    os_loss_flat(&z.entries, z.k)
}

/// `G - I` for the Gram matrix of the blocks of `row`, written into `out` (`k x k`).
pub(crate) fn gram_residual<T: Real>(row: &[T], k: usize, out: &mut [T]) {
    let d = row.len() / k;
    for a in 0..k {
        for b in a..k {
            let g = dot(&row[a * d..(a + 1) * d], &row[b * d..(b + 1) * d]);
            let r = if a == b { g - T::one() } else { g };
            out[a * k + b] = r;
            out[b * k + a] = r;
        }
    }
}

pub(crate) fn os_loss_flat<T: Real>(row: &[T], k: usize) -> T {
    let mut residual = vec![T::zero(); k * k];
    gram_residual(row, k, &mut residual);
    residual.iter().map(|&r| r * r).sum()
}

// ---- schedules -------------------------------------------------------------

pub const RAMP_UP_EPOCHS: usize = 80;
pub const RAMP_DOWN_EPOCHS: usize = 50;

/// `exp(-5 (1 - t/80)^2)` for `t < 80`, then 1.
pub fn ramp_up(t: f64) -> f64 {
    ramp_up_over(t, RAMP_UP_EPOCHS)
}

/// [`ramp_up`] with a configurable ramp length.
pub fn ramp_up_over(t: f64, length: usize) -> f64 {
    if length == 0 || t >= length as f64 {
        return 1.0;
    }
    let p = 1.0 - t.max(0.0) / length as f64;
    Float::exp(-5.0 * p * p)
}

/// Learning-rate factor over the last 50 of `total` epochs.
pub fn ramp_down(t: f64, total: usize) -> f64 {
    ramp_down_over(t, total, RAMP_DOWN_EPOCHS)
}

/// `exp(-12.5 (1 - (total - t)/window)^2)` inside the final `window` epochs,
/// 1 before. A window longer than the run is clamped to the run length.
pub fn ramp_down_over(t: f64, total: usize, window: usize) -> f64 {
    let window = if window > total {
        log::warn!("ramp-down window {window} exceeds {total} epochs; clamping");
        total
    } else {
        window
    };
    let start = (total - window) as f64;
    if window == 0 || t < start {
        return 1.0;
    }
    let p = 1.0 - (total as f64 - t) / window as f64;
    Float::exp(-12.5 * p * p)
}

// ---- total objective -----------------------------------------------------

/// Auxiliary teacher-graph regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    None,
    Sntg,
    Amc,
}

/// Weights and shape parameters of every loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Consistency weight (lambda).
    pub consistency: f64,
    /// Auxiliary-term weight (lambda1).
    pub aux: f64,
    /// Orthogonal-sphere weight (lambda2).
    pub os: f64,
    pub aux_kind: AuxKind,
    /// Euclidean margin of the SNTG hinge.
    pub margin_euclid: f64,
    /// Angular margin of the AMC hinge, radians.
    pub margin_angle: f64,
    /// Sphere radius applied before partitioning when `normalize_latent`.
    pub sphere_radius: f64,
    pub normalize_latent: bool,
    /// Number of latent blocks.
    pub blocks: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            consistency: 1.0,
            aux: 0.0,
            os: 7e-5,
            aux_kind: AuxKind::None,
            margin_euclid: 1.0,
            margin_angle: 0.5,
            sphere_radius: 3.0,
            normalize_latent: true,
            blocks: 16,
        }
    }
}

impl LossWeights {
    /// Default lambda2 for the given latent mode.
    pub fn default_os_weight(normalize_latent: bool) -> f64 {
        if normalize_latent {
            7e-5
        } else {
            5e-4
        }
    }

    pub fn with_sntg(mut self) -> Self {
        self.aux_kind = AuxKind::Sntg;
        self.aux = 0.4;
        self.margin_euclid = 1.0;
        self
    }

    pub fn with_amc(mut self) -> Self {
        self.aux_kind = AuxKind::Amc;
        self.aux = 0.1;
        self.margin_angle = 0.5;
        self
    }

    /// Only the masked cross-entropy remains.
    pub fn supervised_only() -> Self {
        Self { consistency: 0.0, aux: 0.0, os: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("loss weights: {what}")));
        if [self.consistency, self.aux, self.os].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("weights must be finite and non-negative");
        }
        if !(self.margin_euclid > 0.0) {
            return bad("euclidean margin must be positive");
        }
        if !(self.margin_angle > 0.0 && self.margin_angle < core::f64::consts::PI) {
            return bad("angular margin must lie in (0, pi)");
        }
        if !(self.sphere_radius > 0.0) {
            return bad("sphere radius must be positive");
        }
        if self.blocks == 0 {
            return bad("block count must be positive");
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.consistency > 0.0 || (self.aux > 0.0 && self.aux_kind != AuxKind::None)
    }
}

/// Everything [`total_loss`] reads from one mini-batch.
pub struct LossInputs<'a, T> {
    /// Student class probabilities `[B,K]`.
    pub probs: Var,
    /// Detached teacher probabilities; required when a teacher term is active.
    pub teacher_probs: Option<&'a Tensor<T>>,
    pub labels: &'a [usize],
    pub labeled: &'a [bool],
    /// Latent `[B,M]` fed to SNTG/AMC.
    pub aux_latent: Option<Var>,
    /// Latents `[B,M_i]` regularized by the orthogonal-sphere term.
    pub os_latents: &'a [Var],
    pub pairs: &'a [(usize, usize)],
}

/// Scalar node of the objective plus each term's unweighted value.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub total: Var,
    pub ce: T,
    pub consistency: T,
    pub aux: T,
    /// Summed over taps.
    pub os: T,
    pub total_value: T,
    pub clamped: usize,
    /// Pairs judged neighbors by the teacher.
    pub neighbor_pairs: usize,
}

/// Builds the full mini-batch objective. Terms whose weight is zero are not
/// evaluated and report 0.
pub fn total_loss<T: Real>(
    graph: &mut Graph<T>,
    inputs: &LossInputs<'_, T>,
    weights: &LossWeights,
    ramp: f64,
) -> Result<LossBreakdown<T>> {
    weights.validate()?;
    let (ce, clamped) = graph.cross_entropy_masked(inputs.probs, inputs.labels, inputs.labeled)?;
    let mut terms = vec![(ce, T::one())];
    let mut breakdown = LossBreakdown {
        total: ce,
        ce: graph.value(ce).data()[0],
        consistency: T::zero(),
        aux: T::zero(),
        os: T::zero(),
        total_value: T::zero(),
        clamped,
        neighbor_pairs: 0,
    };
    let teacher = || {
        inputs
            .teacher_probs
            .ok_or_else(|| Error::invalid("total_loss", "teacher probabilities required by an active term"))
    };

    if weights.consistency > 0.0 {
        let c = graph.consistency(inputs.probs, teacher()?)?;
        breakdown.consistency = graph.value(c).data()[0];
        terms.push((c, T::of(ramp * weights.consistency)));
    }

    if weights.aux > 0.0 && weights.aux_kind != AuxKind::None {
        let latent =
            inputs.aux_latent.ok_or_else(|| Error::invalid("total_loss", "auxiliary term needs a latent tap"))?;
        let sim = build_similarity(teacher()?, inputs.pairs)?;
        breakdown.neighbor_pairs = sim.similar.iter().filter(|&&s| s).count();
        let a = match weights.aux_kind {
            AuxKind::Sntg => graph.sntg(latent, &sim.pairs, &sim.similar, T::of(weights.margin_euclid))?,
            AuxKind::Amc => {
                let unit = graph.sphere_project(latent, T::one())?;
                graph.amc(unit, &sim.pairs, &sim.similar, T::of(weights.margin_angle))?
            }
            AuxKind::None => unreachable!(),
        };
        breakdown.aux = graph.value(a).data()[0];
        terms.push((a, T::of(ramp * weights.aux)));
    }

    if weights.os > 0.0 {
        for &latent in inputs.os_latents {
            let z = if weights.normalize_latent {
                graph.sphere_project(latent, T::of(weights.sphere_radius))?
            } else {
                latent
            };
            let o = graph.orthosphere(z, weights.blocks)?;
            breakdown.os += graph.value(o).data()[0];
            terms.push((o, T::of(ramp * weights.os)));
        }
    }

    let total = graph.weighted_sum(&terms)?;
    breakdown.total = total;
    breakdown.total_value = graph.value(total).data()[0];
    Ok(breakdown)
}

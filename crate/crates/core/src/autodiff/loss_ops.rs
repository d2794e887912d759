//! Loss terms as differentiable graph nodes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{accumulate_with, Graph, Node, Op, PairKind, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Lower bound on `sin(theta)` in the angular-margin derivative.
const MIN_SIN: f64 = 1e-6;

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n, m] => Ok((n, m)),
        _ => Err(Error::shape(op, format!("expected [N,M], got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    /// Masked cross-entropy `-(1/|B|) * sum_{labeled} log p[y]`.
    ///
    /// The divisor is the full batch size, labeled or not. Probabilities below
    /// `1e-12` at a labeled target are clamped; the second return value counts
    /// how many were.
    pub fn cross_entropy_masked(&mut self, probs: Var, labels: &[usize], mask: &[bool]) -> Result<(Var, usize)> {
        let (n, k) = matrix_dims("cross_entropy", self.shape(probs))?;
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows but {} labels and {} mask entries", labels.len(), mask.len()),
            ));
        }
        if let Some(i) = (0..n).find(|&i| mask[i] && labels[i] >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {} of row {i} exceeds {k} classes", labels[i])));
        }
        let (value, clamped) = losses::ce_rows(self.value(probs).data(), k, labels, mask);
        let count = clamped.iter().filter(|&&c| c).count();
        let op = Op::CrossEntropy { probs, labels: labels.to_vec(), mask: mask.to_vec(), clamped };
        Ok((self.push(Tensor::scalar(value), op, &[probs]), count))
    }

    /// Mean over rows of the squared Euclidean distance to a fixed target.
    /// The target is a plain tensor, so no gradient reaches whatever produced it.
    pub fn consistency(&mut self, student: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(student) != target.shape() {
            return Err(Error::shape("consistency", format!("{:?} vs {:?}", self.shape(student), target.shape())));
        }
        let (_, k) = matrix_dims("consistency", target.shape())?;
        let value = losses::consistency_rows(self.value(student).data(), target.data(), k);
        let op = Op::Consistency { student, target: target.data().to_vec() };
        Ok(self.push(Tensor::scalar(value), op, &[student]))
    }

    /// Mean SNTG contrastive loss over `pairs` of latent rows.
    pub fn sntg(&mut self, latent: Var, pairs: &[(usize, usize)], similar: &[bool], margin: T) -> Result<Var> {
        self.pair_contrast(latent, pairs, similar, margin, PairKind::Euclidean)
    }

    /// Mean AMC angular contrastive loss over `pairs`; rows must be unit length.
    pub fn amc(&mut self, latent: Var, pairs: &[(usize, usize)], similar: &[bool], margin: T) -> Result<Var> {
        self.pair_contrast(latent, pairs, similar, margin, PairKind::Angular)
    }

    fn pair_contrast(
        &mut self,
        latent: Var,
        pairs: &[(usize, usize)],
        similar: &[bool],
        margin: T,
        kind: PairKind,
    ) -> Result<Var> {
        let (n, m) = matrix_dims("pair_contrast", self.shape(latent))?;
        if pairs.len() != similar.len() {
            return Err(Error::shape("pair_contrast", "one similarity flag per pair required"));
        }
        if !(margin > T::zero()) {
            return Err(Error::invalid("pair_contrast", format!("margin {margin} must be positive")));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
            return Err(Error::invalid("pair_contrast", format!("pair ({i}, {j}) invalid for a batch of {n}")));
        }
        let rows = self.value(latent).data();
        let mut total = T::zero();
        for (&(i, j), &s) in pairs.iter().zip(similar) {
            let (a, b) = (&rows[i * m..(i + 1) * m], &rows[j * m..(j + 1) * m]);
            total += match kind {
                PairKind::Euclidean => losses::sntg_pair(a, b, s, margin),
                PairKind::Angular => losses::amc_pair(a, b, s, margin)?,
            };
        }
        let value = if pairs.is_empty() { T::zero() } else { total / T::of(pairs.len() as f64) };
        let op = Op::PairContrast { latent, pairs: pairs.to_vec(), similar: similar.to_vec(), margin, kind };
        Ok(self.push(Tensor::scalar(value), op, &[latent]))
    }

    /// Row-wise projection onto the sphere of the given radius.
    pub fn sphere_project(&mut self, x: Var, radius: T) -> Result<Var> {
        let (_, m) = matrix_dims("sphere_project", self.shape(x))?;
        if !(radius > T::zero()) {
            return Err(Error::invalid("sphere_project", format!("radius {radius} must be positive")));
        }
        let mut out = Vec::with_capacity(self.value(x).numel());
        let mut norms = Vec::new();
        for (row, v) in self.value(x).data().chunks_exact(m).enumerate() {
            let norm = losses::l2_norm(v);
            if !(norm > T::zero()) {
                return Err(Error::ZeroNorm { row });
            }
            out.extend(v.iter().map(|&e| radius * e / norm));
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::SphereProject { x, radius, norms }, &[x]))
    }

    /// Mean over rows of `||Z^T Z - I||_F^2`, each row reshaped into `blocks`
    /// contiguous columns.
    pub fn orthosphere(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let (n, m) = matrix_dims("orthosphere", self.shape(x))?;
        losses::check_partition(m, blocks)?;
        let total: T = self.value(x).data().chunks_exact(m).map(|row| losses::os_loss_flat(row, blocks)).sum();
        let value = total / T::of(n as f64);
        Ok(self.push(Tensor::scalar(value), Op::OrthoSphere { x, blocks }, &[x]))
    }
}

pub(super) fn cross_entropy_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    probs: Var,
    labels: &[usize],
    mask: &[bool],
    clamped: &[bool],
    g: T,
) {
    let pv = &nodes[probs.0].value;
    let k = pv.shape()[1];
    let n = labels.len();
    let scale = -g / T::of(n as f64);
    accumulate_with(
        grads,
        nodes,
        probs,
        |dp| {
            for i in 0..n {
                if mask[i] && !clamped[i] {
                    let idx = i * k + labels[i];
                    dp[idx] += scale / pv.data()[idx];
                }
            }
        },
        pv.numel(),
    );
}

pub(super) fn consistency_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    student: Var,
    target: &[T],
    g: T,
) {
    let sv = &nodes[student.0].value;
    let n = sv.shape()[0];
    let scale = T::of(2.0) * g / T::of(n as f64);
    accumulate_with(
        grads,
        nodes,
        student,
        |ds| {
            for ((d, &s), &t) in ds.iter_mut().zip(sv.data()).zip(target) {
                *d += scale * (s - t);
            }
        },
        sv.numel(),
    );
}

#[allow(clippy::too_many_arguments)]
pub(super) fn pair_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    latent: Var,
    pairs: &[(usize, usize)],
    similar: &[bool],
    margin: T,
    kind: PairKind,
    g: T,
) {
    if pairs.is_empty() {
        return;
    }
    let lv = &nodes[latent.0].value;
    let m = lv.shape()[1];
    let rows = lv.data();
    let scale = g / T::of(pairs.len() as f64);
    let two = T::of(2.0);
    accumulate_with(
        grads,
        nodes,
        latent,
        |dl| {
            for (&(i, j), &s) in pairs.iter().zip(similar) {
                let (a, b) = (&rows[i * m..(i + 1) * m], &rows[j * m..(j + 1) * m]);
                match kind {
                    PairKind::Euclidean => {
                        // d/d l_i; d/d l_j is its negation
                        let coef = if s {
                            two
                        } else {
                            let dist = losses::l2_distance(a, b);
                            if dist >= margin || !(dist > T::zero()) {
                                continue;
                            }
                            -two * (margin - dist) / dist
                        };
                        for t in 0..m {
                            let d = scale * coef * (a[t] - b[t]);
                            dl[i * m + t] += d;
                            dl[j * m + t] -= d;
                        }
                    }
                    PairKind::Angular => {
                        let cos = losses::dot(a, b).max(-T::one()).min(T::one());
                        let theta = cos.acos();
                        let sin = theta.sin();
                        let floor = T::of(MIN_SIN);
                        // dL/dcos
                        let dcos = if s {
                            let ratio = if sin > floor {
                                theta / sin
                            } else if theta < T::one() {
                                T::one()
                            } else {
                                theta / floor
                            };
                            -two * ratio
                        } else {
                            if theta >= margin {
                                continue;
                            }
                            two * (margin - theta) / sin.max(floor)
                        };
                        for t in 0..m {
                            dl[i * m + t] += scale * dcos * b[t];
                            dl[j * m + t] += scale * dcos * a[t];
                        }
                    }
                }
            }
        },
        lv.numel(),
    );
}

pub(super) fn sphere_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    radius: T,
    norms: &[T],
    y: &Tensor<T>,
    g: &[T],
) {
    let m = y.shape()[1];
    accumulate_with(
        grads,
        nodes,
        x,
        |dx| {
            for (((drow, yrow), grow), &norm) in
                dx.chunks_exact_mut(m).zip(y.data().chunks_exact(m)).zip(g.chunks_exact(m)).zip(norms)
            {
                // unit direction u = y / r; dx = (r / |x|) (g - u (u . g))
                let ug: T = yrow.iter().zip(grow).map(|(&yv, &gv)| yv / radius * gv).sum();
                let k = radius / norm;
                for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d += k * (gv - yv / radius * ug);
                }
            }
        },
        g.len(),
    );
}

pub(super) fn orthosphere_backward<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    blocks: usize,
    g: T,
) {
    let xv = &nodes[x.0].value;
    let (n, m) = (xv.shape()[0], xv.shape()[1]);
    let d = m / blocks;
    let scale = T::of(4.0) * g / T::of(n as f64);
    let mut residual = vec![T::zero(); blocks * blocks];
    accumulate_with(
        grads,
        nodes,
        x,
        |dx| {
            for (row, drow) in xv.data().chunks_exact(m).zip(dx.chunks_exact_mut(m)) {
                losses::gram_residual(row, blocks, &mut residual);
                for a in 0..blocks {
                    for b in 0..blocks {
                        let r = scale * residual[a * blocks + b];
                        if r == T::zero() {
                            continue;
                        }
                        for t in 0..d {
                            drow[a * d + t] += r * row[b * d + t];
                        }
                    }
                }
            }
        },
        xv.numel(),
    );
}

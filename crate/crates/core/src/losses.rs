//! Contrastive and consistency objectives with analytic gradients.
//!
//! The same InfoNCE kernel serves the spatial (points vs. pixels of one
//! frame), intra-sensor temporal (points vs. points of an adjacent frame) and
//! cross-sensor temporal (points vs. pixels of an adjacent frame) terms; they
//! differ only in their operands.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `d value / d Q`, row-major `M x C`.
    pub grad_q: Vec<f64>,
    /// `d value / d K`, row-major `M x C`.
    pub grad_k: Vec<f64>,
}

fn check_pair(q: &EmbeddingMatrix, k: &EmbeddingMatrix) -> Result<()> {
    if q.rows() != k.rows() || q.dim() != k.dim() {
        return Err(Error::ShapeMismatch(format!(
            "Q is {}x{} but K is {}x{}",
            q.rows(),
            q.dim(),
            k.rows(),
            k.dim()
        )));
    }
    if !q.is_normalized() || !k.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if q.rows() == 0 {
        return Err(Error::InvalidInput("loss needs at least one row".into()));
    }
    Ok(())
}

/// InfoNCE over `M` row pairs; row `i` of `K` is the positive for row `i` of `Q`.
pub fn info_nce(q: &EmbeddingMatrix, k: &EmbeddingMatrix, tau: f64) -> Result<LossResult> {
    check_pair(q, k)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(info_nce_raw(q.data(), k.data(), q.rows(), q.dim(), tau))
}

/// Unchecked InfoNCE kernel on raw row-major buffers.
///
/// `value = -(1/M) sum_i log softmax_j(<q_i, k_j> / tau)[i]`, evaluated with a
/// max-shifted log-sum-exp. With `P` the row-softmax and `G = (P - I) / (M tau)`,
/// `dQ = G K` and `dK = G^T Q`.
pub fn info_nce_raw(q: &[f64], k: &[f64], m: usize, c: usize, tau: f64) -> LossResult {
    let mut value = 0.0;
    let mut grad_q = vec![0.0; m * c];
    let mut grad_k = vec![0.0; m * c];
    let mut logits = vec![0.0; m];
    let scale = 1.0 / (m as f64 * tau);
    for i in 0..m {
        let qi = &q[i * c..(i + 1) * c];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(qi, &k[j * c..(j + 1) * c]) / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - logits[i];
        for j in 0..m {
            let p = (logits[j] - lse).exp();
            let coeff = (p - if i == j { 1.0 } else { 0.0 }) * scale;
            if coeff == 0.0 {
                continue;
            }
            let kj = &k[j * c..(j + 1) * c];
            for d in 0..c {
                grad_q[i * c + d] += coeff * kj[d];
                grad_k[j * c + d] += coeff * qi[d];
            }
        }
    }
    LossResult {
        value: value / m as f64,
        grad_q,
        grad_k,
    }
}

/// Dense-to-sparse consistency: mean of `1 - <q_i^d, q_i^t>`.
pub fn d2s_loss(dense: &EmbeddingMatrix, sparse: &EmbeddingMatrix) -> Result<LossResult> {
    check_pair(dense, sparse)?;
    Ok(d2s_raw(dense.data(), sparse.data(), dense.rows(), dense.dim()))
}

/// Unchecked D2S kernel; `grad_q` is w.r.t. the dense rows, `grad_k` w.r.t. the sparse rows.
pub fn d2s_raw(dense: &[f64], sparse: &[f64], m: usize, c: usize) -> LossResult {
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;
    for i in 0..m {
        value += 1.0 - dot(&dense[i * c..(i + 1) * c], &sparse[i * c..(i + 1) * c]);
    }
    LossResult {
        value: value * inv_m,
        grad_q: sparse.iter().map(|v| -v * inv_m).collect(),
        grad_k: dense.iter().map(|v| -v * inv_m).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spatial: f64,
    pub temporal: f64,
    pub cross: f64,
    pub d2s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial: 1.0,
            temporal: 1.0,
            cross: 1.0,
            d2s: 1.0,
        }
    }
}

/// Frame slots, in time order.
pub const PREV: usize = 0;
pub const CURR: usize = 1;
pub const NEXT: usize = 2;

/// Operands of the composite objective.
///
/// `q[f]`/`k[f]` are superpoint/superpixel embeddings of frame `f`
/// (`PREV`, `CURR`, `NEXT`), sharing the region order of that frame.
/// `temporal_pairs[0]` pairs current regions with previous-frame regions and
/// `temporal_pairs[1]` with next-frame regions, as `(current row, other row)`.
/// `dense_pairs` are `(dense row, current row)`.
pub struct ObjectiveInputs<'a> {
    pub q: [&'a EmbeddingMatrix; 3],
    pub k: [&'a EmbeddingMatrix; 3],
    pub temporal_pairs: [&'a [(usize, usize)]; 2],
    pub dense_q: &'a EmbeddingMatrix,
    pub dense_pairs: &'a [(usize, usize)],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValue {
    pub value: f64,
    /// False when the term had no rows to compare and contributed 0.
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted means per objective, before the inter-term weights.
    pub spatial_mean: f64,
    pub temporal_mean: f64,
    pub cross_mean: f64,
    pub spatial: [TermValue; 3],
    /// Against the previous and next frame.
    pub temporal: [TermValue; 2],
    pub cross: [TermValue; 2],
    pub d2s: TermValue,
}

impl LossBreakdown {
    pub fn any_inactive(&self) -> bool {
        self.spatial
            .iter()
            .chain(&self.temporal)
            .chain(&self.cross)
            .chain(std::iter::once(&self.d2s))
            .any(|t| !t.active)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub breakdown: LossBreakdown,
    pub grad_q: [Vec<f64>; 3],
    pub grad_k: [Vec<f64>; 3],
    pub grad_dense_q: Vec<f64>,
}

fn scatter_add(dst: &mut [f64], rows: impl Iterator<Item = usize>, src: &[f64], dim: usize, scale: f64) {
    for (k, r) in rows.enumerate() {
        for d in 0..dim {
            dst[r * dim + d] += scale * src[k * dim + d];
        }
    }
}

/// `total = w_sc * mean(3 spatial) + w_tc * mean(2 intra-temporal)
///        + w_cc * mean(2 cross-temporal) + w_d2s * d2s`.
///
/// Terms without any rows contribute 0 (and are flagged inactive) while still
/// counting in their mean's denominator.
pub fn composite_objective(inputs: &ObjectiveInputs<'_>, tau: f64, weights: &LossWeights) -> Result<CompositeResult> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let dim = inputs.dense_q.dim();
    for m in inputs.q.iter().chain(&inputs.k) {
        if m.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} differs from {dim}",
                m.dim()
            )));
        }
    }
    for f in 0..3 {
        if inputs.q[f].rows() != inputs.k[f].rows() {
            return Err(Error::ShapeMismatch(format!(
                "frame {f}: {} superpoint rows but {} superpixel rows",
                inputs.q[f].rows(),
                inputs.k[f].rows()
            )));
        }
    }
    let mut grad_q: [Vec<f64>; 3] = std::array::from_fn(|f| vec![0.0; inputs.q[f].rows() * dim]);
    let mut grad_k: [Vec<f64>; 3] = std::array::from_fn(|f| vec![0.0; inputs.k[f].rows() * dim]);
    let mut grad_dense_q = vec![0.0; inputs.dense_q.rows() * dim];
    let mut b = LossBreakdown::default();

    let spatial_scale = weights.spatial / 3.0;
    for f in 0..3 {
        if inputs.q[f].rows() == 0 {
            continue;
        }
        let r = info_nce(inputs.q[f], inputs.k[f], tau)?;
        b.spatial[f] = TermValue {
            value: r.value,
            active: true,
        };
        scatter_add(&mut grad_q[f], 0..inputs.q[f].rows(), &r.grad_q, dim, spatial_scale);
        scatter_add(&mut grad_k[f], 0..inputs.k[f].rows(), &r.grad_k, dim, spatial_scale);
    }

    let temporal_scale = weights.temporal / 2.0;
    let cross_scale = weights.cross / 2.0;
    for (slot, other) in [(0, PREV), (1, NEXT)] {
        let pairs = inputs.temporal_pairs[slot];
        if pairs.is_empty() {
            continue;
        }
        let cur_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let other_rows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let q_cur = inputs.q[CURR].gather(&cur_rows);

        let r = info_nce(&q_cur, &inputs.q[other].gather(&other_rows), tau)?;
        b.temporal[slot] = TermValue {
            value: r.value,
            active: true,
        };
        scatter_add(
            &mut grad_q[CURR],
            cur_rows.iter().copied(),
            &r.grad_q,
            dim,
            temporal_scale,
        );
        scatter_add(
            &mut grad_q[other],
            other_rows.iter().copied(),
            &r.grad_k,
            dim,
            temporal_scale,
        );

        let r = info_nce(&q_cur, &inputs.k[other].gather(&other_rows), tau)?;
        b.cross[slot] = TermValue {
            value: r.value,
            active: true,
        };
        scatter_add(&mut grad_q[CURR], cur_rows.iter().copied(), &r.grad_q, dim, cross_scale);
        scatter_add(
            &mut grad_k[other],
            other_rows.iter().copied(),
            &r.grad_k,
            dim,
            cross_scale,
        );
    }

    if !inputs.dense_pairs.is_empty() {
        let dense_rows: Vec<usize> = inputs.dense_pairs.iter().map(|p| p.0).collect();
        let cur_rows: Vec<usize> = inputs.dense_pairs.iter().map(|p| p.1).collect();
        let r = d2s_loss(&inputs.dense_q.gather(&dense_rows), &inputs.q[CURR].gather(&cur_rows))?;
        b.d2s = TermValue {
            value: r.value,
            active: true,
        };
        scatter_add(
            &mut grad_dense_q,
            dense_rows.iter().copied(),
            &r.grad_q,
            dim,
            weights.d2s,
        );
        scatter_add(&mut grad_q[CURR], cur_rows.iter().copied(), &r.grad_k, dim, weights.d2s);
    }

    b.spatial_mean = b.spatial.iter().map(|t| t.value).sum::<f64>() / 3.0;
    b.temporal_mean = b.temporal.iter().map(|t| t.value).sum::<f64>() / 2.0;
    b.cross_mean = b.cross.iter().map(|t| t.value).sum::<f64>() / 2.0;
    b.total = weights.spatial * b.spatial_mean
        + weights.temporal * b.temporal_mean
        + weights.cross * b.cross_mean
        + weights.d2s * b.d2s.value;

    Ok(CompositeResult {
        breakdown: b,
        grad_q,
        grad_k,
        grad_dense_q,
    })
}

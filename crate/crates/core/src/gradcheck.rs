//! Finite-difference validation of the analytic gradients.
//!
//! Errors are measured per instance as `|a - n| / max(|a|, |n|, 1e-12)` over
//! the whole gradient vector, with `n` from central differences.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize_backward, l2_normalize_rows, EmbeddingMatrix};
use crate::error::Result;
use crate::geometry::{aggregate_sweeps, Camera, CameraIntrinsics, PointCloud, RigidTransform};
use crate::losses::{composite_objective, LossWeights, ObjectiveInputs};
use crate::maps::{FeatureMap, LabelMap};
use crate::train::{evaluate, FrameInput, ModelConfig, Params, TrainBatch};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const TEMPERATURES: [f64; 3] = [1.0, 0.1, 0.07];

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub term: String,
    pub rows: usize,
    pub dim: usize,
    pub tau: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub checks: usize,
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_error: f64,
    pub max_by_term: BTreeMap<String, f64>,
    pub failures: Vec<CaseResult>,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_cases(instances: usize, cases: Vec<CaseResult>) -> Self {
        let mut max_by_term: BTreeMap<String, f64> = BTreeMap::new();
        for c in &cases {
            let e = max_by_term.entry(c.term.clone()).or_insert(0.0);
            *e = e.max(c.rel_error);
        }
        let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        let failures: Vec<CaseResult> = cases.iter().filter(|c| !(c.rel_error < TOLERANCE)).cloned().collect();
        Self {
            instances,
            checks: cases.len(),
            tolerance: TOLERANCE,
            step: FD_STEP,
            max_rel_error,
            max_by_term,
            passed: failures.is_empty(),
            failures,
        }
    }
}

/// Raw (unnormalized) operands of one composite instance.
struct RawInstance {
    rows: [usize; 4],
    dim: usize,
    temporal_pairs: [Vec<(usize, usize)>; 2],
    dense_pairs: Vec<(usize, usize)>,
}

impl RawInstance {
    fn random(rng: &mut ChaCha8Rng) -> (Self, Vec<f64>) {
        let dim = rng.random_range(2..=16);
        let rows: [usize; 4] = std::array::from_fn(|_| rng.random_range(1..=8));
        let mut pairs = |a: usize, b: usize| -> Vec<(usize, usize)> {
            let n = rng.random_range(1..=a.min(b));
            let mut left: Vec<usize> = (0..a).collect();
            let mut right: Vec<usize> = (0..b).collect();
            rand::seq::SliceRandom::shuffle(left.as_mut_slice(), rng);
            rand::seq::SliceRandom::shuffle(right.as_mut_slice(), rng);
            left.into_iter().zip(right).take(n).collect()
        };
        let temporal_pairs = [pairs(rows[1], rows[0]), pairs(rows[1], rows[2])];
        let dense_pairs = pairs(rows[3], rows[1]);
        let inst = Self {
            rows,
            dim,
            temporal_pairs,
            dense_pairs,
        };
        let len = inst.layout().last().unwrap().1;
        let x = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        (inst, x)
    }

    /// Spans of q0..q2, k0..k2, dense in the flat vector.
    fn layout(&self) -> Vec<(usize, usize)> {
        let r = self.rows;
        let sizes = [r[0], r[1], r[2], r[0], r[1], r[2], r[3]];
        let mut at = 0;
        sizes
            .iter()
            .map(|&n| {
                let span = (at, at + n * self.dim);
                at = span.1;
                span
            })
            .collect()
    }

    /// Loss at `x` and, when asked, its gradient w.r.t. `x` (through normalization).
    fn eval(&self, x: &[f64], tau: f64, weights: &LossWeights, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let spans = self.layout();
        let mut units = Vec::with_capacity(spans.len());
        for &(a, b) in &spans {
            let (u, n) = l2_normalize_rows(&x[a..b], self.dim)?;
            let m = EmbeddingMatrix::from_unit_rows((b - a) / self.dim, self.dim, u.clone())?;
            units.push((m, u, n));
        }
        let inputs = ObjectiveInputs {
            q: [&units[0].0, &units[1].0, &units[2].0],
            k: [&units[3].0, &units[4].0, &units[5].0],
            temporal_pairs: [&self.temporal_pairs[0], &self.temporal_pairs[1]],
            dense_q: &units[6].0,
            dense_pairs: &self.dense_pairs,
        };
        let r = composite_objective(&inputs, tau, weights)?;
        if !with_grad {
            return Ok((r.breakdown.total, Vec::new()));
        }
        let grads = [
            &r.grad_q[0],
            &r.grad_q[1],
            &r.grad_q[2],
            &r.grad_k[0],
            &r.grad_k[1],
            &r.grad_k[2],
            &r.grad_dense_q,
        ];
        let mut g = Vec::with_capacity(x.len());
        for ((_, u, n), gu) in units.iter().zip(grads) {
            g.extend(l2_normalize_backward(u, n, gu, self.dim));
        }
        Ok((r.breakdown.total, g))
    }
}

const TERMS: [(&str, LossWeights); 5] = [
    (
        "spatial",
        LossWeights {
            spatial: 1.0,
            temporal: 0.0,
            cross: 0.0,
            d2s: 0.0,
        },
    ),
    (
        "temporal",
        LossWeights {
            spatial: 0.0,
            temporal: 1.0,
            cross: 0.0,
            d2s: 0.0,
        },
    ),
    (
        "cross",
        LossWeights {
            spatial: 0.0,
            temporal: 0.0,
            cross: 1.0,
            d2s: 0.0,
        },
    ),
    (
        "d2s",
        LossWeights {
            spatial: 0.0,
            temporal: 0.0,
            cross: 0.0,
            d2s: 1.0,
        },
    ),
    (
        "composite",
        LossWeights {
            spatial: 1.0,
            temporal: 1.0,
            cross: 1.0,
            d2s: 1.0,
        },
    ),
];

/// Checks each objective term, and their sum, on `instances` random inputs
/// with at most 8 rows and 16 channels. Temperatures cycle through
/// [`TEMPERATURES`].
pub fn loss_gradient_suite(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(instances * TERMS.len());
    for i in 0..instances {
        let tau = TEMPERATURES[i % TEMPERATURES.len()];
        let (inst, x) = RawInstance::random(&mut rng);
        for (term, weights) in &TERMS {
            let (_, analytic) = inst.eval(&x, tau, weights, true)?;
            let numeric = numeric_gradient(&x, FD_STEP, |p| Ok(inst.eval(p, tau, weights, false)?.0))?;
            cases.push(CaseResult {
                term: term.to_string(),
                rows: *inst.rows.iter().max().unwrap(),
                dim: inst.dim,
                tau,
                rel_error: relative_error(&analytic, &numeric),
            });
        }
    }
    Ok(GradCheckReport::from_cases(instances, cases))
}

/// A small random training batch: two cameras, up to four superpixels each
/// (so at most 8 regions per frame), embedding width at most 16.
pub fn random_batch(rng: &mut impl Rng) -> Result<(TrainBatch, ModelConfig)> {
    let (w, h) = (8u32, 6u32);
    let k = CameraIntrinsics::from_focal(4.0, 4.0, 4.0, 3.0, w, h)?;
    let cameras = vec![
        Camera::new(k, RigidTransform::identity()),
        Camera::new(
            k,
            RigidTransform::new(Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0))?,
        ),
    ];
    let feature_dim = rng.random_range(2..=6);
    let attr_width = rng.random_range(0..=2);
    let labels = rng.random_range(1..=4u32);
    let cloud = |rng: &mut dyn rand::RngCore, t: f64| -> Result<PointCloud> {
        let n = rng.random_range(6..=30);
        let coords = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(1.0..3.0),
                ]
            })
            .collect();
        let attrs = (0..n * attr_width).map(|_| rng.random_range(0.0..1.0)).collect();
        PointCloud::new(coords, attrs, attr_width, t)
    };
    let mut frames = Vec::with_capacity(3);
    for f in 0..3 {
        let c = cloud(rng, f as f64)?;
        let maps = (0..cameras.len())
            .map(|_| {
                // vertical bands keep every label present
                let cols: Vec<u32> = (0..w).map(|x| x * labels / w).collect();
                LabelMap::new(w, h, (0..h).flat_map(|_| cols.clone()).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let features = (0..cameras.len())
            .map(|_| {
                let data = (0..4 * 3 * feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                FeatureMap::new(4, 3, feature_dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameInput {
            cloud: c,
            maps,
            features,
        });
    }
    let sweep = cloud(rng, 0.5)?;
    let dense = aggregate_sweeps(
        &frames[1].cloud,
        &[(sweep, RigidTransform::from_translation(0.05, 0.0, 0.0))],
    )?;
    let frames: [FrameInput; 3] = frames.try_into().expect("three frames");
    let batch = TrainBatch::new(frames, &dense, &cameras)?;
    let model = ModelConfig {
        hidden: rng.random_range(2..=8),
        point_dim: rng.random_range(2..=8),
        embed_dim: rng.random_range(2..=16),
    };
    Ok((batch, model))
}

/// Gradient of the full objective w.r.t. every trainable parameter on
/// random small batches.
pub fn parameter_gradient_check(seed: u64, instances: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::default();
    let mut cases = Vec::with_capacity(instances);
    for i in 0..instances {
        let tau = TEMPERATURES[i % TEMPERATURES.len()];
        let (batch, model) = random_batch(&mut rng)?;
        let params = Params::init(rng.random(), &model, batch.attr_width(), batch.feature_dim())?;
        let analytic = evaluate(&params, &batch, tau, &weights, true)?
            .grad
            .expect("gradient requested");
        let mut probe = params.clone();
        let numeric = numeric_gradient(&params.flatten(), FD_STEP, |x| {
            probe.set_flat(x)?;
            Ok(evaluate(&probe, &batch, tau, &weights, false)?.breakdown.total)
        })?;
        cases.push(CaseResult {
            term: "parameters".into(),
            rows: *batch.regions().iter().max().unwrap(),
            dim: model.embed_dim,
            tau,
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(GradCheckReport::from_cases(instances, cases))
}

//! Deterministic toy pretraining with manual backpropagation.
//!
//! Points go through the shared encoder and the point head, are normalized,
//! mean-pooled per superpoint and normalized again to give `Q`. Pixels take
//! the frozen backbone features (bilinearly upsampled), the image head and
//! the same normalize, pool, normalize chain to give `K`. The composite
//! objective is backpropagated into the encoder and both heads and one plain
//! gradient-descent step is applied.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, DenseMatrix};
use crate::embedding::{
    bilinear_upsample, dot, l2_normalize_backward, l2_normalize_rows, EmbeddingMatrix, PointEncoder, ProjectionHead,
};
use crate::error::{Error, Result};
use crate::geometry::{aggregate_sweeps, sweep_to_keyframe, Camera, PointCloud};
use crate::losses::{
    composite_objective, LossBreakdown, LossWeights, ObjectiveInputs, CURR, DEFAULT_TEMPERATURE, NEXT, PREV,
};
use crate::maps::{FeatureMap, LabelMap};
use crate::scene::SyntheticScene;
use crate::superpoint::{
    align_views, build_superpoints, match_regions, match_same_views, SemanticView, SuperpointIndex,
};

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Point feature width `D`.
    pub point_dim: usize,
    /// Shared embedding width `C`.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            point_dim: 64,
            embed_dim: 32,
        }
    }
}

/// Every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: PointEncoder,
    pub point_head: ProjectionHead,
    pub image_head: ProjectionHead,
}

impl Params {
    pub fn init(seed: u64, model: &ModelConfig, attr_width: usize, feature_dim: usize) -> Result<Params> {
        if model.hidden == 0 || model.point_dim == 0 || model.embed_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidConfig("model widths must be nonzero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PointEncoder::init(&mut rng, 3 + attr_width, model.hidden, model.point_dim);
        let point_head = ProjectionHead::init(&mut rng, model.point_dim, model.embed_dim);
        let image_head = ProjectionHead::init(&mut rng, feature_dim, model.embed_dim);
        Ok(Params {
            encoder,
            point_head,
            image_head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.point_head.weight.len() + self.image_head.weight.len()
    }

    fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.encoder.w1,
            &self.encoder.b1,
            &self.encoder.w2,
            &self.encoder.b2,
            &self.point_head.weight,
            &self.image_head.weight,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.point_head.weight,
            &mut self.image_head.weight,
        ]
    }

    /// Concatenation `w1, b1, w2, b2, point head, image head`.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn shapes(&self) -> [(&'static str, usize, usize); 6] {
        let e = &self.encoder;
        [
            ("encoder_w1", e.hidden, e.in_dim),
            ("encoder_b1", 1, e.hidden),
            ("encoder_w2", e.out_dim, e.hidden),
            ("encoder_b2", 1, e.out_dim),
            ("point_head", self.point_head.out_dim, self.point_head.in_dim),
            ("image_head", self.image_head.out_dim, self.image_head.in_dim),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub step: u64,
    pub seed: u64,
    pub lr: f64,
    pub tau: f64,
    pub weights: LossWeights,
}

impl TrainState {
    pub fn new(seed: u64, model: &ModelConfig, batch: &TrainBatch) -> Result<TrainState> {
        Ok(TrainState {
            params: Params::init(seed, model, batch.attr_width, batch.feature_dim)?,
            step: 0,
            seed,
            lr: DEFAULT_LEARNING_RATE,
            tau: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
        })
    }

    /// One descent step in place; returns the loss before the update.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<LossBreakdown> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        let eval = evaluate(&self.params, batch, self.tau, &self.weights, true)?;
        let grad = eval.grad.expect("gradient requested");
        let mut flat = self.params.flatten();
        for (p, g) in flat.iter_mut().zip(&grad) {
            *p -= self.lr * g;
        }
        self.params.set_flat(&flat)?;
        self.step += 1;
        Ok(eval.breakdown)
    }

    /// Writes one `FPT1` matrix per tensor plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, config_hash: &str) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for ((name, rows, cols), t) in self.params.shapes().into_iter().zip(self.params.tensors()) {
            let path = dir.join(format!("{name}.fpt"));
            DenseMatrix::new(rows, cols, t.clone())?.save(&path)?;
            written.push(path);
        }
        let manifest = CheckpointManifest {
            step: self.step,
            seed: self.seed,
            lr: self.lr,
            tau: self.tau,
            weights: self.weights,
            config_hash: config_hash.to_string(),
            num_params: self.params.num_params(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        written.push(path);
        Ok(written)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(TrainState, String)> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let read = |name: &str| DenseMatrix::load(dir.join(format!("{name}.fpt")));
        let (w1, b1, w2, b2) = (
            read("encoder_w1")?,
            read("encoder_b1")?,
            read("encoder_w2")?,
            read("encoder_b2")?,
        );
        let (ph, ih) = (read("point_head")?, read("image_head")?);
        let consistent =
            b1.cols == w1.rows && w2.cols == w1.rows && b2.cols == w2.rows && ph.cols == w2.rows && ih.rows == ph.rows;
        if !consistent || w1.cols < 3 {
            return Err(Error::ShapeMismatch(
                "checkpoint tensors have inconsistent shapes".into(),
            ));
        }
        let params = Params {
            encoder: PointEncoder {
                in_dim: w1.cols,
                hidden: w1.rows,
                out_dim: w2.rows,
                w1: w1.data,
                b1: b1.data,
                w2: w2.data,
                b2: b2.data,
            },
            point_head: ProjectionHead {
                in_dim: ph.cols,
                out_dim: ph.rows,
                weight: ph.data,
            },
            image_head: ProjectionHead {
                in_dim: ih.cols,
                out_dim: ih.rows,
                weight: ih.data,
            },
        };
        if params.num_params() != manifest.num_params {
            return Err(Error::ShapeMismatch(
                "checkpoint manifest disagrees with tensors".into(),
            ));
        }
        let state = TrainState {
            params,
            step: manifest.step,
            seed: manifest.seed,
            lr: manifest.lr,
            tau: manifest.tau,
            weights: manifest.weights,
        };
        Ok((state, manifest.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    step: u64,
    seed: u64,
    lr: f64,
    tau: f64,
    weights: LossWeights,
    config_hash: String,
    num_params: usize,
}

/// Functional form: returns the updated state and the pre-update loss.
pub fn train_step(state: &TrainState, batch: &TrainBatch) -> Result<(TrainState, LossBreakdown)> {
    let mut next = state.clone();
    let loss = next.step(batch)?;
    Ok((next, loss))
}

/// Encoder inputs of the assigned points of one cloud, grouped by region.
#[derive(Debug, Clone, PartialEq)]
struct PointGroups {
    inputs: Vec<f64>,
    /// Region `r` owns rows `offsets[r]..offsets[r + 1]`.
    offsets: Vec<usize>,
}

/// Frozen per-pixel backbone features grouped by region.
#[derive(Debug, Clone, PartialEq)]
struct PixelGroups {
    features: Vec<f64>,
    offsets: Vec<usize>,
}

/// One camera frame's sensor data.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub cloud: PointCloud,
    /// Superpixel maps, one per camera.
    pub maps: Vec<LabelMap>,
    /// Frozen backbone features, one per camera.
    pub features: Vec<FeatureMap>,
}

/// Everything a training step reads, precomputed once.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    points: [PointGroups; 3],
    pixels: [PixelGroups; 3],
    dense: PointGroups,
    temporal_pairs: [Vec<(usize, usize)>; 2],
    dense_pairs: Vec<(usize, usize)>,
    attr_width: usize,
    feature_dim: usize,
}

fn group_points(cloud: &PointCloud, index: &SuperpointIndex) -> PointGroups {
    let mut inputs = Vec::new();
    let mut offsets = vec![0];
    for members in index.regions() {
        for &i in members {
            inputs.extend_from_slice(&cloud.coords()[i]);
            inputs.extend_from_slice(cloud.attr_row(i));
        }
        offsets.push(offsets.last().unwrap() + members.len());
    }
    PointGroups { inputs, offsets }
}

fn group_pixels(frame: &FrameInput, cameras: &[Camera], index: &SuperpointIndex) -> Result<PixelGroups> {
    let dim = frame.features[0].channels();
    let upsampled: Vec<Vec<f64>> = frame
        .features
        .iter()
        .zip(cameras)
        .map(|(f, c)| bilinear_upsample(f, c.width(), c.height()))
        .collect();
    let mut features = Vec::new();
    let mut offsets = vec![0];
    for meta in index.meta() {
        let map = &frame.maps[meta.camera];
        let grid = &upsampled[meta.camera];
        let mut count = 0;
        for (p, &label) in map.labels().iter().enumerate() {
            if label == meta.superpixel {
                features.extend_from_slice(&grid[p * dim..(p + 1) * dim]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidInput(format!(
                "superpixel {} has no pixels",
                meta.superpixel
            )));
        }
        offsets.push(offsets.last().unwrap() + count);
    }
    Ok(PixelGroups { features, offsets })
}

impl TrainBatch {
    /// `frames` are at `t - dt`, `t`, `t + dt`; `dense` is the keyframe merged
    /// with its sweeps (extra attribute columns beyond the keyframe's are
    /// dropped). Dense superpoints use the keyframe maps.
    pub fn new(frames: [FrameInput; 3], dense: &PointCloud, cameras: &[Camera]) -> Result<TrainBatch> {
        let attr_width = frames[CURR].cloud.attr_width();
        let feature_dim = frames[CURR]
            .features
            .first()
            .map(FeatureMap::channels)
            .ok_or_else(|| Error::InvalidInput("batch frames need at least one camera".into()))?;
        for f in &frames {
            if f.cloud.attr_width() != attr_width {
                return Err(Error::ShapeMismatch("frames disagree on attribute width".into()));
            }
            if f.maps.len() != cameras.len() || f.features.len() != cameras.len() {
                return Err(Error::ShapeMismatch(
                    "each frame needs one map and one feature grid per camera".into(),
                ));
            }
            if f.features.iter().any(|m| m.channels() != feature_dim) {
                return Err(Error::ShapeMismatch("feature grids disagree on channel count".into()));
            }
        }
        let indices: Vec<SuperpointIndex> = frames
            .iter()
            .map(|f| build_superpoints(&f.cloud, cameras, &f.maps))
            .collect::<Result<_>>()?;
        let dense = if dense.attr_width() > attr_width {
            dense.truncate_attrs(attr_width)?
        } else {
            dense.clone()
        };
        if dense.attr_width() != attr_width {
            return Err(Error::ShapeMismatch("dense cloud lacks keyframe attributes".into()));
        }
        let dense_index = build_superpoints(&dense, cameras, &frames[CURR].maps)?;

        let points = std::array::from_fn(|f| group_points(&frames[f].cloud, &indices[f]));
        let pixels = [
            group_pixels(&frames[PREV], cameras, &indices[PREV])?,
            group_pixels(&frames[CURR], cameras, &indices[CURR])?,
            group_pixels(&frames[NEXT], cameras, &indices[NEXT])?,
        ];
        Ok(TrainBatch {
            points,
            pixels,
            dense: group_points(&dense, &dense_index),
            temporal_pairs: [
                match_regions(&indices[CURR], &indices[PREV]),
                match_regions(&indices[CURR], &indices[NEXT]),
            ],
            dense_pairs: match_same_views(&dense_index, &indices[CURR]),
            attr_width,
            feature_dim,
        })
    }

    pub fn attr_width(&self) -> usize {
        self.attr_width
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Region counts of the previous, current and next frame.
    pub fn regions(&self) -> [usize; 3] {
        std::array::from_fn(|f| self.points[f].offsets.len() - 1)
    }

    pub fn temporal_pairs(&self) -> &[Vec<(usize, usize)>; 2] {
        &self.temporal_pairs
    }

    pub fn dense_pairs(&self) -> &[(usize, usize)] {
        &self.dense_pairs
    }
}

/// Which rendered maps serve as superpixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SuperpixelSource {
    /// Class maps after view-consistency alignment.
    #[default]
    Semantic,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    /// Keyframe index; defaults to the middle frame.
    pub keyframe: Option<usize>,
    /// Seconds between the keyframe and its temporal neighbors.
    pub timespan: f64,
    pub sweeps: usize,
    pub superpixels: SuperpixelSource,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            keyframe: None,
            timespan: 0.5,
            sweeps: 2,
            superpixels: SuperpixelSource::Semantic,
        }
    }
}

impl BatchConfig {
    /// `(prev, key, next)` frame indices.
    pub fn frame_indices(&self, scene: &SyntheticScene) -> Result<[usize; 3]> {
        if !(self.timespan > 0.0) {
            return Err(Error::InvalidConfig("timespan must be positive".into()));
        }
        let stride = (self.timespan / scene.timestep()).round().max(1.0) as usize;
        let n = scene.frames.len();
        let key = self.keyframe.unwrap_or(n / 2);
        if key < stride || key < self.sweeps || key + stride >= n {
            return Err(Error::InvalidConfig(format!(
                "keyframe {key} with temporal stride {stride} and {} sweeps does not fit {n} frames",
                self.sweeps
            )));
        }
        Ok([key - stride, key, key + stride])
    }
}

/// Builds a batch from a synthetic scene. Sweeps are the scans just before
/// the keyframe.
pub fn batch_from_scene(scene: &SyntheticScene, cfg: &BatchConfig) -> Result<TrainBatch> {
    let ids = cfg.frame_indices(scene)?;
    let frame_input = |k: usize| -> Result<FrameInput> {
        let frame = &scene.frames[k];
        let maps = match cfg.superpixels {
            SuperpixelSource::Instance => frame.instance_maps(),
            SuperpixelSource::Semantic => {
                let views: Vec<SemanticView> = frame
                    .views
                    .iter()
                    .map(|v| SemanticView {
                        instances: v.instances.clone(),
                        classes: v.classes.clone(),
                    })
                    .collect();
                align_views(&views, &frame.cloud, &scene.cameras)?
            }
        };
        Ok(FrameInput {
            cloud: frame.cloud.clone(),
            maps,
            features: frame.views.iter().map(|v| v.features.clone()).collect(),
        })
    };
    let key = ids[CURR];
    let key_pose = &scene.frames[key].pose;
    let sweeps: Vec<(PointCloud, _)> = (1..=cfg.sweeps)
        .map(|s| {
            let f = &scene.frames[key - s];
            (f.cloud.clone(), sweep_to_keyframe(key_pose, &f.pose))
        })
        .collect();
    let dense = aggregate_sweeps(&scene.frames[key].cloud, &sweeps)?;
    let frames = [
        frame_input(ids[PREV])?,
        frame_input(ids[CURR])?,
        frame_input(ids[NEXT])?,
    ];
    TrainBatch::new(frames, &dense, &scene.cameras)
}

struct PointForward {
    cache: crate::embedding::EncoderCache,
    enc_out: Vec<f64>,
    unit: Vec<f64>,
    norms: Vec<f64>,
    q: Vec<f64>,
    q_norms: Vec<f64>,
}

struct PixelForward {
    unit: Vec<f64>,
    norms: Vec<f64>,
    k: Vec<f64>,
    k_norms: Vec<f64>,
}

fn mean_pool(rows: &[f64], offsets: &[usize], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; (offsets.len() - 1) * dim];
    for (r, w) in offsets.windows(2).enumerate() {
        let dst = &mut out[r * dim..(r + 1) * dim];
        for row in rows[w[0] * dim..w[1] * dim].chunks_exact(dim) {
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        let n = (w[1] - w[0]) as f64;
        dst.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Spreads pooled-row gradients back to members: each gets `g / count`.
fn unpool(grad: &[f64], offsets: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(offsets.last().unwrap() * dim);
    for (r, w) in offsets.windows(2).enumerate() {
        let n = (w[1] - w[0]) as f64;
        let g: Vec<f64> = grad[r * dim..(r + 1) * dim].iter().map(|v| v / n).collect();
        for _ in w[0]..w[1] {
            out.extend_from_slice(&g);
        }
    }
    out
}

fn forward_points(params: &Params, groups: &PointGroups) -> Result<PointForward> {
    let c = params.point_head.out_dim;
    let (enc_out, cache) = params.encoder.forward_rows(groups.inputs.clone());
    let projected = params.point_head.forward_rows(&enc_out)?;
    let (unit, norms) = l2_normalize_rows(&projected, c)?;
    let (q, q_norms) = l2_normalize_rows(&mean_pool(&unit, &groups.offsets, c), c)?;
    Ok(PointForward {
        cache,
        enc_out,
        unit,
        norms,
        q,
        q_norms,
    })
}

fn forward_pixels(params: &Params, groups: &PixelGroups) -> Result<PixelForward> {
    let c = params.image_head.out_dim;
    let projected = params.image_head.forward_rows(&groups.features)?;
    let (unit, norms) = l2_normalize_rows(&projected, c)?;
    let (k, k_norms) = l2_normalize_rows(&mean_pool(&unit, &groups.offsets, c), c)?;
    Ok(PixelForward {
        unit,
        norms,
        k,
        k_norms,
    })
}

/// Gradient w.r.t. encoder and point head, laid out like `Params::flatten`'s prefix.
fn backward_points(params: &Params, groups: &PointGroups, fwd: &PointForward, grad_q: &[f64]) -> Vec<f64> {
    let c = params.point_head.out_dim;
    let g_pooled = l2_normalize_backward(&fwd.q, &fwd.q_norms, grad_q, c);
    let g_unit = unpool(&g_pooled, &groups.offsets, c);
    let g_proj = l2_normalize_backward(&fwd.unit, &fwd.norms, &g_unit, c);
    let mut g_head = vec![0.0; params.point_head.weight.len()];
    let g_enc_out = params.point_head.backward(&fwd.enc_out, &g_proj, &mut g_head, true);
    let mut g_enc = params.encoder.zero_grad();
    params.encoder.backward(&fwd.cache, &g_enc_out, &mut g_enc);
    let mut out = Vec::with_capacity(params.encoder.num_params() + g_head.len());
    for t in [g_enc.w1, g_enc.b1, g_enc.w2, g_enc.b2, g_head] {
        out.extend(t);
    }
    out
}

fn backward_pixels(params: &Params, groups: &PixelGroups, fwd: &PixelForward, grad_k: &[f64]) -> Vec<f64> {
    let c = params.image_head.out_dim;
    let g_pooled = l2_normalize_backward(&fwd.k, &fwd.k_norms, grad_k, c);
    let g_unit = unpool(&g_pooled, &groups.offsets, c);
    let g_proj = l2_normalize_backward(&fwd.unit, &fwd.norms, &g_unit, c);
    let mut g_head = vec![0.0; params.image_head.weight.len()];
    params
        .image_head
        .backward(&groups.features, &g_proj, &mut g_head, false);
    g_head
}

/// Matched vs. mismatched cosine similarity of superpoint/superpixel pairs,
/// averaged over the three frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub matched: f64,
    pub mismatched: f64,
}

impl Alignment {
    pub fn gap(&self) -> f64 {
        self.matched - self.mismatched
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub alignment: Alignment,
    /// Flat gradient in `Params::flatten` order, when requested.
    pub grad: Option<Vec<f64>>,
}

fn alignment(q: &[&EmbeddingMatrix; 3], k: &[&EmbeddingMatrix; 3]) -> Alignment {
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for f in 0..3 {
        for i in 0..q[f].rows() {
            for j in 0..k[f].rows() {
                let s = dot(q[f].row(i), k[f].row(j));
                if i == j {
                    pos += s;
                    npos += 1;
                } else {
                    neg += s;
                    nneg += 1;
                }
            }
        }
    }
    Alignment {
        matched: if npos > 0 { pos / npos as f64 } else { 0.0 },
        mismatched: if nneg > 0 { neg / nneg as f64 } else { 0.0 },
    }
}

/// Composite loss (and optionally its gradient) at `params`.
pub fn evaluate(
    params: &Params,
    batch: &TrainBatch,
    tau: f64,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<Evaluation> {
    let c = params.point_head.out_dim;
    if params.image_head.out_dim != c {
        return Err(Error::ShapeMismatch(
            "point and image heads disagree on embedding width".into(),
        ));
    }
    if params.encoder.in_dim != 3 + batch.attr_width || params.image_head.in_dim != batch.feature_dim {
        return Err(Error::ShapeMismatch("parameters do not fit the batch".into()));
    }
    // slots 0..3 are frames, 3 is the dense cloud
    let point_sets: Vec<&PointGroups> = batch.points.iter().chain(std::iter::once(&batch.dense)).collect();
    let point_fwd: Vec<PointForward> = point_sets
        .par_iter()
        .map(|g| forward_points(params, g))
        .collect::<Result<_>>()?;
    let pixel_fwd: Vec<PixelForward> = batch
        .pixels
        .par_iter()
        .map(|g| forward_pixels(params, g))
        .collect::<Result<_>>()?;

    let wrap = |data: &[f64]| EmbeddingMatrix::from_unit_rows(data.len() / c, c, data.to_vec());
    let q: Vec<EmbeddingMatrix> = point_fwd.iter().map(|f| wrap(&f.q)).collect::<Result<_>>()?;
    let k: Vec<EmbeddingMatrix> = pixel_fwd.iter().map(|f| wrap(&f.k)).collect::<Result<_>>()?;
    let inputs = ObjectiveInputs {
        q: [&q[PREV], &q[CURR], &q[NEXT]],
        k: [&k[PREV], &k[CURR], &k[NEXT]],
        temporal_pairs: [&batch.temporal_pairs[0], &batch.temporal_pairs[1]],
        dense_q: &q[3],
        dense_pairs: &batch.dense_pairs,
    };
    let result = composite_objective(&inputs, tau, weights)?;
    let alignment = alignment(&inputs.q, &inputs.k);
    if !with_grad {
        return Ok(Evaluation {
            breakdown: result.breakdown,
            alignment,
            grad: None,
        });
    }

    let grad_q: Vec<&[f64]> = result
        .grad_q
        .iter()
        .map(Vec::as_slice)
        .chain(std::iter::once(result.grad_dense_q.as_slice()))
        .collect();
    let point_grads: Vec<Vec<f64>> = (0..4)
        .into_par_iter()
        .map(|s| backward_points(params, point_sets[s], &point_fwd[s], grad_q[s]))
        .collect();
    let pixel_grads: Vec<Vec<f64>> = (0..3)
        .into_par_iter()
        .map(|f| backward_pixels(params, &batch.pixels[f], &pixel_fwd[f], &result.grad_k[f]))
        .collect();

    // fixed-order reduction
    let mut grad = vec![0.0; params.num_params()];
    let split = point_grads[0].len();
    for g in &point_grads {
        for (a, b) in grad[..split].iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in &pixel_grads {
        for (a, b) in grad[split..].iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(Evaluation {
        breakdown: result.breakdown,
        alignment,
        grad: Some(grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let mut p = Params::init(
            3,
            &ModelConfig {
                hidden: 4,
                point_dim: 5,
                embed_dim: 3,
            },
            1,
            2,
        )
        .unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        assert_eq!(p.num_params(), 4 * 4 + 4 + 5 * 4 + 5 + 3 * 5 + 3 * 2);
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        p.set_flat(&shifted).unwrap();
        assert_eq!(p.flatten(), shifted);
        assert!(p.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn pool_and_unpool_are_adjoint() {
        let offsets = [0, 2, 5];
        let rows: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let pooled = mean_pool(&rows, &offsets, 2);
        assert_eq!(pooled, vec![1.0, 2.0, 6.0, 7.0]);
        let g = [1.0, -1.0, 0.5, 2.0];
        let spread = unpool(&g, &offsets, 2);
        // <pool(x), g> == <x, unpool(g)>
        let lhs: f64 = pooled.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = rows.iter().zip(&spread).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

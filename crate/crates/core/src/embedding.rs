//! Point encoder, projection heads and l2-normalized embedding matrices.
//!
//! All matrices are row-major `Vec<f64>`. Weight matrices are stored
//! `out x in`, so a layer computes `y = W x + b` per row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::maps::FeatureMap;

/// Tolerance on row norms for matrices flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            normalized: false,
        })
    }

    /// Wraps rows that are already unit length, checking each to 1e-9.
    pub fn from_unit_rows(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(rows, dim, data)?;
        for r in 0..rows {
            let n = norm(m.row(r));
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::NotNormalized);
            }
        }
        m.normalized = true;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn normalize(&self) -> Result<EmbeddingMatrix> {
        let (data, _) = l2_normalize_rows(&self.data, self.dim)?;
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data,
            normalized: true,
        })
    }

    /// Rows in the given order; the normalized flag carries over.
    pub fn gather(&self, rows: &[usize]) -> EmbeddingMatrix {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        EmbeddingMatrix {
            rows: rows.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Normalizes each row; returns the unit rows and the original norms.
pub fn l2_normalize_rows(data: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim == 0 {
        return Err(Error::ShapeMismatch("cannot normalize zero-width rows".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    let mut norms = Vec::with_capacity(data.len() / dim);
    for (r, row) in data.chunks_exact(dim).enumerate() {
        let n = norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm { row: r });
        }
        out.extend(row.iter().map(|v| v / n));
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of row normalization: `dx = (g - y (y . g)) / |x|`.
pub fn l2_normalize_backward(unit: &[f64], norms: &[f64], grad: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grad.len());
    for ((y, g), &n) in unit.chunks_exact(dim).zip(grad.chunks_exact(dim)).zip(norms) {
        let yg = dot(y, g);
        out.extend(y.iter().zip(g).map(|(yi, gi)| (gi - yi * yg) / n));
    }
    out
}

fn uniform_fill<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Per-point two-layer perceptron `(3 + L) -> hidden -> D` with a rectifier
/// between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Vec<f64>,
    hidden_pre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PointEncoder {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: uniform_fill(rng, hidden * in_dim, in_dim),
            b1: uniform_fill(rng, hidden, in_dim),
            w2: uniform_fill(rng, out_dim * hidden, hidden),
            b2: uniform_fill(rng, out_dim, hidden),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Encoder input rows for the selected points: `x y z attrs...`.
    pub fn inputs(&self, cloud: &PointCloud, points: &[usize]) -> Result<Vec<f64>> {
        if 3 + cloud.attr_width() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} input channels, cloud provides 3 + {}",
                self.in_dim,
                cloud.attr_width()
            )));
        }
        let mut x = Vec::with_capacity(points.len() * self.in_dim);
        for &i in points {
            x.extend_from_slice(&cloud.coords()[i]);
            x.extend_from_slice(cloud.attr_row(i));
        }
        Ok(x)
    }

    /// Forward over row-major input rows.
    pub fn forward_rows(&self, inputs: Vec<f64>) -> (Vec<f64>, EncoderCache) {
        let n = inputs.len() / self.in_dim;
        let mut hidden_pre = Vec::with_capacity(n * self.hidden);
        let mut out = Vec::with_capacity(n * self.out_dim);
        let mut h = vec![0.0; self.hidden];
        for x in inputs.chunks_exact(self.in_dim) {
            for k in 0..self.hidden {
                let pre = dot(&self.w1[k * self.in_dim..(k + 1) * self.in_dim], x) + self.b1[k];
                hidden_pre.push(pre);
                h[k] = pre.max(0.0);
            }
            for o in 0..self.out_dim {
                out.push(dot(&self.w2[o * self.hidden..(o + 1) * self.hidden], &h) + self.b2[o]);
            }
        }
        (out, EncoderCache { inputs, hidden_pre })
    }

    /// Backward given `d loss / d output` rows; accumulates into `grad`.
    pub fn backward(&self, cache: &EncoderCache, grad_out: &[f64], grad: &mut EncoderGrad) {
        let mut gh = vec![0.0; self.hidden];
        for ((x, pre), g) in cache
            .inputs
            .chunks_exact(self.in_dim)
            .zip(cache.hidden_pre.chunks_exact(self.hidden))
            .zip(grad_out.chunks_exact(self.out_dim))
        {
            gh.iter_mut().for_each(|v| *v = 0.0);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                grad.b2[o] += go;
                let w_row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                let gw_row = &mut grad.w2[o * self.hidden..(o + 1) * self.hidden];
                for k in 0..self.hidden {
                    gw_row[k] += go * pre[k].max(0.0);
                    gh[k] += go * w_row[k];
                }
            }
            for k in 0..self.hidden {
                if pre[k] <= 0.0 {
                    continue;
                }
                let gk = gh[k];
                grad.b1[k] += gk;
                let gw_row = &mut grad.w1[k * self.in_dim..(k + 1) * self.in_dim];
                for (gw, xi) in gw_row.iter_mut().zip(x) {
                    *gw += gk * xi;
                }
            }
        }
    }

    pub fn zero_grad(&self) -> EncoderGrad {
        EncoderGrad {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }
}

/// Per-point features for every point of `cloud`, in point order (`N x D`).
pub fn encode_points(enc: &PointEncoder, cloud: &PointCloud) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    let inputs = enc.inputs(cloud, &all)?;
    Ok(enc.forward_rows(inputs).0)
}

/// Bias-free linear map into the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
}

impl ProjectionHead {
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: uniform_fill(rng, out_dim * in_dim, in_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for k in 0..dim {
            weight[k * dim + k] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weight,
        }
    }

    pub fn forward_rows(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        if !inputs.len().is_multiple_of(self.in_dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values are not rows of width {}",
                inputs.len(),
                self.in_dim
            )));
        }
        let mut out = Vec::with_capacity(inputs.len() / self.in_dim * self.out_dim);
        for x in inputs.chunks_exact(self.in_dim) {
            for o in 0..self.out_dim {
                out.push(dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x));
            }
        }
        Ok(out)
    }

    /// Accumulates `d W` into `grad_w` and returns `d inputs`.
    pub fn backward(&self, inputs: &[f64], grad_out: &[f64], grad_w: &mut [f64], need_input_grad: bool) -> Vec<f64> {
        let mut grad_in = if need_input_grad {
            Vec::with_capacity(inputs.len())
        } else {
            Vec::new()
        };
        let mut gi = vec![0.0; self.in_dim];
        for (x, g) in inputs
            .chunks_exact(self.in_dim)
            .zip(grad_out.chunks_exact(self.out_dim))
        {
            gi.iter_mut().for_each(|v| *v = 0.0);
            for (o, &go) in g.iter().enumerate() {
                let w_row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let gw_row = &mut grad_w[o * self.in_dim..(o + 1) * self.in_dim];
                for k in 0..self.in_dim {
                    gw_row[k] += go * x[k];
                    gi[k] += go * w_row[k];
                }
            }
            if need_input_grad {
                grad_in.extend_from_slice(&gi);
            }
        }
        grad_in
    }
}

/// Bilinear resize of a feature grid to `width x height` pixels using
/// pixel-center alignment (`src = (dst + 0.5) * in / out - 0.5`, clamped to
/// the border). Output is row-major `height x width x channels`.
pub fn bilinear_upsample(fmap: &FeatureMap, width: u32, height: u32) -> Vec<f64> {
    let (iw, ih, c) = (fmap.width() as usize, fmap.height() as usize, fmap.channels());
    let (ow, oh) = (width as usize, height as usize);
    let axis = |dst: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        (lo, hi, frac)
    };
    let mut out = vec![0.0; ow * oh * c];
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, oh, ih);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, ow, iw);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let (a, b, cc, d) = (
                fmap.cell(x0, y0),
                fmap.cell(x1, y0),
                fmap.cell(x0, y1),
                fmap.cell(x1, y1),
            );
            let dst = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
            for k in 0..c {
                dst[k] = w00 * a[k] + w01 * b[k] + w10 * cc[k] + w11 * d[k];
            }
        }
    }
    out
}

/// Input of a projection head: per-point features or a backbone grid.
pub enum HeadInput<'a> {
    Rows(&'a [f64]),
    Grid {
        fmap: &'a FeatureMap,
        width: u32,
        height: u32,
    },
}

/// Projects features into the shared space and l2-normalizes each row. Grids
/// are first upsampled to `width x height`, giving one row per pixel.
pub fn project_and_normalize(head: &ProjectionHead, input: HeadInput<'_>) -> Result<EmbeddingMatrix> {
    let projected = match input {
        HeadInput::Rows(rows) => head.forward_rows(rows)?,
        HeadInput::Grid { fmap, width, height } => {
            if fmap.channels() != head.in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "head expects {} channels, feature map has {}",
                    head.in_dim,
                    fmap.channels()
                )));
            }
            head.forward_rows(&bilinear_upsample(fmap, width, height))?
        }
    };
    let rows = projected.len() / head.out_dim;
    EmbeddingMatrix::new(rows, head.out_dim, projected)?.normalize()
}

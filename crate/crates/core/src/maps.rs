//! Per-camera rasters: superpixel/class label maps and backbone feature maps,
//! plus per-point semantic score matrices.

use crate::error::{Error, Result};

/// Pixel value marking a pixel that belongs to no region.
pub const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::ShapeMismatch(format!(
                "label map {width}x{height} needs {} labels, got {}",
                width as usize * height as usize,
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: u32, height: u32, label: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width as usize + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u32) {
        self.labels[y * self.width as usize + x] = label;
    }

    /// Label under a continuous pixel coordinate (floored), or `UNLABELED` outside the map.
    pub fn lookup(&self, u: f64, v: f64) -> u32 {
        if !(u >= 0.0 && v >= 0.0) {
            return UNLABELED;
        }
        let (x, y) = (u.floor() as usize, v.floor() as usize);
        if x >= self.width as usize || y >= self.height as usize {
            return UNLABELED;
        }
        self.get(x, y)
    }

    /// Pixel count per label, sentinel excluded, in ascending label order.
    pub fn areas(&self) -> std::collections::BTreeMap<u32, usize> {
        let mut areas = std::collections::BTreeMap::new();
        for &l in self.labels.iter().filter(|&&l| l != UNLABELED) {
            *areas.entry(l).or_insert(0) += 1;
        }
        areas
    }
}

/// A backbone feature grid, row-major `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: u32,
    height: u32,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: u32, height: u32, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = width as usize * height as usize * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "feature map {width}x{height}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width as usize + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Feature stride relative to an image of the given width.
    pub fn stride_for(&self, image_width: u32) -> f64 {
        f64::from(image_width) / f64::from(self.width)
    }
}

/// Tolerance on row sums for probability-valued scores.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// `rows x classes` per-point scores; optionally flagged as probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
    probabilities: bool,
}

impl SemanticScores {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>, probabilities: bool) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::ShapeMismatch(format!(
                "scores {rows}x{classes} need {} values, got {}",
                rows * classes,
                data.len()
            )));
        }
        if probabilities && classes > 0 {
            for (i, row) in data.chunks(classes).enumerate() {
                if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidInput(format!(
                        "score row {i} has an entry outside [0, 1]"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                    return Err(Error::InvalidInput(format!("score row {i} sums to {sum}, expected 1")));
                }
            }
        }
        Ok(Self {
            rows,
            classes,
            data,
            probabilities,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_probabilities(&self) -> bool {
        self.probabilities
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Per-row argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Vec<u32> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

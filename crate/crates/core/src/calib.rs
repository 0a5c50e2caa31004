//! Calibration JSON and pose text files.
//!
//! A calibration document is either one camera object or an array of them:
//!
//! ```json
//! { "intrinsics": [fx, 0, cx, 0, fy, cy, 0, 0, 1],
//!   "extrinsic": [16 row-major values, bottom row 0 0 0 1],
//!   "width": 1600, "height": 900 }
//! ```
//!
//! A pose file holds one row-major 4x4 matrix per line (16 whitespace-separated reals).

use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraIntrinsics, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub intrinsics: Vec<f64>,
    pub extrinsic: Vec<f64>,
    pub width: u32,
    pub height: u32,
}

impl CalibrationRecord {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            intrinsics: cam.intrinsics.to_row_major().to_vec(),
            extrinsic: cam.extrinsic.to_row_major().to_vec(),
            width: cam.width(),
            height: cam.height(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        if self.intrinsics.len() != 9 {
            return Err(Error::InvalidIntrinsics(format!(
                "expected 9 intrinsic values, got {}",
                self.intrinsics.len()
            )));
        }
        let k = CameraIntrinsics::new(Matrix3::from_row_slice(&self.intrinsics), self.width, self.height)?;
        let extr = RigidTransform::from_row_major(&self.extrinsic)?;
        Ok(Camera::new(k, extr))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CalibrationDoc {
    One(CalibrationRecord),
    Many(Vec<CalibrationRecord>),
}

pub fn parse_calibration(text: &str) -> Result<Vec<Camera>> {
    let doc: CalibrationDoc = serde_json::from_str(text)?;
    let records = match doc {
        CalibrationDoc::One(r) => vec![r],
        CalibrationDoc::Many(v) => v,
    };
    records.iter().map(CalibrationRecord::to_camera).collect()
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    parse_calibration(&std::fs::read_to_string(path)?)
}

pub fn calibration_json(cameras: &[Camera]) -> String {
    let records: Vec<_> = cameras.iter().map(CalibrationRecord::from_camera).collect();
    serde_json::to_string_pretty(&records).expect("calibration records serialize")
}

pub fn parse_poses(text: &str) -> Result<Vec<RigidTransform>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let values = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("pose line {}: bad number {tok:?}: {e}", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            RigidTransform::from_row_major(&values)
                .map_err(|e| Error::InvalidInput(format!("pose line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    parse_poses(&std::fs::read_to_string(path)?)
}

/// Formats poses with shortest round-trip float formatting, one per line.
pub fn format_poses(poses: &[RigidTransform]) -> String {
    let mut out = String::new();
    for pose in poses {
        let line: Vec<String> = pose.to_row_major().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

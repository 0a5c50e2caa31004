//! Deterministic synthetic driving scenes with exact ground truth.
//!
//! The world is a ground plane (`z = 0`) with box-shaped objects, some moving
//! at constant velocity. A spinning LiDAR on the ego vehicle and a ring of
//! pinhole cameras observe it by ray casting. Every rendered pixel carries the
//! instance and class of the first surface its center ray hits; LiDAR returns
//! whose projection lands on a pixel of another instance in any camera are
//! discarded, so each projected point sits on a pixel of its own instance.
//!
//! Instance 0 / class 0 is the ground. Pixels whose ray escapes are
//! `UNLABELED`. Feature maps hold a fixed random unit vector per class (plus
//! one for the background) with Gaussian noise.

use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calib::{calibration_json, format_poses, load_calibration, load_poses};
use crate::container::{Container, LabelVector};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraIntrinsics, PointCloud, RigidTransform};
use crate::maps::{FeatureMap, LabelMap, SemanticScores, UNLABELED};

pub const GROUND_INSTANCE: u32 = 0;
pub const GROUND_CLASS: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    /// Heading of the optical axis, counterclockwise from the ego +x axis.
    pub yaw_deg: f64,
    pub hfov_deg: f64,
    /// Camera center in the LiDAR frame.
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: u32,
    /// Footprint center in the world frame at `t = 0`.
    pub center: [f64; 2],
    /// Length, width, height in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    /// World-frame velocity in m/s.
    pub velocity: [f64; 2],
}

impl ObjectSpec {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
            self.size[2] / 2.0,
        ]
    }

    pub fn is_moving(&self) -> bool {
        self.velocity != [0.0, 0.0]
    }

    fn local_coords(&self, p: &[f64; 3], t: f64) -> [f64; 3] {
        let c = self.center_at(t);
        let (s, co) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [co * dx + s * dy, -s * dx + co * dy, p[2] - c[2]]
    }

    /// Distance from a world point to the box surface at time `t`.
    pub fn surface_distance(&self, p: &[f64; 3], t: f64) -> f64 {
        let q = self.local_coords(p, t);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let d: Vec<f64> = (0..3).map(|a| q[a].abs() - half[a]).collect();
        let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = d.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(0.0);
        (outside + inside).abs()
    }

    /// Ray parameter of the first hit with the box, if any.
    fn intersect(&self, origin: &[f64; 3], dir: &[f64; 3], t: f64) -> Option<f64> {
        let o = self.local_coords(origin, t);
        let (s, co) = self.yaw.sin_cos();
        let d = [co * dir[0] + s * dir[1], -s * dir[0] + co * dir[1], dir[2]];
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-half[a] - o[a]) / d[a];
            let t2 = (half[a] - o[a]) / d[a];
            t_near = t_near.max(t1.min(t2));
            t_far = t_far.min(t1.max(t2));
        }
        (t_near <= t_far && t_near > 1e-9).then_some(t_near)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub frames: usize,
    /// Seconds between consecutive scans.
    pub timestep: f64,
    /// Including the ground class 0.
    pub num_classes: u32,
    pub objects: usize,
    pub moving_objects: usize,
    /// When non-empty, replaces the random object layout.
    pub explicit_objects: Vec<ObjectSpec>,
    pub cameras: Vec<CameraSpec>,
    pub image_width: u32,
    pub image_height: u32,
    pub feature_stride: u32,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    pub lidar_height: f64,
    pub azimuth_steps: usize,
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    pub range_noise: f64,
    pub intensity_noise: f64,
    /// Object placement band (meters from the ego start position).
    pub min_distance: f64,
    pub max_distance: f64,
    /// Half-angle of the placement sector around the ego heading.
    pub placement_half_angle_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            timestep: 0.25,
            num_classes: 8,
            objects: 6,
            moving_objects: 2,
            explicit_objects: Vec::new(),
            cameras: vec![
                CameraSpec {
                    yaw_deg: 0.0,
                    hfov_deg: 70.0,
                    offset: [0.3, 0.0, -0.2],
                },
                CameraSpec {
                    yaw_deg: 55.0,
                    hfov_deg: 70.0,
                    offset: [0.2, 0.2, -0.2],
                },
                CameraSpec {
                    yaw_deg: -55.0,
                    hfov_deg: 70.0,
                    offset: [0.2, -0.2, -0.2],
                },
            ],
            image_width: 64,
            image_height: 48,
            feature_stride: 4,
            feature_dim: 32,
            feature_noise: 0.05,
            ego_speed: 2.0,
            ego_yaw_rate: 0.05,
            lidar_height: 1.8,
            azimuth_steps: 240,
            beams: 12,
            elevation_min_deg: -18.0,
            elevation_max_deg: 2.0,
            max_range: 25.0,
            range_noise: 0.01,
            intensity_noise: 0.02,
            min_distance: 6.0,
            max_distance: 16.0,
            placement_half_angle_deg: 75.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.frames == 0 {
            return fail("at least one frame is required");
        }
        if self.cameras.is_empty() {
            return fail("at least one camera is required");
        }
        if self.explicit_objects.is_empty() && self.objects == 0 {
            return fail("at least one object is required");
        }
        if self.num_classes < 2 {
            return fail("need the ground class plus at least one object class");
        }
        if let Some(o) = self
            .explicit_objects
            .iter()
            .find(|o| o.class == GROUND_CLASS || o.class >= self.num_classes)
        {
            return Err(Error::InvalidConfig(format!(
                "object class {} is not an object class",
                o.class
            )));
        }
        if self.moving_objects > self.objects && self.explicit_objects.is_empty() {
            return fail("moving_objects exceeds objects");
        }
        if !(self.timestep > 0.0) {
            return fail("timestep must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 || self.feature_stride == 0 {
            return fail("image size and feature stride must be nonzero");
        }
        if !self.image_width.is_multiple_of(self.feature_stride)
            || !self.image_height.is_multiple_of(self.feature_stride)
        {
            return fail("image size must be a multiple of the feature stride");
        }
        if self.feature_dim == 0 || self.azimuth_steps == 0 || self.beams == 0 {
            return fail("feature_dim, azimuth_steps and beams must be nonzero");
        }
        if self.cameras.iter().any(|c| !(c.hfov_deg > 0.0 && c.hfov_deg < 170.0)) {
            return fail("camera hfov must lie in (0, 170) degrees");
        }
        if !(self.max_range > 0.0) || !(self.min_distance < self.max_distance) {
            return fail("invalid range settings");
        }
        Ok(())
    }

    pub fn build_cameras(&self) -> Result<Vec<Camera>> {
        self.cameras
            .iter()
            .map(|spec| {
                let (w, h) = (self.image_width, self.image_height);
                let f = f64::from(w) / (2.0 * (spec.hfov_deg.to_radians() / 2.0).tan());
                let k = CameraIntrinsics::from_focal(f, f, f64::from(w) / 2.0, f64::from(h) / 2.0, w, h)?;
                let (s, c) = spec.yaw_deg.to_radians().sin_cos();
                // camera axes (right, down, forward) expressed in the LiDAR frame
                #[rustfmt::skip]
                let rot = nalgebra::Matrix3::new(
                    s, -c, 0.0,
                    0.0, 0.0, -1.0,
                    c, s, 0.0,
                );
                let center = Vector3::from(spec.offset);
                let extr = RigidTransform::new(rot, -(rot * center))?;
                Ok(Camera::new(k, extr))
            })
            .collect()
    }
}

/// One camera's rendering of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub instances: LabelMap,
    pub classes: LabelMap,
    pub features: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// LiDAR-frame points; one attribute column (intensity).
    pub cloud: PointCloud,
    /// LiDAR-to-world pose.
    pub pose: RigidTransform,
    pub classes: Vec<u32>,
    pub instances: Vec<u32>,
    pub views: Vec<CameraFrame>,
}

impl Frame {
    pub fn instance_maps(&self) -> Vec<LabelMap> {
        self.views.iter().map(|v| v.instances.clone()).collect()
    }

    pub fn class_maps(&self) -> Vec<LabelMap> {
        self.views.iter().map(|v| v.classes.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    pub cameras: Vec<Camera>,
    pub objects: Vec<ObjectSpec>,
    pub frames: Vec<Frame>,
}

impl SyntheticScene {
    pub fn timestep(&self) -> f64 {
        self.config.timestep
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes as usize
    }

    /// Class of an instance id.
    pub fn class_of(&self, instance: u32) -> u32 {
        if instance == GROUND_INSTANCE {
            GROUND_CLASS
        } else {
            self.objects[instance as usize - 1].class
        }
    }
}

fn class_size(class: u32) -> [f64; 3] {
    match class {
        1 => [4.2, 1.8, 1.5],
        2 => [7.0, 2.5, 3.0],
        3 => [0.7, 0.7, 1.8],
        4 => [6.0, 0.3, 2.5],
        5 => [0.4, 0.4, 3.5],
        6 => [2.0, 2.0, 2.0],
        7 => [3.0, 0.5, 1.0],
        _ => [2.0, 1.5, 1.5],
    }
}

fn sample_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectSpec> {
    if !cfg.explicit_objects.is_empty() {
        return cfg.explicit_objects.clone();
    }
    let mut classes: Vec<u32> = (1..cfg.num_classes).collect();
    classes.shuffle(rng);
    let half = cfg.placement_half_angle_deg.to_radians();
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(cfg.objects);
    for k in 0..cfg.objects {
        let class = classes[k % classes.len()];
        let base = class_size(class);
        let size = base.map(|v| v * rng.random_range(0.9..1.1));
        let radius = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
        let mut center = [0.0, 0.0];
        for _ in 0..200 {
            let az = rng.random_range(-half..half);
            let dist = rng.random_range(cfg.min_distance..cfg.max_distance);
            center = [dist * az.cos(), dist * az.sin()];
            let clear = objects.iter().all(|o| {
                let r = 0.5 * (o.size[0] * o.size[0] + o.size[1] * o.size[1]).sqrt();
                let (dx, dy) = (o.center[0] - center[0], o.center[1] - center[1]);
                (dx * dx + dy * dy).sqrt() > r + radius + 1.5
            });
            if clear {
                break;
            }
        }
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let velocity = if k < cfg.moving_objects {
            let speed = rng.random_range(0.5..1.5);
            [speed * yaw.cos(), speed * yaw.sin()]
        } else {
            [0.0, 0.0]
        };
        objects.push(ObjectSpec {
            class,
            center,
            size,
            yaw,
            velocity,
        });
    }
    objects
}

/// First surface hit along a world ray: `(range, instance)`.
fn cast(objects: &[ObjectSpec], origin: &[f64; 3], dir: &[f64; 3], t: f64, max_range: f64) -> Option<(f64, u32)> {
    let mut best: Option<(f64, u32)> = None;
    if dir[2] < 0.0 {
        let r = -origin[2] / dir[2];
        if r <= max_range {
            best = Some((r, GROUND_INSTANCE));
        }
    }
    for (k, obj) in objects.iter().enumerate() {
        if let Some(r) = obj.intersect(origin, dir, t) {
            if r <= max_range && best.is_none_or(|b| r < b.0) {
                best = Some((r, k as u32 + 1));
            }
        }
    }
    best
}

/// Generates a scene; identical `(seed, config)` give identical scenes.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = config.build_cameras()?;
    let objects = sample_objects(config, &mut rng);

    let num_classes = config.num_classes as usize;
    let e = config.feature_dim;
    // one embedding per class plus a background row
    let mut embeddings = Vec::with_capacity((num_classes + 1) * e);
    for _ in 0..=num_classes {
        let v: Vec<f64> = (0..e).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        embeddings.extend(v.into_iter().map(|x| x / n));
    }
    let reflectance: Vec<f64> = (0..num_classes).map(|_| rng.random_range(0.05..0.95)).collect();
    let class_of = |inst: u32| -> u32 {
        if inst == GROUND_INSTANCE {
            GROUND_CLASS
        } else {
            objects[inst as usize - 1].class
        }
    };

    let range_noise = Normal::new(0.0, config.range_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let intensity_noise =
        Normal::new(0.0, config.intensity_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let feature_noise =
        Normal::new(0.0, config.feature_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut frames = Vec::with_capacity(config.frames);
    for f in 0..config.frames {
        let t = f as f64 * config.timestep;
        let pose = RigidTransform::from_yaw(
            config.ego_yaw_rate * t,
            Vector3::new(config.ego_speed * t, 0.0, config.lidar_height),
        );
        let to_world = |p: &[f64; 3]| pose.apply(p);
        let dir_to_world = |d: &[f64; 3]| {
            let v = pose.rotation() * Vector3::new(d[0], d[1], d[2]);
            [v[0], v[1], v[2]]
        };

        // cameras
        let mut views = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let (w, h) = (cam.width() as usize, cam.height() as usize);
            let mut instances = LabelMap::filled(cam.width(), cam.height(), UNLABELED);
            let mut classes = LabelMap::filled(cam.width(), cam.height(), UNLABELED);
            for y in 0..h {
                for x in 0..w {
                    let (d, o) = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                    if let Some((_, inst)) = cast(&objects, &to_world(&o), &dir_to_world(&d), t, config.max_range) {
                        instances.set(x, y, inst);
                        classes.set(x, y, class_of(inst));
                    }
                }
            }
            let stride = config.feature_stride as usize;
            let (fw, fh) = (w / stride, h / stride);
            let mut data = Vec::with_capacity(fw * fh * e);
            for cy in 0..fh {
                for cx in 0..fw {
                    let class = classes.get(cx * stride + stride / 2, cy * stride + stride / 2);
                    let row = if class == UNLABELED {
                        num_classes
                    } else {
                        class as usize
                    };
                    data.extend(
                        embeddings[row * e..(row + 1) * e]
                            .iter()
                            .map(|v| v + feature_noise.sample(&mut rng)),
                    );
                }
            }
            let features = FeatureMap::new(fw as u32, fh as u32, e, data)?;
            views.push(CameraFrame {
                instances,
                classes,
                features,
            });
        }

        // LiDAR
        let az_phase: f64 = rng.random();
        let mut coords = Vec::new();
        let mut attrs = Vec::new();
        let mut point_classes = Vec::new();
        let mut point_instances = Vec::new();
        let origin = to_world(&[0.0, 0.0, 0.0]);
        for b in 0..config.beams {
            let frac = if config.beams == 1 {
                0.5
            } else {
                b as f64 / (config.beams - 1) as f64
            };
            let elev =
                (config.elevation_min_deg + frac * (config.elevation_max_deg - config.elevation_min_deg)).to_radians();
            for a in 0..config.azimuth_steps {
                let az = (a as f64 + az_phase) / config.azimuth_steps as f64 * std::f64::consts::TAU;
                let local_dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
                let noise = range_noise.sample(&mut rng);
                let intensity_jitter = intensity_noise.sample(&mut rng);
                let Some((r, inst)) = cast(&objects, &origin, &dir_to_world(&local_dir), t, config.max_range) else {
                    continue;
                };
                let r = r + noise;
                let p = [local_dir[0] * r, local_dir[1] * r, local_dir[2] * r];
                let consistent = cameras
                    .iter()
                    .zip(&views)
                    .all(|(cam, view)| match cam.project_point(&p) {
                        Some((u, v, _)) => view.instances.lookup(u, v) == inst,
                        None => true,
                    });
                if !consistent {
                    continue;
                }
                let class = class_of(inst);
                coords.push(p);
                attrs.push((reflectance[class as usize] + intensity_jitter).clamp(0.0, 1.0));
                point_classes.push(class);
                point_instances.push(inst);
            }
        }
        frames.push(Frame {
            cloud: PointCloud::new(coords, attrs, 1, t)?,
            pose,
            classes: point_classes,
            instances: point_instances,
            views,
        });
    }

    Ok(SyntheticScene {
        seed,
        config: config.clone(),
        cameras,
        objects,
        frames,
    })
}

/// Simulated per-point predictions: each point's true class gets probability
/// `confidence` (rest spread evenly), except that a `noise_rate` fraction of
/// points is given the same peak on a uniformly drawn wrong class.
pub fn simulate_scores(
    truth: &[u32],
    num_classes: usize,
    noise_rate: f64,
    confidence: f64,
    seed: u64,
) -> Result<SemanticScores> {
    if num_classes < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&noise_rate) || !(0.0..=1.0).contains(&confidence) {
        return Err(Error::InvalidInput(
            "noise_rate and confidence must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest = (1.0 - confidence) / (num_classes - 1) as f64;
    let mut data = Vec::with_capacity(truth.len() * num_classes);
    for &t in truth {
        if t as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t,
                classes: num_classes,
            });
        }
        let mut peak = t as usize;
        if rng.random::<f64>() < noise_rate {
            let shift = rng.random_range(1..num_classes);
            peak = (peak + shift) % num_classes;
        }
        data.extend((0..num_classes).map(|c| if c == peak { confidence } else { rest }));
    }
    SemanticScores::new(truth.len(), num_classes, data, true)
}

#[derive(Serialize, Deserialize)]
struct SceneManifest {
    seed: u64,
    config: SceneConfig,
    objects: Vec<ObjectSpec>,
    frames: usize,
    cameras: usize,
}

impl SyntheticScene {
    /// Writes the scene as `scene.json`, `calib.json`, `poses.txt` and one
    /// directory of `FPT1` files per frame. Returns the written paths in a
    /// fixed order.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let manifest = SceneManifest {
            seed: self.seed,
            config: self.config.clone(),
            objects: self.objects.clone(),
            frames: self.frames.len(),
            cameras: self.cameras.len(),
        };
        let mut put = |name: std::path::PathBuf, bytes: Vec<u8>| -> Result<()> {
            std::fs::write(&name, bytes)?;
            written.push(name);
            Ok(())
        };
        put(dir.join("scene.json"), serde_json::to_vec_pretty(&manifest)?)?;
        put(dir.join("calib.json"), calibration_json(&self.cameras).into_bytes())?;
        let poses: Vec<RigidTransform> = self.frames.iter().map(|f| f.pose).collect();
        put(dir.join("poses.txt"), format_poses(&poses).into_bytes())?;
        for (k, frame) in self.frames.iter().enumerate() {
            let fdir = dir.join(format!("frame_{k:03}"));
            std::fs::create_dir_all(&fdir)?;
            put(fdir.join("cloud.fpt"), frame.cloud.encode())?;
            put(fdir.join("classes.fpt"), LabelVector(frame.classes.clone()).encode())?;
            put(
                fdir.join("instances.fpt"),
                LabelVector(frame.instances.clone()).encode(),
            )?;
            for (j, view) in frame.views.iter().enumerate() {
                put(fdir.join(format!("cam{j}_instances.fpt")), view.instances.encode())?;
                put(fdir.join(format!("cam{j}_classes.fpt")), view.classes.encode())?;
                put(fdir.join(format!("cam{j}_features.fpt")), view.features.encode())?;
            }
        }
        Ok(written)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<SyntheticScene> {
        let dir = dir.as_ref();
        let manifest: SceneManifest = serde_json::from_slice(&std::fs::read(dir.join("scene.json"))?)?;
        let cameras = load_calibration(dir.join("calib.json"))?;
        let poses = load_poses(dir.join("poses.txt"))?;
        if poses.len() != manifest.frames || cameras.len() != manifest.cameras {
            return Err(Error::InvalidInput(
                "scene manifest disagrees with calibration or poses".into(),
            ));
        }
        let mut frames = Vec::with_capacity(manifest.frames);
        for (k, pose) in poses.into_iter().enumerate() {
            let fdir = dir.join(format!("frame_{k:03}"));
            let mut views = Vec::with_capacity(cameras.len());
            for j in 0..cameras.len() {
                views.push(CameraFrame {
                    instances: LabelMap::load(fdir.join(format!("cam{j}_instances.fpt")))?,
                    classes: LabelMap::load(fdir.join(format!("cam{j}_classes.fpt")))?,
                    features: FeatureMap::load(fdir.join(format!("cam{j}_features.fpt")))?,
                });
            }
            frames.push(Frame {
                cloud: PointCloud::load(fdir.join("cloud.fpt"))?,
                pose,
                classes: LabelVector::load(fdir.join("classes.fpt"))?.0,
                instances: LabelVector::load(fdir.join("instances.fpt"))?.0,
                views,
            });
        }
        Ok(SyntheticScene {
            seed: manifest.seed,
            config: manifest.config,
            cameras,
            objects: manifest.objects,
            frames,
        })
    }
}

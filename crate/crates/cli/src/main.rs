//! `stp`: command-line front end for the pretraining pipeline.
//!
//! Every subcommand prints one JSON summary on stdout. Failures print a JSON
//! error object on stderr and exit with status 1; usage errors exit with 2.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use stpretrain::calib::{load_calibration, load_poses};
use stpretrain::container::{Container, DenseMatrix, Header, Kind, LabelVector};
use stpretrain::geometry::{aggregate_sweeps, project_into_camera, sweep_to_keyframe, PointCloud, RigidTransform};
use stpretrain::gradcheck::{loss_gradient_suite, parameter_gradient_check};
use stpretrain::losses::LossBreakdown;
use stpretrain::maps::{LabelMap, SemanticScores, UNLABELED};
use stpretrain::scene::{generate_scene, simulate_scores, SyntheticScene};
use stpretrain::superpoint::{align_views, build_superpoints, count_view_conflicts, SemanticView};
use stpretrain::train::{batch_from_scene, evaluate, TrainState};
use stpretrain::vote::{miou, vote, VoteConfig, VoteFrame};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "stp", version, about = "Spatiotemporal image-to-LiDAR pretraining toolkit")]
struct Cli {
    /// TOML run configuration; flags take precedence over it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor sequence
    GenScene {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Project a point cloud into every calibrated camera
    Project {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Output matrix with rows `point camera u v depth`
        #[arg(long)]
        out: PathBuf,
    },
    /// Group points by the superpixel they land on
    Superpoints {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// One label map per camera, in calibration order
        #[arg(long, num_args = 1.., required = true)]
        maps: Vec<PathBuf>,
        /// Per-point region index (4294967295 = none)
        #[arg(long)]
        out: PathBuf,
    },
    /// Unify class labels across overlapping cameras
    AlignViews {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        instances: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        classes: Vec<PathBuf>,
        /// Directory receiving `cam{j}_classes.fpt`
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Merge sweeps into the keyframe coordinate frame
    Aggregate {
        #[arg(long)]
        keyframe: PathBuf,
        /// Sweep clouds, nearest in time first
        #[arg(long = "sweep")]
        sweeps: Vec<PathBuf>,
        /// Sensor-to-world poses: keyframe first, then one per sweep
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the toy pretraining loop
    Pretrain {
        /// Scene directory from `gen-scene`; defaults to the bundled scene
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Per-step loss breakdown
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for the final parameters
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check analytic gradients against finite differences
    LossCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Refine per-point scores with the neighboring frames
    Vote {
        #[arg(long, num_args = 2, value_names = ["CLOUD", "SCORES"])]
        prev: Vec<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["CLOUD", "SCORES"])]
        curr: Vec<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["CLOUD", "SCORES"])]
        next: Vec<PathBuf>,
        /// Poses of prev, curr and next; identity when omitted
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-point argmax labels
        #[arg(long)]
        labels_out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Mean intersection-over-union of predictions against ground truth
    Eval {
        /// Label vector or score matrix
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        classes: usize,
        /// Label excluded from scoring
        #[arg(long)]
        ignore: Option<u32>,
    },
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

fn artifact(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).with_context(|| format!("reading back {}", path.display()))?;
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

fn artifacts(paths: &[PathBuf]) -> Result<Vec<Artifact>> {
    paths.iter().map(|p| artifact(p)).collect()
}

fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(file)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn load_label_maps(paths: &[PathBuf]) -> Result<Vec<LabelMap>> {
    paths
        .iter()
        .map(|p| LabelMap::load(p).with_context(|| format!("loading label map {}", p.display())))
        .collect()
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    PointCloud::load(path).with_context(|| format!("loading point cloud {}", path.display()))
}

fn gen_scene(cfg_file: Option<&Path>, out: &Path, overrides: &Overrides) -> Result<Value> {
    let mut cfg = resolve(cfg_file, overrides)?;
    if let Some(seed) = overrides.seed.filter(|_| overrides.scene_seed.is_none()) {
        cfg.scene_seed = seed;
    }
    let scene = generate_scene(cfg.scene_seed, &cfg.scene)?;
    let mut files = scene.save(out)?;
    for (k, frame) in scene.frames.iter().enumerate() {
        let seed = cfg.scene_seed.wrapping_mul(1000).wrapping_add(k as u64);
        let scores = simulate_scores(
            &frame.classes,
            scene.num_classes(),
            cfg.predictions.noise,
            cfg.predictions.confidence,
            seed,
        )?;
        let path = out.join(format!("frame_{k:03}")).join("scores.fpt");
        scores.save(&path)?;
        files.push(path);
    }
    log::info!("wrote {} files to {}", files.len(), out.display());
    Ok(json!({
        "command": "gen-scene",
        "config": cfg,
        "frames": scene.frames.len(),
        "cameras": scene.cameras.len(),
        "points_per_frame": scene.frames.iter().map(|f| f.cloud.len()).collect::<Vec<_>>(),
        "artifacts": artifacts(&files)?,
    }))
}

fn project(cloud: &Path, calib: &Path, out: &Path) -> Result<Value> {
    let cloud = load_cloud(cloud)?;
    let cameras = load_calibration(calib)?;
    let mut data = Vec::new();
    let mut per_camera = Vec::new();
    for (j, cam) in cameras.iter().enumerate() {
        let proj = project_into_camera(&cloud, cam, j);
        per_camera.push(proj.len());
        for p in proj {
            data.extend([p.point_index as f64, j as f64, p.u, p.v, p.depth]);
        }
    }
    let rows = data.len() / 5;
    DenseMatrix::new(rows, 5, data)?.save(out)?;
    Ok(json!({
        "command": "project",
        "points": cloud.len(),
        "projections_per_camera": per_camera,
        "artifacts": [artifact(out)?],
    }))
}

fn superpoints(cloud: &Path, calib: &Path, maps: &[PathBuf], out: &Path) -> Result<Value> {
    let cloud = load_cloud(cloud)?;
    let cameras = load_calibration(calib)?;
    let maps = load_label_maps(maps)?;
    let index = build_superpoints(&cloud, &cameras, &maps)?;
    let groups: Vec<u32> = index
        .group_of()
        .iter()
        .map(|g| g.map_or(UNLABELED, |r| r as u32))
        .collect();
    LabelVector(groups).save(out)?;
    let regions: Vec<Value> = index
        .meta()
        .iter()
        .zip(index.regions())
        .map(|(m, members)| json!({"camera": m.camera, "superpixel": m.superpixel, "pixel_area": m.pixel_area, "points": members.len()}))
        .collect();
    Ok(json!({
        "command": "superpoints",
        "points": cloud.len(),
        "assigned": index.group_of().iter().filter(|g| g.is_some()).count(),
        "regions": regions,
        "artifacts": [artifact(out)?],
    }))
}

fn align(cloud: &Path, calib: &Path, instances: &[PathBuf], classes: &[PathBuf], out_dir: &Path) -> Result<Value> {
    if instances.len() != classes.len() {
        bail!("got {} instance maps but {} class maps", instances.len(), classes.len());
    }
    let cloud = load_cloud(cloud)?;
    let cameras = load_calibration(calib)?;
    let inst = load_label_maps(instances)?;
    let cls = load_label_maps(classes)?;
    let views: Vec<SemanticView> = inst
        .iter()
        .zip(&cls)
        .map(|(i, c)| SemanticView {
            instances: i.clone(),
            classes: c.clone(),
        })
        .collect();
    let before = count_view_conflicts(&inst, &cls, &cloud, &cameras);
    let aligned = align_views(&views, &cloud, &cameras)?;
    let after = count_view_conflicts(&inst, &aligned, &cloud, &cameras);
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut changed = 0;
    for (j, (map, orig)) in aligned.iter().zip(&cls).enumerate() {
        changed += map.labels().iter().zip(orig.labels()).filter(|(a, b)| a != b).count();
        let path = out_dir.join(format!("cam{j}_classes.fpt"));
        map.save(&path)?;
        files.push(path);
    }
    Ok(json!({
        "command": "align-views",
        "conflicts_before": before,
        "conflicts_after": after,
        "pixels_changed": changed,
        "artifacts": artifacts(&files)?,
    }))
}

fn aggregate(keyframe: &Path, sweeps: &[PathBuf], poses: &Path, out: &Path) -> Result<Value> {
    let key = load_cloud(keyframe)?;
    let poses = load_poses(poses)?;
    if poses.len() != sweeps.len() + 1 {
        bail!(
            "expected {} poses (keyframe + sweeps), found {}",
            sweeps.len() + 1,
            poses.len()
        );
    }
    let pairs = sweeps
        .iter()
        .zip(&poses[1..])
        .map(|(p, pose)| Ok((load_cloud(p)?, sweep_to_keyframe(&poses[0], pose))))
        .collect::<Result<Vec<_>>>()?;
    let dense = aggregate_sweeps(&key, &pairs)?;
    dense.save(out)?;
    Ok(json!({
        "command": "aggregate",
        "keyframe_points": key.len(),
        "sweep_points": pairs.iter().map(|(c, _)| c.len()).collect::<Vec<_>>(),
        "points": dense.len(),
        "attr_width": dense.attr_width(),
        "artifacts": [artifact(out)?],
    }))
}

#[derive(Serialize)]
struct CsvRow {
    step: u64,
    total: f64,
    spatial: f64,
    temporal: f64,
    cross: f64,
    d2s: f64,
    spatial_prev: f64,
    spatial_curr: f64,
    spatial_next: f64,
    temporal_prev: f64,
    temporal_next: f64,
    cross_prev: f64,
    cross_next: f64,
    inactive_terms: bool,
}

impl CsvRow {
    fn new(step: u64, b: &LossBreakdown) -> Self {
        Self {
            step,
            total: b.total,
            spatial: b.spatial_mean,
            temporal: b.temporal_mean,
            cross: b.cross_mean,
            d2s: b.d2s.value,
            spatial_prev: b.spatial[0].value,
            spatial_curr: b.spatial[1].value,
            spatial_next: b.spatial[2].value,
            temporal_prev: b.temporal[0].value,
            temporal_next: b.temporal[1].value,
            cross_prev: b.cross[0].value,
            cross_next: b.cross[1].value,
            inactive_terms: b.any_inactive(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    cfg_file: Option<&Path>,
    scene_dir: Option<&Path>,
    steps: Option<usize>,
    lr: Option<f64>,
    csv_path: Option<&Path>,
    checkpoint: Option<&Path>,
    overrides: &Overrides,
) -> Result<Value> {
    let started = Instant::now();
    let mut cfg = resolve(cfg_file, overrides)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(v) = lr {
        cfg.train.lr = v;
    }
    let scene = match scene_dir {
        Some(dir) => SyntheticScene::load(dir).with_context(|| format!("loading scene {}", dir.display()))?,
        None => generate_scene(cfg.scene_seed, &cfg.scene)?,
    };
    let batch = batch_from_scene(&scene, &cfg.batch)?;
    let mut state = TrainState::new(cfg.seed, &cfg.model, &batch)?;
    state.lr = cfg.train.lr;
    state.tau = cfg.train.tau;
    state.weights = cfg.train.weights;

    let before = evaluate(&state.params, &batch, state.tau, &state.weights, false)?;
    let mut writer = csv_path.map(csv::Writer::from_path).transpose()?;
    for _ in 0..cfg.train.steps {
        let step = state.step;
        let loss = state.step(&batch)?;
        log::debug!("step {step}: total {:.6}", loss.total);
        if let Some(w) = writer.as_mut() {
            w.serialize(CsvRow::new(step, &loss))?;
        }
    }
    let after = evaluate(&state.params, &batch, state.tau, &state.weights, false)?;
    if let Some(w) = writer.as_mut() {
        w.serialize(CsvRow::new(state.step, &after.breakdown))?;
        w.flush()?;
    }
    let mut files: Vec<PathBuf> = csv_path.map(Path::to_path_buf).into_iter().collect();
    if let Some(dir) = checkpoint {
        files.extend(state.save(dir, &cfg.hash())?);
    }
    let initial = before.breakdown.total;
    let final_loss = after.breakdown.total;
    Ok(json!({
        "command": "pretrain",
        "config": cfg,
        "config_hash": cfg.hash(),
        "regions": batch.regions(),
        "steps": state.step,
        "initial_loss": initial,
        "final_loss": final_loss,
        "loss_ratio": final_loss / initial,
        "initial_breakdown": before.breakdown,
        "final_breakdown": after.breakdown,
        "alignment_before": before.alignment,
        "alignment_after": after.alignment,
        "cosine_gap": after.alignment.gap(),
        "seconds": started.elapsed().as_secs_f64(),
        "artifacts": artifacts(&files)?,
    }))
}

fn loss_check(cfg_file: Option<&Path>, instances: usize, overrides: &Overrides) -> Result<(Value, bool)> {
    let cfg = resolve(cfg_file, overrides)?;
    let started = Instant::now();
    let losses = loss_gradient_suite(cfg.seed, instances)?;
    let params = parameter_gradient_check(cfg.seed, instances)?;
    let passed = losses.passed && params.passed;
    Ok((
        json!({
            "command": "loss-check",
            "seed": cfg.seed,
            "passed": passed,
            "losses": losses,
            "parameters": params,
            "seconds": started.elapsed().as_secs_f64(),
        }),
        passed,
    ))
}

fn load_scores(path: &Path) -> Result<SemanticScores> {
    SemanticScores::load(path).with_context(|| format!("loading scores {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn run_vote(
    cfg_file: Option<&Path>,
    prev: &[PathBuf],
    curr: &[PathBuf],
    next: &[PathBuf],
    poses: Option<&Path>,
    out: &Path,
    labels_out: Option<&Path>,
    overrides: &Overrides,
) -> Result<Value> {
    let cfg = resolve(cfg_file, overrides)?;
    let clouds = [load_cloud(&prev[0])?, load_cloud(&curr[0])?, load_cloud(&next[0])?];
    let scores = [load_scores(&prev[1])?, load_scores(&curr[1])?, load_scores(&next[1])?];
    let poses = match poses {
        Some(p) => load_poses(p)?,
        None => vec![RigidTransform::identity(); 3],
    };
    if poses.len() != 3 {
        bail!("expected 3 poses (prev, curr, next), found {}", poses.len());
    }
    let frame = |i: usize| VoteFrame {
        cloud: &clouds[i],
        scores: &scores[i],
        pose: &poses[i],
    };
    let output = vote(frame(0), frame(1), frame(2), &VoteConfig::new(cfg.vote.sigma)?)?;
    output.scores.save(out)?;
    let mut files = vec![out.to_path_buf()];
    if let Some(path) = labels_out {
        LabelVector(output.labels.clone()).save(path)?;
        files.push(path.to_path_buf());
    }
    let mut histogram = [0usize; 3];
    for &c in &output.counts {
        histogram[c as usize - 1] += 1;
    }
    Ok(json!({
        "command": "vote",
        "config": {"sigma": cfg.vote.sigma},
        "points": output.labels.len(),
        "rows_averaged": {"1": histogram[0], "2": histogram[1], "3": histogram[2]},
        "changed_labels": output.labels.iter().zip(scores[1].argmax()).filter(|(a, b)| **a != *b).count(),
        "artifacts": artifacts(&files)?,
    }))
}

fn eval(pred: &Path, truth: &Path, classes: usize, ignore: Option<u32>) -> Result<Value> {
    let bytes = std::fs::read(pred).with_context(|| format!("reading {}", pred.display()))?;
    let labels = match Header::parse(&bytes)?.kind {
        Kind::LabelVector => LabelVector::decode(&bytes)?.0,
        Kind::SemanticScores => SemanticScores::decode(&bytes)?.argmax(),
        other => bail!("{} holds {other:?}, expected labels or scores", pred.display()),
    };
    let truth = LabelVector::load(truth)
        .with_context(|| format!("loading {}", truth.display()))?
        .0;
    let report = miou(&labels, &truth, classes, ignore)?;
    let correct = labels
        .iter()
        .zip(&truth)
        .filter(|(a, b)| a == b && Some(**b) != ignore)
        .count();
    let scored = truth.iter().filter(|&&t| Some(t) != ignore).count();
    Ok(json!({
        "command": "eval",
        "points": truth.len(),
        "accuracy": if scored > 0 { correct as f64 / scored as f64 } else { 0.0 },
        "miou": report.miou,
        "per_class_iou": report.per_class,
    }))
}

fn run(cli: Cli) -> Result<(Value, bool)> {
    let cfg = cli.config.as_deref();
    let summary = match &cli.command {
        Command::GenScene { out, overrides } => gen_scene(cfg, out, overrides)?,
        Command::Project { cloud, calib, out } => project(cloud, calib, out)?,
        Command::Superpoints {
            cloud,
            calib,
            maps,
            out,
        } => superpoints(cloud, calib, maps, out)?,
        Command::AlignViews {
            cloud,
            calib,
            instances,
            classes,
            out_dir,
        } => align(cloud, calib, instances, classes, out_dir)?,
        Command::Aggregate {
            keyframe,
            sweeps,
            poses,
            out,
        } => aggregate(keyframe, sweeps, poses, out)?,
        Command::Pretrain {
            scene,
            steps,
            lr,
            csv,
            checkpoint,
            overrides,
        } => pretrain(
            cfg,
            scene.as_deref(),
            *steps,
            *lr,
            csv.as_deref(),
            checkpoint.as_deref(),
            overrides,
        )?,
        Command::LossCheck { instances, overrides } => return loss_check(cfg, *instances, overrides),
        Command::Vote {
            prev,
            curr,
            next,
            poses,
            out,
            labels_out,
            overrides,
        } => run_vote(
            cfg,
            prev,
            curr,
            next,
            poses.as_deref(),
            out,
            labels_out.as_deref(),
            overrides,
        )?,
        Command::Eval {
            pred,
            truth,
            classes,
            ignore,
        } => eval(pred, truth, *classes, *ignore)?,
    };
    Ok((summary, true))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((summary, ok)) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // a closed pipe downstream is not a failure of the command
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<stpretrain::Error>())
                .map_or("error", stpretrain::Error::kind);
            let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
            let body = json!({"error": {"kind": kind, "message": chain.join(": ")}});
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}

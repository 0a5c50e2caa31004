//! Acceptance suite. Every criterion runs at its stated tolerance and prints a
//! single `PASS`/`FAIL` line; the process exits non-zero if any criterion fails.
//!
//! Reference values come from oracles written here (scalar loops, linear
//! scans, confusion matrices), not from the library's own helpers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use stpretrain::embedding::EmbeddingMatrix;
use stpretrain::geometry::{Camera, CameraIntrinsics, PointCloud, RigidTransform};
use stpretrain::losses::{composite_objective, info_nce, LossWeights, ObjectiveInputs};
use stpretrain::maps::{LabelMap, SemanticScores, UNLABELED};
use stpretrain::scene::{generate_scene, simulate_scores, SceneConfig};
use stpretrain::superpoint::{align_views, pool_by_group, SemanticView, SuperpointIndex};
use stpretrain::vote::{vote, VoteConfig, VoteFrame};

type Outcome = Result<String, String>;
type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn stp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stp"))
}

fn run_stp(args: &[&str]) -> Result<Value, String> {
    let out = stp().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "stp {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- gradients

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(n)).max(1e-12)
}

fn unit_rows(raw: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = raw.to_vec();
    let mut norms = Vec::new();
    for row in unit.chunks_mut(dim) {
        let n = norm(row);
        row.iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    (unit, norms)
}

/// Raw (unnormalized) operands of the composite objective, laid out as
/// `q0 q1 q2 k0 k1 k2 dense` in one vector.
struct GradInstance {
    dim: usize,
    rows: [usize; 7],
    temporal: [Vec<(usize, usize)>; 2],
    dense_pairs: Vec<(usize, usize)>,
    tau: f64,
}

fn random_pairs(rng: &mut ChaCha8Rng, a: usize, b: usize) -> Vec<(usize, usize)> {
    let mut rhs: Vec<usize> = (0..b).collect();
    for i in (1..rhs.len()).rev() {
        rhs.swap(i, rng.random_range(0..=i));
    }
    let take = rng.random_range(1..=a.min(b));
    (0..take).map(|i| (i, rhs[i])).collect()
}

impl GradInstance {
    fn random(rng: &mut ChaCha8Rng, tau: f64) -> (Self, Vec<f64>) {
        let dim = rng.random_range(2..=16);
        let m: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=8));
        let dense = rng.random_range(1..=8);
        let rows = [m[0], m[1], m[2], m[0], m[1], m[2], dense];
        let total: usize = rows.iter().sum::<usize>() * dim;
        let x = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();
        let temporal = [random_pairs(rng, m[1], m[0]), random_pairs(rng, m[1], m[2])];
        let dense_pairs = random_pairs(rng, dense, m[1]);
        (
            GradInstance {
                dim,
                rows,
                temporal,
                dense_pairs,
                tau,
            },
            x,
        )
    }

    fn eval(&self, x: &[f64], w: &LossWeights) -> (f64, Vec<f64>) {
        let mut mats = Vec::new();
        let mut norms = Vec::new();
        let mut at = 0;
        for &r in &self.rows {
            let (u, n) = unit_rows(&x[at..at + r * self.dim], self.dim);
            mats.push(EmbeddingMatrix::from_unit_rows(r, self.dim, u).unwrap());
            norms.push(n);
            at += r * self.dim;
        }
        let inputs = ObjectiveInputs {
            q: [&mats[0], &mats[1], &mats[2]],
            k: [&mats[3], &mats[4], &mats[5]],
            temporal_pairs: [&self.temporal[0], &self.temporal[1]],
            dense_q: &mats[6],
            dense_pairs: &self.dense_pairs,
        };
        let out = composite_objective(&inputs, self.tau, w).unwrap();
        let grads = [
            &out.grad_q[0],
            &out.grad_q[1],
            &out.grad_q[2],
            &out.grad_k[0],
            &out.grad_k[1],
            &out.grad_k[2],
            &out.grad_dense_q,
        ];
        // chain through x / |x|: d = (g - u <u, g>) / |x|
        let mut grad = Vec::with_capacity(x.len());
        for ((mat, g), n) in mats.iter().zip(grads).zip(&norms) {
            for r in 0..mat.rows() {
                let u = mat.row(r);
                let gr = &g[r * self.dim..(r + 1) * self.dim];
                let dot: f64 = u.iter().zip(gr).map(|(a, b)| a * b).sum();
                grad.extend(u.iter().zip(gr).map(|(a, b)| (b - a * dot) / n[r]));
            }
        }
        (out.breakdown.total, grad)
    }
}

fn criterion_gradients() -> Outcome {
    const H: f64 = 1e-5;
    let started = Instant::now();
    let terms: [(&str, LossWeights); 5] = [
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
        ("composite", LossWeights::default()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let instances = 120;
    let mut worst = (0.0f64, "");
    for i in 0..instances {
        let tau = [1.0, 0.1, 0.07][i % 3];
        let (inst, x) = GradInstance::random(&mut rng, tau);
        for (name, w) in &terms {
            let (_, analytic) = inst.eval(&x, w);
            let mut probe = x.clone();
            let mut numeric = Vec::with_capacity(x.len());
            for j in 0..x.len() {
                probe[j] = x[j] + H;
                let plus = inst.eval(&probe, w).0;
                probe[j] = x[j] - H;
                let minus = inst.eval(&probe, w).0;
                probe[j] = x[j];
                numeric.push((plus - minus) / (2.0 * H));
            }
            let e = rel_err(&analytic, &numeric);
            if !(e <= worst.0) {
                worst = (e, name);
            }
        }
    }
    let elapsed = started.elapsed();
    check(
        worst.0 < 1e-5 && within(elapsed, 30.0),
        format!(
            "{instances} instances x {} terms, max rel error {:.2e} ({}), {:.1}s",
            terms.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ oracles

fn random_unit(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let raw: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingMatrix::from_unit_rows(rows, dim, unit_rows(&raw, dim).0).unwrap()
}

/// Double-loop InfoNCE: value and both gradients.
fn info_nce_oracle(q: &EmbeddingMatrix, k: &EmbeddingMatrix, tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (m, c) = (q.rows(), q.dim());
    let mut s = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let mut dot = 0.0;
            for d in 0..c {
                dot += q.row(i)[d] * k.row(j)[d];
            }
            s[i][j] = dot / tau;
        }
    }
    let mut value = 0.0;
    let mut gq = vec![0.0; m * c];
    let mut gk = vec![0.0; m * c];
    for i in 0..m {
        let z: f64 = (0..m).map(|j| s[i][j].exp()).sum();
        value -= s[i][i] - z.ln();
        for j in 0..m {
            let coef = (s[i][j].exp() / z - if i == j { 1.0 } else { 0.0 }) / (m as f64 * tau);
            for d in 0..c {
                gq[i * c + d] += coef * k.row(j)[d];
                gk[j * c + d] += coef * q.row(i)[d];
            }
        }
    }
    (value / m as f64, gq, gk)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct VoteSeq {
    clouds: Vec<PointCloud>,
    scores: Vec<SemanticScores>,
    poses: Vec<RigidTransform>,
}

fn random_vote_seq(rng: &mut ChaCha8Rng) -> VoteSeq {
    let classes = rng.random_range(2..=6);
    let lattice = rng.random::<bool>();
    let mut seq = VoteSeq {
        clouds: vec![],
        scores: vec![],
        poses: vec![],
    };
    for _ in 0..3 {
        let n = rng.random_range(0..=500);
        let coords = (0..n)
            .map(|_| {
                if lattice {
                    [
                        rng.random_range(0..6) as f64 * 0.1,
                        rng.random_range(0..6) as f64 * 0.1,
                        0.0,
                    ]
                } else {
                    [
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-0.5..0.5),
                    ]
                }
            })
            .collect();
        seq.clouds.push(PointCloud::new(coords, vec![], 0, 0.0).unwrap());
        let mut data = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..classes).map(|_| rng.random::<f64>()).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        seq.scores.push(SemanticScores::new(n, classes, data, true).unwrap());
        seq.poses.push(if lattice {
            RigidTransform::identity()
        } else {
            RigidTransform::from_yaw(
                rng.random_range(-0.2..0.2),
                Vector3::new(rng.random_range(-0.3..0.3), 0.1, 0.0),
            )
        });
    }
    seq
}

/// O(N^2) voting: nearest neighbor by linear scan, first index wins ties.
fn vote_oracle(seq: &VoteSeq, sigma: f64) -> Vec<f64> {
    let world = |f: usize| -> Vec<[f64; 3]> { seq.clouds[f].coords().iter().map(|p| seq.poses[f].apply(p)).collect() };
    let (prev, curr, next) = (world(0), world(1), world(2));
    let c = seq.scores[1].classes();
    let mut out = Vec::new();
    for (i, p) in curr.iter().enumerate() {
        let mut acc = seq.scores[1].row(i).to_vec();
        let mut count = 1.0;
        for (pts, sc) in [(&prev, &seq.scores[0]), (&next, &seq.scores[2])] {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, q) in pts.iter().enumerate() {
                let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                if d < best.0 {
                    best = (d, j);
                }
            }
            if best.1 != usize::MAX && best.0 < sigma {
                for k in 0..c {
                    acc[k] += sc.row(best.1)[k];
                }
                count += 1.0;
            }
        }
        out.extend(acc.iter().map(|v| v / count));
    }
    out
}

fn criterion_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut nce_err = 0.0f64;
    for case in 0..500 {
        let m = rng.random_range(1..=8);
        let c = rng.random_range(1..=16);
        let tau = [1.0, 0.1, 0.07][case % 3];
        let q = random_unit(&mut rng, m, c);
        let k = random_unit(&mut rng, m, c);
        let got = info_nce(&q, &k, tau).unwrap();
        let (v, gq, gk) = info_nce_oracle(&q, &k, tau);
        nce_err = nce_err
            .max((got.value - v).abs())
            .max(max_abs_diff(&got.grad_q, &gq))
            .max(max_abs_diff(&got.grad_k, &gk));
    }

    let mut pool_err = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..200);
        let dim = rng.random_range(1..=16);
        let groups = rng.random_range(1..=10u32);
        let assignment: Vec<Option<(usize, u32)>> = (0..n)
            .map(|_| (rng.random::<f64>() < 0.85).then(|| (rng.random_range(0..2), rng.random_range(0..groups))))
            .collect();
        let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let index = SuperpointIndex::from_assignment(&assignment, |_, _| 1);
        let pooled = pool_by_group(&features, dim, &index).unwrap();
        // region order is ascending (camera, superpixel)
        let keys: BTreeSet<(usize, u32)> = assignment.iter().flatten().copied().collect();
        let mut expect = Vec::new();
        for key in &keys {
            let mut sum = vec![0.0; dim];
            let mut count = 0.0;
            for i in 0..n {
                if assignment[i] == Some(*key) {
                    for d in 0..dim {
                        sum[d] += features[i * dim + d];
                    }
                    count += 1.0;
                }
            }
            expect.extend(sum.iter().map(|s| s / count));
        }
        pool_err = pool_err.max(max_abs_diff(&pooled, &expect));
    }

    let seeds = 60;
    let mut mismatched = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let seq = random_vote_seq(&mut rng);
        for sigma in [0.0, 0.1, 0.25, 1.0] {
            let f = |i: usize| VoteFrame {
                cloud: &seq.clouds[i],
                scores: &seq.scores[i],
                pose: &seq.poses[i],
            };
            let out = vote(f(0), f(1), f(2), &VoteConfig::new(sigma).unwrap()).unwrap();
            let expect = vote_oracle(&seq, sigma);
            let same = out.scores.data().len() == expect.len()
                && out
                    .scores
                    .data()
                    .iter()
                    .zip(&expect)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatched += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    check(
        nce_err <= 1e-12 && pool_err <= 1e-12 && mismatched == 0 && within(elapsed, 60.0),
        format!(
            "info_nce max diff {nce_err:.1e}, pool max diff {pool_err:.1e}, vote {mismatched} of {} runs differ over {seeds} seeds, {:.1}s",
            seeds * 4,
            elapsed.as_secs_f64()
        ),
    )
}

// ----------------------------------------------------------------- geometry

fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    let t = Vector3::new(
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
        rng.random_range(-5.0..5.0),
    );
    RigidTransform::from_axis_angle(axis, rng.random_range(-3.1..3.1), t).unwrap()
}

fn as_matrix(t: &RigidTransform) -> Matrix4<f64> {
    Matrix4::from_row_slice(&t.to_row_major())
}

fn criterion_geometry() -> Outcome {
    const CASES: usize = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(4004);

    let mut round_trip = 0.0f64;
    let mut projected = 0;
    while projected < CASES {
        let (w, h) = (rng.random_range(32..2000u32), rng.random_range(32..1500u32));
        let f = rng.random_range(50.0..3000.0);
        let k = CameraIntrinsics::from_focal(f, f * rng.random_range(0.9..1.1), w as f64 / 2.0, h as f64 / 2.0, w, h)
            .unwrap();
        let cam = Camera::new(k, random_rigid(&mut rng));
        let p = [
            rng.random_range(-60.0..60.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(-6.0..6.0),
        ];
        if let Some((u, v, depth)) = cam.project_point(&p) {
            let back = cam.back_project(u, v, depth);
            round_trip =
                round_trip.max(((back[0] - p[0]).powi(2) + (back[1] - p[1]).powi(2) + (back[2] - p[2]).powi(2)).sqrt());
            projected += 1;
        }
    }

    let mut inverse = 0.0f64;
    let mut distance = 0.0f64;
    for _ in 0..CASES {
        let t = random_rigid(&mut rng);
        let both = [as_matrix(&t.compose(&t.inverse())), as_matrix(&t.inverse().compose(&t))];
        for m in both {
            inverse = inverse.max((m - Matrix4::identity()).abs().max());
        }
        let a = [
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        ];
        let b = [
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        ];
        let d =
            |x: [f64; 3], y: [f64; 3]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
        distance = distance.max((d(t.apply(&a), t.apply(&b)) - d(a, b)).abs());
    }
    check(
        round_trip < 1e-6 && inverse < 1e-9 && distance < 1e-9,
        format!("{CASES} cases each: round trip {round_trip:.1e} m, inverse {inverse:.1e}, distance {distance:.1e}"),
    )
}

// ------------------------------------------------------------------ descent

fn criterion_descent(work: &Path) -> Outcome {
    let started = Instant::now();
    let csv = work.join("loss.csv");
    let summary = run_stp(&[
        "pretrain",
        "--steps",
        "200",
        "--seed",
        "1",
        "--csv",
        csv.to_str().unwrap(),
    ])?;
    let elapsed = started.elapsed();
    let ratio = summary["loss_ratio"].as_f64().ok_or("no loss_ratio")?;
    let gap = summary["cosine_gap"].as_f64().ok_or("no cosine_gap")?;
    let initial = summary["initial_loss"].as_f64().ok_or("no initial_loss")?;
    // the logged step-0 loss must be the reported initial loss
    let mut reader = csv::Reader::from_path(&csv).map_err(|e| e.to_string())?;
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let first: f64 = rows.first().and_then(|r| r[1].parse().ok()).ok_or("empty csv")?;
    check(
        ratio <= 0.5 && gap >= 0.2 && first == initial && rows.len() == 201 && within(elapsed, 300.0),
        format!(
            "loss ratio {ratio:.3}, cosine gap {gap:.3}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// --------------------------------------------------------------------- vote

/// Mean IoU over classes present in the prediction or the truth.
fn miou_oracle(pred: &[u32], truth: &[u32], classes: usize) -> f64 {
    let mut conf = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[t as usize][p as usize] += 1;
    }
    let mut ious = Vec::new();
    for c in 0..classes {
        let tp = conf[c][c];
        let fn_: usize = conf[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..classes).map(|t| conf[t][c]).sum::<usize>() - tp;
        if tp + fn_ + fp > 0 {
            ious.push(tp as f64 / (tp + fn_ + fp) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn criterion_voting() -> Outcome {
    let mut wins = 0;
    let mut gains = Vec::new();
    for trial in 0..20u64 {
        let cfg = SceneConfig {
            frames: 3,
            timestep: 0.1,
            ..SceneConfig::default()
        };
        let scene = generate_scene(7000 + trial, &cfg).map_err(|e| e.to_string())?;
        let c = scene.num_classes();
        let scores: Vec<SemanticScores> = scene
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| simulate_scores(&f.classes, c, 0.2, 0.6, 90 + trial * 3 + i as u64).unwrap())
            .collect();
        let f = |i: usize| VoteFrame {
            cloud: &scene.frames[i].cloud,
            scores: &scores[i],
            pose: &scene.frames[i].pose,
        };
        let out = vote(f(0), f(1), f(2), &VoteConfig::default()).map_err(|e| e.to_string())?;
        let truth = &scene.frames[1].classes;
        let voted = miou_oracle(&out.labels, truth, c);
        let raw = miou_oracle(&scores[1].argmax(), truth, c);
        if voted >= raw {
            wins += 1;
        }
        gains.push(voted - raw);
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    check(
        wins >= 18,
        format!("voted mIoU >= unvoted in {wins}/20 trials, mean gain {mean_gain:+.4}"),
    )
}

// ---------------------------------------------------------------------- vca

fn random_views(seed: u64) -> (Vec<Camera>, Vec<SemanticView>, PointCloud) {
    const W: u32 = 16;
    const H: u32 = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ncam = rng.random_range(2..=4);
    let k = CameraIntrinsics::from_focal(8.0, 8.0, 8.0, 6.0, W, H).unwrap();
    let cameras: Vec<Camera> = (0..ncam)
        .map(|_| {
            let t = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3), 0.0);
            Camera::new(k, RigidTransform::new(Matrix3::identity(), t).unwrap())
        })
        .collect();
    let views = (0..ncam)
        .map(|_| {
            let ids = rng.random_range(2..8u32);
            let class_of: Vec<u32> = (0..ids).map(|_| rng.random_range(0..5)).collect();
            let mut cols = Vec::new();
            while cols.len() < W as usize {
                let id = rng.random_range(0..ids);
                cols.extend(std::iter::repeat_n(id, rng.random_range(1..=5)));
            }
            let (mut inst, mut cls) = (Vec::new(), Vec::new());
            for _ in 0..H {
                for &id in cols.iter().take(W as usize) {
                    if rng.random::<f64>() < 0.08 {
                        inst.push(UNLABELED);
                        cls.push(UNLABELED);
                    } else {
                        inst.push(id);
                        cls.push(if rng.random::<f64>() < 0.1 {
                            rng.random_range(0..5)
                        } else {
                            class_of[id as usize]
                        });
                    }
                }
            }
            SemanticView {
                instances: LabelMap::new(W, H, inst).unwrap(),
                classes: LabelMap::new(W, H, cls).unwrap(),
            }
        })
        .collect();
    let n = rng.random_range(20..120);
    let coords = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.2..1.2),
                rng.random_range(1.0..4.0),
            ]
        })
        .collect();
    (cameras, views, PointCloud::new(coords, vec![], 0, 0.0).unwrap())
}

/// Points seen with an instance label by two or more cameras that carry
/// different class labels.
fn conflicts(cameras: &[Camera], instances: &[LabelMap], classes: &[LabelMap], cloud: &PointCloud) -> usize {
    cloud
        .coords()
        .iter()
        .filter(|p| {
            let seen: BTreeSet<u32> = cameras
                .iter()
                .enumerate()
                .filter_map(|(j, cam)| {
                    let (u, v, _) = cam.project_point(p)?;
                    let c = classes[j].lookup(u, v);
                    (instances[j].lookup(u, v) != UNLABELED && c != UNLABELED).then_some(c)
                })
                .collect();
            seen.len() > 1
        })
        .count()
}

fn criterion_vca() -> Outcome {
    let seeds = 150;
    let (mut before_total, mut after_total, mut not_idempotent) = (0, 0, 0);
    for seed in 0..seeds {
        let (cameras, views, cloud) = random_views(seed);
        let instances: Vec<LabelMap> = views.iter().map(|v| v.instances.clone()).collect();
        let original: Vec<LabelMap> = views.iter().map(|v| v.classes.clone()).collect();
        before_total += conflicts(&cameras, &instances, &original, &cloud);
        let aligned = align_views(&views, &cloud, &cameras).map_err(|e| e.to_string())?;
        after_total += conflicts(&cameras, &instances, &aligned, &cloud);
        let again: Vec<SemanticView> = instances
            .iter()
            .zip(&aligned)
            .map(|(i, c)| SemanticView {
                instances: i.clone(),
                classes: c.clone(),
            })
            .collect();
        if align_views(&again, &cloud, &cameras).map_err(|e| e.to_string())? != aligned {
            not_idempotent += 1;
        }
    }
    check(
        after_total == 0 && not_idempotent == 0 && before_total > 0,
        format!("{seeds} seeds: conflicts {before_total} -> {after_total}, {not_idempotent} non-idempotent"),
    )
}

// -------------------------------------------------------------- determinism

fn pipeline(root: &Path) -> Result<(), String> {
    let s = |p: PathBuf| p.to_str().unwrap().to_owned();
    let scene = root.join("scene");
    let frame = |k: usize, name: &str| s(scene.join(format!("frame_{k:03}")).join(name));
    let calib = s(scene.join("calib.json"));
    run_stp(&["gen-scene", "--seed", "7", "--frames", "5", "--out", &s(scene.clone())])?;

    let poses: Vec<String> = std::fs::read_to_string(scene.join("poses.txt"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(str::to_owned)
        .collect();
    let pick = |idx: &[usize], name: &str| -> Result<String, String> {
        let path = root.join(name);
        let text: Vec<&str> = idx.iter().map(|&i| poses[i].as_str()).collect();
        std::fs::write(&path, text.join("\n") + "\n").map_err(|e| e.to_string())?;
        Ok(s(path))
    };

    run_stp(&[
        "project",
        "--cloud",
        &frame(2, "cloud.fpt"),
        "--calib",
        &calib,
        "--out",
        &s(root.join("proj.fpt")),
    ])?;
    let cams = 3;
    let list = |name: &str| {
        (0..cams)
            .map(|j| frame(2, &format!("cam{j}_{name}.fpt")))
            .collect::<Vec<_>>()
    };
    let (inst, cls) = (list("instances"), list("classes"));
    let mut args = vec!["align-views", "--cloud", "", "--calib", &calib, "--out-dir", ""];
    let cloud2 = frame(2, "cloud.fpt");
    let aligned_dir = s(root.join("aligned"));
    args[2] = &cloud2;
    args[6] = &aligned_dir;
    args.push("--instances");
    args.extend(inst.iter().map(String::as_str));
    args.push("--classes");
    args.extend(cls.iter().map(String::as_str));
    run_stp(&args)?;

    let aligned: Vec<String> = (0..cams)
        .map(|j| s(root.join("aligned").join(format!("cam{j}_classes.fpt"))))
        .collect();
    let sp_out = s(root.join("superpoints.fpt"));
    let mut args = vec![
        "superpoints",
        "--cloud",
        &cloud2,
        "--calib",
        &calib,
        "--out",
        &sp_out,
        "--maps",
    ];
    args.extend(aligned.iter().map(String::as_str));
    run_stp(&args)?;

    let agg_poses = pick(&[2, 1, 0], "agg_poses.txt")?;
    run_stp(&[
        "aggregate",
        "--keyframe",
        &cloud2,
        "--sweep",
        &frame(1, "cloud.fpt"),
        "--sweep",
        &frame(0, "cloud.fpt"),
        "--poses",
        &agg_poses,
        "--out",
        &s(root.join("dense.fpt")),
    ])?;

    run_stp(&[
        "pretrain",
        "--scene",
        &s(scene.clone()),
        "--steps",
        "5",
        "--seed",
        "3",
        "--csv",
        &s(root.join("loss.csv")),
        "--checkpoint",
        &s(root.join("ckpt")),
    ])?;

    let vote_poses = pick(&[1, 2, 3], "vote_poses.txt")?;
    let voted = s(root.join("voted.fpt"));
    run_stp(&[
        "vote",
        "--prev",
        &frame(1, "cloud.fpt"),
        &frame(1, "scores.fpt"),
        "--curr",
        &cloud2,
        &frame(2, "scores.fpt"),
        "--next",
        &frame(3, "cloud.fpt"),
        &frame(3, "scores.fpt"),
        "--poses",
        &vote_poses,
        "--out",
        &voted,
        "--labels-out",
        &s(root.join("voted_labels.fpt")),
    ])?;
    let report = run_stp(&[
        "eval",
        "--pred",
        &voted,
        "--truth",
        &frame(2, "classes.fpt"),
        "--classes",
        "8",
    ])?;
    std::fs::write(root.join("eval.json"), report.to_string()).map_err(|e| e.to_string())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism(work: &Path) -> Outcome {
    let (a, b) = (work.join("run_a"), work.join("run_b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return Err(format!(
            "runs produced different file sets ({} vs {})",
            fa.len(),
            fb.len()
        ));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|rel| std::fs::read(a.join(rel)).unwrap() != std::fs::read(b.join(rel)).unwrap())
        .map(|rel| rel.display().to_string())
        .collect();
    check(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 gradient suite", Box::new(criterion_gradients)),
        ("2 oracle equivalence", Box::new(criterion_oracles)),
        ("3 geometry", Box::new(criterion_geometry)),
        ("4 end-to-end descent", Box::new(|| criterion_descent(work.path()))),
        ("5 temporal voting benefit", Box::new(criterion_voting)),
        ("6 view consistency alignment", Box::new(criterion_vca)),
        (
            "7 pipeline determinism",
            Box::new(|| criterion_determinism(work.path())),
        ),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

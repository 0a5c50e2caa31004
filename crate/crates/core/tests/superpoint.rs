use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpretrain::geometry::{Camera, CameraIntrinsics, PointCloud, RigidTransform};
use stpretrain::maps::{LabelMap, UNLABELED};
use stpretrain::superpoint::*;

const W: u32 = 12;
const H: u32 = 10;

struct Instance {
    cameras: Vec<Camera>,
    views: Vec<SemanticView>,
    cloud: PointCloud,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ncam = rng.random_range(2..=3);
    let k = CameraIntrinsics::from_focal(6.0, 6.0, 6.0, 5.0, W, H).unwrap();
    let cameras: Vec<Camera> = (0..ncam)
        .map(|_| {
            let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2), 0.0);
            Camera::new(k, RigidTransform::new(Matrix3::identity(), t).unwrap())
        })
        .collect();
    let views = (0..ncam)
        .map(|_| {
            let mut inst = Vec::with_capacity((W * H) as usize);
            let mut bands = Vec::new();
            while bands.len() < W as usize {
                let id = rng.random_range(0..6u32);
                let width = rng.random_range(2..=4);
                bands.extend(std::iter::repeat_n(id, width));
            }
            let class_of: Vec<u32> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let mut cls = Vec::with_capacity(inst.capacity());
            for _ in 0..H {
                for x in 0..W as usize {
                    let hole = rng.random::<f64>() < 0.1;
                    let id = if hole { UNLABELED } else { bands[x] };
                    inst.push(id);
                    let c = if hole {
                        UNLABELED
                    } else if rng.random::<f64>() < 0.1 {
                        if rng.random() {
                            UNLABELED
                        } else {
                            rng.random_range(0..4)
                        }
                    } else {
                        class_of[id as usize]
                    };
                    cls.push(c);
                }
            }
            SemanticView {
                instances: LabelMap::new(W, H, inst).unwrap(),
                classes: LabelMap::new(W, H, cls).unwrap(),
            }
        })
        .collect();
    let n = rng.random_range(10..80);
    let coords = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.2..1.2),
                rng.random_range(1.0..4.0),
            ]
        })
        .collect();
    Instance {
        cameras,
        views,
        cloud: PointCloud::new(coords, vec![], 0, 0.0).unwrap(),
    }
}

fn instance_maps(inst: &Instance) -> Vec<LabelMap> {
    inst.views.iter().map(|v| v.instances.clone()).collect()
}

#[test]
fn alignment_is_idempotent_and_conflict_free() {
    let mut had_conflicts = 0;
    for seed in 0..200 {
        let inst = random_instance(seed);
        let maps = instance_maps(&inst);
        let before = inst.views.iter().map(|v| v.classes.clone()).collect::<Vec<_>>();
        if count_view_conflicts(&maps, &before, &inst.cloud, &inst.cameras) > 0 {
            had_conflicts += 1;
        }
        let aligned = align_views(&inst.views, &inst.cloud, &inst.cameras).unwrap();

        // no multi-view point sees two classes
        for p in inst.cloud.coords() {
            let mut seen = std::collections::BTreeSet::new();
            for (j, cam) in inst.cameras.iter().enumerate() {
                if let Some((u, v, _)) = cam.project_point(p) {
                    if maps[j].lookup(u, v) != UNLABELED && aligned[j].lookup(u, v) != UNLABELED {
                        seen.insert(aligned[j].lookup(u, v));
                    }
                }
            }
            assert!(seen.len() <= 1, "seed {seed}: point {p:?} sees classes {seen:?}");
        }
        assert_eq!(count_view_conflicts(&maps, &aligned, &inst.cloud, &inst.cameras), 0);

        let again: Vec<SemanticView> = inst
            .views
            .iter()
            .zip(&aligned)
            .map(|(v, c)| SemanticView {
                instances: v.instances.clone(),
                classes: c.clone(),
            })
            .collect();
        assert_eq!(
            align_views(&again, &inst.cloud, &inst.cameras).unwrap(),
            aligned,
            "seed {seed}"
        );

        // unlabeled pixels stay unlabeled, and instances never co-observed keep their pixels
        let mut shared = vec![std::collections::BTreeSet::new(); inst.cameras.len()];
        for p in inst.cloud.coords() {
            let hits: Vec<(usize, u32)> = inst
                .cameras
                .iter()
                .enumerate()
                .filter_map(|(j, cam)| {
                    let (u, v, _) = cam.project_point(p)?;
                    let (i, c) = (maps[j].lookup(u, v), before[j].lookup(u, v));
                    (i != UNLABELED && c != UNLABELED).then_some((j, i))
                })
                .collect();
            if hits.len() >= 2 {
                for (j, i) in hits {
                    shared[j].insert(i);
                }
            }
        }
        for j in 0..inst.cameras.len() {
            for ((&a, &b), &i) in before[j].labels().iter().zip(aligned[j].labels()).zip(maps[j].labels()) {
                assert_eq!(a == UNLABELED, b == UNLABELED);
                if !shared[j].contains(&i) {
                    assert_eq!(a, b, "seed {seed}: single-view instance {i} changed");
                }
            }
        }
    }
    assert!(had_conflicts > 50, "random instances rarely conflict ({had_conflicts})");
}

#[test]
fn superpoints_partition_points() {
    for seed in 0..200 {
        let inst = random_instance(seed);
        let maps = instance_maps(&inst);
        let idx = build_superpoints(&inst.cloud, &inst.cameras, &maps).unwrap();
        idx.validate().unwrap();
        let mut seen = vec![0; inst.cloud.len()];
        for (r, members) in idx.regions().iter().enumerate() {
            assert!(!members.is_empty());
            for &i in members {
                seen[i] += 1;
                assert_eq!(idx.group_of()[i], Some(r));
            }
        }
        for (i, p) in inst.cloud.coords().iter().enumerate() {
            // expected: first camera with a labeled hit
            let expect = inst.cameras.iter().enumerate().find_map(|(j, cam)| {
                let (u, v, _) = cam.project_point(p)?;
                let l = maps[j].lookup(u, v);
                (l != UNLABELED).then_some((j, l))
            });
            match expect {
                None => assert_eq!((seen[i], idx.group_of()[i]), (0, None)),
                Some((j, l)) => {
                    assert_eq!(seen[i], 1);
                    let meta = idx.meta()[idx.group_of()[i].unwrap()];
                    assert_eq!((meta.camera, meta.superpixel), (j, l));
                    assert_eq!(meta.pixel_area, maps[j].labels().iter().filter(|&&x| x == l).count());
                }
            }
        }
        let keys: Vec<_> = idx.meta().iter().map(|m| (m.camera, m.superpixel)).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(match_regions(&idx, &idx).iter().all(|&(a, b)| a == b));
        assert_eq!(match_regions(&idx, &idx).len(), idx.num_regions());
    }
}

fn pool_oracle(features: &[f64], dim: usize, idx: &SuperpointIndex) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..idx.num_regions() {
        for d in 0..dim {
            let mut s = 0.0;
            let mut n = 0.0;
            for i in 0..idx.num_points() {
                if idx.group_of()[i] == Some(r) {
                    s += features[i * dim + d];
                    n += 1.0;
                }
            }
            out.push(s / n);
        }
    }
    out
}

#[test]
fn pooling_matches_oracle_and_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..100 {
        let inst = random_instance(seed);
        let maps = instance_maps(&inst);
        let dim = rng.random_range(1..6);
        let n = inst.cloud.len();
        let feats: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let idx = build_superpoints(&inst.cloud, &inst.cameras, &maps).unwrap();
        let pooled = pool_by_group(&feats, dim, &idx).unwrap();
        let oracle = pool_oracle(&feats, dim, &idx);
        assert!(pooled.iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-12));

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = inst.cloud.select(&perm);
        let sfeats: Vec<f64> = perm
            .iter()
            .flat_map(|&i| feats[i * dim..(i + 1) * dim].to_vec())
            .collect();
        let sidx = build_superpoints(&shuffled, &inst.cameras, &maps).unwrap();
        let spooled = pool_by_group(&sfeats, dim, &sidx).unwrap();
        assert_eq!(sidx.meta(), idx.meta());
        assert!(pooled.iter().zip(&spooled).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

#[test]
fn label_map_pooling_skips_unlabeled() {
    let map = LabelMap::new(2, 2, vec![3, UNLABELED, 3, 1]).unwrap();
    let feats = [1.0, 10.0, 100.0, 1000.0];
    let (ids, rows) = pool_by_label_map(&feats, 1, &map).unwrap();
    assert_eq!(ids, vec![1, 3]);
    assert_eq!(rows, vec![1000.0, 50.5]);
}

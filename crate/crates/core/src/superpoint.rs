//! Superpoints from superpixels, cross-view label unification, group pooling
//! and temporal region matching.

use std::collections::{BTreeMap, HashMap};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_into_camera, Camera, PointCloud};
use crate::maps::{LabelMap, UNLABELED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionMeta {
    pub camera: usize,
    pub superpixel: u32,
    pub pixel_area: usize,
}

/// Grouping of a cloud's points into superpoints.
///
/// Regions are ordered by `(camera, superpixel)`. Every region has at least one
/// member and each point belongs to at most one region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointIndex {
    group_of: Vec<Option<usize>>,
    regions: Vec<Vec<usize>>,
    meta: Vec<RegionMeta>,
}

impl SuperpointIndex {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn num_points(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self) -> &[Option<usize>] {
        &self.group_of
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn members(&self, region: usize) -> &[usize] {
        &self.regions[region]
    }

    pub fn meta(&self) -> &[RegionMeta] {
        &self.meta
    }

    /// Builds an index from an explicit per-point assignment. Regions are
    /// keyed by `(camera, superpixel)`; area is taken from `areas`.
    pub fn from_assignment(
        assignment: &[Option<(usize, u32)>],
        areas: impl Fn(usize, u32) -> usize,
    ) -> SuperpointIndex {
        let mut keyed: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
        for (i, key) in assignment.iter().enumerate() {
            if let Some(key) = key {
                keyed.entry(*key).or_default().push(i);
            }
        }
        let mut group_of = vec![None; assignment.len()];
        let mut regions = Vec::with_capacity(keyed.len());
        let mut meta = Vec::with_capacity(keyed.len());
        for (r, ((camera, superpixel), members)) in keyed.into_iter().enumerate() {
            for &i in &members {
                group_of[i] = Some(r);
            }
            meta.push(RegionMeta {
                camera,
                superpixel,
                pixel_area: areas(camera, superpixel),
            });
            regions.push(members);
        }
        SuperpointIndex {
            group_of,
            regions,
            meta,
        }
    }

    /// Checks the partition invariants; used by tests and after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.regions.len() != self.meta.len() {
            return Err(Error::InvalidInput("region and metadata counts differ".into()));
        }
        let mut seen = vec![false; self.group_of.len()];
        for (r, members) in self.regions.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidInput(format!("region {r} is empty")));
            }
            for &i in members {
                if i >= seen.len() || seen[i] || self.group_of[i] != Some(r) {
                    return Err(Error::InvalidInput(format!(
                        "point {i} breaks the partition at region {r}"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = (0..seen.len()).find(|&i| !seen[i] && self.group_of[i].is_some()) {
            return Err(Error::InvalidInput(format!(
                "point {i} claims a region that does not list it"
            )));
        }
        Ok(())
    }
}

fn check_views(cameras: &[Camera], maps: &[LabelMap]) -> Result<()> {
    if cameras.len() != maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cameras but {} label maps",
            cameras.len(),
            maps.len()
        )));
    }
    for (j, (cam, map)) in cameras.iter().zip(maps).enumerate() {
        if cam.width() != map.width() || cam.height() != map.height() {
            return Err(Error::ShapeMismatch(format!(
                "camera {j} is {}x{} but its label map is {}x{}",
                cam.width(),
                cam.height(),
                map.width(),
                map.height()
            )));
        }
    }
    Ok(())
}

/// Groups points by the superpixel they project into.
///
/// A point visible in several cameras joins the region of the lowest-index
/// camera where it lands on a labeled pixel.
pub fn build_superpoints(cloud: &PointCloud, cameras: &[Camera], maps: &[LabelMap]) -> Result<SuperpointIndex> {
    check_views(cameras, maps)?;
    let mut assignment: Vec<Option<(usize, u32)>> = vec![None; cloud.len()];
    for (j, (cam, map)) in cameras.iter().zip(maps).enumerate() {
        for proj in project_into_camera(cloud, cam, j) {
            if assignment[proj.point_index].is_some() {
                continue;
            }
            let label = map.lookup(proj.u, proj.v);
            if label != UNLABELED {
                assignment[proj.point_index] = Some((j, label));
            }
        }
    }
    let areas: Vec<BTreeMap<u32, usize>> = maps.iter().map(LabelMap::areas).collect();
    Ok(SuperpointIndex::from_assignment(&assignment, |cam, sp| {
        areas[cam].get(&sp).copied().unwrap_or(0)
    }))
}

/// Instance (superpixel) and semantic class rasters of one camera.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticView {
    pub instances: LabelMap,
    pub classes: LabelMap,
}

/// Unifies class labels of instances seen by several cameras.
///
/// Instances co-observed through a shared LiDAR point are linked; within each
/// linked group that contains a cross-view class disagreement, every instance
/// takes the class of the group's largest-area instance (ties: lower instance
/// id, then lower camera index). Every classified pixel of such an instance
/// is relabeled. Decisions are
/// made from the input maps only and applied in a single pass, so the result
/// is idempotent and leaves no cross-view conflict at any multi-view point.
pub fn align_views(views: &[SemanticView], cloud: &PointCloud, cameras: &[Camera]) -> Result<Vec<LabelMap>> {
    let instance_maps: Vec<LabelMap> = views.iter().map(|v| v.instances.clone()).collect();
    check_views(cameras, &instance_maps)?;
    for (j, v) in views.iter().enumerate() {
        if v.classes.width() != v.instances.width() || v.classes.height() != v.instances.height() {
            return Err(Error::ShapeMismatch(format!(
                "camera {j}: class and instance maps differ in size"
            )));
        }
    }

    // (camera, instance) nodes with pixel area and dominant class.
    let mut node_of: HashMap<(usize, u32), usize> = HashMap::new();
    let mut nodes: Vec<NodeInfo> = Vec::new();
    for (j, view) in views.iter().enumerate() {
        let mut class_hist: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
        for (&inst, &class) in view.instances.labels().iter().zip(view.classes.labels()) {
            if inst == UNLABELED || class == UNLABELED {
                continue;
            }
            *class_hist.entry(inst).or_default().entry(class).or_insert(0) += 1;
        }
        for (inst, hist) in class_hist {
            let area = hist.values().sum();
            // most frequent class; lowest class id on ties
            let class = hist
                .iter()
                .fold(
                    (UNLABELED, 0usize),
                    |best, (&c, &n)| if n > best.1 { (c, n) } else { best },
                )
                .0;
            node_of.insert((j, inst), nodes.len());
            nodes.push(NodeInfo {
                camera: j,
                instance: inst,
                area,
                class,
            });
        }
    }

    let mut links = UnionFind::<usize>::new(nodes.len());
    let mut conflicting_roots = Vec::new();
    let mut hits: Vec<(usize, u32)> = Vec::with_capacity(cameras.len());
    for p in cloud.coords() {
        hits.clear();
        for (j, (cam, view)) in cameras.iter().zip(views).enumerate() {
            let Some((u, v, _)) = cam.project_point(p) else {
                continue;
            };
            let inst = view.instances.lookup(u, v);
            let class = view.classes.lookup(u, v);
            if inst != UNLABELED && class != UNLABELED {
                hits.push((node_of[&(j, inst)], class));
            }
        }
        if hits.len() < 2 {
            continue;
        }
        for w in hits.windows(2) {
            links.union(w[0].0, w[1].0);
        }
        if hits.iter().any(|h| h.1 != hits[0].1) {
            conflicting_roots.push(hits[0].0);
        }
    }

    let mut conflicted = vec![false; nodes.len()];
    for node in conflicting_roots {
        conflicted[links.find(node)] = true;
    }
    // winner per conflicting group
    let mut winner: HashMap<usize, usize> = HashMap::new();
    for (n, info) in nodes.iter().enumerate() {
        let root = links.find(n);
        if !conflicted[root] {
            continue;
        }
        winner
            .entry(root)
            .and_modify(|w| {
                let cur = &nodes[*w];
                let better = info.area > cur.area
                    || (info.area == cur.area && (info.instance, info.camera) < (cur.instance, cur.camera));
                if better {
                    *w = n;
                }
            })
            .or_insert(n);
    }

    let mut out: Vec<LabelMap> = views.iter().map(|v| v.classes.clone()).collect();
    for (j, view) in views.iter().enumerate() {
        let relabel: HashMap<u32, u32> = nodes
            .iter()
            .enumerate()
            .filter(|(_, info)| info.camera == j)
            .filter_map(|(n, info)| winner.get(&links.find(n)).map(|&w| (info.instance, nodes[w].class)))
            .collect();
        if relabel.is_empty() {
            continue;
        }
        // pixels without a class stay unlabeled so the set of linked instances is unchanged
        for (px, &inst) in out[j].labels_mut().iter_mut().zip(view.instances.labels()) {
            if *px == UNLABELED {
                continue;
            }
            if let Some(&class) = relabel.get(&inst) {
                *px = class;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct NodeInfo {
    camera: usize,
    instance: u32,
    area: usize,
    class: u32,
}

/// Counts multi-view points whose labeled hits disagree in class.
pub fn count_view_conflicts(
    instances: &[LabelMap],
    classes: &[LabelMap],
    cloud: &PointCloud,
    cameras: &[Camera],
) -> usize {
    cloud
        .coords()
        .iter()
        .filter(|p| {
            let mut seen: Option<u32> = None;
            for (j, cam) in cameras.iter().enumerate() {
                let Some((u, v, _)) = cam.project_point(p) else {
                    continue;
                };
                let (inst, class) = (instances[j].lookup(u, v), classes[j].lookup(u, v));
                if inst == UNLABELED || class == UNLABELED {
                    continue;
                }
                match seen {
                    None => seen = Some(class),
                    Some(c) if c != class => return true,
                    Some(_) => {}
                }
            }
            false
        })
        .count()
}

/// Mean of member feature rows per region (`features` is `N x dim`, row-major).
pub fn pool_by_group(features: &[f64], dim: usize, index: &SuperpointIndex) -> Result<Vec<f64>> {
    if features.len() != index.num_points() * dim {
        return Err(Error::ShapeMismatch(format!(
            "{} feature values for {} points of width {dim}",
            features.len(),
            index.num_points()
        )));
    }
    let mut out = vec![0.0; index.num_regions() * dim];
    for (r, members) in index.regions().iter().enumerate() {
        let acc = &mut out[r * dim..(r + 1) * dim];
        for &i in members {
            for (a, f) in acc.iter_mut().zip(&features[i * dim..(i + 1) * dim]) {
                *a += f;
            }
        }
        let count = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= count);
    }
    Ok(out)
}

/// Mean pixel feature per label of `map` (`features` is `height x width x dim`).
///
/// Returns the labels in ascending order with their pooled rows; labels with no
/// pixels do not appear.
pub fn pool_by_label_map(features: &[f64], dim: usize, map: &LabelMap) -> Result<(Vec<u32>, Vec<f64>)> {
    if features.len() != map.labels().len() * dim {
        return Err(Error::ShapeMismatch(format!(
            "{} feature values for a {}x{} map of width {dim}",
            features.len(),
            map.width(),
            map.height()
        )));
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (px, &label) in map.labels().iter().enumerate() {
        if label == UNLABELED {
            continue;
        }
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, f) in entry.0.iter_mut().zip(&features[px * dim..(px + 1) * dim]) {
            *a += f;
        }
        entry.1 += 1;
    }
    let mut ids = Vec::with_capacity(sums.len());
    let mut pooled = Vec::with_capacity(sums.len() * dim);
    for (label, (sum, count)) in sums {
        ids.push(label);
        pooled.extend(sum.into_iter().map(|s| s / count as f64));
    }
    Ok((ids, pooled))
}

/// Pairs regions of two indices that carry the same superpixel id.
///
/// Matching is one-to-one. When an id occurs in several cameras, regions in
/// the same camera are paired first and the leftovers are paired in camera
/// order. Output is sorted by id, then by region of `a`.
pub fn match_regions(a: &SuperpointIndex, b: &SuperpointIndex) -> Vec<(usize, usize)> {
    let by_id = |idx: &SuperpointIndex| {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (r, meta) in idx.meta().iter().enumerate() {
            m.entry(meta.superpixel).or_default().push(r);
        }
        m
    };
    let mb = by_id(b);
    let mut out = Vec::new();
    for (id, ra) in by_id(a) {
        let Some(rb) = mb.get(&id) else { continue };
        let mut free_a = Vec::new();
        let mut taken_b = vec![false; rb.len()];
        for &x in &ra {
            let cam = a.meta()[x].camera;
            match rb.iter().position(|&y| b.meta()[y].camera == cam) {
                Some(k) => {
                    taken_b[k] = true;
                    out.push((id, x, rb[k]));
                }
                None => free_a.push(x),
            }
        }
        let free_b = rb.iter().zip(&taken_b).filter(|(_, &t)| !t).map(|(&y, _)| y);
        out.extend(free_a.into_iter().zip(free_b).map(|(x, y)| (id, x, y)));
    }
    out.sort_unstable();
    out.into_iter().map(|(_, x, y)| (x, y)).collect()
}

/// Pairs regions that share both camera and superpixel id, e.g. a dense
/// aggregate and its keyframe grouped by the same label maps.
pub fn match_same_views(a: &SuperpointIndex, b: &SuperpointIndex) -> Vec<(usize, usize)> {
    let mb: HashMap<(usize, u32), usize> = b
        .meta()
        .iter()
        .enumerate()
        .map(|(r, m)| ((m.camera, m.superpixel), r))
        .collect();
    a.meta()
        .iter()
        .enumerate()
        .filter_map(|(r, m)| mb.get(&(m.camera, m.superpixel)).map(|&rb| (r, rb)))
        .collect()
}

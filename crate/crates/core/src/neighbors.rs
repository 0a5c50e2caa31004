//! Exact 3-D nearest-neighbor search.

/// Euclidean distance, evaluated in a fixed operation order so that every
/// caller (tree search or linear scan) gets bit-identical values.
#[inline]
pub fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// KD-tree over a fixed point set.
///
/// Queries return the exact minimum distance; among equidistant points the
/// smallest index wins.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> KdTree {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of widest spread
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// `(distance, index)` of the nearest point, or `None` for an empty tree.
    pub fn nearest(&self, query: &[f64; 3]) -> Option<(f64, usize)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, query, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, query: &[f64; 3], best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = euclidean(query, &self.points[i]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, best);
                // Points on the far side are at least |diff| away along this axis. Equal
                // distances must still be visited for the smallest-index tie rule.
                if (diff * diff).sqrt() <= best.0 {
                    self.search(far, query, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_scan(points: &[[f64; 3]], q: &[f64; 3]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            let d = euclidean(q, p);
            if best.is_none_or(|b| d < b.0) {
                best = Some((d, i));
            }
        }
        best
    }

    #[test]
    fn empty_tree() {
        assert_eq!(KdTree::build(&[]).nearest(&[0.0; 3]), None);
    }

    #[test]
    fn ties_pick_smallest_index() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest(&[0.0; 3]), Some((1.0, 0)));
        let many: Vec<[f64; 3]> = (0..100).map(|_| [2.0, 2.0, 2.0]).collect();
        assert_eq!(KdTree::build(&many).nearest(&[0.0; 3]).unwrap().1, 0);
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.random_range(1..400);
            // a coarse grid produces many exact ties
            let coarse = trial % 2 == 0;
            let mut sample = || -> [f64; 3] {
                if coarse {
                    [
                        rng.random_range(0..5) as f64,
                        rng.random_range(0..5) as f64,
                        rng.random_range(0..3) as f64,
                    ]
                } else {
                    [
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-2.0..2.0),
                    ]
                }
            };
            let pts: Vec<[f64; 3]> = (0..n).map(|_| sample()).collect();
            let queries: Vec<[f64; 3]> = (0..50).map(|_| sample()).collect();
            let tree = KdTree::build(&pts);
            for q in &queries {
                assert_eq!(tree.nearest(q), linear_scan(&pts, q));
            }
        }
    }
}

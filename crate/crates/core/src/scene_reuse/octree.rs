//! Point octree with exact nearest-neighbour queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::geometry::Point;

pub const LEAF_CAPACITY: usize = 16;
pub const MAX_DEPTH: u32 = 10;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Inner { children: Vec<(usize, [Vector3<f64>; 2])> },
}

/// Octree over a fixed point set. Points are stored reordered so that
/// each leaf owns a contiguous range.
#[derive(Debug, Clone)]
pub struct Octree {
    points: Vec<Vector3<f64>>,
    /// Original index of each stored point.
    ids: Vec<usize>,
    nodes: Vec<Node>,
    root_bounds: [Vector3<f64>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbour {
    pub index: usize,
    pub distance: f64,
}

struct Entry {
    dist_sq: f64,
    node: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.dist_sq == other.dist_sq
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance
        other.dist_sq.total_cmp(&self.dist_sq).then(other.node.cmp(&self.node))
    }
}

fn box_dist_sq(q: &Vector3<f64>, b: &[Vector3<f64>; 2]) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if q[k] < b[0][k] {
            b[0][k] - q[k]
        } else if q[k] > b[1][k] {
            q[k] - b[1][k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

impl Octree {
    pub fn build(points: &[Point]) -> Self {
        Self::from_positions(points.iter().map(Point::position).collect())
    }

    pub fn from_positions(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        let mut tree = Octree {
            ids: (0..n).collect(),
            points,
            nodes: Vec::new(),
            root_bounds: [Vector3::zeros(), Vector3::zeros()],
        };
        if n == 0 {
            return tree;
        }
        let mut lo = tree.points[0];
        let mut hi = tree.points[0];
        for p in &tree.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        tree.root_bounds = [lo, hi];
        tree.nodes.push(Node::Leaf { start: 0, end: n });
        tree.split(0, 0, n, [lo, hi], 0);
        tree
    }

    fn split(&mut self, node: usize, start: usize, end: usize, bounds: [Vector3<f64>; 2], depth: u32) {
        if end - start <= LEAF_CAPACITY || depth >= MAX_DEPTH {
            return;
        }
        let mid = (bounds[0] + bounds[1]) / 2.0;
        let octant = |p: &Vector3<f64>| -> usize {
            (p.x > mid.x) as usize | ((p.y > mid.y) as usize) << 1 | ((p.z > mid.z) as usize) << 2
        };
        // counting sort of the range by octant
        let mut counts = [0usize; 8];
        for p in &self.points[start..end] {
            counts[octant(p)] += 1;
        }
        if counts.iter().filter(|c| **c > 0).count() <= 1 && (bounds[1] - bounds[0]).norm() == 0.0 {
            return;
        }
        let mut offsets = [0usize; 9];
        for o in 0..8 {
            offsets[o + 1] = offsets[o] + counts[o];
        }
        let mut pts = vec![Vector3::zeros(); end - start];
        let mut ids = vec![0usize; end - start];
        let mut cursor = offsets;
        for i in start..end {
            let o = octant(&self.points[i]);
            pts[cursor[o]] = self.points[i];
            ids[cursor[o]] = self.ids[i];
            cursor[o] += 1;
        }
        self.points[start..end].copy_from_slice(&pts);
        self.ids[start..end].copy_from_slice(&ids);

        let mut children = Vec::new();
        for o in 0..8 {
            if counts[o] == 0 {
                continue;
            }
            let (s, e) = (start + offsets[o], start + offsets[o + 1]);
            // tight bounds of the child's points
            let mut lo = self.points[s];
            let mut hi = self.points[s];
            for p in &self.points[s..e] {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let id = self.nodes.len();
            self.nodes.push(Node::Leaf { start: s, end: e });
            children.push((id, [lo, hi]));
            if counts[o] < end - start {
                self.split(id, s, e, [lo, hi], depth + 1);
            }
        }
        self.nodes[node] = Node::Inner { children };
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact nearest stored point to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<Neighbour> {
        if self.is_empty() {
            return None;
        }
        let mut best_sq = f64::INFINITY;
        let mut best = usize::MAX;
        let mut heap = BinaryHeap::new();
        heap.push(Entry {
            dist_sq: box_dist_sq(q, &self.root_bounds),
            node: 0,
        });
        while let Some(Entry { dist_sq, node }) = heap.pop() {
            if dist_sq > best_sq {
                break;
            }
            match &self.nodes[node] {
                Node::Leaf { start, end } => {
                    for i in *start..*end {
                        let d = (self.points[i] - q).norm_squared();
                        if d < best_sq || (d == best_sq && self.ids[i] < best) {
                            best_sq = d;
                            best = self.ids[i];
                        }
                    }
                }
                Node::Inner { children } => {
                    for (child, b) in children {
                        let d = box_dist_sq(q, b);
                        if d <= best_sq {
                            heap.push(Entry { dist_sq: d, node: *child });
                        }
                    }
                }
            }
        }
        Some(Neighbour {
            index: best,
            distance: best_sq.sqrt(),
        })
    }
}
